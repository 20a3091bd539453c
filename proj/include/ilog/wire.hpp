#pragma once

// JSON forms of the request and response bodies of the HTTP API.

#include "ilog/ingest.hpp"

#include <json.hpp>

namespace ilog {

using json = nlohmann::json;

void to_json(json& j, const Question& q);
void from_json(const json& j, Question& q);
void to_json(json& j, const DiaryTask& t);
void from_json(const json& j, DiaryTask& t);
void to_json(json& j, const AnswerItem& a);
void from_json(const json& j, AnswerItem& a);
void to_json(json& j, const DiaryAnswer& a);
void from_json(const json& j, DiaryAnswer& a);
void to_json(json& j, const AnswerSubmission& s);
void from_json(const json& j, AnswerSubmission& s);
void to_json(json& j, const AnswerStatus& s);
void from_json(const json& j, AnswerStatus& s);
void to_json(json& j, const UploadReceipt& r);
void from_json(const json& j, UploadReceipt& r);
void to_json(json& j, const SyncCommand& c);
void from_json(const json& j, SyncCommand& c);
void to_json(json& j, const TaskFeed& f);
void from_json(const json& j, TaskFeed& f);
void to_json(json& j, const ParticipantStatus& s);
void from_json(const json& j, ParticipantStatus& s);
void to_json(json& j, const SupervisorStatus& s);
void from_json(const json& j, SupervisorStatus& s);
void to_json(json& j, const RegisterRequest& r);
void from_json(const json& j, RegisterRequest& r);
void to_json(json& j, const Registration& r);
void from_json(const json& j, Registration& r);
void to_json(json& j, const ErasureReport& r);
void from_json(const json& j, ErasureReport& r);
void to_json(json& j, const IdentityRecord& r);
void from_json(const json& j, IdentityRecord& r);

/// {"error": "<ErrorCode>", "message": ..., "field": ...}
json error_body(const Error& e);

/// Parses a request body; malformed JSON or missing fields become ParseError.
template <typename T>
T parse_body(std::string_view body) {
    try {
        return json::parse(body).get<T>();
    } catch (const json::exception& e) {
        throw Error(Errc::parse_error, std::string("request body: ") + e.what());
    }
}

}  // namespace ilog
