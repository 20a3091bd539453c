#pragma once

#include "ilog/ingest.hpp"

#include <memory>
#include <string>

namespace ilog {

/// What a device needs from the backend. Implemented in-process (tests,
/// accelerated simulation) and over HTTP.
class BackendApi {
public:
    virtual ~BackendApi() = default;

    /// Simulated devices report their clock so the server can run on
    /// simulation time; a real server ignores it.
    virtual void set_time(TimestampMs now) = 0;

    virtual Registration register_participant(const RegisterRequest& req) = 0;
    virtual UploadReceipt upload_chunk(const std::string& token, ByteView chunk_bytes) = 0;
    virtual TaskFeed fetch_tasks(const std::string& token, std::optional<TimestampMs> offline_since) = 0;
    virtual std::vector<AnswerStatus> submit_answers(const std::string& token,
                                                     const std::vector<AnswerSubmission>& answers) = 0;
};

class InProcessApi final : public BackendApi {
public:
    InProcessApi(Backend& backend, ManualClock& clock) : backend_(backend), clock_(clock) {}

    void set_time(TimestampMs now) override { clock_.set(now); }
    Registration register_participant(const RegisterRequest& req) override {
        return backend_.register_participant(req);
    }
    UploadReceipt upload_chunk(const std::string& token, ByteView chunk_bytes) override {
        return backend_.receive_chunk(token, chunk_bytes);
    }
    TaskFeed fetch_tasks(const std::string& token, std::optional<TimestampMs> offline_since) override {
        return backend_.fetch_tasks(token, std::nullopt, offline_since);
    }
    std::vector<AnswerStatus> submit_answers(const std::string& token,
                                             const std::vector<AnswerSubmission>& answers) override {
        return backend_.submit_answers(token, answers);
    }

private:
    Backend& backend_;
    ManualClock& clock_;
};

}  // namespace ilog
