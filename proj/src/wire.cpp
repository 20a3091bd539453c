#include "ilog/wire.hpp"

namespace ilog {

namespace {

std::string hex(const Id128& id) { return id.hex(); }

Id128 id_from(const json& j, const char* key) {
    auto id = Id128::from_hex(j.at(key).get<std::string>());
    if (!id) throw Error(Errc::parse_error, std::string(key) + " must be 32 hex digits", key);
    return *id;
}

template <typename T>
std::optional<T> opt(const json& j, const char* key) {
    if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
    return j.at(key).get<T>();
}

CodebookId codebook_from(const std::string& s) {
    for (int i = 1; i <= 5; ++i)
        if (to_string(static_cast<CodebookId>(i)) == s) return static_cast<CodebookId>(i);
    throw Error(Errc::parse_error, "unknown codebook " + s, "codebook");
}

}  // namespace

void to_json(json& j, const Question& q) {
    j = {{"codebook", to_string(q.codebook)}, {"prompt", q.prompt}, {"conditional", q.conditional}};
}
void from_json(const json& j, Question& q) {
    q.codebook = codebook_from(j.at("codebook").get<std::string>());
    q.prompt = j.value("prompt", "");
    q.conditional = j.value("conditional", false);
}

void to_json(json& j, const DiaryTask& t) {
    j = {{"task_id", hex(t.task_id)},
         {"kind", to_string(t.kind)},
         {"episode_start", t.episode_start},
         {"emit_at", t.emit_at},
         {"questions", t.questions}};
    j["expiry"] = t.expiry ? json(*t.expiry) : json(nullptr);
}
void from_json(const json& j, DiaryTask& t) {
    t.task_id = id_from(j, "task_id");
    auto kind = task_kind_from_string(j.at("kind").get<std::string>());
    if (!kind) throw Error(Errc::parse_error, "unknown task kind", "kind");
    t.kind = *kind;
    t.episode_start = j.at("episode_start").get<TimestampMs>();
    t.emit_at = j.at("emit_at").get<TimestampMs>();
    t.questions = j.at("questions").get<std::vector<Question>>();
    t.expiry = opt<TimestampMs>(j, "expiry");
}

void to_json(json& j, const AnswerItem& a) {
    j = {{"codebook", to_string(a.codebook)}, {"code", a.code}};
    if (a.open_text) j["open_text"] = *a.open_text;
}
void from_json(const json& j, AnswerItem& a) {
    a.codebook = codebook_from(j.at("codebook").get<std::string>());
    a.code = j.at("code").get<int>();
    a.open_text = opt<std::string>(j, "open_text");
}

void to_json(json& j, const DiaryAnswer& a) {
    j = {{"task_id", hex(a.task_id)},
         {"answers", a.answers},
         {"answered_at_start", a.answered_at_start},
         {"answered_at_end", a.answered_at_end},
         {"same_as_previous", a.same_as_previous}};
}
void from_json(const json& j, DiaryAnswer& a) {
    a.task_id = id_from(j, "task_id");
    a.answers = j.value("answers", std::vector<AnswerItem>{});
    a.answered_at_start = j.at("answered_at_start").get<TimestampMs>();
    a.answered_at_end = j.at("answered_at_end").get<TimestampMs>();
    a.same_as_previous = j.value("same_as_previous", false);
}

void to_json(json& j, const AnswerSubmission& s) {
    j = s.answer;
    j["notified_at"] = s.notified_at;
}
void from_json(const json& j, AnswerSubmission& s) {
    s.answer = j.get<DiaryAnswer>();
    s.notified_at = j.at("notified_at").get<TimestampMs>();
}

void to_json(json& j, const AnswerStatus& s) {
    j = {{"task_id", hex(s.task_id)}, {"status", to_string(s.status)}};
    if (s.error) j["error"] = to_string(*s.error);
    if (!s.message.empty()) j["message"] = s.message;
}
void from_json(const json& j, AnswerStatus& s) {
    s.task_id = id_from(j, "task_id");
    auto st = j.at("status").get<std::string>();
    if (st == "accepted") s.status = AnswerStatus::Status::accepted;
    else if (st == "duplicate") s.status = AnswerStatus::Status::duplicate;
    else if (st == "rejected") s.status = AnswerStatus::Status::rejected;
    else throw Error(Errc::parse_error, "unknown answer status " + st, "status");
    if (auto e = opt<std::string>(j, "error")) s.error = errc_from_string(*e);
    s.message = j.value("message", "");
}

void to_json(json& j, const UploadReceipt& r) {
    j = {{"chunk_id", hex(r.chunk_id)}, {"status", to_string(r.status)}, {"readings_stored", r.readings_stored}};
}
void from_json(const json& j, UploadReceipt& r) {
    r.chunk_id = id_from(j, "chunk_id");
    auto st = j.at("status").get<std::string>();
    if (st != "stored" && st != "duplicate") throw Error(Errc::parse_error, "unknown receipt status " + st, "status");
    r.status = st == "stored" ? UploadReceipt::Status::stored : UploadReceipt::Status::duplicate;
    r.readings_stored = j.at("readings_stored").get<std::uint64_t>();
}

void to_json(json& j, const SyncCommand& c) {
    j = {{"pseudonym", hex(c.pseudonym_id)}, {"kind", to_string(c.kind)}, {"issued_at", c.issued_at}};
    j["delivered_at"] = c.delivered_at ? json(*c.delivered_at) : json(nullptr);
}
void from_json(const json& j, SyncCommand& c) {
    c.pseudonym_id = id_from(j, "pseudonym");
    if (j.at("kind").get<std::string>() != "force_sync_wifi") throw Error(Errc::parse_error, "unknown command", "kind");
    c.kind = SyncCommand::Kind::force_sync_wifi;
    c.issued_at = j.at("issued_at").get<TimestampMs>();
    c.delivered_at = opt<TimestampMs>(j, "delivered_at");
}

void to_json(json& j, const TaskFeed& f) { j = {{"tasks", f.tasks}, {"commands", f.commands}}; }
void from_json(const json& j, TaskFeed& f) {
    f.tasks = j.at("tasks").get<std::vector<DiaryTask>>();
    f.commands = j.at("commands").get<std::vector<SyncCommand>>();
}

void to_json(json& j, const ParticipantStatus& s) {
    auto o = [](const std::optional<TimestampMs>& v) { return v ? json(*v) : json(nullptr); };
    j = {{"pseudonym", hex(s.pseudonym_id)},
         {"consent", to_string(s.consent)},
         {"registered_at", s.registered_at},
         {"last_chunk_at", o(s.last_chunk_at)},
         {"last_answer_at", o(s.last_answer_at)},
         {"chunks_total", s.chunks_total},
         {"readings_total", s.readings_total},
         {"answers_total", s.answers_total},
         {"backlog_size", s.backlog_size},
         {"silent", s.silent},
         {"pending_commands", s.pending_commands}};
}
void from_json(const json& j, ParticipantStatus& s) {
    s.pseudonym_id = id_from(j, "pseudonym");
    s.consent = consent_from_string(j.at("consent").get<std::string>()).value_or(Consent::pending);
    s.registered_at = j.at("registered_at").get<TimestampMs>();
    s.last_chunk_at = opt<TimestampMs>(j, "last_chunk_at");
    s.last_answer_at = opt<TimestampMs>(j, "last_answer_at");
    s.chunks_total = j.at("chunks_total").get<std::uint64_t>();
    s.readings_total = j.at("readings_total").get<std::uint64_t>();
    s.answers_total = j.at("answers_total").get<std::uint64_t>();
    s.backlog_size = j.at("backlog_size").get<std::size_t>();
    s.silent = j.at("silent").get<bool>();
    s.pending_commands = j.at("pending_commands").get<std::vector<SyncCommand>>();
}

void to_json(json& j, const SupervisorStatus& s) {
    j = {{"generated_at", s.generated_at},
         {"silence_threshold_ms", s.silence_threshold_ms},
         {"participants", s.participants}};
}
void from_json(const json& j, SupervisorStatus& s) {
    s.generated_at = j.at("generated_at").get<TimestampMs>();
    s.silence_threshold_ms = j.at("silence_threshold_ms").get<std::int64_t>();
    s.participants = j.at("participants").get<std::vector<ParticipantStatus>>();
}

void to_json(json& j, const RegisterRequest& r) {
    j = {{"study_code", r.study_code},
         {"background", r.background},
         {"contact", r.contact},
         {"tz_offset_min", r.tz_offset_min},
         {"enabled_sensors", r.enabled_sensors}};
}
void from_json(const json& j, RegisterRequest& r) {
    r.study_code = j.at("study_code").get<std::string>();
    r.background = j.value("background", Background{});
    r.contact = j.at("contact").get<std::string>();
    r.tz_offset_min = j.value("tz_offset_min", 0);
    r.enabled_sensors = j.value("enabled_sensors", std::set<SensorId>{});
}

void to_json(json& j, const Registration& r) {
    j = {{"pseudonym", hex(r.pseudonym_id)},
         {"token", r.token},
         {"device_key", r.device_key.hex()},
         {"registered_at", r.registered_at}};
}
void from_json(const json& j, Registration& r) {
    r.pseudonym_id = id_from(j, "pseudonym");
    r.token = j.at("token").get<std::string>();
    auto key = Key256::from_hex(j.at("device_key").get<std::string>());
    if (!key) throw Error(Errc::parse_error, "device_key must be 64 hex digits", "device_key");
    r.device_key = *key;
    r.registered_at = j.at("registered_at").get<TimestampMs>();
}

void to_json(json& j, const ErasureReport& r) {
    j = {{"pseudonym", hex(r.pseudonym_id)}, {"readings", r.readings}, {"partitions", r.partitions},
         {"chunks", r.chunks},           {"answers", r.answers},   {"telemetry", r.telemetry},
         {"tasks", r.tasks},             {"commands", r.commands}, {"dead_letters", r.dead_letters}};
}
void from_json(const json& j, ErasureReport& r) {
    r.pseudonym_id = id_from(j, "pseudonym");
    r.readings = j.at("readings").get<std::uint64_t>();
    r.partitions = j.at("partitions").get<std::size_t>();
    r.chunks = j.at("chunks").get<std::size_t>();
    r.answers = j.at("answers").get<std::size_t>();
    r.telemetry = j.at("telemetry").get<std::size_t>();
    r.tasks = j.at("tasks").get<std::size_t>();
    r.commands = j.at("commands").get<std::size_t>();
    r.dead_letters = j.at("dead_letters").get<std::size_t>();
}

void to_json(json& j, const IdentityRecord& r) {
    j = {{"contact_ref", hex(r.contact_ref)}, {"contact", r.contact}, {"created_at", r.created_at}};
}
void from_json(const json& j, IdentityRecord& r) {
    r.contact_ref = id_from(j, "contact_ref");
    r.contact = j.at("contact").get<std::string>();
    r.created_at = j.at("created_at").get<TimestampMs>();
}

json error_body(const Error& e) {
    json j = {{"error", to_string(e.code())}, {"message", e.what()}};
    if (!e.field().empty()) j["field"] = e.field();
    return j;
}

}  // namespace ilog
