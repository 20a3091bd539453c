#pragma once

#include "ilog/bytes.hpp"
#include "ilog/error.hpp"
#include "ilog/logpack.hpp"
#include "ilog/scheduler.hpp"
#include "ilog/series_store.hpp"
#include "ilog/study.hpp"
#include "ilog/time.hpp"

#include <atomic>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace ilog {

class Clock {
public:
    virtual ~Clock() = default;
    virtual TimestampMs now() const = 0;
};

class SystemClock final : public Clock {
public:
    TimestampMs now() const override { return wall_clock_ms(); }
};

class ManualClock final : public Clock {
public:
    explicit ManualClock(TimestampMs t = 0) : t_(t) {}
    TimestampMs now() const override { return t_.load(); }
    void set(TimestampMs t) { t_.store(t); }
    void advance(TimestampMs d) { t_ += d; }

private:
    std::atomic<TimestampMs> t_;
};

/// Bearer credential: hex of pseudonym (16) | issued_at (8, BE) | HMAC-SHA256 (32).
struct SessionToken {
    Id128 pseudonym_id;
    TimestampMs issued_at = 0;
    std::array<std::uint8_t, 32> signature{};

    static SessionToken issue(const Key256& server_key, const Id128& pseudonym_id, TimestampMs issued_at);
    /// Parses and checks the MAC; throws AuthFailure.
    static SessionToken verify(const Key256& server_key, std::string_view encoded);
    std::string encode() const;
};

struct UploadReceipt {
    enum class Status { stored, duplicate };
    Id128 chunk_id;
    Status status = Status::stored;
    std::uint64_t readings_stored = 0;

    friend bool operator==(const UploadReceipt&, const UploadReceipt&) = default;
};
std::string_view to_string(UploadReceipt::Status s);

struct SyncCommand {
    enum class Kind { force_sync_wifi };
    Id128 pseudonym_id;
    Kind kind = Kind::force_sync_wifi;
    TimestampMs issued_at = 0;
    std::optional<TimestampMs> delivered_at;

    friend bool operator==(const SyncCommand&, const SyncCommand&) = default;
};
std::string_view to_string(SyncCommand::Kind k);

struct ParticipantStatus {
    Id128 pseudonym_id;
    Consent consent = Consent::granted;
    TimestampMs registered_at = 0;
    std::optional<TimestampMs> last_chunk_at;
    std::optional<TimestampMs> last_answer_at;
    std::uint64_t chunks_total = 0;
    std::uint64_t readings_total = 0;
    std::uint64_t answers_total = 0;
    std::size_t backlog_size = 0;
    bool silent = false;
    std::vector<SyncCommand> pending_commands;
};

struct SupervisorStatus {
    TimestampMs generated_at = 0;
    std::int64_t silence_threshold_ms = 0;
    std::vector<ParticipantStatus> participants;
};

struct RegisterRequest {
    std::string study_code;
    Background background;
    std::string contact;
    int tz_offset_min = 0;
    /// Sensors the device will actually record (missing hardware, denied
    /// permissions); empty = everything the study enables.
    std::set<SensorId> enabled_sensors;
};

struct Registration {
    Id128 pseudonym_id;
    std::string token;
    Key256 device_key;
    TimestampMs registered_at = 0;
};

struct TaskFeed {
    std::vector<DiaryTask> tasks;
    std::vector<SyncCommand> commands;
};

struct AnswerSubmission {
    DiaryAnswer answer;
    TimestampMs notified_at = 0;
};

struct AnswerStatus {
    enum class Status { accepted, duplicate, rejected };
    Id128 task_id;
    Status status = Status::accepted;
    std::optional<Errc> error;
    std::string message;
};
std::string_view to_string(AnswerStatus::Status s);

struct ErasureReport {
    Id128 pseudonym_id;
    std::uint64_t readings = 0;
    std::size_t partitions = 0;
    std::size_t chunks = 0;
    std::size_t answers = 0;
    std::size_t telemetry = 0;
    std::size_t tasks = 0;
    std::size_t commands = 0;
    std::size_t dead_letters = 0;
};

struct IdentityRecord {
    Id128 contact_ref;
    std::string contact;
    TimestampMs created_at = 0;
};

struct BackendOptions {
    std::filesystem::path data_dir;
    Key256 server_key;
    std::string supervisor_key;
    std::int64_t silence_threshold_ms = 24 * kMsPerHour;
    StoreOptions store;

    /// ILOG_DATA_DIR, ILOG_SERVER_KEY (64 hex), ILOG_SUPERVISOR_KEY,
    /// ILOG_SILENCE_THRESHOLD_H. Missing keys are generated and kept in
    /// <data>/keys.json so restarts keep issued tokens valid.
    static BackendOptions from_env(std::optional<std::filesystem::path> data_dir = std::nullopt);
};

/// Rows of the collection database, as exported.
struct AnswerRow {
    Id128 task_id;
    Id128 pseudonym_id;
    TaskKind kind = TaskKind::episode;
    TimestampMs episode_start = 0;
    CodebookId codebook = CodebookId::activity;
    int code = 0;
    std::optional<std::string> open_text;
};
struct TelemetryRow {
    Id128 task_id;
    Id128 pseudonym_id;
    TimestampMs episode_start = 0;
    AnswerTelemetry telemetry;
    TimestampMs answered_at_start = 0;
    TimestampMs answered_at_end = 0;
};
struct ParticipantRow {
    Id128 pseudonym_id;
    Consent consent = Consent::granted;
    TimestampMs registered_at = 0;
    int tz_offset_min = 0;
    std::set<SensorId> enabled_sensors;
    Background background;
};

namespace sql { class Db; }

/// Collection-side database (collection.db): participants, tasks, answers,
/// telemetry, chunks, commands. Holds no contact data.
class CollectionDb {
public:
    explicit CollectionDb(const std::filesystem::path& file, bool read_only = false);
    ~CollectionDb();
    sql::Db& db() { return *db_; }

    std::vector<ParticipantRow> participants() const;
    /// Ordered by (pseudonym, episode_start, task_id, question order).
    std::vector<AnswerRow> answers(TimestampMs t0, TimestampMs t1) const;
    std::vector<TelemetryRow> telemetry(TimestampMs t0, TimestampMs t1) const;
    std::uint64_t answer_count(const Id128& pseudonym_id) const;

private:
    std::unique_ptr<sql::Db> db_;
};

/// The server side of the platform. Thread-safe; operations for one
/// participant are serialized, different participants proceed in parallel
/// except for short database sections.
class Backend {
public:
    Backend(StudyConfig config, BackendOptions options, const Clock& clock);
    ~Backend();

    const StudyConfig& config() const { return config_; }
    const BackendOptions& options() const { return options_; }

    Registration register_participant(const RegisterRequest& req);
    UploadReceipt receive_chunk(std::string_view token, ByteView chunk_bytes);
    /// Pending tasks with emit_at > since (all when absent) plus undelivered
    /// commands, which are marked delivered. `offline_since` marks tasks
    /// emitted since then as delivered offline.
    TaskFeed fetch_tasks(std::string_view token, std::optional<TimestampMs> since = std::nullopt,
                         std::optional<TimestampMs> offline_since = std::nullopt);
    std::vector<AnswerStatus> submit_answers(std::string_view token, const std::vector<AnswerSubmission>& answers);

    SupervisorStatus supervisor_status(std::string_view credential);
    SyncCommand trigger_sync(std::string_view credential, const Id128& pseudonym_id);
    /// `credential` is either the participant's own token or the supervisor key.
    ErasureReport erase_participant(std::string_view credential, const Id128& pseudonym_id);
    /// Identity ledger dump for the study administrator (supervisor key).
    std::vector<IdentityRecord> identity_export(std::string_view credential);

    SeriesStore& store() { return *store_; }
    CollectionDb& collection() { return *collection_; }
    std::filesystem::path dead_letter_dir() const { return options_.data_dir / "deadletter"; }

private:
    struct Participant;
    Participant& participant(const Id128& pseudonym_id);
    Participant& authenticate(std::string_view token);
    void require_supervisor(std::string_view credential) const;
    void advance(Participant& p, TimestampMs now);
    void persist_queue(Participant& p);

    StudyConfig config_;
    BackendOptions options_;
    const Clock& clock_;
    std::unique_ptr<SeriesStore> store_;
    std::unique_ptr<CollectionDb> collection_;
    std::unique_ptr<sql::Db> identity_;
    std::unique_ptr<sql::Db> linkage_;
    std::mutex db_mutex_;  // all three databases
    std::mutex registry_mutex_;
    std::map<Id128, std::unique_ptr<Participant>> participants_;
};

}  // namespace ilog
