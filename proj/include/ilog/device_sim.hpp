#pragma once

#include "ilog/api.hpp"
#include "ilog/logpack.hpp"
#include "ilog/scheduler.hpp"
#include "ilog/study.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

namespace ilog {

/// Log-normal delay: median in seconds, sigma of the underlying normal.
struct LogNormal {
    double median_s = 60;
    double sigma = 0.5;

    std::int64_t sample_ms(std::mt19937_64& rng) const;
    friend bool operator==(const LogNormal&, const LogNormal&) = default;
};

struct BehaviorModel {
    double answer_prob = 1.0;
    LogNormal reaction_delay{120, 0.8};
    LogNormal completion_time{20, 0.4};
    /// Last study day (0-based) with sensing and answers; nullopt = never drops out.
    std::optional<int> dropout_day;
    double same_as_previous_prob = 0.0;

    friend bool operator==(const BehaviorModel&, const BehaviorModel&) = default;
};

struct OfflineWindow {
    TimestampMs start = 0;  // inclusive
    TimestampMs end = 0;    // exclusive
    friend bool operator==(const OfflineWindow&, const OfflineWindow&) = default;
};

struct ConnectivityModel {
    std::vector<OfflineWindow> schedule;  // disjoint, ordered
    int sync_period_s = 1800;
    /// false: the device only uploads when the supervisor forces a sync.
    bool auto_sync = true;

    bool online_at(TimestampMs t) const;
    /// Start of the window containing t, if any.
    std::optional<TimestampMs> window_start(TimestampMs t) const;
    friend bool operator==(const ConnectivityModel&, const ConnectivityModel&) = default;
};

struct DeviceProfile {
    std::string label;
    /// Filled in at registration; the backend assigns pseudonyms.
    Id128 pseudonym_id;
    /// 0 = derived from the fleet's master seed and the profile index.
    std::uint64_t seed = 0;
    BehaviorModel behavior;
    ConnectivityModel connectivity;
    std::set<SensorId> enabled_sensors;  // empty = every sensor the study enables
    bool active = true;                  // false: registers, never collects
    int join_day = 0;
    int tz_offset_min = 0;

    friend bool operator==(const DeviceProfile&, const DeviceProfile&) = default;
};

/// Throws ValidationError on out-of-range probabilities, non-positive
/// distribution parameters or overlapping offline windows.
void validate(const DeviceProfile& profile);

std::uint64_t derive_device_seed(std::uint64_t master_seed, std::size_t index);

/// Mutable state behind on-change sensors (screen alternates, battery saws).
struct OnChangeState {
    bool screen_on = false;
    double battery = 100;
    bool charging = false;
    std::map<SensorId, bool> toggles;
};

/// Poisson events of an on-change sensor in [tick, tick + tick_len) at the
/// study's rate for it. Empty when the study disables the sensor. Throws
/// WrongKind for fixed-rate and polled sensors.
std::vector<SensorReading> synthesize_on_change(const StudyConfig& config, SensorId sensor_id, TimestampMs tick,
                                                std::int64_t tick_len_ms, std::mt19937_64& rng,
                                                OnChangeState& state,
                                                const SensorCatalog& catalog = SensorCatalog::builtin());

/// Injected vs. observed timing of one submitted answer.
struct AnswerLog {
    Id128 task_id;
    TaskKind kind = TaskKind::episode;
    TimestampMs episode_start = 0;
    TimestampMs emit_at = 0;
    TimestampMs notified_at = 0;
    std::int64_t reaction_ms = 0;
    std::int64_t completion_ms = 0;
    AnswerStatus::Status status = AnswerStatus::Status::accepted;
};

struct StepResult {
    std::vector<SensorReading> readings;
    std::vector<LogChunk> uploads;  // acknowledged during this tick
    std::vector<DiaryAnswer> answers;
};

struct DeviceCounters {
    std::uint64_t readings_generated = 0;
    std::uint64_t readings_acknowledged = 0;
    std::uint64_t chunks_sealed = 0;
    std::uint64_t chunks_uploaded = 0;
    std::uint64_t duplicate_receipts = 0;
    std::uint64_t upload_failures = 0;
    std::uint64_t tasks_seen = 0;
    std::uint64_t answers_submitted = 0;
    std::uint64_t answers_accepted = 0;
    std::uint64_t answers_rejected = 0;
    std::uint64_t commands_received = 0;
};

/// One virtual phone. Deterministic given its profile seed and the tick
/// sequence, apart from chunk ids and nonces.
class SimDevice {
public:
    SimDevice(const StudyConfig& config, DeviceProfile profile,
              const SensorCatalog& catalog = SensorCatalog::builtin());

    /// Advances the device over [tick, tick + tick_len_ms). The backend's
    /// clock should read `tick`. Inactive devices return empty results.
    /// Past the study end the device still answers but no longer senses.
    StepResult step(BackendApi& api, TimestampMs tick, std::int64_t tick_len_ms);

    /// End of run: seals the buffer and uploads everything regardless of
    /// the connectivity schedule, then submits answers already due.
    StepResult drain(BackendApi& api, TimestampMs now);

    /// Every upload is sent twice; the second must come back as duplicate.
    void set_duplicate_uploads(bool on) { duplicate_uploads_ = on; }

    const DeviceProfile& profile() const { return profile_; }
    bool registered() const { return !token_.empty(); }
    const std::string& token() const { return token_; }
    const DeviceCounters& counters() const { return counters_; }
    const std::vector<AnswerLog>& answer_log() const { return answer_log_; }
    std::size_t buffered_readings() const;
    std::size_t outbox_size() const { return outbox_.size(); }
    /// Sensors that produce readings on this device.
    const std::vector<SensorId>& sensors() const { return sensors_; }

    /// Readings this device generates in [tick, tick + tick_len_ms); no
    /// side effects besides on-change state.
    std::vector<SensorReading> sense(TimestampMs tick, std::int64_t tick_len_ms);

private:
    struct Planned {
        DiaryTask task;
        TimestampMs notified_at = 0;
        TimestampMs submit_at = 0;
        DiaryAnswer answer;
    };

    bool answering(TimestampMs t) const;
    bool collecting(TimestampMs t) const;
    void do_register(BackendApi& api, TimestampMs tick);
    void poll(BackendApi& api, TimestampMs tick, StepResult& out);
    void plan_answer(const DiaryTask& task, TimestampMs notified_at);
    void submit_due(BackendApi& api, TimestampMs tick, StepResult& out, bool all);
    void seal();
    bool upload(BackendApi& api, TimestampMs tick, StepResult& out);

    const StudyConfig& config_;
    const SensorCatalog& catalog_;
    DeviceProfile profile_;
    std::vector<SensorId> sensors_;
    TimestampMs join_at_ = 0;
    std::optional<TimestampMs> stop_at_;

    std::string token_;
    Key256 key_;
    std::optional<ReadingBuffer> buffer_;
    std::vector<LogChunk> outbox_;
    std::vector<TimestampMs> emit_times_;
    std::size_t emit_cursor_ = 0;
    std::set<Id128> seen_;
    std::vector<Planned> planned_;
    bool accepted_episode_ = false;

    OnChangeState on_change_;
    TimestampMs last_sync_ = 0;
    TimestampMs last_poll_ = 0;
    bool force_sync_ = false;
    bool was_offline_ = false;
    std::optional<TimestampMs> offline_since_;
    int failures_ = 0;
    TimestampMs retry_at_ = 0;
    bool duplicate_uploads_ = false;

    DeviceCounters counters_;
    std::vector<AnswerLog> answer_log_;
};

struct DayReport {
    Date day;
    int participants_reporting = 0;
    std::map<SensorId, std::int64_t> sensor_hours;
    std::int64_t diary_entries = 0;
    std::int64_t readings = 0;

    friend bool operator==(const DayReport&, const DayReport&) = default;
};

struct ParticipantReport {
    std::string label;
    bool active = true;
    int days_reporting = 0;
    std::int64_t readings = 0;
    std::int64_t diary_entries = 0;
    double entries_per_day = 0;  // over days reporting

    friend bool operator==(const ParticipantReport&, const ParticipantReport&) = default;
};

struct FleetTotals {
    int fleet_size = 0;
    int participants_reporting = 0;  // >= 1 reading over the run
    std::uint64_t readings_generated = 0;
    std::uint64_t readings_acknowledged = 0;
    std::uint64_t chunks_uploaded = 0;
    std::uint64_t duplicate_receipts = 0;
    std::uint64_t upload_failures = 0;
    std::uint64_t tasks_seen = 0;
    std::uint64_t answers_submitted = 0;
    std::uint64_t answers_accepted = 0;
    std::uint64_t answers_rejected = 0;
    std::int64_t sensor_hours = 0;
    double mean_entries_per_day = 0;  // over reporting participants

    friend bool operator==(const FleetTotals&, const FleetTotals&) = default;
};

struct FleetRunReport {
    std::vector<DayReport> days;
    FleetTotals totals;
    std::vector<ParticipantReport> participants;

    friend bool operator==(const FleetRunReport&, const FleetRunReport&) = default;
};

struct FleetOptions {
    std::int64_t tick_ms = kMsPerMinute;
    bool duplicate_uploads = false;
    /// > 0: pace the run at this many simulated seconds per real second.
    double faster_than_real = 0;
    std::function<void(TimestampMs)> on_day;  // called at each simulated midnight
    /// After the last day devices keep polling and answering (no sensing)
    /// so tasks emitted at the closing instant can still be answered.
    std::int64_t answer_grace_ms = 2 * kMsPerHour;
};

struct FleetRun {
    FleetRunReport report;
    std::vector<Id128> pseudonyms;  // by profile index
    std::vector<std::vector<AnswerLog>> answer_logs;
};

/// Simulates the whole study span. Throws BackendUnavailable when a device
/// exhausts its retry budget.
FleetRun run_fleet(const StudyConfig& config, std::vector<DeviceProfile> fleet, std::uint64_t master_seed,
                   BackendApi& api, const FleetOptions& options = {},
                   const SensorCatalog& catalog = SensorCatalog::builtin());

/// Fleet file: INI sections [profile.<label>] (or [group.<label>] with a
/// `count`), see FORMAT.md.
std::vector<DeviceProfile> load_fleet(std::string_view document,
                                      const SensorCatalog& catalog = SensorCatalog::builtin());
/// Inverse of load_fleet: a [defaults] section plus one [profile.*] each.
std::string format_fleet(const std::vector<DeviceProfile>& fleet,
                         const SensorCatalog& catalog = SensorCatalog::builtin());
std::vector<DeviceProfile> load_fleet_file(const std::filesystem::path& path,
                                           const SensorCatalog& catalog = SensorCatalog::builtin());

/// The 95-profile hackathon fleet: 29 never active, late joiners and
/// first-in-first-out dropouts shaping daily reporting.
std::vector<DeviceProfile> calibration_fleet();
/// Daily reporting counts the calibration fleet is built for.
const std::vector<int>& calibration_reporting_curve();

/// The study with sensing reduced to desk scale: acceleration at 1/60 Hz,
/// location every 300 s, screen status and battery level on change.
StudyConfig desk_scale(StudyConfig config);

}  // namespace ilog
