#pragma once

#include "ilog/bytes.hpp"
#include "ilog/time.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace ilog {

using SensorId = std::uint16_t;

enum class SensorKind { hardware, software };
enum class ValueKind { numeric, text, boolean };

/// Positive rational sampling frequency in Hz.
struct Rate {
    std::int64_t num = 1;
    std::int64_t den = 1;

    double hz() const { return static_cast<double>(num) / static_cast<double>(den); }
    /// Readings emitted in `ms` milliseconds, floored.
    std::int64_t readings_in(std::int64_t ms) const { return num * ms / (den * 1000); }
    std::string str() const;
    friend bool operator==(const Rate&, const Rate&) = default;
};

struct FixedRate {
    Rate rate;
    friend bool operator==(const FixedRate&, const FixedRate&) = default;
};
struct OnChange {
    double events_per_day = 0;  // nominal rate for the simulator and volume estimates
    friend bool operator==(const OnChange&, const OnChange&) = default;
};
struct Polled {
    int period_s = 60;
    friend bool operator==(const Polled&, const Polled&) = default;
};
using Sampling = std::variant<FixedRate, OnChange, Polled>;

std::string to_string(const Sampling& s);

struct SensorSpec {
    SensorId id = 0;
    std::string key;   // config name, e.g. "linear_acceleration"
    std::string name;  // display name, e.g. "Linear Acceleration"
    SensorKind kind = SensorKind::hardware;
    Sampling sampling = OnChange{};
    int value_arity = 1;
    ValueKind value_kind = ValueKind::numeric;
};

class SensorCatalog {
public:
    explicit SensorCatalog(std::vector<SensorSpec> entries);

    /// The shipped catalog. Codes are stable; new sensors are appended.
    static const SensorCatalog& builtin();

    const std::vector<SensorSpec>& entries() const { return entries_; }
    const SensorSpec* find(SensorId id) const;
    const SensorSpec* find(std::string_view key) const;
    const SensorSpec& at(SensorId id) const;

private:
    std::vector<SensorSpec> entries_;
};

enum class CodebookId : std::uint8_t { activity = 1, location, transport, with_whom, mood };
inline constexpr std::array<CodebookId, 5> kAllCodebooks = {
    CodebookId::activity, CodebookId::location, CodebookId::transport, CodebookId::with_whom,
    CodebookId::mood};

std::string_view to_string(CodebookId id);
std::optional<CodebookId> codebook_from_string(std::string_view s);

struct CodebookEntry {
    int code = 0;
    std::string label;
};

struct Codebook {
    CodebookId id = CodebookId::activity;
    std::vector<CodebookEntry> entries;
    bool allows_open_text = false;

    bool contains(int code) const { return code >= 1 && code <= static_cast<int>(entries.size()); }
    /// The open-ended category ("Other (specify)") is the last entry when allowed.
    std::optional<int> open_code() const {
        if (!allows_open_text || entries.empty()) return std::nullopt;
        return entries.back().code;
    }
};

const std::array<Codebook, 5>& default_codebooks();
int expected_codebook_size(CodebookId id);

struct StudyConfig {
    std::string name;
    std::string study_code;
    Date start;
    Date end;
    int diary_resolution_min = 60;
    int backlog_cap = 8;
    std::optional<int> reply_window_min;  // nullopt = unlimited
    std::vector<TimeOfDay> mood_prompts;
    bool mood_per_episode = true;
    int travelling_code = 17;  // activity code that triggers the transport question
    /// Enabled sensors; a value replaces the catalog's default sampling.
    std::map<SensorId, std::optional<Sampling>> sensors_enabled;
    int sync_period_s = 1800;
    std::int64_t chunk_target_bytes = 1 << 20;
    std::array<Codebook, 5> codebooks = default_codebooks();

    int span_days() const { return static_cast<int>(end.days - start.days + 1); }
    TimestampMs start_ms() const { return start.start_ms(); }
    TimestampMs end_ms() const { return end.next().start_ms(); }  // exclusive
    const Codebook& codebook(CodebookId id) const {
        return codebooks[static_cast<std::size_t>(id) - 1];
    }
    /// Sampling in effect for an enabled sensor; nullopt when disabled.
    std::optional<Sampling> sampling_of(SensorId id,
                                        const SensorCatalog& catalog = SensorCatalog::builtin()) const;
};

/// Parses the INI-style study format (see FORMAT.md) and validates it.
StudyConfig load_study_config(std::string_view document,
                              const SensorCatalog& catalog = SensorCatalog::builtin());
StudyConfig load_study_config_file(const std::filesystem::path& path,
                                   const SensorCatalog& catalog = SensorCatalog::builtin());
void validate(const StudyConfig& config, const SensorCatalog& catalog = SensorCatalog::builtin());

/// Constant-time with respect to the content of both strings.
bool verify_study_code(std::string_view code, const StudyConfig& config);

std::int64_t expected_daily_readings(const SensorSpec& spec);
std::int64_t expected_daily_readings(const Sampling& sampling);

inline constexpr std::int64_t kDefaultBytesPerReading = 32;

/// Bytes per device per day. On-change sensors count only when
/// `include_on_change` is set, at their nominal event rate.
std::int64_t expected_daily_volume(const StudyConfig& config, std::int64_t bytes_per_reading,
                                   bool include_on_change = false,
                                   const SensorCatalog& catalog = SensorCatalog::builtin());

/// Same, restricted to a device's enabled subset of the config's sensors.
std::int64_t expected_daily_volume(const StudyConfig& config, const std::set<SensorId>& enabled,
                                   std::int64_t bytes_per_reading,
                                   const SensorCatalog& catalog = SensorCatalog::builtin());

enum class Consent { pending, granted, revoked };
std::string_view to_string(Consent c);
std::optional<Consent> consent_from_string(std::string_view s);

using Background = std::map<std::string, std::string>;

struct ParticipantRecord {
    Id128 pseudonym_id;
    Id128 contact_ref;  // key into the identity ledger; lives only in the linkage table
    Key256 device_key;
    Consent consent = Consent::pending;
    TimestampMs registered_at = 0;
    Background background;  // gender, occupation, activity_status, employer, workplace
};

}  // namespace ilog
