#pragma once

#include "ilog/ingest.hpp"
#include "ilog/series_store.hpp"
#include "ilog/study.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace ilog {

struct ExportTable {
    std::string name;
    std::uint64_t row_count = 0;
    std::string file;         // relative to the export directory
    std::string schema_hash;  // SHA-256 of the sidecar schema file, hex
};

struct ExportManifest {
    std::string export_id;  // derived from range and table contents
    TimestampMs created_at = 0;
    TimestampMs range_from = 0;
    TimestampMs range_to = 0;  // exclusive
    std::vector<ExportTable> tables;

    const ExportTable* table(std::string_view name) const;
};

struct ExportRequest {
    TimestampMs from = 0;
    TimestampMs to = 0;
    /// Sensor tables to write even when empty. Sensors with stored data
    /// in range are always written.
    std::set<SensorId> sensors;
    TimestampMs created_at = 0;
};

/// Writes <sensor>.tsv + <sensor>.schema.json per sensor, answers and
/// telemetry tables, and manifest.json into `out_dir`. Rows ordered by
/// (pseudonym, ts). An empty range is not an error: the manifest lists no
/// tables. Throws IoFailure.
ExportManifest export_tables(const SeriesStore& store, const CollectionDb& diary, const ExportRequest& request,
                             const std::filesystem::path& out_dir,
                             const SensorCatalog& catalog = SensorCatalog::builtin());

struct ComplianceDay {
    Date day;
    int participants_reporting = 0;
    std::int64_t sensor_hours = 0;
    std::map<SensorId, std::int64_t> sensor_hours_by_sensor;
    std::int64_t diary_entries = 0;

    friend bool operator==(const ComplianceDay&, const ComplianceDay&) = default;
};

struct ComplianceReport {
    Date first;
    Date last;
    int registered = 0;
    int participants_with_data = 0;  // >= 1 reading over the span
    std::vector<ComplianceDay> days;
    std::map<SensorId, std::int64_t> sensor_hours;  // over the span
    std::int64_t sensor_hours_total = 0;
    std::int64_t diary_entries_total = 0;
    /// Diary entries per day reporting, per participant with data.
    std::map<Id128, double> entries_per_day;
    double mean_entries_per_day = 0;

    friend bool operator==(const ComplianceReport&, const ComplianceReport&) = default;
};

/// Per UTC day of [first, last]: participants with >= 1 reading, distinct
/// hours with data summed over participants and sensors, and answered diary
/// tasks by episode start.
ComplianceReport compliance_report(const SeriesStore& store, const CollectionDb& diary, Date first, Date last);

/// report.txt plus participants_per_day.csv, sensor_hours_per_day.csv,
/// entries_per_day.csv and participants.csv.
void write_compliance_report(const ComplianceReport& report, const std::filesystem::path& out_dir,
                             const SensorCatalog& catalog = SensorCatalog::builtin());

struct VolumeRow {
    Id128 pseudonym_id;
    Date day;
    std::uint64_t readings = 0;
    std::int64_t bytes = 0;           // readings x record size
    std::int64_t expected_bytes = 0;  // for the participant's enabled sensors
    double deviation = 0;             // (bytes - expected) / expected
    bool flagged = false;             // |deviation| > threshold
};

inline constexpr double kVolumeFlagThreshold = 0.5;

/// Reading counts by timestamp day (not upload time) for [from, to).
std::vector<VolumeRow> volume_report(const SeriesStore& store, const CollectionDb& diary, const StudyConfig& config,
                                     TimestampMs from, TimestampMs to,
                                     std::int64_t bytes_per_reading = kDefaultBytesPerReading,
                                     const SensorCatalog& catalog = SensorCatalog::builtin());

void write_volume_report(const std::vector<VolumeRow>& rows, const std::filesystem::path& file);

}  // namespace ilog
