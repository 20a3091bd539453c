#pragma once

#include "ilog/bytes.hpp"
#include "ilog/logpack.hpp"
#include "ilog/study.hpp"
#include "ilog/time.hpp"

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <span>
#include <string>
#include <vector>

namespace ilog {

struct PartitionKey {
    Id128 pseudonym_id;
    SensorId sensor_id = 0;
    Date day;

    friend auto operator<=>(const PartitionKey&, const PartitionKey&) = default;
};

struct StoreOptions {
    /// fsync WAL and segments before acknowledging. Without it a batch
    /// survives a process crash but not power loss.
    bool fsync = false;
    std::size_t block_target_bytes = 4096;
    /// Unsorted partitions with more blocks than this are compacted.
    std::size_t compact_after_blocks = 64;
    std::uint64_t wal_checkpoint_bytes = 64ull << 20;
    /// 0 = unlimited; otherwise writes that would exceed it fail with StorageFull.
    std::uint64_t capacity_bytes = 0;
};

/// Append-oriented time-series store partitioned by (pseudonym, sensor, UTC
/// day). Layout on disk:
///
///   <root>/MANIFEST                       checkpoint sequence (JSON)
///   <root>/wal.log                        batches since the last checkpoint
///   <root>/batches.log                    batch ids (chunk ids) ever committed
///   <root>/<pseudonym>/<sensor>/<YYYY-MM-DD>.seg
///
/// Segments are sequences of checksummed blocks of about 4 KiB; the block
/// headers (time range, count, offset) form the sparse index kept in memory.
class SeriesStore {
public:
    explicit SeriesStore(std::filesystem::path root, StoreOptions options = {},
                         const SensorCatalog& catalog = SensorCatalog::builtin());
    ~SeriesStore();

    SeriesStore(const SeriesStore&) = delete;
    SeriesStore& operator=(const SeriesStore&) = delete;

    /// Atomically stores a batch. When `batch_id` is given it is recorded
    /// with the batch and reported by has_batch() from then on; a batch id
    /// already committed makes the call a no-op returning no counts.
    std::map<PartitionKey, std::size_t> write_batch(std::span<const SensorReading> readings,
                                                    const Id128& pseudonym_id,
                                                    std::optional<Id128> batch_id = std::nullopt);

    bool has_batch(const Id128& batch_id) const;

    /// Readings with ts_ms in [t0, t1), ordered by ts_ms then arrival.
    std::vector<SensorReading> query_range(const Id128& pseudonym_id, SensorId sensor_id,
                                           TimestampMs t0, TimestampMs t1) const;
    std::uint64_t count_range(const Id128& pseudonym_id, SensorId sensor_id, TimestampMs t0,
                              TimestampMs t1) const;

    /// Distinct UTC hours of `day` holding at least one reading.
    int coverage_hours(const Id128& pseudonym_id, SensorId sensor_id, Date day) const;

    struct PartitionInfo {
        PartitionKey key;
        std::uint64_t readings = 0;
        std::size_t blocks = 0;
        bool sorted = true;
    };
    std::vector<PartitionInfo> partitions() const;
    std::set<Id128> pseudonyms() const;
    std::uint64_t total_readings() const;
    std::size_t batch_count(const Id128& pseudonym_id) const;

    struct EraseReport {
        std::uint64_t readings = 0;
        std::size_t partitions = 0;
        std::size_t batches = 0;
    };
    EraseReport erase_pseudonym(const Id128& pseudonym_id);

    /// Flushes segments, records the checkpoint in MANIFEST and truncates the WAL.
    void checkpoint();
    void compact_all();

    const std::filesystem::path& root() const { return root_; }

    struct VerifyReport {
        std::size_t segments = 0;
        std::size_t blocks = 0;
        std::uint64_t readings = 0;
        std::size_t batches = 0;
        std::size_t wal_records = 0;
        std::vector<std::string> problems;
        bool ok() const { return problems.empty(); }
    };
    /// Offline integrity check of a store directory (no repair).
    static VerifyReport verify(const std::filesystem::path& root,
                               const SensorCatalog& catalog = SensorCatalog::builtin());

private:
    struct BlockRef {
        std::uint64_t offset = 0;  // of the block header
        std::uint64_t seq = 0;
        std::uint32_t count = 0;
        TimestampMs ts_min = 0;
        TimestampMs ts_max = 0;
        std::uint32_t payload_len = 0;
        std::uint32_t crc = 0;
    };
    struct Partition {
        std::vector<BlockRef> blocks;
        std::uint64_t readings = 0;
        std::uint64_t file_size = 0;
        std::uint64_t max_seq = 0;
        TimestampMs max_ts = std::numeric_limits<TimestampMs>::min();
        bool sorted = true;
        mutable std::atomic<std::int64_t> hour_mask{-1};  // -1 = not computed
    };
    struct BatchEntry {
        Id128 pseudonym_id;
        std::uint64_t seq = 0;
        std::uint32_t count = 0;
    };

    std::filesystem::path segment_path(const PartitionKey& key) const;
    void recover();
    void load_partition(const PartitionKey& key, const std::filesystem::path& file);
    void apply_batch(std::uint64_t seq, const Id128& pseudonym_id, std::optional<Id128> batch_id,
                     std::span<const SensorReading> readings, bool replay,
                     std::map<PartitionKey, std::size_t>* counts);
    std::vector<SensorReading> read_partition(const PartitionKey& key, const Partition& p,
                                              TimestampMs t0, TimestampMs t1) const;
    void compact_partition(const PartitionKey& key);
    void write_manifest(std::uint64_t checkpoint_seq);
    void rewrite_batches_log();

    std::filesystem::path root_;
    StoreOptions options_;
    const SensorCatalog& catalog_;

    std::mutex writer_;                  // one writer at a time
    mutable std::shared_mutex state_;    // guards the in-memory index
    std::map<PartitionKey, Partition> partitions_;
    std::map<Id128, BatchEntry> batches_;
    std::uint64_t last_seq_ = 0;
    std::uint64_t checkpoint_seq_ = 0;
    int wal_fd_ = -1;
    std::uint64_t wal_size_ = 0;
    int batches_fd_ = -1;
    std::uint64_t disk_bytes_ = 0;
};

}  // namespace ilog
