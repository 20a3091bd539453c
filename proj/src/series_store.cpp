#include "ilog/series_store.hpp"
#include "ilog/error.hpp"

#include <json.hpp>
#include <zlib.h>

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <bit>
#include <cerrno>
#include <cstring>
#include <fstream>
#include <functional>
#include <limits>

namespace fs = std::filesystem;

namespace ilog {

namespace {

constexpr char kSegmentMagic[8] = {'I', 'L', 'S', 'E', 'G', 0, 0, 1};
constexpr char kBlockMagic[4] = {'B', 'L', 'K', '1'};
constexpr std::size_t kBlockHeaderSize = 48;
constexpr std::uint32_t kBlockBatchEnd = 1;  // last block a batch wrote to this partition
constexpr std::size_t kBatchRecordSize = 48;
constexpr std::size_t kWalPrefix = 8;

std::uint32_t crc32_of(ByteView data) {
    return static_cast<std::uint32_t>(
        ::crc32(0L, data.data(), static_cast<uInt>(data.size())));
}

template <typename T>
void put_le(Bytes& out, T v) {
    using U = std::make_unsigned_t<T>;
    auto u = static_cast<U>(v);
    for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
}

template <typename T>
T get_le(const std::uint8_t* p) {
    using U = std::make_unsigned_t<T>;
    U u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) u |= static_cast<U>(static_cast<U>(p[i]) << (8 * i));
    return static_cast<T>(u);
}

[[noreturn]] void io_error(const std::string& what, int err) {
    if (err == ENOSPC || err == EDQUOT)
        throw Error(Errc::storage_full, what + ": " + std::strerror(err));
    throw Error(Errc::io_failure, what + ": " + std::strerror(err));
}

class Fd {
public:
    Fd() = default;
    Fd(const fs::path& path, int flags, mode_t mode = 0644) : fd_(::open(path.c_str(), flags, mode)) {
        if (fd_ < 0) io_error("open " + path.string(), errno);
    }
    ~Fd() {
        if (fd_ >= 0) ::close(fd_);
    }
    Fd(Fd&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
    Fd& operator=(Fd&& o) noexcept {
        std::swap(fd_, o.fd_);
        return *this;
    }
    int get() const { return fd_; }
    int release() { return std::exchange(fd_, -1); }

private:
    int fd_ = -1;
};

void write_all(int fd, ByteView data, const std::string& what) {
    std::size_t done = 0;
    while (done < data.size()) {
        auto n = ::write(fd, data.data() + done, data.size() - done);
        if (n < 0) {
            if (errno == EINTR) continue;
            io_error(what, errno);
        }
        done += static_cast<std::size_t>(n);
    }
}

void pread_all(int fd, std::uint8_t* out, std::size_t len, std::uint64_t offset, const std::string& what) {
    std::size_t done = 0;
    while (done < len) {
        auto n = ::pread(fd, out + done, len - done, static_cast<off_t>(offset + done));
        if (n < 0) {
            if (errno == EINTR) continue;
            io_error(what, errno);
        }
        if (n == 0) throw Error(Errc::io_failure, what + ": unexpected end of file");
        done += static_cast<std::size_t>(n);
    }
}

void sync_fd(int fd, const std::string& what) {
    if (::fsync(fd) != 0) io_error("fsync " + what, errno);
}

void truncate_file(const fs::path& path, std::uint64_t size) {
    if (::truncate(path.c_str(), static_cast<off_t>(size)) != 0) io_error("truncate " + path.string(), errno);
}

Bytes read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) return {};
    return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_atomic(const fs::path& path, ByteView data, bool durable) {
    auto tmp = path;
    tmp += ".tmp";
    {
        Fd fd(tmp, O_WRONLY | O_CREAT | O_TRUNC);
        write_all(fd.get(), data, "write " + tmp.string());
        if (durable) sync_fd(fd.get(), tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw Error(Errc::io_failure, "rename " + tmp.string() + ": " + ec.message());
}

struct BlockHeader {
    std::uint64_t seq = 0;
    std::uint32_t count = 0;
    std::uint32_t flags = 0;
    TimestampMs ts_min = 0;
    TimestampMs ts_max = 0;
    std::uint32_t payload_len = 0;
    std::uint32_t payload_crc = 0;
};

void encode_block_header(Bytes& out, const BlockHeader& h) {
    auto start = out.size();
    out.insert(out.end(), kBlockMagic, kBlockMagic + 4);
    put_le(out, h.seq);
    put_le(out, h.count);
    put_le(out, h.flags);
    put_le(out, h.ts_min);
    put_le(out, h.ts_max);
    put_le(out, h.payload_len);
    put_le(out, h.payload_crc);
    put_le(out, crc32_of(ByteView(out.data() + start, out.size() - start)));
}

std::optional<BlockHeader> decode_block_header(const std::uint8_t* p) {
    if (std::memcmp(p, kBlockMagic, 4) != 0) return std::nullopt;
    if (get_le<std::uint32_t>(p + 44) != crc32_of(ByteView(p, 44))) return std::nullopt;
    BlockHeader h;
    h.seq = get_le<std::uint64_t>(p + 4);
    h.count = get_le<std::uint32_t>(p + 12);
    h.flags = get_le<std::uint32_t>(p + 16);
    h.ts_min = get_le<std::int64_t>(p + 20);
    h.ts_max = get_le<std::int64_t>(p + 28);
    h.payload_len = get_le<std::uint32_t>(p + 36);
    h.payload_crc = get_le<std::uint32_t>(p + 40);
    return h;
}

/// Splits time-sorted readings into encoded blocks of about `target` bytes.
/// Only the final block carries the batch-end flag unless `all_end` is set
/// (compaction output, which is written atomically).
void encode_blocks(Bytes& out, std::span<const SensorReading* const> sorted, std::uint64_t seq,
                   std::size_t target, std::uint64_t base_offset,
                   std::vector<std::pair<std::uint64_t, BlockHeader>>& refs, bool all_end = false) {
    std::size_t i = 0;
    Bytes payload;
    while (i < sorted.size()) {
        payload.clear();
        BlockHeader h;
        h.seq = seq;
        h.ts_min = sorted[i]->ts_ms;
        while (i < sorted.size() && (payload.empty() || payload.size() + record_size(*sorted[i]) <= target)) {
            encode_record(payload, *sorted[i]);
            h.ts_max = sorted[i]->ts_ms;
            ++h.count;
            ++i;
        }
        h.payload_len = static_cast<std::uint32_t>(payload.size());
        h.payload_crc = crc32_of(payload);
        if (all_end || i == sorted.size()) h.flags |= kBlockBatchEnd;
        refs.emplace_back(base_offset + out.size(), h);
        encode_block_header(out, h);
        out.insert(out.end(), payload.begin(), payload.end());
    }
}

std::int64_t hour_bits(std::span<const SensorReading* const> readings) {
    std::int64_t mask = 0;
    for (const auto* r : readings) mask |= std::int64_t{1} << utc_hour(r->ts_ms);
    return mask;
}

std::optional<PartitionKey> parse_partition_path(const fs::path& rel) {
    std::vector<std::string> parts;
    for (const auto& p : rel) parts.push_back(p.string());
    if (parts.size() != 3) return std::nullopt;
    auto pseud = Id128::from_hex(parts[0]);
    if (!pseud) return std::nullopt;
    SensorId sensor = 0;
    try {
        auto v = std::stoul(parts[1]);
        if (v > 0xffff || std::to_string(v) != parts[1]) return std::nullopt;
        sensor = static_cast<SensorId>(v);
    } catch (...) {
        return std::nullopt;
    }
    if (parts[2].size() != 14 || parts[2].substr(10) != ".seg") return std::nullopt;
    auto day = Date::parse(parts[2].substr(0, 10));
    if (!day) return std::nullopt;
    return PartitionKey{*pseud, sensor, *day};
}

struct WalRecord {
    std::uint64_t seq = 0;
    std::optional<Id128> batch_id;
    Id128 pseudonym_id;
    std::vector<SensorReading> readings;
};

Bytes encode_wal_record(std::uint64_t seq, const Id128& pseudonym_id, const std::optional<Id128>& batch_id,
                        std::span<const SensorReading> readings) {
    Bytes payload;
    put_le(payload, seq);
    payload.push_back(batch_id ? 1 : 0);
    auto id = batch_id.value_or(Id128{});
    payload.insert(payload.end(), id.bytes.begin(), id.bytes.end());
    payload.insert(payload.end(), pseudonym_id.bytes.begin(), pseudonym_id.bytes.end());
    put_le(payload, static_cast<std::uint32_t>(readings.size()));
    for (const auto& r : readings) encode_record(payload, r);
    Bytes out;
    out.reserve(payload.size() + kWalPrefix);
    put_le(out, static_cast<std::uint32_t>(payload.size()));
    put_le(out, crc32_of(payload));
    out.insert(out.end(), payload.begin(), payload.end());
    return out;
}

/// Scans WAL bytes; returns the valid prefix length. Stops at a torn record.
std::size_t scan_wal(ByteView wal, const SensorCatalog& catalog, const std::function<void(WalRecord&&)>& fn) {
    std::size_t pos = 0;
    while (wal.size() - pos >= kWalPrefix) {
        auto len = get_le<std::uint32_t>(wal.data() + pos);
        auto crc = get_le<std::uint32_t>(wal.data() + pos + 4);
        if (wal.size() - pos - kWalPrefix < len) break;
        auto payload = wal.subspan(pos + kWalPrefix, len);
        if (crc32_of(payload) != crc || payload.size() < 8 + 1 + 16 + 16 + 4) break;
        WalRecord rec;
        const auto* p = payload.data();
        rec.seq = get_le<std::uint64_t>(p);
        if (p[8]) {
            Id128 id;
            std::memcpy(id.bytes.data(), p + 9, 16);
            rec.batch_id = id;
        }
        std::memcpy(rec.pseudonym_id.bytes.data(), p + 25, 16);
        auto count = get_le<std::uint32_t>(p + 41);
        std::size_t rpos = 45;
        try {
            rec.readings.reserve(count);
            while (rpos < payload.size()) rec.readings.push_back(decode_record(payload, rpos, catalog));
        } catch (const Error&) {
            break;
        }
        if (rec.readings.size() != count) break;
        fn(std::move(rec));
        pos += kWalPrefix + len;
    }
    return pos;
}

Bytes encode_batch_record(const Id128& batch_id, const Id128& pseudonym_id, std::uint64_t seq, std::uint32_t count) {
    Bytes out;
    out.insert(out.end(), batch_id.bytes.begin(), batch_id.bytes.end());
    out.insert(out.end(), pseudonym_id.bytes.begin(), pseudonym_id.bytes.end());
    put_le(out, seq);
    put_le(out, count);
    put_le(out, crc32_of(out));
    return out;
}

}  // namespace

SeriesStore::SeriesStore(fs::path root, StoreOptions options, const SensorCatalog& catalog)
    : root_(std::move(root)), options_(options), catalog_(catalog) {
    std::error_code ec;
    fs::create_directories(root_, ec);
    if (ec) throw Error(Errc::io_failure, "create " + root_.string() + ": " + ec.message());
    recover();
}

SeriesStore::~SeriesStore() {
    try {
        std::lock_guard lock(writer_);
        if (wal_size_ > 0) {
            write_manifest(last_seq_);
            if (::ftruncate(wal_fd_, 0) == 0) wal_size_ = 0;
        }
    } catch (...) {
    }
    if (wal_fd_ >= 0) ::close(wal_fd_);
    if (batches_fd_ >= 0) ::close(batches_fd_);
}

fs::path SeriesStore::segment_path(const PartitionKey& key) const {
    return root_ / key.pseudonym_id.hex() / std::to_string(key.sensor_id) / (key.day.iso() + ".seg");
}

void SeriesStore::write_manifest(std::uint64_t checkpoint_seq) {
    nlohmann::json j = {{"format", "ilog-series-1"}, {"checkpoint_seq", checkpoint_seq}};
    auto text = j.dump(2) + "\n";
    write_file_atomic(root_ / "MANIFEST", ByteView(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()),
                      options_.fsync);
    checkpoint_seq_ = checkpoint_seq;
}

void SeriesStore::load_partition(const PartitionKey& key, const fs::path& file) {
    auto data = read_file(file);
    Partition& p = partitions_[key];
    std::size_t pos = 0;
    if (data.size() < sizeof kSegmentMagic || std::memcmp(data.data(), kSegmentMagic, sizeof kSegmentMagic) != 0) {
        // A segment torn before its header made it to disk holds nothing.
        partitions_.erase(key);
        fs::remove(file);
        return;
    }
    pos = sizeof kSegmentMagic;
    // Blocks after the last batch-end flag belong to a batch torn by a crash;
    // they are dropped here and the WAL replays the whole batch.
    std::size_t committed = pos;
    std::size_t committed_blocks = 0;
    while (data.size() - pos >= kBlockHeaderSize) {
        auto h = decode_block_header(data.data() + pos);
        if (!h || data.size() - pos - kBlockHeaderSize < h->payload_len) break;
        ByteView payload(data.data() + pos + kBlockHeaderSize, h->payload_len);
        if (crc32_of(payload) != h->payload_crc) break;
        p.blocks.push_back({pos, h->seq, h->count, h->ts_min, h->ts_max, h->payload_len, h->payload_crc});
        pos += kBlockHeaderSize + h->payload_len;
        if (h->flags & kBlockBatchEnd) {
            committed = pos;
            committed_blocks = p.blocks.size();
        }
    }
    p.blocks.resize(committed_blocks);
    pos = committed;
    for (const auto& b : p.blocks) {
        p.readings += b.count;
        p.max_seq = std::max(p.max_seq, b.seq);
        if (b.ts_min < p.max_ts) p.sorted = false;
        p.max_ts = std::max(p.max_ts, b.ts_max);
    }
    if (pos != data.size()) truncate_file(file, pos);
    p.file_size = pos;
    disk_bytes_ += pos;
    if (p.blocks.empty()) {
        partitions_.erase(key);
        fs::remove(file);
        disk_bytes_ -= pos;
    }
}

void SeriesStore::recover() {
    auto manifest = read_file(root_ / "MANIFEST");
    if (!manifest.empty()) {
        try {
            auto j = nlohmann::json::parse(manifest.begin(), manifest.end());
            checkpoint_seq_ = j.at("checkpoint_seq").get<std::uint64_t>();
        } catch (const std::exception& e) {
            throw Error(Errc::io_failure, std::string("unreadable MANIFEST: ") + e.what());
        }
    }
    last_seq_ = checkpoint_seq_;

    for (auto it = fs::recursive_directory_iterator(root_); it != fs::recursive_directory_iterator(); ++it) {
        if (!it->is_regular_file()) continue;
        auto rel = fs::relative(it->path(), root_);
        if (it->path().extension() == ".tmp") {
            fs::remove(it->path());
            continue;
        }
        if (auto key = parse_partition_path(rel)) load_partition(*key, it->path());
    }
    for (const auto& [_, p] : partitions_) last_seq_ = std::max(last_seq_, p.max_seq);

    auto batches_path = root_ / "batches.log";
    auto blog = read_file(batches_path);
    std::size_t bpos = 0;
    while (blog.size() - bpos >= kBatchRecordSize) {
        const auto* p = blog.data() + bpos;
        if (get_le<std::uint32_t>(p + 44) != crc32_of(ByteView(p, 44))) break;
        Id128 id, pseud;
        std::memcpy(id.bytes.data(), p, 16);
        std::memcpy(pseud.bytes.data(), p + 16, 16);
        BatchEntry e{pseud, get_le<std::uint64_t>(p + 32), get_le<std::uint32_t>(p + 40)};
        last_seq_ = std::max(last_seq_, e.seq);
        batches_[id] = e;
        bpos += kBatchRecordSize;
    }
    if (bpos != blog.size()) truncate_file(batches_path, bpos);
    batches_fd_ = Fd(batches_path, O_WRONLY | O_CREAT | O_APPEND).release();

    auto wal_path = root_ / "wal.log";
    auto wal = read_file(wal_path);
    {
        auto valid = scan_wal(wal, catalog_, [&](WalRecord&& rec) {
            if (rec.seq > checkpoint_seq_)
                apply_batch(rec.seq, rec.pseudonym_id, rec.batch_id, rec.readings, true, nullptr);
            last_seq_ = std::max(last_seq_, rec.seq);
        });
        if (valid != wal.size()) truncate_file(wal_path, valid);
        wal_size_ = valid;
    }
    wal_fd_ = Fd(wal_path, O_WRONLY | O_CREAT | O_APPEND).release();
    disk_bytes_ += wal_size_;
}

void SeriesStore::apply_batch(std::uint64_t seq, const Id128& pseudonym_id, std::optional<Id128> batch_id,
                              std::span<const SensorReading> readings, bool replay,
                              std::map<PartitionKey, std::size_t>* counts) {
    std::map<PartitionKey, std::vector<const SensorReading*>> groups;
    for (const auto& r : readings) groups[{pseudonym_id, r.sensor_id, Date::of(r.ts_ms)}].push_back(&r);

    struct Pending {
        PartitionKey key;
        std::vector<BlockRef> blocks;
        std::uint64_t new_size = 0;
        std::uint64_t old_size = 0;
        bool created = false;
        std::int64_t mask = 0;
        std::uint64_t readings = 0;
    };
    std::vector<Pending> pending;
    auto rollback = [&] {
        for (const auto& p : pending) {
            std::error_code ec;
            if (p.created) fs::remove(segment_path(p.key), ec);
            else if (p.new_size) (void)!::truncate(segment_path(p.key).c_str(), static_cast<off_t>(p.old_size));
        }
    };

    try {
        for (auto& [key, rs] : groups) {
            std::uint64_t old_size = 0;
            {
                std::shared_lock lock(state_);
                if (auto it = partitions_.find(key); it != partitions_.end()) {
                    if (replay && it->second.max_seq >= seq) continue;
                    old_size = it->second.file_size;
                }
            }
            std::stable_sort(rs.begin(), rs.end(),
                             [](const SensorReading* a, const SensorReading* b) { return a->ts_ms < b->ts_ms; });
            Pending pe;
            pe.key = key;
            pe.old_size = old_size;
            pe.created = old_size == 0;
            Bytes out;
            if (pe.created) out.insert(out.end(), kSegmentMagic, kSegmentMagic + sizeof kSegmentMagic);
            std::vector<std::pair<std::uint64_t, BlockHeader>> refs;
            encode_blocks(out, rs, seq, options_.block_target_bytes, old_size, refs);
            for (const auto& [off, h] : refs)
                pe.blocks.push_back({off, h.seq, h.count, h.ts_min, h.ts_max, h.payload_len, h.payload_crc});
            pe.mask = hour_bits(rs);
            pe.readings = rs.size();
            pe.new_size = old_size + out.size();

            auto path = segment_path(key);
            if (pe.created) fs::create_directories(path.parent_path());
            pending.push_back(pe);
            Fd fd(path, O_WRONLY | O_CREAT | O_APPEND);
            write_all(fd.get(), out, "append " + path.string());
            if (options_.fsync) sync_fd(fd.get(), path.string());
        }
        if (batch_id && !(replay && batches_.count(*batch_id))) {
            auto rec = encode_batch_record(*batch_id, pseudonym_id, seq, static_cast<std::uint32_t>(readings.size()));
            write_all(batches_fd_, rec, "append batches.log");
            if (options_.fsync) sync_fd(batches_fd_, "batches.log");
        }
    } catch (...) {
        rollback();
        throw;
    }

    std::unique_lock lock(state_);
    for (auto& pe : pending) {
        auto& p = partitions_[pe.key];
        for (const auto& b : pe.blocks) {
            if (b.ts_min < p.max_ts) p.sorted = false;
            p.max_ts = std::max(p.max_ts, b.ts_max);
            p.blocks.push_back(b);
        }
        disk_bytes_ += pe.new_size - p.file_size;
        p.file_size = pe.new_size;
        p.readings += pe.readings;
        p.max_seq = std::max(p.max_seq, seq);
        auto mask = p.hour_mask.load();
        if (mask >= 0 || pe.created) p.hour_mask.store((mask < 0 ? 0 : mask) | pe.mask);
        if (counts) (*counts)[pe.key] += pe.readings;
    }
    if (batch_id) batches_[*batch_id] = {pseudonym_id, seq, static_cast<std::uint32_t>(readings.size())};
}

std::map<PartitionKey, std::size_t> SeriesStore::write_batch(std::span<const SensorReading> readings,
                                                             const Id128& pseudonym_id,
                                                             std::optional<Id128> batch_id) {
    std::map<PartitionKey, std::size_t> counts;
    if (readings.empty()) return counts;
    for (const auto& r : readings) validate_reading(r, catalog_);

    std::lock_guard wlock(writer_);
    if (batch_id) {
        std::shared_lock lock(state_);
        if (batches_.count(*batch_id)) return counts;
    }
    auto seq = last_seq_ + 1;
    auto record = encode_wal_record(seq, pseudonym_id, batch_id, readings);
    if (options_.capacity_bytes && disk_bytes_ + 2 * record.size() > options_.capacity_bytes)
        throw Error(Errc::storage_full, "store capacity of " + std::to_string(options_.capacity_bytes) +
                                            " bytes would be exceeded");

    auto wal_before = wal_size_;
    try {
        write_all(wal_fd_, record, "append wal.log");
        if (options_.fsync) sync_fd(wal_fd_, "wal.log");
    } catch (...) {
        (void)!::ftruncate(wal_fd_, static_cast<off_t>(wal_before));
        throw;
    }
    try {
        apply_batch(seq, pseudonym_id, batch_id, readings, false, &counts);
    } catch (...) {
        (void)!::ftruncate(wal_fd_, static_cast<off_t>(wal_before));
        throw;
    }
    wal_size_ += record.size();
    disk_bytes_ += record.size();
    last_seq_ = seq;

    for (const auto& [key, _] : counts) {
        bool needs = false;
        {
            std::shared_lock lock(state_);
            const auto& p = partitions_.at(key);
            needs = !p.sorted && p.blocks.size() > options_.compact_after_blocks;
        }
        if (needs) compact_partition(key);
    }
    if (wal_size_ >= options_.wal_checkpoint_bytes) {
        write_manifest(last_seq_);
        if (::ftruncate(wal_fd_, 0) != 0) io_error("truncate wal.log", errno);
        disk_bytes_ -= wal_size_;
        wal_size_ = 0;
    }
    return counts;
}

void SeriesStore::checkpoint() {
    std::lock_guard wlock(writer_);
    write_manifest(last_seq_);
    if (::ftruncate(wal_fd_, 0) != 0) io_error("truncate wal.log", errno);
    disk_bytes_ -= wal_size_;
    wal_size_ = 0;
}

bool SeriesStore::has_batch(const Id128& batch_id) const {
    std::shared_lock lock(state_);
    return batches_.count(batch_id) > 0;
}

std::size_t SeriesStore::batch_count(const Id128& pseudonym_id) const {
    std::shared_lock lock(state_);
    return static_cast<std::size_t>(std::count_if(batches_.begin(), batches_.end(), [&](const auto& kv) {
        return kv.second.pseudonym_id == pseudonym_id;
    }));
}

std::vector<SensorReading> SeriesStore::read_partition(const PartitionKey& key, const Partition& p,
                                                       TimestampMs t0, TimestampMs t1) const {
    std::vector<SensorReading> out;
    auto path = segment_path(key);
    Fd fd(path, O_RDONLY);
    Bytes payload;
    auto read_block = [&](const BlockRef& b) {
        payload.resize(b.payload_len);
        pread_all(fd.get(), payload.data(), b.payload_len, b.offset + kBlockHeaderSize, "read " + path.string());
        if (crc32_of(payload) != b.crc) throw Error(Errc::io_failure, "checksum mismatch in " + path.string());
        std::size_t pos = 0;
        while (pos < payload.size()) {
            auto r = decode_record(payload, pos, catalog_);
            if (r.ts_ms >= t0 && r.ts_ms < t1) out.push_back(std::move(r));
        }
    };
    if (p.sorted) {
        auto first = std::partition_point(p.blocks.begin(), p.blocks.end(),
                                          [&](const BlockRef& b) { return b.ts_max < t0; });
        for (auto it = first; it != p.blocks.end() && it->ts_min < t1; ++it) read_block(*it);
    } else {
        for (const auto& b : p.blocks)
            if (b.ts_max >= t0 && b.ts_min < t1) read_block(b);
        std::stable_sort(out.begin(), out.end(),
                         [](const SensorReading& a, const SensorReading& b) { return a.ts_ms < b.ts_ms; });
    }
    return out;
}

std::vector<SensorReading> SeriesStore::query_range(const Id128& pseudonym_id, SensorId sensor_id,
                                                    TimestampMs t0, TimestampMs t1) const {
    std::vector<SensorReading> out;
    if (t0 >= t1) return out;
    std::shared_lock lock(state_);
    auto last_day = Date::of(t1 - 1);
    for (auto it = partitions_.lower_bound({pseudonym_id, sensor_id, Date::of(t0)});
         it != partitions_.end() && it->first.pseudonym_id == pseudonym_id &&
         it->first.sensor_id == sensor_id && it->first.day <= last_day;
         ++it) {
        auto part = read_partition(it->first, it->second, t0, t1);
        if (out.empty()) out = std::move(part);
        else out.insert(out.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
    }
    return out;
}

std::uint64_t SeriesStore::count_range(const Id128& pseudonym_id, SensorId sensor_id, TimestampMs t0,
                                       TimestampMs t1) const {
    if (t0 >= t1) return 0;
    std::uint64_t n = 0;
    {
        std::shared_lock lock(state_);
        auto last_day = Date::of(t1 - 1);
        for (auto it = partitions_.lower_bound({pseudonym_id, sensor_id, Date::of(t0)});
             it != partitions_.end() && it->first.pseudonym_id == pseudonym_id &&
             it->first.sensor_id == sensor_id && it->first.day <= last_day;
             ++it) {
            bool inside = true;
            for (const auto& b : it->second.blocks)
                if (b.ts_min < t0 || b.ts_max >= t1) inside = false;
            if (inside) n += it->second.readings;
            else n += read_partition(it->first, it->second, t0, t1).size();
        }
    }
    return n;
}

int SeriesStore::coverage_hours(const Id128& pseudonym_id, SensorId sensor_id, Date day) const {
    std::shared_lock lock(state_);
    auto it = partitions_.find({pseudonym_id, sensor_id, day});
    if (it == partitions_.end()) return 0;
    const auto& p = it->second;
    auto mask = p.hour_mask.load();
    if (mask < 0) {
        mask = 0;
        std::vector<BlockRef> mixed;
        for (const auto& b : p.blocks) {
            if (utc_hour(b.ts_min) == utc_hour(b.ts_max)) mask |= std::int64_t{1} << utc_hour(b.ts_min);
            else mixed.push_back(b);
        }
        if (!mixed.empty()) {
            for (const auto& r : read_partition(it->first, p, day.start_ms(), day.next().start_ms()))
                mask |= std::int64_t{1} << utc_hour(r.ts_ms);
        }
        p.hour_mask.store(mask);
    }
    return std::popcount(static_cast<std::uint64_t>(mask));
}

std::vector<SeriesStore::PartitionInfo> SeriesStore::partitions() const {
    std::shared_lock lock(state_);
    std::vector<PartitionInfo> out;
    out.reserve(partitions_.size());
    for (const auto& [k, p] : partitions_) out.push_back({k, p.readings, p.blocks.size(), p.sorted});
    return out;
}

std::set<Id128> SeriesStore::pseudonyms() const {
    std::shared_lock lock(state_);
    std::set<Id128> out;
    for (const auto& [k, _] : partitions_) out.insert(k.pseudonym_id);
    for (const auto& [_, b] : batches_) out.insert(b.pseudonym_id);
    return out;
}

std::uint64_t SeriesStore::total_readings() const {
    std::shared_lock lock(state_);
    std::uint64_t n = 0;
    for (const auto& [_, p] : partitions_) n += p.readings;
    return n;
}

void SeriesStore::compact_partition(const PartitionKey& key) {
    // Caller holds writer_.
    std::vector<SensorReading> all;
    std::uint64_t max_seq = 0;
    {
        std::shared_lock lock(state_);
        const auto& p = partitions_.at(key);
        all = read_partition(key, p, std::numeric_limits<TimestampMs>::min(), std::numeric_limits<TimestampMs>::max());
        max_seq = p.max_seq;
    }
    std::vector<const SensorReading*> ptrs;
    ptrs.reserve(all.size());
    for (const auto& r : all) ptrs.push_back(&r);
    Bytes out(kSegmentMagic, kSegmentMagic + sizeof kSegmentMagic);
    std::vector<std::pair<std::uint64_t, BlockHeader>> refs;
    encode_blocks(out, ptrs, max_seq, options_.block_target_bytes, 0, refs, true);
    auto path = segment_path(key);
    write_file_atomic(path, out, options_.fsync);

    std::unique_lock lock(state_);
    auto& p = partitions_.at(key);
    p.blocks.clear();
    for (const auto& [off, h] : refs) p.blocks.push_back({off, h.seq, h.count, h.ts_min, h.ts_max, h.payload_len, h.payload_crc});
    disk_bytes_ = disk_bytes_ - p.file_size + out.size();
    p.file_size = out.size();
    p.sorted = true;
}

void SeriesStore::compact_all() {
    std::lock_guard wlock(writer_);
    std::vector<PartitionKey> keys;
    {
        std::shared_lock lock(state_);
        for (const auto& [k, p] : partitions_)
            if (!p.sorted || p.blocks.size() > 1) keys.push_back(k);
    }
    for (const auto& k : keys) compact_partition(k);
}

void SeriesStore::rewrite_batches_log() {
    Bytes out;
    for (const auto& [id, e] : batches_) {
        auto rec = encode_batch_record(id, e.pseudonym_id, e.seq, e.count);
        out.insert(out.end(), rec.begin(), rec.end());
    }
    auto path = root_ / "batches.log";
    write_file_atomic(path, out, options_.fsync);
    ::close(batches_fd_);
    batches_fd_ = Fd(path, O_WRONLY | O_CREAT | O_APPEND).release();
}

SeriesStore::EraseReport SeriesStore::erase_pseudonym(const Id128& pseudonym_id) {
    std::lock_guard wlock(writer_);
    // Nothing for this pseudonym may survive in the WAL to be replayed later.
    write_manifest(last_seq_);
    if (::ftruncate(wal_fd_, 0) != 0) io_error("truncate wal.log", errno);
    disk_bytes_ -= wal_size_;
    wal_size_ = 0;

    EraseReport report;
    std::unique_lock lock(state_);
    for (auto it = partitions_.begin(); it != partitions_.end();) {
        if (it->first.pseudonym_id == pseudonym_id) {
            report.readings += it->second.readings;
            ++report.partitions;
            disk_bytes_ -= it->second.file_size;
            it = partitions_.erase(it);
        } else {
            ++it;
        }
    }
    for (auto it = batches_.begin(); it != batches_.end();) {
        if (it->second.pseudonym_id == pseudonym_id) {
            ++report.batches;
            it = batches_.erase(it);
        } else {
            ++it;
        }
    }
    std::error_code ec;
    fs::remove_all(root_ / pseudonym_id.hex(), ec);
    if (ec) throw Error(Errc::io_failure, "remove " + pseudonym_id.hex() + ": " + ec.message());
    if (report.batches) rewrite_batches_log();
    return report;
}

SeriesStore::VerifyReport SeriesStore::verify(const fs::path& root, const SensorCatalog& catalog) {
    VerifyReport report;
    if (!fs::is_directory(root)) {
        report.problems.push_back(root.string() + " is not a directory");
        return report;
    }
    auto manifest = read_file(root / "MANIFEST");
    if (!manifest.empty()) {
        try {
            auto j = nlohmann::json::parse(manifest.begin(), manifest.end());
            if (j.at("format") != "ilog-series-1") report.problems.push_back("MANIFEST: unknown format");
        } catch (const std::exception& e) {
            report.problems.push_back(std::string("MANIFEST: ") + e.what());
        }
    }
    for (auto it = fs::recursive_directory_iterator(root); it != fs::recursive_directory_iterator(); ++it) {
        if (!it->is_regular_file()) continue;
        auto key = parse_partition_path(fs::relative(it->path(), root));
        if (!key) continue;
        ++report.segments;
        auto name = fs::relative(it->path(), root).string();
        auto data = read_file(it->path());
        if (data.size() < sizeof kSegmentMagic || std::memcmp(data.data(), kSegmentMagic, sizeof kSegmentMagic) != 0) {
            report.problems.push_back(name + ": bad segment header");
            continue;
        }
        std::size_t pos = sizeof kSegmentMagic;
        while (pos < data.size()) {
            if (data.size() - pos < kBlockHeaderSize) {
                report.problems.push_back(name + ": truncated block header at " + std::to_string(pos));
                break;
            }
            auto h = decode_block_header(data.data() + pos);
            if (!h) {
                report.problems.push_back(name + ": bad block header at " + std::to_string(pos));
                break;
            }
            if (data.size() - pos - kBlockHeaderSize < h->payload_len) {
                report.problems.push_back(name + ": truncated block payload at " + std::to_string(pos));
                break;
            }
            ByteView payload(data.data() + pos + kBlockHeaderSize, h->payload_len);
            if (crc32_of(payload) != h->payload_crc) {
                report.problems.push_back(name + ": checksum mismatch at " + std::to_string(pos));
            } else {
                try {
                    auto rs = decode_records(payload, catalog);
                    if (rs.size() != h->count) report.problems.push_back(name + ": block count mismatch");
                    for (const auto& r : rs) {
                        if (r.sensor_id != key->sensor_id || Date::of(r.ts_ms) != key->day ||
                            r.ts_ms < h->ts_min || r.ts_ms > h->ts_max) {
                            report.problems.push_back(name + ": reading outside its partition or block range");
                            break;
                        }
                    }
                    report.readings += rs.size();
                } catch (const Error& e) {
                    report.problems.push_back(name + ": " + e.what());
                }
            }
            ++report.blocks;
            pos += kBlockHeaderSize + h->payload_len;
        }
    }
    auto blog = read_file(root / "batches.log");
    if (blog.size() % kBatchRecordSize != 0) report.problems.push_back("batches.log: torn tail");
    for (std::size_t pos = 0; pos + kBatchRecordSize <= blog.size(); pos += kBatchRecordSize) {
        if (get_le<std::uint32_t>(blog.data() + pos + 44) != crc32_of(ByteView(blog.data() + pos, 44)))
            report.problems.push_back("batches.log: checksum mismatch at " + std::to_string(pos));
        ++report.batches;
    }
    auto wal = read_file(root / "wal.log");
    auto valid = scan_wal(wal, catalog, [&](WalRecord&&) { ++report.wal_records; });
    if (valid != wal.size()) report.problems.push_back("wal.log: torn or corrupt tail at " + std::to_string(valid));
    return report;
}

}  // namespace ilog
