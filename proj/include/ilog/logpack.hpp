#pragma once

#include "ilog/bytes.hpp"
#include "ilog/study.hpp"
#include "ilog/time.hpp"

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace ilog {

using Value = std::variant<double, std::string, bool>;

struct SensorReading {
    SensorId sensor_id = 0;
    TimestampMs ts_ms = 0;
    std::vector<Value> values;

    friend bool operator==(const SensorReading&, const SensorReading&) = default;
};

/// Throws ArityMismatch when the value count differs from the catalog arity,
/// ValidationError for unknown sensors, wrong value kinds or ts_ms <= 0.
void validate_reading(const SensorReading& r, const SensorCatalog& catalog = SensorCatalog::builtin());

/// Record layout: LEB128 sensor_id, 8-byte LE ts_ms, then per value an 8-byte
/// LE double, a LEB128 length + UTF-8 bytes, or a single 0/1 byte.
std::size_t record_size(const SensorReading& r);
void encode_record(Bytes& out, const SensorReading& r);
/// Decodes one record starting at `pos`, advancing it. Throws CorruptPayload.
SensorReading decode_record(ByteView in, std::size_t& pos,
                            const SensorCatalog& catalog = SensorCatalog::builtin());

Bytes encode_records(std::span<const SensorReading> readings);
std::vector<SensorReading> decode_records(ByteView in,
                                          const SensorCatalog& catalog = SensorCatalog::builtin());

/// Strict weak order used everywhere readings are sorted: (ts_ms, sensor_id).
inline bool reading_order(const SensorReading& a, const SensorReading& b) {
    if (a.ts_ms != b.ts_ms) return a.ts_ms < b.ts_ms;
    return a.sensor_id < b.sensor_id;
}

class ReadingBuffer {
public:
    enum class Append { buffered, seal_requested };

    explicit ReadingBuffer(Id128 pseudonym_id, TimestampMs opened_at = 0)
        : pseudonym_id_(pseudonym_id), opened_at_(opened_at) {}

    /// Appends a validated reading. Returns seal_requested once the running
    /// serialized size reaches the config's chunk target; the reading that
    /// crossed the threshold is part of the batch to seal.
    Append append(SensorReading reading, const StudyConfig& config,
                  const SensorCatalog& catalog = SensorCatalog::builtin());

    const Id128& pseudonym_id() const { return pseudonym_id_; }
    const std::vector<SensorReading>& pending() const { return pending_; }
    std::size_t byte_estimate() const { return byte_estimate_; }
    TimestampMs opened_at() const { return opened_at_; }
    bool empty() const { return pending_.empty(); }
    std::size_t size() const { return pending_.size(); }

    /// Moves the pending readings out and resets the buffer.
    std::vector<SensorReading> take(TimestampMs reopened_at = 0);

private:
    Id128 pseudonym_id_;
    TimestampMs opened_at_;
    std::vector<SensorReading> pending_;
    std::size_t byte_estimate_ = 0;
};

inline constexpr std::array<char, 4> kChunkMagic = {'I', 'L', 'G', '1'};
inline constexpr std::size_t kChunkHeaderSize = 4 + 16 + 16 + 4 + 8 + 8 + 4 + 12;
inline constexpr std::size_t kChunkTagSize = 16;
inline constexpr std::uint32_t kMaxPlaintextLen = 512u << 20;

struct ChunkHeader {
    Id128 chunk_id;
    Id128 pseudonym_id;
    std::uint32_t reading_count = 0;
    TimestampMs ts_min = 0;
    TimestampMs ts_max = 0;
    std::uint32_t plaintext_len = 0;
    Nonce96 nonce;

    /// Big-endian, fields in declaration order, prefixed by the magic.
    std::array<std::uint8_t, kChunkHeaderSize> serialize() const;
};

struct LogChunk {
    ChunkHeader header;
    Bytes ciphertext;
    std::array<std::uint8_t, kChunkTagSize> auth_tag{};

    /// header || ciphertext || tag
    Bytes serialize() const;
    /// Splits a chunk file into its parts. Anything that cannot be a chunk
    /// (too short, wrong magic) fails as AuthFailure: nothing about the
    /// bytes can be trusted before the tag is checked.
    static LogChunk parse(ByteView file);
};

/// Sorts, serializes, compresses and encrypts the buffer's readings. The
/// buffer is left empty. Throws EmptyBuffer.
LogChunk seal_chunk(ReadingBuffer& buffer, const Key256& key);

/// Authenticates, then decompresses and decodes. Throws AuthFailure,
/// CorruptPayload or CountMismatch.
std::vector<SensorReading> open_chunk(const LogChunk& chunk, const Key256& key,
                                      const SensorCatalog& catalog = SensorCatalog::builtin());
std::vector<SensorReading> open_chunk(ByteView file, const Key256& key,
                                      const SensorCatalog& catalog = SensorCatalog::builtin());

struct ChunkSummary {
    Id128 chunk_id;
    Id128 pseudonym_id;
    std::uint32_t reading_count = 0;
    TimestampMs ts_min = 0;
    TimestampMs ts_max = 0;
};

/// open_chunk without keeping the readings.
ChunkSummary verify_chunk(const LogChunk& chunk, const Key256& key,
                          const SensorCatalog& catalog = SensorCatalog::builtin());

namespace detail {
/// Compresses and encrypts an arbitrary plaintext under the given header
/// (nonce and plaintext_len are filled in). The header is trusted as-is,
/// which lets tests build chunks whose payload contradicts it.
LogChunk seal_plaintext(ChunkHeader header, ByteView plaintext, const Key256& key);
}  // namespace detail

}  // namespace ilog
