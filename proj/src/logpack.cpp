#include "ilog/logpack.hpp"
#include "ilog/crypto.hpp"
#include "ilog/error.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstring>

namespace ilog {

namespace {

void put_varint(Bytes& out, std::uint64_t v) {
    while (v >= 0x80) {
        out.push_back(static_cast<std::uint8_t>(v | 0x80));
        v >>= 7;
    }
    out.push_back(static_cast<std::uint8_t>(v));
}

std::size_t varint_size(std::uint64_t v) {
    std::size_t n = 1;
    while (v >= 0x80) {
        v >>= 7;
        ++n;
    }
    return n;
}

void put_le64(Bytes& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

[[noreturn]] void corrupt(const std::string& what) { throw Error(Errc::corrupt_payload, what); }

std::uint64_t get_varint(ByteView in, std::size_t& pos) {
    std::uint64_t v = 0;
    for (int shift = 0; shift < 64; shift += 7) {
        if (pos >= in.size()) corrupt("truncated varint");
        auto b = in[pos++];
        v |= static_cast<std::uint64_t>(b & 0x7f) << shift;
        if (!(b & 0x80)) return v;
    }
    corrupt("varint too long");
}

std::uint64_t get_le64(ByteView in, std::size_t& pos) {
    if (in.size() - pos < 8 || pos > in.size()) corrupt("truncated fixed64");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in[pos + i]) << (8 * i);
    pos += 8;
    return v;
}

template <typename T>
void put_be(std::uint8_t*& p, T v) {
    using U = std::make_unsigned_t<T>;
    auto u = static_cast<U>(v);
    for (int i = sizeof(T) - 1; i >= 0; --i) *p++ = static_cast<std::uint8_t>(u >> (8 * i));
}

template <typename T>
T get_be(const std::uint8_t*& p) {
    using U = std::make_unsigned_t<T>;
    U u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) u = static_cast<U>(u << 8) | *p++;
    return static_cast<T>(u);
}

Bytes compress(ByteView in) {
    uLongf cap = compressBound(static_cast<uLong>(in.size()));
    Bytes out(cap);
    if (compress2(out.data(), &cap, in.data(), static_cast<uLong>(in.size()),
                  Z_DEFAULT_COMPRESSION) != Z_OK)
        throw std::runtime_error("zlib compress failed");
    out.resize(cap);
    return out;
}

Bytes decompress(ByteView in, std::uint32_t expected_len) {
    if (expected_len > kMaxPlaintextLen) corrupt("plaintext_len exceeds limit");
    Bytes out(expected_len);
    uLongf len = expected_len;
    int rc = uncompress(out.data(), &len, in.data(), static_cast<uLong>(in.size()));
    if (rc != Z_OK || len != expected_len) corrupt("payload does not decompress to plaintext_len");
    return out;
}

}  // namespace

void validate_reading(const SensorReading& r, const SensorCatalog& catalog) {
    auto* spec = catalog.find(r.sensor_id);
    if (!spec)
        throw Error(Errc::validation_error, "unknown sensor id " + std::to_string(r.sensor_id));
    if (static_cast<int>(r.values.size()) != spec->value_arity)
        throw Error(Errc::arity_mismatch, spec->key + " expects " +
                                              std::to_string(spec->value_arity) + " values, got " +
                                              std::to_string(r.values.size()));
    if (r.ts_ms <= 0) throw Error(Errc::validation_error, "ts_ms must be positive");
    for (const auto& v : r.values) {
        bool ok = (spec->value_kind == ValueKind::numeric && std::holds_alternative<double>(v)) ||
                  (spec->value_kind == ValueKind::text && std::holds_alternative<std::string>(v)) ||
                  (spec->value_kind == ValueKind::boolean && std::holds_alternative<bool>(v));
        if (!ok) throw Error(Errc::validation_error, spec->key + ": value kind mismatch");
    }
}

std::size_t record_size(const SensorReading& r) {
    std::size_t n = varint_size(r.sensor_id) + 8;
    for (const auto& v : r.values) {
        if (std::holds_alternative<double>(v)) n += 8;
        else if (auto* s = std::get_if<std::string>(&v)) n += varint_size(s->size()) + s->size();
        else n += 1;
    }
    return n;
}

void encode_record(Bytes& out, const SensorReading& r) {
    put_varint(out, r.sensor_id);
    put_le64(out, static_cast<std::uint64_t>(r.ts_ms));
    for (const auto& v : r.values) {
        if (auto* d = std::get_if<double>(&v)) put_le64(out, std::bit_cast<std::uint64_t>(*d));
        else if (auto* s = std::get_if<std::string>(&v)) {
            put_varint(out, s->size());
            out.insert(out.end(), s->begin(), s->end());
        } else out.push_back(std::get<bool>(v) ? 1 : 0);
    }
}

SensorReading decode_record(ByteView in, std::size_t& pos, const SensorCatalog& catalog) {
    SensorReading r;
    auto id = get_varint(in, pos);
    auto* spec = id <= 0xffff ? catalog.find(static_cast<SensorId>(id)) : nullptr;
    if (!spec) corrupt("unknown sensor id " + std::to_string(id));
    r.sensor_id = spec->id;
    r.ts_ms = static_cast<TimestampMs>(get_le64(in, pos));
    r.values.reserve(spec->value_arity);
    for (int i = 0; i < spec->value_arity; ++i) {
        switch (spec->value_kind) {
            case ValueKind::numeric:
                r.values.emplace_back(std::bit_cast<double>(get_le64(in, pos)));
                break;
            case ValueKind::text: {
                auto len = get_varint(in, pos);
                if (len > in.size() - pos) corrupt("truncated text value");
                r.values.emplace_back(std::string(reinterpret_cast<const char*>(in.data() + pos), len));
                pos += len;
                break;
            }
            case ValueKind::boolean:
                if (pos >= in.size()) corrupt("truncated boolean value");
                if (in[pos] > 1) corrupt("boolean byte out of range");
                r.values.emplace_back(in[pos++] == 1);
                break;
        }
    }
    return r;
}

Bytes encode_records(std::span<const SensorReading> readings) {
    std::size_t total = 0;
    for (const auto& r : readings) total += record_size(r);
    Bytes out;
    out.reserve(total);
    for (const auto& r : readings) encode_record(out, r);
    return out;
}

std::vector<SensorReading> decode_records(ByteView in, const SensorCatalog& catalog) {
    std::vector<SensorReading> out;
    std::size_t pos = 0;
    while (pos < in.size()) out.push_back(decode_record(in, pos, catalog));
    return out;
}

ReadingBuffer::Append ReadingBuffer::append(SensorReading reading, const StudyConfig& config,
                                            const SensorCatalog& catalog) {
    validate_reading(reading, catalog);
    byte_estimate_ += record_size(reading);
    pending_.push_back(std::move(reading));
    return static_cast<std::int64_t>(byte_estimate_) >= config.chunk_target_bytes
               ? Append::seal_requested
               : Append::buffered;
}

std::vector<SensorReading> ReadingBuffer::take(TimestampMs reopened_at) {
    std::vector<SensorReading> out;
    out.swap(pending_);
    byte_estimate_ = 0;
    opened_at_ = reopened_at;
    return out;
}

std::array<std::uint8_t, kChunkHeaderSize> ChunkHeader::serialize() const {
    std::array<std::uint8_t, kChunkHeaderSize> out{};
    auto* p = out.data();
    std::memcpy(p, kChunkMagic.data(), 4);
    p += 4;
    std::memcpy(p, chunk_id.bytes.data(), 16);
    p += 16;
    std::memcpy(p, pseudonym_id.bytes.data(), 16);
    p += 16;
    put_be<std::uint32_t>(p, reading_count);
    put_be<std::int64_t>(p, ts_min);
    put_be<std::int64_t>(p, ts_max);
    put_be<std::uint32_t>(p, plaintext_len);
    std::memcpy(p, nonce.bytes.data(), 12);
    return out;
}

Bytes LogChunk::serialize() const {
    auto head = header.serialize();
    Bytes out;
    out.reserve(head.size() + ciphertext.size() + auth_tag.size());
    out.insert(out.end(), head.begin(), head.end());
    out.insert(out.end(), ciphertext.begin(), ciphertext.end());
    out.insert(out.end(), auth_tag.begin(), auth_tag.end());
    return out;
}

LogChunk LogChunk::parse(ByteView file) {
    if (file.size() < kChunkHeaderSize + kChunkTagSize)
        throw Error(Errc::auth_failure, "chunk too short to authenticate");
    if (std::memcmp(file.data(), kChunkMagic.data(), 4) != 0)
        throw Error(Errc::auth_failure, "bad magic");
    LogChunk c;
    const auto* p = file.data() + 4;
    std::memcpy(c.header.chunk_id.bytes.data(), p, 16);
    p += 16;
    std::memcpy(c.header.pseudonym_id.bytes.data(), p, 16);
    p += 16;
    c.header.reading_count = get_be<std::uint32_t>(p);
    c.header.ts_min = get_be<std::int64_t>(p);
    c.header.ts_max = get_be<std::int64_t>(p);
    c.header.plaintext_len = get_be<std::uint32_t>(p);
    std::memcpy(c.header.nonce.bytes.data(), p, 12);
    auto body = file.subspan(kChunkHeaderSize, file.size() - kChunkHeaderSize - kChunkTagSize);
    c.ciphertext.assign(body.begin(), body.end());
    std::memcpy(c.auth_tag.data(), file.data() + file.size() - kChunkTagSize, kChunkTagSize);
    return c;
}

namespace detail {
LogChunk seal_plaintext(ChunkHeader header, ByteView plaintext, const Key256& key) {
    if (plaintext.size() > kMaxPlaintextLen)
        throw Error(Errc::validation_error, "chunk plaintext exceeds limit");
    header.plaintext_len = static_cast<std::uint32_t>(plaintext.size());
    header.nonce = crypto::random_fixed<Nonce96>();
    LogChunk chunk;
    chunk.header = header;
    auto aad = header.serialize();
    auto packed = compress(plaintext);
    chunk.ciphertext = crypto::aes256gcm_seal(key, header.nonce, aad, packed, chunk.auth_tag);
    return chunk;
}
}  // namespace detail

LogChunk seal_chunk(ReadingBuffer& buffer, const Key256& key) {
    if (buffer.empty()) throw Error(Errc::empty_buffer, "nothing to seal");
    auto readings = buffer.take();
    std::stable_sort(readings.begin(), readings.end(), reading_order);
    ChunkHeader header;
    header.chunk_id = crypto::random_fixed<Id128>();
    header.pseudonym_id = buffer.pseudonym_id();
    header.reading_count = static_cast<std::uint32_t>(readings.size());
    header.ts_min = readings.front().ts_ms;
    header.ts_max = readings.back().ts_ms;
    auto plaintext = encode_records(readings);
    return detail::seal_plaintext(header, plaintext, key);
}

namespace {
Bytes authenticate(const LogChunk& chunk, const Key256& key) {
    auto aad = chunk.header.serialize();
    auto packed = crypto::aes256gcm_open(key, chunk.header.nonce, aad, chunk.ciphertext,
                                         chunk.auth_tag);
    if (!packed) throw Error(Errc::auth_failure, "authentication tag mismatch");
    return decompress(*packed, chunk.header.plaintext_len);
}
}  // namespace

std::vector<SensorReading> open_chunk(const LogChunk& chunk, const Key256& key,
                                      const SensorCatalog& catalog) {
    auto plaintext = authenticate(chunk, key);
    auto readings = decode_records(plaintext, catalog);
    const auto& h = chunk.header;
    if (readings.size() != h.reading_count)
        throw Error(Errc::count_mismatch, "header says " + std::to_string(h.reading_count) +
                                              " readings, payload has " +
                                              std::to_string(readings.size()));
    for (const auto& r : readings)
        if (r.ts_ms < h.ts_min || r.ts_ms > h.ts_max) corrupt("reading outside header time range");
    return readings;
}

std::vector<SensorReading> open_chunk(ByteView file, const Key256& key,
                                      const SensorCatalog& catalog) {
    return open_chunk(LogChunk::parse(file), key, catalog);
}

ChunkSummary verify_chunk(const LogChunk& chunk, const Key256& key, const SensorCatalog& catalog) {
    auto plaintext = authenticate(chunk, key);
    const auto& h = chunk.header;
    std::size_t pos = 0;
    std::uint32_t count = 0;
    while (pos < plaintext.size()) {
        auto r = decode_record(plaintext, pos, catalog);
        if (r.ts_ms < h.ts_min || r.ts_ms > h.ts_max) corrupt("reading outside header time range");
        ++count;
    }
    if (count != h.reading_count)
        throw Error(Errc::count_mismatch, "header says " + std::to_string(h.reading_count) +
                                              " readings, payload has " + std::to_string(count));
    return {h.chunk_id, h.pseudonym_id, count, h.ts_min, h.ts_max};
}

}  // namespace ilog
