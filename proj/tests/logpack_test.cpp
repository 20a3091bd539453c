#include "ilog/crypto.hpp"
#include "ilog/logpack.hpp"
#include "generators.hpp"
#include "support.hpp"

#include <algorithm>
#include <cmath>
#include <set>

using namespace ilog;
using namespace ilog::test;

namespace {

const TimestampMs kT0 = Date::from_ymd(2019, 1, 28).start_ms();

StudyConfig target_config(std::int64_t bytes) {
    StudyConfig c;
    c.chunk_target_bytes = bytes;
    return c;
}

Key256 key_a() {
    Key256 k;
    for (std::size_t i = 0; i < k.bytes.size(); ++i) k.bytes[i] = static_cast<std::uint8_t>(i);
    return k;
}

ReadingBuffer buffer_with(std::vector<SensorReading> rs) {
    ReadingBuffer b(Id128{{1, 2, 3}});
    auto big = target_config(1 << 30);
    for (auto& r : rs) b.append(std::move(r), big);
    return b;
}

}  // namespace

TEST_SUITE("logpack") {

TEST_CASE("record layout is byte-exact") {
    Bytes out;
    encode_record(out, accel(1, 1.0, 2.0, -0.5));
    CHECK(to_hex(out) ==
          "01"                  // sensor id varint
          "0100000000000000"    // ts_ms LE
          "000000000000f03f"    // 1.0
          "0000000000000040"    // 2.0
          "000000000000e0bf");  // -0.5
    out.clear();
    encode_record(out, {13, 0x0102, {std::string("ab")}});
    CHECK(to_hex(out) == "0d" "0201000000000000" "02" "6162");
    out.clear();
    encode_record(out, {11, 2, {true}});
    CHECK(to_hex(out) == "0b" "0200000000000000" "01");
    out.clear();
    encode_record(out, {300, 2, {}});  // varint of a two-byte id
    CHECK(to_hex(out).substr(0, 4) == "ac02");
}

TEST_CASE("header layout is byte-exact") {
    ChunkHeader h;
    h.chunk_id.bytes.fill(0xaa);
    h.pseudonym_id.bytes.fill(0xbb);
    h.reading_count = 3;
    h.ts_min = 0x0102030405060708;
    h.ts_max = 0x0102030405060709;
    h.plaintext_len = 0x10;
    h.nonce.bytes.fill(0xcc);
    auto hex = to_hex(h.serialize());
    CHECK(hex.substr(0, 8) == "494c4731");
    CHECK(hex.substr(8, 32) == std::string(32, 'a'));
    CHECK(hex.substr(40, 32) == std::string(32, 'b'));
    CHECK(hex.substr(72, 8) == "00000003");
    CHECK(hex.substr(80, 16) == "0102030405060708");
    CHECK(hex.substr(96, 16) == "0102030405060709");
    CHECK(hex.substr(112, 8) == "00000010");
    CHECK(hex.substr(120) == std::string(24, 'c'));
    CHECK(kChunkHeaderSize == 72);
}

TEST_CASE("append_reading") {
    ReadingBuffer b(Id128{});
    CHECK(b.append(accel(kT0 + 1), target_config(1 << 20)) == ReadingBuffer::Append::buffered);
    CHECK(b.size() == 1);
    CHECK(b.byte_estimate() == record_size(accel(1)));

    SUBCASE("threshold crossing requests a seal including the reading") {
        auto target = static_cast<std::int64_t>(b.byte_estimate()) + 1;  // buffer sits at target - 1
        CHECK(b.append(accel(kT0 + 2), target_config(target)) == ReadingBuffer::Append::seal_requested);
        CHECK(b.size() == 2);
    }
    SUBCASE("arity mismatch") {
        CHECK_ERRC(b.append({1, kT0, {1.0, 2.0}}, target_config(1 << 20)), Errc::arity_mismatch);
        CHECK(b.size() == 1);
    }
    SUBCASE("kind mismatch and bad timestamps") {
        CHECK_ERRC(b.append({11, kT0, {1.0}}, target_config(1 << 20)), Errc::validation_error);
        CHECK_ERRC(b.append(accel(0), target_config(1 << 20)), Errc::validation_error);
    }
}

TEST_CASE("seal_chunk header bookkeeping") {
    auto b = buffer_with({accel(kT0 + 50), accel(kT0 + 10), accel(kT0 + 30)});
    auto chunk = seal_chunk(b, key_a());
    CHECK(b.empty());
    CHECK(chunk.header.reading_count == 3);
    CHECK(chunk.header.ts_min == kT0 + 10);
    CHECK(chunk.header.ts_max == kT0 + 50);
    CHECK(chunk.header.plaintext_len == 3 * 33);
    CHECK(chunk.header.pseudonym_id == Id128{{1, 2, 3}});
    CHECK_ERRC(seal_chunk(b, key_a()), Errc::empty_buffer);

    auto b2 = buffer_with({accel(kT0 + 1)});
    auto chunk2 = seal_chunk(b2, key_a());
    CHECK(chunk.header.chunk_id != chunk2.header.chunk_id);
    CHECK(chunk.header.nonce != chunk2.header.nonce);
}

TEST_CASE("open_chunk round trip returns sorted readings") {
    std::mt19937_64 rng(42);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<SensorReading> rs;
        auto n = 1 + rng() % 300;
        for (std::size_t i = 0; i < n; ++i) rs.push_back(random_reading(rng, kT0, kMsPerDay));
        auto b = buffer_with(rs);
        auto file = seal_chunk(b, key_a()).serialize();
        auto opened = open_chunk(ByteView(file), key_a());
        std::stable_sort(rs.begin(), rs.end(), reading_order);
        CHECK(opened == rs);
    }
}

TEST_CASE("authentication failures") {
    auto b = buffer_with({accel(kT0 + 1), accel(kT0 + 2), {11, kT0 + 3, {true}}});
    auto chunk = seal_chunk(b, key_a());
    auto file = chunk.serialize();

    Key256 other = key_a();
    other.bytes[0] ^= 1;
    CHECK_ERRC(open_chunk(chunk, other), Errc::auth_failure);

    auto flipped = file;
    flipped[kChunkHeaderSize + 7] ^= 0x01;  // ciphertext byte 7
    CHECK_ERRC(open_chunk(ByteView(flipped), key_a()), Errc::auth_failure);

    Bytes header_only(file.begin(), file.begin() + kChunkHeaderSize);
    CHECK_ERRC(open_chunk(ByteView(header_only), key_a()), Errc::auth_failure);
    CHECK_ERRC(verify_chunk(LogChunk::parse(file), other), Errc::auth_failure);

    // Re-attributing a chunk to another pseudonym breaks the header binding.
    auto moved = chunk;
    moved.header.pseudonym_id.bytes[0] ^= 0xff;
    CHECK_ERRC(open_chunk(moved, key_a()), Errc::auth_failure);
}

TEST_CASE("every single-bit flip of a small chunk fails authentication") {
    std::mt19937_64 rng(3);
    std::vector<SensorReading> rs;
    for (int i = 0; i < 12; ++i) rs.push_back(random_reading(rng, kT0, kMsPerHour));
    auto b = buffer_with(rs);
    auto file = seal_chunk(b, key_a()).serialize();
    REQUIRE(file.size() <= 1024);
    std::size_t failures = 0;
    for (std::size_t bit = 0; bit < file.size() * 8; ++bit) {
        auto copy = file;
        copy[bit / 8] ^= static_cast<std::uint8_t>(1u << (bit % 8));
        if (error_of([&] { open_chunk(ByteView(copy), key_a()); }) == Errc::auth_failure) ++failures;
    }
    CHECK(failures == file.size() * 8);
}

TEST_CASE("authenticated but inconsistent payloads") {
    ChunkHeader h;
    h.chunk_id = crypto::random_fixed<Id128>();
    std::vector<SensorReading> rs = {accel(kT0 + 5), accel(kT0 + 500)};
    auto plaintext = encode_records(rs);

    SUBCASE("reading outside the header range") {
        h.reading_count = 2;
        h.ts_min = kT0;
        h.ts_max = kT0 + 100;
        auto chunk = detail::seal_plaintext(h, plaintext, key_a());
        CHECK_ERRC(open_chunk(chunk, key_a()), Errc::corrupt_payload);
        CHECK_ERRC(verify_chunk(chunk, key_a()), Errc::corrupt_payload);
    }
    SUBCASE("count disagrees with the header") {
        h.reading_count = 3;
        h.ts_min = kT0;
        h.ts_max = kT0 + 1000;
        auto chunk = detail::seal_plaintext(h, plaintext, key_a());
        CHECK_ERRC(open_chunk(chunk, key_a()), Errc::count_mismatch);
    }
    SUBCASE("garbage record bytes") {
        h.reading_count = 1;
        Bytes junk = {0x7f, 0x01};
        auto chunk = detail::seal_plaintext(h, junk, key_a());
        CHECK_ERRC(open_chunk(chunk, key_a()), Errc::corrupt_payload);
    }
    SUBCASE("verify reports header-consistent summary for a valid chunk") {
        auto b = buffer_with(rs);
        auto chunk = seal_chunk(b, key_a());
        auto summary = verify_chunk(chunk, key_a());
        CHECK(summary.reading_count == 2);
        CHECK(summary.ts_min == kT0 + 5);
        CHECK(summary.ts_max == kT0 + 500);
    }
}

TEST_CASE("plaintext stays within target plus one record") {
    std::mt19937_64 rng(11);
    auto cfg = target_config(4096);
    std::size_t max_record = 0;
    for (int round = 0; round < 40; ++round) {
        ReadingBuffer b(Id128{});
        while (true) {
            auto r = random_reading(rng, kT0, kMsPerDay);
            max_record = std::max(max_record, record_size(r));
            if (b.append(std::move(r), cfg) == ReadingBuffer::Append::seal_requested) break;
        }
        auto chunk = seal_chunk(b, key_a());
        CHECK(chunk.header.plaintext_len <= cfg.chunk_target_bytes + max_record);
    }
}

TEST_CASE("nonces stay unique across many seals with one key") {
    std::set<Nonce96> nonces;
    std::set<Id128> ids;
    ReadingBuffer b(Id128{});
    auto cfg = target_config(1 << 20);
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
        b.append(accel(kT0 + i), cfg);
        auto c = seal_chunk(b, key_a());
        nonces.insert(c.header.nonce);
        ids.insert(c.header.chunk_id);
    }
    CHECK(nonces.size() == n);
    CHECK(ids.size() == n);
}

TEST_CASE("a simulated 20 Hz day compresses") {
    const std::size_t n = 1'728'000;
    ReadingBuffer b(Id128{});
    auto cfg = target_config(std::int64_t{1} << 40);
    std::mt19937_64 rng(2019);
    std::normal_distribution<double> noise(0.0, 0.01);
    for (std::size_t i = 0; i < n; ++i) {
        auto t = static_cast<double>(i) / 20.0;
        double slow = std::sin(t / 600.0);
        // Quantized like a real accelerometer (1/256 g steps).
        auto q = [](double v) { return std::round(v * 256.0) / 256.0; };
        b.append(accel(kT0 + static_cast<TimestampMs>(i) * 50, q(slow + noise(rng)),
                       q(0.5 * slow + noise(rng)), q(9.81 + noise(rng))),
                 cfg);
    }
    auto chunk = seal_chunk(b, key_a());
    CHECK(chunk.header.reading_count == n);
    CHECK(chunk.header.plaintext_len == n * 33);  // 57,024,000 bytes
    CHECK(chunk.ciphertext.size() < chunk.header.plaintext_len);
    auto summary = verify_chunk(chunk, key_a());
    CHECK(summary.reading_count == n);
}

}
