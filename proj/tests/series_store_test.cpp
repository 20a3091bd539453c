#include "ilog/series_store.hpp"
#include "crash_harness.hpp"
#include "generators.hpp"
#include "support.hpp"

#include <algorithm>
#include <fstream>

using namespace ilog;
using namespace ilog::test;

namespace {

Id128 pid(std::uint8_t n) {
    Id128 id;
    id.bytes[0] = n;
    return id;
}
Id128 bid(std::uint32_t n) {
    Id128 id;
    id.bytes[15] = 0xbb;
    std::memcpy(id.bytes.data(), &n, sizeof n);
    return id;
}

const TimestampMs kDay = Date::from_ymd(2019, 1, 28).start_ms();

std::vector<SensorReading> oracle(const std::vector<std::pair<Id128, SensorReading>>& all, const Id128& p,
                                  SensorId s, TimestampMs t0, TimestampMs t1) {
    std::vector<SensorReading> out;
    for (auto& [who, r] : all)
        if (who == p && r.sensor_id == s && r.ts_ms >= t0 && r.ts_ms < t1) out.push_back(r);
    std::stable_sort(out.begin(), out.end(), [](auto& a, auto& b) { return a.ts_ms < b.ts_ms; });
    return out;
}

}  // namespace

TEST_SUITE("series_store") {

TEST_CASE("batch across midnight splits into two day partitions") {
    TempDir dir;
    SeriesStore store(dir.path());
    std::vector<SensorReading> rs = {accel(kDay + kMsPerDay - 1000), accel(kDay + kMsPerDay + 1000)};
    auto counts = store.write_batch(rs, pid(1));
    REQUIRE(counts.size() == 2);
    CHECK(counts.at({pid(1), 1, Date::of(kDay)}) == 1);
    CHECK(counts.at({pid(1), 1, Date::of(kDay).next()}) == 1);
    CHECK(std::filesystem::exists(dir / (pid(1).hex() + "/1/2019-01-28.seg")));
    CHECK(std::filesystem::exists(dir / (pid(1).hex() + "/1/2019-01-29.seg")));
}

TEST_CASE("empty batch is a no-op") {
    TempDir dir;
    SeriesStore store(dir.path());
    CHECK(store.write_batch({}, pid(1), bid(1)).empty());
    CHECK(store.partitions().empty());
    CHECK_FALSE(store.has_batch(bid(1)));
}

TEST_CASE("invalid readings reject the whole batch") {
    TempDir dir;
    SeriesStore store(dir.path());
    std::vector<SensorReading> rs = {accel(kDay), {1, kDay + 1, {1.0}}};
    CHECK_ERRC(store.write_batch(rs, pid(1)), Errc::arity_mismatch);
    CHECK(store.total_readings() == 0);
    rs = {accel(kDay), {999, kDay + 1, {1.0}}};
    CHECK_ERRC(store.write_batch(rs, pid(1)), Errc::validation_error);
    CHECK(store.total_readings() == 0);
}

TEST_CASE("unsorted input is returned sorted with arrival order for ties") {
    TempDir dir;
    SeriesStore store(dir.path());
    std::vector<SensorReading> rs = {accel(kDay + 30, 3), accel(kDay + 10, 1), accel(kDay + 30, 4), accel(kDay + 20, 2)};
    store.write_batch(rs, pid(1));
    store.write_batch(std::vector{accel(kDay + 15, 9), accel(kDay + 30, 5)}, pid(1));
    auto got = store.query_range(pid(1), 1, kDay, kDay + 100);
    std::vector<double> xs;
    for (auto& r : got) xs.push_back(std::get<double>(r.values[0]));
    CHECK(xs == std::vector<double>{1, 9, 2, 3, 4, 5});
}

TEST_CASE("empty and inverted ranges") {
    TempDir dir;
    SeriesStore store(dir.path());
    store.write_batch(std::vector{accel(kDay + 5)}, pid(1));
    CHECK(store.query_range(pid(1), 1, kDay + 5, kDay + 5).empty());
    CHECK(store.query_range(pid(1), 1, kDay + 6, kDay + 5).empty());
    CHECK(store.query_range(pid(1), 1, kDay + 5, kDay + 6).size() == 1);
    CHECK(store.query_range(pid(2), 1, kDay, kDay + kMsPerDay).empty());
    CHECK(store.query_range(pid(1), 2, kDay, kDay + kMsPerDay).empty());
}

TEST_CASE("full 20 Hz day") {
    TempDir dir;
    SeriesStore store(dir.path());
    std::vector<SensorReading> batch;
    for (TimestampMs ts = kDay; ts < kDay + kMsPerDay; ts += 50) {
        batch.push_back(accel(ts));
        if (batch.size() == 36'000) {  // 30 min of data per upload
            store.write_batch(batch, pid(1));
            batch.clear();
        }
    }
    CHECK(store.count_range(pid(1), 1, kDay, kDay + kMsPerDay) == 1'728'000);
    CHECK(store.count_range(pid(1), 1, kDay, kDay + kMsPerHour) == 72'000);
    CHECK(store.count_range(pid(1), 1, kDay + 25, kDay + 125) == 2);
    CHECK(store.coverage_hours(pid(1), 1, Date::of(kDay)) == 24);
    auto q = store.query_range(pid(1), 1, kDay + 12 * kMsPerHour, kDay + 12 * kMsPerHour + 1000);
    REQUIRE(q.size() == 20);
    CHECK(q.front().ts_ms == kDay + 12 * kMsPerHour);
}

TEST_CASE("coverage hours") {
    TempDir dir;
    SeriesStore store(dir.path());
    auto d = Date::of(kDay);
    store.write_batch(std::vector{accel(kDay + 3 * kMsPerHour + 5), accel(kDay + 3 * kMsPerHour + 10),
                                  accel(kDay + 17 * kMsPerHour)},
                      pid(1));
    CHECK(store.coverage_hours(pid(1), 1, d) == 2);
    CHECK(store.coverage_hours(pid(1), 1, d.next()) == 0);
    CHECK(store.coverage_hours(pid(2), 1, d) == 0);
    store.write_batch(std::vector{accel(kDay + 23 * kMsPerHour)}, pid(1));
    CHECK(store.coverage_hours(pid(1), 1, d) == 3);
    {
        SeriesStore reopened(dir.path());  // mask recomputed from blocks
        (void)reopened;
    }
}

TEST_CASE("coverage survives reopen") {
    TempDir dir;
    auto d = Date::of(kDay);
    {
        SeriesStore store(dir.path(), {.block_target_bytes = 256});
        std::vector<SensorReading> rs;
        for (int h = 0; h < 24; h += 2) rs.push_back(accel(kDay + h * kMsPerHour + 59 * kMsPerMinute));
        for (int h = 0; h < 24; h += 2) rs.push_back(accel(kDay + (h + 1) * kMsPerHour));
        store.write_batch(rs, pid(1));
    }
    SeriesStore store(dir.path());
    CHECK(store.coverage_hours(pid(1), 1, d) == 24);
}

TEST_CASE("random queries match a brute-force oracle") {
    TempDir dir;
    std::mt19937_64 rng(4242);
    std::vector<std::pair<Id128, SensorReading>> all;
    const TimestampMs span = 3 * kMsPerDay;
    StoreOptions opt{.block_target_bytes = 512, .compact_after_blocks = 8};
    {
        SeriesStore store(dir.path(), opt);
        std::uint32_t b = 0;
        while (all.size() < 10'000) {
            auto who = pid(static_cast<std::uint8_t>(1 + rng() % 3));
            std::vector<SensorReading> batch(1 + rng() % 400);
            for (auto& r : batch) {
                r = random_reading(rng, kDay, span);
                r.sensor_id = static_cast<SensorId>(r.sensor_id % 4 + 1);  // 1..4, all arity 3 numeric
                r.values = {random_value(rng, ValueKind::numeric), 1.0, 2.0};
                all.emplace_back(who, r);
            }
            store.write_batch(batch, who, bid(b++));
        }
        CHECK(store.total_readings() == all.size());
    }
    for (int reopen = 0; reopen < 2; ++reopen) {
        SeriesStore store(dir.path(), opt);
        if (reopen) store.compact_all();
        for (int q = 0; q < 100; ++q) {
            auto who = pid(static_cast<std::uint8_t>(1 + rng() % 3));
            auto s = static_cast<SensorId>(1 + rng() % 4);
            TimestampMs a = kDay - kMsPerHour + static_cast<TimestampMs>(rng() % (span + 2 * kMsPerHour));
            TimestampMs len = static_cast<TimestampMs>(rng() % (q % 2 ? kMsPerHour : span));
            auto want = oracle(all, who, s, a, a + len);
            auto got = store.query_range(who, s, a, a + len);
            CHECK(got == want);
            CHECK(store.count_range(who, s, a, a + len) == want.size());
        }
        for (std::uint8_t p = 1; p <= 3; ++p)
            for (SensorId s = 1; s <= 4; ++s)
                for (int d = 0; d < 3; ++d) {
                    auto day = Date::of(kDay + d * kMsPerDay);
                    std::set<int> hours;
                    for (auto& r : oracle(all, pid(p), s, day.start_ms(), day.next().start_ms()))
                        hours.insert(utc_hour(r.ts_ms));
                    CHECK(store.coverage_hours(pid(p), s, day) == static_cast<int>(hours.size()));
                }
    }
}

TEST_CASE("batch ids are persisted and deduplicated") {
    TempDir dir;
    {
        SeriesStore store(dir.path());
        store.write_batch(std::vector{accel(kDay)}, pid(1), bid(7));
        CHECK(store.has_batch(bid(7)));
        CHECK(store.write_batch(std::vector{accel(kDay)}, pid(1), bid(7)).empty());
        CHECK(store.total_readings() == 1);
    }
    SeriesStore store(dir.path());
    CHECK(store.has_batch(bid(7)));
    CHECK_FALSE(store.has_batch(bid(8)));
    CHECK(store.batch_count(pid(1)) == 1);
    store.write_batch(std::vector{accel(kDay)}, pid(1), bid(7));
    CHECK(store.total_readings() == 1);
}

TEST_CASE("torn tails are repaired on open") {
    TempDir dir;
    auto seg = dir / (pid(1).hex() + "/1/2019-01-28.seg");
    std::uintmax_t good = 0;
    {
        SeriesStore store(dir.path());
        store.write_batch(std::vector{accel(kDay), accel(kDay + 1)}, pid(1), bid(1));
        store.checkpoint();
        good = std::filesystem::file_size(seg);
    }
    {
        std::ofstream f(seg, std::ios::app | std::ios::binary);
        f << "BLK1garbage-that-is-not-a-block";
    }
    {
        std::ofstream f(dir / "wal.log", std::ios::app | std::ios::binary);
        f << "\x40\x00\x00\x00half";
    }
    {
        std::ofstream f(dir / "batches.log", std::ios::app | std::ios::binary);
        f << "short";
    }
    CHECK_FALSE(SeriesStore::verify(dir.path()).ok());
    SeriesStore store(dir.path());
    CHECK(std::filesystem::file_size(seg) == good);
    CHECK(std::filesystem::file_size(dir / "wal.log") == 0);
    CHECK(store.count_range(pid(1), 1, kDay, kDay + 10) == 2);
    CHECK(store.has_batch(bid(1)));
    CHECK(SeriesStore::verify(dir.path()).ok());
}

TEST_CASE("segment lost after WAL append is replayed") {
    TempDir dir;
    {
        SeriesStore store(dir.path());
        store.write_batch(std::vector{accel(kDay)}, pid(1), bid(1));
        store.checkpoint();
        store.write_batch(std::vector{accel(kDay + 5), accel(kDay + kMsPerDay)}, pid(1), bid(2));
        // Simulate a crash between WAL and segment writes: drop the newer blocks.
        std::filesystem::copy_file(dir / "wal.log", dir / "wal.keep");
    }
    std::filesystem::remove_all(dir / pid(1).hex());
    std::filesystem::rename(dir / "wal.keep", dir / "wal.log");
    std::ofstream(dir / "MANIFEST") << R"({"format":"ilog-series-1","checkpoint_seq":0})";
    SeriesStore store(dir.path());
    // seq 1 is no longer in the WAL, so only batch 2 comes back.
    CHECK(store.count_range(pid(1), 1, kDay, kDay + 2 * kMsPerDay) == 2);
    CHECK(store.has_batch(bid(2)));
}

TEST_CASE("erase removes every trace of a pseudonym") {
    TempDir dir;
    SeriesStore store(dir.path());
    store.write_batch(std::vector{accel(kDay), accel(kDay + kMsPerDay)}, pid(1), bid(1));
    store.write_batch(std::vector<SensorReading>{{12, kDay, {true}}}, pid(1), bid(2));
    store.write_batch(std::vector{accel(kDay)}, pid(2), bid(3));
    auto rep = store.erase_pseudonym(pid(1));
    CHECK(rep.readings == 3);
    CHECK(rep.partitions == 3);
    CHECK(rep.batches == 2);
    CHECK_FALSE(std::filesystem::exists(dir / pid(1).hex()));
    CHECK(store.pseudonyms() == std::set<Id128>{pid(2)});
    CHECK_FALSE(store.has_batch(bid(1)));
    CHECK(store.has_batch(bid(3)));
    CHECK(store.erase_pseudonym(pid(9)).readings == 0);

    auto needle = pid(1).hex();
    for (auto& e : std::filesystem::recursive_directory_iterator(dir.path())) {
        if (!e.is_regular_file()) continue;
        std::ifstream f(e.path(), std::ios::binary);
        std::string content((std::istreambuf_iterator<char>(f)), {});
        CHECK(content.find(std::string(reinterpret_cast<const char*>(pid(1).bytes.data()), 16)) == std::string::npos);
        CHECK(content.find(needle) == std::string::npos);
    }
    SeriesStore reopened(dir.path());
    CHECK(reopened.total_readings() == 1);
}

TEST_CASE("compaction preserves content and sorts blocks") {
    TempDir dir;
    std::mt19937_64 rng(5);
    StoreOptions opt{.block_target_bytes = 256, .compact_after_blocks = 1'000'000};
    SeriesStore store(dir.path(), opt);
    std::vector<std::pair<Id128, SensorReading>> all;
    for (int b = 0; b < 30; ++b) {
        std::vector<SensorReading> batch;
        for (int i = 0; i < 50; ++i) {
            auto r = accel(kDay + static_cast<TimestampMs>(rng() % kMsPerDay), double(b), double(i));
            batch.push_back(r);
            all.emplace_back(pid(1), r);
        }
        store.write_batch(batch, pid(1));
    }
    auto before = store.partitions();
    REQUIRE(before.size() == 1);
    CHECK_FALSE(before[0].sorted);
    store.compact_all();
    auto after = store.partitions();
    CHECK(after[0].sorted);
    CHECK(after[0].readings == 1500);
    CHECK(store.query_range(pid(1), 1, kDay, kDay + kMsPerDay) == oracle(all, pid(1), 1, kDay, kDay + kMsPerDay));
    CHECK(SeriesStore::verify(dir.path()).ok());
}

TEST_CASE("automatic compaction of unsorted partitions") {
    TempDir dir;
    StoreOptions opt{.block_target_bytes = 128, .compact_after_blocks = 4};
    SeriesStore store(dir.path(), opt);
    for (int b = 10; b > 0; --b) store.write_batch(std::vector{accel(kDay + b), accel(kDay + b + 100)}, pid(1));
    auto parts = store.partitions();
    CHECK(parts[0].blocks < 10);  // one block per batch without compaction
    CHECK(store.count_range(pid(1), 1, kDay, kDay + 1000) == 20);
}

TEST_CASE("capacity limit") {
    TempDir dir;
    SeriesStore store(dir.path(), {.capacity_bytes = 4096});
    store.write_batch(std::vector{accel(kDay)}, pid(1), bid(1));
    std::vector<SensorReading> big;
    for (int i = 0; i < 500; ++i) big.push_back(accel(kDay + i));
    CHECK_ERRC(store.write_batch(big, pid(1), bid(2)), Errc::storage_full);
    CHECK_FALSE(store.has_batch(bid(2)));
    CHECK(store.total_readings() == 1);
    CHECK(SeriesStore::verify(dir.path()).ok());
}

TEST_CASE("verify reports") {
    TempDir dir;
    {
        SeriesStore store(dir.path());
        store.write_batch(std::vector{accel(kDay), accel(kDay + 1)}, pid(1), bid(1));
        store.write_batch(std::vector{accel(kDay + 2)}, pid(2), bid(2));
        auto r = SeriesStore::verify(dir.path());
        CHECK(r.ok());
        CHECK(r.segments == 2);
        CHECK(r.readings == 3);
        CHECK(r.batches == 2);
        CHECK(r.wal_records == 2);
    }
    auto seg = dir / (pid(1).hex() + "/1/2019-01-28.seg");
    {
        std::fstream f(seg, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(60);
        f.put('\x7f');
    }
    CHECK_FALSE(SeriesStore::verify(dir.path()).ok());
    CHECK_FALSE(SeriesStore::verify(dir / "missing").ok());
}

TEST_CASE("crash consistency under SIGKILL") {
    std::mt19937_64 rng(77);
    std::size_t acked = 0;
    for (int trial = 0; trial < 12; ++trial) {
        TempDir dir;
        StoreOptions opt{.block_target_bytes = 1024, .compact_after_blocks = 16, .wal_checkpoint_bytes = 1 << 18};
        auto out = crash_trial(dir.path(), 100 + trial, 0, static_cast<useconds_t>(2'000 + rng() % 60'000), opt);
        for (auto& p : out.problems) FAIL_CHECK(p);
        acked += out.acked;
        // A second crash on top of the recovered store.
        auto again = crash_trial(dir.path(), 100 + trial, 100'000, static_cast<useconds_t>(1'000 + rng() % 20'000), opt);
        for (auto& p : again.problems) FAIL_CHECK(p);
    }
    CHECK(acked > 0);
}

}
