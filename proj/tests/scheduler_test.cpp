#include "ilog/scheduler.hpp"
#include "support.hpp"

#include <algorithm>
#include <random>

using namespace ilog;
using namespace ilog::test;

namespace {

StudyConfig hackathon() { return load_study_config_file(presets_dir() / "hackathon2019.study"); }

DiaryTask hourly_task(int hour, const StudyConfig& c) {
    DiaryTask t;
    t.task_id.bytes[0] = static_cast<std::uint8_t>(hour + 1);
    t.kind = TaskKind::episode;
    t.episode_start = c.start_ms() + hour * kMsPerHour;
    t.emit_at = t.episode_start + kMsPerHour;
    t.questions = task_questions(TaskKind::episode, c);
    return t;
}

DiaryAnswer answer_for(const DiaryTask& t, TimestampMs start, TimestampMs end,
                       std::vector<AnswerItem> items = {{CodebookId::activity, 4},
                                                        {CodebookId::location, 2},
                                                        {CodebookId::with_whom, 6},
                                                        {CodebookId::mood, 5}}) {
    return {t.task_id, std::move(items), start, end, false};
}

}  // namespace

TEST_SUITE("scheduler") {

TEST_CASE("hackathon timeline counts") {
    auto c = hackathon();
    auto tl = generate_timeline(c);
    // 2019-01-28 .. 2019-02-10 is 4 days of January and 10 of February.
    const int days = (31 - 28 + 1) + 10;
    auto episodes = std::count_if(tl.begin(), tl.end(), [](auto& t) { return t.kind == TaskKind::episode; });
    auto moods = std::count_if(tl.begin(), tl.end(), [](auto& t) { return t.kind == TaskKind::mood_prompt; });
    CHECK(episodes == days * 24);
    CHECK(episodes == 336);
    CHECK(moods == 28);
}

TEST_CASE("hetus single day has 144 episodes") {
    auto c = load_study_config_file(presets_dir() / "hetus.study");
    c.end = c.start;
    auto tl = generate_timeline(c);
    CHECK(std::count_if(tl.begin(), tl.end(), [](auto& t) { return t.kind == TaskKind::episode; }) == 1440 / 10);
}

TEST_CASE("degenerate single slot") {
    auto c = hackathon();
    c.end = c.start;
    c.diary_resolution_min = 1440;
    c.mood_prompts.clear();
    auto tl = generate_timeline(c);
    REQUIRE(tl.size() == 1);
    CHECK(tl[0].episode_start == c.start_ms());
    CHECK(tl[0].emit_at == c.start_ms() + kMsPerDay);
}

TEST_CASE("episodes tile the study span without gaps or overlaps") {
    for (int res : {10, 15, 30, 60, 120, 1440}) {
        for (int tz : {0, 60, -300}) {
            auto c = hackathon();
            c.diary_resolution_min = res;
            auto tl = generate_timeline(c, tz);
            std::vector<DiaryTask> eps;
            std::copy_if(tl.begin(), tl.end(), std::back_inserter(eps),
                         [](auto& t) { return t.kind == TaskKind::episode; });
            std::sort(eps.begin(), eps.end(), [](auto& a, auto& b) { return a.episode_start < b.episode_start; });
            const TimestampMs shift = TimestampMs{tz} * kMsPerMinute;
            CHECK(eps.front().episode_start == c.start_ms() - shift);
            for (std::size_t i = 1; i < eps.size(); ++i)
                CHECK(eps[i].episode_start == eps[i - 1].episode_start + res * kMsPerMinute);
            CHECK(eps.back().episode_start + res * kMsPerMinute == c.end_ms() - shift);
            for (const auto& e : eps) CHECK(e.emit_at == e.episode_start + res * kMsPerMinute);
        }
    }
}

TEST_CASE("timeline is ordered, deterministic and salted") {
    auto c = hackathon();
    auto a = generate_timeline(c, 60, Id128{{9}});
    auto b = generate_timeline(c, 60, Id128{{9}});
    auto other = generate_timeline(c, 60, Id128{{8}});
    CHECK(a == b);
    CHECK(a.front().task_id != other.front().task_id);
    CHECK(std::is_sorted(a.begin(), a.end(), [](auto& x, auto& y) { return x.emit_at < y.emit_at; }));
    std::set<Id128> ids;
    for (auto& t : a) ids.insert(t.task_id);
    CHECK(ids.size() == a.size());
    for (auto& t : a) {
        CHECK(t.emit_at >= t.episode_start);
        if (t.kind == TaskKind::episode) {
            REQUIRE(t.questions.size() == 5);
            CHECK(t.questions[2].codebook == CodebookId::transport);
            CHECK(t.questions[2].conditional);
        } else {
            REQUIRE(t.questions.size() == 1);
            CHECK(t.questions[0].codebook == CodebookId::mood);
        }
    }
}

TEST_CASE("enqueue respects the backlog cap") {
    auto c = hackathon();
    TaskQueue q(8);
    for (int h = 0; h < 7; ++h) q.enqueue(hourly_task(h, c));
    q.enqueue(hourly_task(7, c));
    CHECK(q.pending().size() == 8);
    CHECK(q.expired().empty());
    q.enqueue(hourly_task(8, c));
    CHECK(q.pending().size() == 8);
    REQUIRE(q.expired().size() == 1);
    CHECK(q.expired()[0].task_id == hourly_task(0, c).task_id);
    CHECK(q.expired()[0].reason == TaskOutcome::backlog_evicted);
    CHECK_ERRC(q.enqueue(hourly_task(8, c)), Errc::duplicate_task);
    CHECK_ERRC(q.enqueue(hourly_task(0, c)), Errc::duplicate_task);
}

TEST_CASE("accept_answer telemetry") {
    auto c = hackathon();
    TaskQueue q(8);
    auto t = hourly_task(0, c);
    q.enqueue(t);
    auto notified = t.emit_at + 1000;
    auto acc = q.accept_answer(t.task_id, answer_for(t, notified + 90'000, notified + 120'000), notified, c);
    CHECK(acc.telemetry.reaction_ms == 90'000);
    CHECK(acc.telemetry.completion_ms == 30'000);
    CHECK(q.pending().empty());
    CHECK(q.outcome(t.task_id) == TaskOutcome::answered);
    CHECK_ERRC(q.accept_answer(t.task_id, answer_for(t, notified, notified), notified, c), Errc::unknown_task);
}

TEST_CASE("limited reply window") {
    auto c = hackathon();
    c.reply_window_min = 60;
    auto q = TaskQueue::for_study(c);
    auto t = hourly_task(0, c);
    q.enqueue(t);
    auto n = t.emit_at;
    CHECK_ERRC(q.accept_answer(t.task_id, answer_for(t, n + 10, n + 61 * kMsPerMinute), n, c), Errc::window_expired);
    CHECK(q.outcome(t.task_id) == TaskOutcome::window_expired);

    auto t2 = hourly_task(1, c);
    q.enqueue(t2);
    q.deliver_pending(t2.emit_at);
    CHECK(q.pending().size() == 1);
    q.deliver_pending(t2.emit_at + 61 * kMsPerMinute);
    CHECK(q.pending().empty());
    CHECK(q.outcome(t2.task_id) == TaskOutcome::window_expired);

    auto t3 = hourly_task(2, c);
    q.enqueue(t3);
    CHECK_NOTHROW(q.accept_answer(t3.task_id, answer_for(t3, t3.emit_at, t3.emit_at + 60 * kMsPerMinute), t3.emit_at, c));
}

TEST_CASE("same as previous copies the prior episode answer") {
    auto c = hackathon();
    TaskQueue q(8);
    auto t0 = hourly_task(0, c), t1 = hourly_task(1, c);
    q.enqueue(t0);
    q.enqueue(t1);
    DiaryAnswer lazy{t1.task_id, {}, t1.emit_at, t1.emit_at + 1, true};
    CHECK_ERRC(q.accept_answer(t1.task_id, lazy, t1.emit_at, c), Errc::invalid_answer);
    auto first = answer_for(t0, t0.emit_at, t0.emit_at + 5);
    q.accept_answer(t0.task_id, first, t0.emit_at, c);
    auto acc = q.accept_answer(t1.task_id, lazy, t1.emit_at, c);
    CHECK(acc.answer.answers == first.answers);
    CHECK(acc.answer.same_as_previous);
}

TEST_CASE("codebook validation") {
    auto c = hackathon();
    TaskQueue q(8);
    auto t = hourly_task(0, c);
    q.enqueue(t);
    auto n = t.emit_at;
    auto try_items = [&](std::vector<AnswerItem> items) {
        return error_of([&] { q.accept_answer(t.task_id, answer_for(t, n, n, std::move(items)), n, c); });
    };
    using CB = CodebookId;
    CHECK(try_items({{CB::activity, 20}, {CB::location, 1}, {CB::with_whom, 1}, {CB::mood, 1}}) == Errc::invalid_answer);
    CHECK(try_items({{CB::activity, 17}, {CB::location, 1}, {CB::with_whom, 1}, {CB::mood, 1}}) == Errc::invalid_answer);
    CHECK(try_items({{CB::activity, 4}, {CB::location, 1}, {CB::transport, 4}, {CB::with_whom, 1}, {CB::mood, 1}}) == Errc::invalid_answer);
    CHECK(try_items({{CB::activity, 4, "knitting"}, {CB::location, 1}, {CB::with_whom, 1}, {CB::mood, 1}}) == Errc::invalid_answer);
    CHECK(try_items({{CB::activity, 4}, {CB::activity, 4}, {CB::location, 1}, {CB::with_whom, 1}, {CB::mood, 1}}) == Errc::invalid_answer);
    CHECK(try_items({{CB::activity, 4}, {CB::location, 1}, {CB::with_whom, 1}}) == Errc::invalid_answer);
    CHECK(q.is_pending(t.task_id));
    CHECK(try_items({{CB::activity, 17}, {CB::location, 10}, {CB::transport, 5}, {CB::with_whom, 1}, {CB::mood, 1}}) == std::nullopt);

    auto t2 = hourly_task(1, c);
    q.enqueue(t2);
    auto ok = answer_for(t2, t2.emit_at, t2.emit_at,
                         {{CB::activity, 19, "knitting"}, {CB::location, 1}, {CB::with_whom, 7, "cat"}, {CB::mood, 7}});
    CHECK_NOTHROW(q.accept_answer(t2.task_id, ok, t2.emit_at, c));

    auto t3 = hourly_task(2, c);
    q.enqueue(t3);
    auto backwards = answer_for(t3, t3.emit_at + 10, t3.emit_at + 5);
    CHECK_ERRC(q.accept_answer(t3.task_id, backwards, t3.emit_at, c), Errc::invalid_answer);
    auto early = answer_for(t3, t3.emit_at - 10, t3.emit_at + 5);
    CHECK_ERRC(q.accept_answer(t3.task_id, early, t3.emit_at, c), Errc::invalid_answer);
}

TEST_CASE("offline delivery") {
    auto c = hackathon();
    const auto offline_since = c.start_ms() + 30 * kMsPerMinute;

    SUBCASE("three hourly emissions") {
        TaskQueue q(8);
        for (int h = 0; h < 3; ++h) q.enqueue(hourly_task(h, c));
        auto now = c.start_ms() + 3 * kMsPerHour + 5 * kMsPerMinute;
        auto got = q.deliver_pending(now, offline_since);
        CHECK(got.size() == 3);
        for (auto& t : got) CHECK(q.delivery(t.task_id)->offline);
        CHECK(q.deliver_pending(now).size() == 3);  // stable on repeat
    }
    SUBCASE("twelve hourly emissions with cap eight") {
        TaskQueue q(8);
        for (int h = 0; h < 12; ++h) q.enqueue(hourly_task(h, c));
        auto got = q.deliver_pending(c.start_ms() + 12 * kMsPerHour, offline_since);
        // Hand replay: enqueueing hours 8..11 evicts hours 0..3 in turn.
        REQUIRE(got.size() == 8);
        for (int i = 0; i < 8; ++i) CHECK(got[i].task_id == hourly_task(i + 4, c).task_id);
        REQUIRE(q.expired().size() == 4);
        for (int i = 0; i < 4; ++i) CHECK(q.expired()[i].task_id == hourly_task(i, c).task_id);
    }
    SUBCASE("nothing due") {
        TaskQueue q(8);
        q.enqueue(hourly_task(5, c));
        CHECK(q.deliver_pending(c.start_ms()).empty());
    }
}

TEST_CASE("random operation sequences keep the backlog bound and conserve outcomes") {
    auto c = hackathon();
    std::mt19937_64 rng(99);
    for (int trial = 0; trial < 20; ++trial) {
        c.backlog_cap = 1 + static_cast<int>(rng() % 10);
        c.reply_window_min = (rng() % 2) ? std::optional<int>(30 + rng() % 120) : std::nullopt;
        auto q = TaskQueue::for_study(c);
        auto tl = generate_timeline(c, 0, Id128{{static_cast<std::uint8_t>(trial)}});
        std::size_t emitted = 0;
        TimestampMs now = c.start_ms();
        for (int step = 0; step < 500 && emitted < tl.size(); ++step) {
            now += static_cast<TimestampMs>(rng() % (90 * kMsPerMinute));
            while (emitted < tl.size() && tl[emitted].emit_at <= now) q.enqueue(tl[emitted++]);
            CHECK(static_cast<int>(q.pending().size()) <= c.backlog_cap);
            auto due = q.deliver_pending(now, (rng() % 3 == 0) ? std::optional<TimestampMs>(now - kMsPerHour) : std::nullopt);
            for (const auto& t : due) {
                if (rng() % 2) continue;
                DiaryAnswer a{t.task_id, {}, now, now + static_cast<TimestampMs>(rng() % 60'000), false};
                if (t.kind == TaskKind::mood_prompt) a.answers = {{CodebookId::mood, 3}};
                else a.answers = {{CodebookId::activity, 1}, {CodebookId::location, 1}, {CodebookId::with_whom, 1}, {CodebookId::mood, 1}};
                try {
                    auto acc = q.accept_answer(t.task_id, a, q.delivery(t.task_id)->first_delivered_at, c);
                    CHECK(acc.telemetry.reaction_ms >= 0);
                    CHECK(acc.telemetry.completion_ms >= 0);
                } catch (const Error& e) {
                    CHECK(e.code() == Errc::window_expired);
                }
            }
            CHECK(static_cast<int>(q.pending().size()) <= c.backlog_cap);
        }
        q.end_study();
        std::size_t total = 0;
        for (auto [o, n] : q.outcome_counts()) total += n;
        CHECK(total == emitted);
    }
}

}
