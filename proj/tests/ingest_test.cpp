#include "ilog/http.hpp"
#include "ilog/ingest.hpp"
#include "ilog/sqlite.hpp"
#include "ilog/wire.hpp"
#include "generators.hpp"
#include "support.hpp"

#include <fstream>
#include <thread>

using namespace ilog;
using namespace ilog::test;

namespace {

constexpr const char* kSupervisor = "supervisor-secret";
constexpr const char* kContact = "maria.rossi@example.org";

struct Fixture {
    TempDir dir{"ilog-ingest"};
    StudyConfig config = load_study_config_file(presets_dir() / "hackathon2019.study");
    ManualClock clock{config.start_ms() - kMsPerDay};
    std::unique_ptr<Backend> backend;

    Fixture() { open(); }
    BackendOptions options() const {
        BackendOptions o;
        o.data_dir = dir.path();
        o.server_key.bytes.fill(7);
        o.supervisor_key = kSupervisor;
        return o;
    }
    void open() {
        backend.reset();
        backend = std::make_unique<Backend>(config, options(), clock);
    }
    Registration enroll(const std::string& contact = kContact) {
        return backend->register_participant({"4821", {{"gender", "f"}, {"occupation", "student"}}, contact, 0, {}});
    }
};

Bytes make_chunk(const Registration& reg, TimestampMs t0, int n, const Id128* pseudonym = nullptr) {
    ReadingBuffer buf(pseudonym ? *pseudonym : reg.pseudonym_id, t0);
    StudyConfig big;
    big.chunk_target_bytes = 1u << 30;
    for (int i = 0; i < n; ++i) buf.append(accel(t0 + i * 50), big);
    return seal_chunk(buf, reg.device_key).serialize();
}

DiaryAnswer episode_answer(const DiaryTask& t, TimestampMs start, TimestampMs end, int activity = 4) {
    return {t.task_id,
            {{CodebookId::activity, activity}, {CodebookId::location, 1}, {CodebookId::with_whom, 2}, {CodebookId::mood, 5}},
            start,
            end,
            false};
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), {}};
}

/// Files under `root` whose bytes contain `needle`.
std::vector<std::string> files_containing(const std::filesystem::path& root, const std::string& needle) {
    std::vector<std::string> hits;
    for (auto& e : std::filesystem::recursive_directory_iterator(root))
        if (e.is_regular_file() && slurp(e.path()).find(needle) != std::string::npos) hits.push_back(e.path().string());
    return hits;
}

std::string raw(const Id128& id) { return std::string(reinterpret_cast<const char*>(id.bytes.data()), 16); }

}  // namespace

TEST_SUITE("ingest") {

TEST_CASE("session tokens") {
    Key256 key;
    key.bytes.fill(1);
    Id128 p;
    p.bytes[3] = 9;
    auto tok = SessionToken::issue(key, p, 1234).encode();
    CHECK(tok.size() == 112);
    auto back = SessionToken::verify(key, tok);
    CHECK(back.pseudonym_id == p);
    CHECK(back.issued_at == 1234);
    Key256 other;
    other.bytes.fill(2);
    CHECK_ERRC(SessionToken::verify(other, tok), Errc::auth_failure);
    for (std::size_t i = 0; i < tok.size(); i += 7) {
        auto bad = tok;
        bad[i] = bad[i] == '0' ? '1' : '0';
        CHECK_ERRC(SessionToken::verify(key, bad), Errc::auth_failure);
    }
    CHECK_ERRC(SessionToken::verify(key, ""), Errc::auth_failure);
    CHECK_ERRC(SessionToken::verify(key, tok.substr(2)), Errc::auth_failure);
}

TEST_CASE("registration") {
    Fixture f;
    SUBCASE("valid code before the start") {
        auto reg = f.enroll();
        CHECK_FALSE(reg.token.empty());
        CHECK(reg.registered_at == f.clock.now());
        CHECK(f.backend->collection().participants().size() == 1);
        CHECK(f.backend->collection().participants()[0].background.at("occupation") == "student");
    }
    SUBCASE("wrong code persists nothing") {
        CHECK_ERRC(f.backend->register_participant({"4822", {}, kContact, 0, {}}), Errc::bad_study_code);
        CHECK_ERRC(f.backend->register_participant({"", {}, kContact, 0, {}}), Errc::bad_study_code);
        CHECK(f.backend->collection().participants().empty());
        CHECK(f.backend->identity_export(kSupervisor).empty());
    }
    SUBCASE("closed study") {
        f.clock.set(f.config.end_ms());
        CHECK_ERRC(f.enroll(), Errc::study_closed);
    }
    SUBCASE("sensor subset must be enabled by the study") {
        CHECK_ERRC(f.backend->register_participant({"4821", {}, kContact, 0, {1, 21}}), Errc::validation_error);
        auto reg = f.backend->register_participant({"4821", {}, kContact, 0, {1, 29}});
        CHECK(f.backend->collection().participants()[0].enabled_sensors == std::set<SensorId>{1, 29});
        (void)reg;
    }
    SUBCASE("re-registration revokes the old pseudonym") {
        auto first = f.enroll();
        auto second = f.enroll();
        CHECK(first.pseudonym_id != second.pseudonym_id);
        CHECK_ERRC(f.backend->fetch_tasks(first.token), Errc::auth_failure);
        CHECK_NOTHROW(f.backend->fetch_tasks(second.token));
        CHECK(f.backend->identity_export(kSupervisor).size() == 1);
        auto st = f.backend->supervisor_status(kSupervisor);
        REQUIRE(st.participants.size() == 1);
        CHECK(st.participants[0].pseudonym_id == second.pseudonym_id);
    }
}

TEST_CASE("chunk upload") {
    Fixture f;
    auto reg = f.enroll();
    auto t0 = f.config.start_ms();
    f.clock.set(t0 + kMsPerHour);
    auto bytes = make_chunk(reg, t0, 1000);

    auto r1 = f.backend->receive_chunk(reg.token, bytes);
    CHECK(r1.status == UploadReceipt::Status::stored);
    CHECK(r1.readings_stored == 1000);
    CHECK(f.backend->store().count_range(reg.pseudonym_id, 1, t0, t0 + kMsPerDay) == 1000);

    auto r2 = f.backend->receive_chunk(reg.token, bytes);
    CHECK(r2.status == UploadReceipt::Status::duplicate);
    CHECK(r2.readings_stored == 0);
    CHECK(r2.chunk_id == r1.chunk_id);
    CHECK(f.backend->store().count_range(reg.pseudonym_id, 1, t0, t0 + kMsPerDay) == 1000);

    f.open();  // dedupe survives a restart
    CHECK(f.backend->receive_chunk(reg.token, bytes).status == UploadReceipt::Status::duplicate);

    auto other = f.enroll("other@example.org");
    SUBCASE("sealed with another participant's key") {
        auto foreign = make_chunk(other, t0, 10, &reg.pseudonym_id);
        CHECK_ERRC(f.backend->receive_chunk(reg.token, foreign), Errc::auth_failure);
    }
    SUBCASE("header names another participant") {
        CHECK_ERRC(f.backend->receive_chunk(reg.token, make_chunk(other, t0, 10)), Errc::pseudonym_mismatch);
    }
    SUBCASE("bad token") {
        CHECK_ERRC(f.backend->receive_chunk("deadbeef", bytes), Errc::auth_failure);
        CHECK_ERRC(f.backend->receive_chunk(reg.token, ByteView(bytes.data(), 40)), Errc::auth_failure);
    }
    SUBCASE("undecodable payload is quarantined") {
        ChunkHeader h;
        h.chunk_id.bytes[0] = 0x77;
        h.pseudonym_id = reg.pseudonym_id;
        h.reading_count = 1;
        h.ts_min = h.ts_max = t0;
        Bytes junk = {0xff, 0xff, 0xff, 0x01, 0x02};
        auto bad = detail::seal_plaintext(h, junk, reg.device_key).serialize();
        CHECK_ERRC(f.backend->receive_chunk(reg.token, bad), Errc::decode_error);
        auto dl = f.backend->dead_letter_dir() / reg.pseudonym_id.hex() / (h.chunk_id.hex() + ".ilg");
        REQUIRE(std::filesystem::exists(dl));
        CHECK(slurp(dl).size() == bad.size());
        CHECK_FALSE(f.backend->store().has_batch(h.chunk_id));
    }
}

TEST_CASE("task feed") {
    Fixture f;
    auto reg = f.enroll();
    auto t0 = f.config.start_ms();

    SUBCASE("first poll after three emitted hours") {
        f.clock.set(t0 + 3 * kMsPerHour + 5 * kMsPerMinute);
        auto feed = f.backend->fetch_tasks(reg.token);
        CHECK(feed.tasks.size() == 3);
        CHECK(feed.commands.empty());
        auto again = f.backend->fetch_tasks(reg.token);
        CHECK(again.tasks == feed.tasks);
        CHECK(f.backend->fetch_tasks(reg.token, feed.tasks[1].emit_at).tasks.size() == 1);
    }
    SUBCASE("poll after twelve emitted hours") {
        f.clock.set(t0 + 12 * kMsPerHour);
        auto feed = f.backend->fetch_tasks(reg.token, std::nullopt, t0);
        CHECK(feed.tasks.size() == 8);
        f.open();  // queue state survives a restart
        CHECK(f.backend->fetch_tasks(reg.token).tasks == feed.tasks);
        auto st = f.backend->supervisor_status(kSupervisor);
        CHECK(st.participants[0].backlog_size == 8);
    }
    SUBCASE("late registrants see no earlier tasks") {
        f.clock.set(t0 + 5 * kMsPerHour + 30 * kMsPerMinute);
        auto late = f.enroll("late@example.org");
        f.clock.set(t0 + 7 * kMsPerHour + 1);
        auto feed = f.backend->fetch_tasks(late.token);
        REQUIRE(feed.tasks.size() == 2);
        CHECK(feed.tasks[0].emit_at == t0 + 6 * kMsPerHour);
    }
    SUBCASE("sync command piggybacks once") {
        f.clock.set(t0 + kMsPerHour);
        f.backend->trigger_sync(kSupervisor, reg.pseudonym_id);
        f.backend->trigger_sync(kSupervisor, reg.pseudonym_id);
        CHECK(f.backend->supervisor_status(kSupervisor).participants[0].pending_commands.size() == 1);
        auto feed = f.backend->fetch_tasks(reg.token);
        REQUIRE(feed.commands.size() == 1);
        CHECK(feed.commands[0].delivered_at == f.clock.now());
        CHECK(f.backend->fetch_tasks(reg.token).commands.empty());
        CHECK(f.backend->supervisor_status(kSupervisor).participants[0].pending_commands.empty());
    }
}

TEST_CASE("answers") {
    Fixture f;
    auto reg = f.enroll();
    auto t0 = f.config.start_ms();
    f.clock.set(t0 + 3 * kMsPerHour);
    auto tasks = f.backend->fetch_tasks(reg.token).tasks;
    REQUIRE(tasks.size() == 3);
    auto n = f.clock.now();
    f.clock.set(n + 5 * kMsPerMinute);

    std::vector<AnswerSubmission> batch = {{episode_answer(tasks[0], n + 90'000, n + 120'000), n},
                                           {episode_answer(tasks[1], n + 130'000, n + 150'000), n}};
    auto st = f.backend->submit_answers(reg.token, batch);
    REQUIRE(st.size() == 2);
    CHECK(st[0].status == AnswerStatus::Status::accepted);
    CHECK(st[1].status == AnswerStatus::Status::accepted);

    auto tel = f.backend->collection().telemetry(0, std::numeric_limits<TimestampMs>::max());
    REQUIRE(tel.size() == 2);
    CHECK(tel[0].telemetry.reaction_ms + tel[1].telemetry.reaction_ms == 90'000 + 130'000);
    CHECK(f.backend->collection().answers(0, std::numeric_limits<TimestampMs>::max()).size() == 8);

    std::vector<AnswerSubmission> mixed = {
        {episode_answer(tasks[0], n + 90'000, n + 120'000), n},
        {episode_answer(tasks[2], n, n + 1, 20), n},
        {{Id128{{1, 2, 3}}, {}, n, n, true}, n},
    };
    st = f.backend->submit_answers(reg.token, mixed);
    CHECK(st[0].status == AnswerStatus::Status::duplicate);
    CHECK(st[1].status == AnswerStatus::Status::rejected);
    CHECK(st[1].error == Errc::invalid_answer);
    CHECK(st[2].error == Errc::unknown_task);
    CHECK(f.backend->collection().telemetry(0, std::numeric_limits<TimestampMs>::max()).size() == 2);

    f.open();
    // Duplicates are still recognized and "same as previous" still has its source.
    st = f.backend->submit_answers(reg.token, {{episode_answer(tasks[1], n, n + 1), n},
                                               {{tasks[2].task_id, {}, n + 10, n + 20, true}, n}});
    CHECK(st[0].status == AnswerStatus::Status::duplicate);
    CHECK(st[1].status == AnswerStatus::Status::accepted);
    auto rows = f.backend->collection().answers(tasks[2].episode_start, tasks[2].episode_start + 1);
    REQUIRE(rows.size() == 4);
    CHECK(rows[0].code == 4);
    CHECK(f.backend->supervisor_status(kSupervisor).participants[0].answers_total == 3);
}

TEST_CASE("supervisor status") {
    Fixture f;
    CHECK_ERRC(f.backend->supervisor_status("nope"), Errc::unauthorized);
    CHECK_ERRC(f.backend->supervisor_status(""), Errc::unauthorized);
    auto reg = f.enroll();
    auto t0 = f.config.start_ms();
    f.clock.set(t0 + kMsPerHour);
    f.backend->receive_chunk(reg.token, make_chunk(reg, t0, 10));
    auto st = f.backend->supervisor_status(kSupervisor);
    REQUIRE(st.participants.size() == 1);
    CHECK_FALSE(st.participants[0].silent);
    CHECK(st.participants[0].chunks_total == 1);
    CHECK(st.participants[0].readings_total == 10);
    CHECK(st.participants[0].last_chunk_at == t0 + kMsPerHour);

    f.clock.set(t0 + 31 * kMsPerHour);
    CHECK(f.backend->supervisor_status(kSupervisor).participants[0].silent);
    f.clock.set(t0 + 25 * kMsPerHour);
    CHECK_FALSE(f.backend->supervisor_status(kSupervisor).participants[0].silent);

    auto quiet = f.enroll("quiet@example.org");
    f.clock.set(t0 + 25 * kMsPerHour + 1);
    for (auto& p : f.backend->supervisor_status(kSupervisor).participants)
        CHECK(p.silent == (p.pseudonym_id == reg.pseudonym_id));  // no chunk yet: silence counts from registration
    f.clock.set(t0 + 50 * kMsPerHour);
    for (auto& p : f.backend->supervisor_status(kSupervisor).participants) CHECK(p.silent);
    CHECK_ERRC(f.backend->trigger_sync(kSupervisor, Id128{{9}}), Errc::unknown_participant);
    CHECK_ERRC(f.backend->trigger_sync("x", quiet.pseudonym_id), Errc::unauthorized);
}

TEST_CASE("erasure") {
    Fixture f;
    auto reg = f.enroll();
    auto keep = f.enroll("keep@example.org");
    auto t0 = f.config.start_ms();
    f.clock.set(t0 + 2 * kMsPerHour);
    f.backend->receive_chunk(reg.token, make_chunk(reg, t0, 500));
    f.backend->receive_chunk(reg.token, make_chunk(reg, t0 + kMsPerDay - 1000, 100));
    f.backend->receive_chunk(keep.token, make_chunk(keep, t0, 50));
    auto tasks = f.backend->fetch_tasks(reg.token).tasks;
    auto now = f.clock.now();
    f.backend->submit_answers(reg.token, {{episode_answer(tasks[0], now, now + 1), now}});
    f.backend->trigger_sync(kSupervisor, reg.pseudonym_id);
    ChunkHeader h;
    h.chunk_id.bytes[0] = 0x66;
    h.pseudonym_id = reg.pseudonym_id;
    h.reading_count = 1;
    Bytes junk = {0xff};
    CHECK_ERRC(f.backend->receive_chunk(reg.token, detail::seal_plaintext(h, junk, reg.device_key).serialize()),
               Errc::decode_error);

    CHECK_ERRC(f.backend->erase_participant(keep.token, reg.pseudonym_id), Errc::unauthorized);
    CHECK_ERRC(f.backend->erase_participant("junk", reg.pseudonym_id), Errc::unauthorized);

    auto readings_before = f.backend->store().count_range(reg.pseudonym_id, 1, t0, t0 + 2 * kMsPerDay);
    auto rep = f.backend->erase_participant(reg.token, reg.pseudonym_id);
    CHECK(rep.readings == readings_before);
    CHECK(rep.readings == 600);
    CHECK(rep.partitions == 2);
    CHECK(rep.chunks == 2);  // the quarantined one was never stored
    CHECK(rep.answers == 1);
    CHECK(rep.telemetry == 1);
    CHECK(rep.tasks == 2);
    CHECK(rep.commands == 1);
    CHECK(rep.dead_letters == 1);

    CHECK(f.backend->store().query_range(reg.pseudonym_id, 1, t0, t0 + 2 * kMsPerDay).empty());
    CHECK_ERRC(f.backend->erase_participant(kSupervisor, reg.pseudonym_id), Errc::unknown_participant);
    CHECK_ERRC(f.backend->trigger_sync(kSupervisor, reg.pseudonym_id), Errc::unknown_participant);
    CHECK_ERRC(f.backend->fetch_tasks(reg.token), Errc::auth_failure);
    CHECK(f.backend->identity_export(kSupervisor).size() == 1);

    // Full-surface scan: no file under the data directory mentions the pseudonym.
    CHECK(files_containing(f.dir.path(), reg.pseudonym_id.hex()).empty());
    CHECK(files_containing(f.dir.path(), raw(reg.pseudonym_id)).empty());
    CHECK(files_containing(f.dir.path(), kContact).empty());
    CHECK_FALSE(files_containing(f.dir.path(), keep.pseudonym_id.hex()).empty());

    f.open();
    CHECK(f.backend->supervisor_status(kSupervisor).participants.size() == 1);
    CHECK_ERRC(f.backend->erase_participant(kSupervisor, reg.pseudonym_id), Errc::unknown_participant);
    CHECK(f.backend->erase_participant(kSupervisor, keep.pseudonym_id).readings == 50);
    CHECK(f.backend->identity_export(kSupervisor).empty());
}

TEST_CASE("identity separation") {
    Fixture f;
    auto reg = f.enroll();
    auto columns = [](const std::filesystem::path& file) {
        sql::Db db(file, true);
        std::map<std::string, std::set<std::string>> out;
        auto tables = db.prepare("SELECT name FROM sqlite_master WHERE type = 'table'");
        while (tables.step()) {
            auto t = tables.text(0);
            auto cols = db.prepare("SELECT name FROM pragma_table_info(?1)");
            cols.bind(1, t);
            while (cols.step()) out[t].insert(cols.text(0));
        }
        return out;
    };
    auto flat = [](const std::map<std::string, std::set<std::string>>& m) {
        std::set<std::string> s;
        for (auto& [_, c] : m) s.insert(c.begin(), c.end());
        return s;
    };
    auto collection = flat(columns(f.dir / "collection.db"));
    auto identity = flat(columns(f.dir / "identity.db"));
    auto linkage = columns(f.dir / "linkage.db");
    std::vector<std::string> shared;
    std::set_intersection(collection.begin(), collection.end(), identity.begin(), identity.end(), std::back_inserter(shared));
    CHECK(shared.empty());
    CHECK(linkage == std::map<std::string, std::set<std::string>>{{"linkage", {"pseudonym", "contact_ref"}}});
    CHECK(collection.count("pseudonym"));
    CHECK(identity.count("contact"));
    CHECK_FALSE(identity.count("pseudonym"));

    CHECK(slurp(f.dir / "identity.db").find(reg.pseudonym_id.hex()) == std::string::npos);
    CHECK(files_containing(f.dir / "series", kContact).empty());
    for (auto name : {"collection.db", "collection.db-wal"})
        if (std::filesystem::exists(f.dir / name)) CHECK(slurp(f.dir / name).find(kContact) == std::string::npos);
}

TEST_CASE("http round trip") {
    Fixture f;
    HttpServer server(*f.backend, &f.clock);
    int port = server.bind("127.0.0.1", 0);
    std::thread th([&] { server.run(); });
    auto client = std::make_unique<HttpApi>("http://127.0.0.1:" + std::to_string(port), true);
    auto& api = *client;
    std::vector<std::string> responses;  // every non-admin response body

    auto t0 = f.config.start_ms();
    api.set_time(t0 - kMsPerHour);
    auto reg = api.register_participant({"4821", {{"employer", "University of Trento"}}, kContact, 60, {}});
    CHECK(f.clock.now() == t0 - kMsPerHour);
    CHECK(reg.registered_at == t0 - kMsPerHour);
    CHECK(error_of([&] { api.register_participant({"0000", {}, kContact, 0, {}}); }) == Errc::bad_study_code);

    api.set_time(t0 + 2 * kMsPerHour);
    auto bytes = make_chunk(reg, t0, 200);
    auto r = api.upload_chunk(reg.token, bytes);
    CHECK(r.readings_stored == 200);
    CHECK(api.upload_chunk(reg.token, bytes).status == UploadReceipt::Status::duplicate);
    CHECK(error_of([&] { api.upload_chunk("00", bytes); }) == Errc::auth_failure);

    auto feed = api.fetch_tasks(reg.token, t0);
    REQUIRE(feed.tasks.size() == 3);  // tz +60: local midnight is 23:00 UTC, the first slot closes at 00:00 UTC
    CHECK(feed.tasks[0].emit_at == t0);
    CHECK(feed.tasks[0].questions.size() == 5);
    auto n = t0 + 2 * kMsPerHour;
    auto st = api.submit_answers(reg.token, {{episode_answer(feed.tasks[0], n + 1000, n + 2000), n}});
    CHECK(st.at(0).status == AnswerStatus::Status::accepted);

    auto status = api.supervisor_status(kSupervisor);
    REQUIRE(status.participants.size() == 1);
    CHECK(status.participants[0].readings_total == 200);
    CHECK(error_of([&] { api.supervisor_status("wrong"); }) == Errc::unauthorized);
    CHECK(api.trigger_sync(kSupervisor, reg.pseudonym_id).issued_at == n);
    CHECK(api.fetch_tasks(reg.token, std::nullopt).commands.size() == 1);

    for (auto [method, path, cred] : std::vector<std::tuple<std::string, std::string, std::string>>{
             {"GET", "/v1/supervisor/status", kSupervisor},
             {"GET", "/v1/tasks", reg.token},
             {"GET", "/v1/health", ""},
             {"POST", "/v1/supervisor/sync/" + reg.pseudonym_id.hex(), kSupervisor}})
        responses.push_back(api.request(method, path, cred, "").second);
    responses.push_back(json(reg).dump());
    responses.push_back(json(r).dump());
    auto bad = api.request("POST", "/v1/register", "", "{not json");
    CHECK(bad.first == 400);
    CHECK(api.request("GET", "/v1/tasks?since=abc", reg.token, "").first == 400);
    CHECK(api.request("POST", "/v1/supervisor/sync/xyz", kSupervisor, "").first == 400);

    auto ids = api.identity_export(kSupervisor);
    REQUIRE(ids.size() == 1);
    CHECK(ids[0].contact == kContact);
    CHECK(error_of([&] { api.identity_export(reg.token); }) == Errc::unauthorized);

    auto erased = api.erase_participant(kSupervisor, reg.pseudonym_id);
    responses.push_back(json(erased).dump());
    CHECK(erased.readings == 200);
    CHECK(error_of([&] { api.erase_participant(kSupervisor, reg.pseudonym_id); }) == Errc::unknown_participant);

    for (const auto& body : responses) {
        CHECK(body.find(kContact) == std::string::npos);
        CHECK(body.find("contact") == std::string::npos);
    }

    client.reset();  // drop the keep-alive connection before shutting down
    server.stop();
    th.join();
    HttpApi dead("http://127.0.0.1:" + std::to_string(port), false, 1);
    CHECK(error_of([&] { dead.fetch_tasks(reg.token, std::nullopt); }) == Errc::backend_unavailable);
}

}
