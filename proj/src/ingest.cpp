#include "ilog/ingest.hpp"
#include "ilog/crypto.hpp"
#include "ilog/error.hpp"
#include "ilog/sqlite.hpp"

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <fstream>

namespace fs = std::filesystem;

namespace ilog {

std::string_view to_string(UploadReceipt::Status s) {
    return s == UploadReceipt::Status::stored ? "stored" : "duplicate";
}
std::string_view to_string(SyncCommand::Kind) { return "force_sync_wifi"; }
std::string_view to_string(AnswerStatus::Status s) {
    switch (s) {
        case AnswerStatus::Status::accepted: return "accepted";
        case AnswerStatus::Status::duplicate: return "duplicate";
        case AnswerStatus::Status::rejected: return "rejected";
    }
    return "rejected";
}

// ---- session tokens ----

namespace {
Bytes token_message(const Id128& pseudonym_id, TimestampMs issued_at) {
    Bytes m(pseudonym_id.bytes.begin(), pseudonym_id.bytes.end());
    for (int i = 7; i >= 0; --i) m.push_back(static_cast<std::uint8_t>(static_cast<std::uint64_t>(issued_at) >> (8 * i)));
    return m;
}
}  // namespace

SessionToken SessionToken::issue(const Key256& server_key, const Id128& pseudonym_id, TimestampMs issued_at) {
    SessionToken t{pseudonym_id, issued_at, {}};
    t.signature = crypto::hmac_sha256(server_key.bytes, token_message(pseudonym_id, issued_at));
    return t;
}

std::string SessionToken::encode() const {
    auto m = token_message(pseudonym_id, issued_at);
    m.insert(m.end(), signature.begin(), signature.end());
    return to_hex(m);
}

SessionToken SessionToken::verify(const Key256& server_key, std::string_view encoded) {
    auto raw = from_hex(encoded);
    if (!raw || raw->size() != 56) throw Error(Errc::auth_failure, "malformed session token");
    SessionToken t;
    std::copy_n(raw->begin(), 16, t.pseudonym_id.bytes.begin());
    std::uint64_t at = 0;
    for (int i = 0; i < 8; ++i) at = (at << 8) | (*raw)[16 + i];
    t.issued_at = static_cast<TimestampMs>(at);
    std::copy_n(raw->begin() + 24, 32, t.signature.begin());
    auto expect = crypto::hmac_sha256(server_key.bytes, token_message(t.pseudonym_id, t.issued_at));
    if (!crypto::constant_time_equal(expect, t.signature)) throw Error(Errc::auth_failure, "bad token signature");
    return t;
}

// ---- options ----

BackendOptions BackendOptions::from_env(std::optional<fs::path> data_dir) {
    BackendOptions o;
    if (data_dir) o.data_dir = *data_dir;
    else if (const char* d = std::getenv("ILOG_DATA_DIR")) o.data_dir = d;
    else o.data_dir = "ilog-data";
    fs::create_directories(o.data_dir);

    nlohmann::json keys = nlohmann::json::object();
    auto keys_path = o.data_dir / "keys.json";
    if (std::ifstream in(keys_path); in) {
        try {
            in >> keys;
        } catch (const std::exception& e) {
            throw Error(Errc::parse_error, keys_path.string() + ": " + e.what());
        }
    }
    bool changed = false;
    if (const char* k = std::getenv("ILOG_SERVER_KEY")) {
        auto key = Key256::from_hex(k);
        if (!key) throw Error(Errc::validation_error, "ILOG_SERVER_KEY must be 64 hex digits", "ILOG_SERVER_KEY");
        o.server_key = *key;
    } else if (keys.contains("server_key")) {
        auto key = Key256::from_hex(keys["server_key"].get<std::string>());
        if (!key) throw Error(Errc::parse_error, keys_path.string() + ": bad server_key");
        o.server_key = *key;
    } else {
        o.server_key = crypto::random_fixed<Key256>();
        keys["server_key"] = o.server_key.hex();
        changed = true;
    }
    if (const char* s = std::getenv("ILOG_SUPERVISOR_KEY")) {
        o.supervisor_key = s;
    } else if (keys.contains("supervisor_key")) {
        o.supervisor_key = keys["supervisor_key"].get<std::string>();
    } else {
        o.supervisor_key = crypto::random_fixed<Key256>().hex();
        keys["supervisor_key"] = o.supervisor_key;
        changed = true;
    }
    if (const char* h = std::getenv("ILOG_SILENCE_THRESHOLD_H")) {
        double hours = 0;
        std::string_view sv(h);
        auto [p, ec] = std::from_chars(sv.data(), sv.data() + sv.size(), hours);
        if (ec != std::errc{} || p != sv.data() + sv.size() || hours <= 0)
            throw Error(Errc::validation_error, "ILOG_SILENCE_THRESHOLD_H must be a positive number", "ILOG_SILENCE_THRESHOLD_H");
        o.silence_threshold_ms = static_cast<std::int64_t>(hours * kMsPerHour);
    }
    if (changed) {
        std::ofstream out(keys_path, std::ios::trunc);
        out << keys.dump(2) << "\n";
        if (!out) throw Error(Errc::io_failure, "cannot write " + keys_path.string());
        fs::permissions(keys_path, fs::perms::owner_read | fs::perms::owner_write);
    }
    return o;
}

// ---- collection database ----

namespace {

constexpr const char* kCollectionSchema = R"(
CREATE TABLE IF NOT EXISTS participants(
  pseudonym TEXT PRIMARY KEY,
  device_key BLOB NOT NULL,
  consent TEXT NOT NULL,
  registered_at INTEGER NOT NULL,
  tz_offset_min INTEGER NOT NULL,
  enabled_sensors TEXT NOT NULL,
  background TEXT NOT NULL,
  advanced_to INTEGER NOT NULL,
  last_chunk_at INTEGER,
  last_answer_at INTEGER);
CREATE TABLE IF NOT EXISTS chunks(
  chunk_id TEXT PRIMARY KEY,
  pseudonym TEXT NOT NULL,
  received_at INTEGER NOT NULL,
  readings INTEGER NOT NULL,
  ts_min INTEGER NOT NULL,
  ts_max INTEGER NOT NULL);
CREATE INDEX IF NOT EXISTS chunks_by_pseudonym ON chunks(pseudonym);
CREATE TABLE IF NOT EXISTS tasks(
  task_id TEXT PRIMARY KEY,
  pseudonym TEXT NOT NULL,
  kind TEXT NOT NULL,
  episode_start INTEGER NOT NULL,
  emit_at INTEGER NOT NULL,
  expiry INTEGER,
  state TEXT NOT NULL,
  first_delivered_at INTEGER,
  delivered_offline INTEGER NOT NULL DEFAULT 0);
CREATE INDEX IF NOT EXISTS tasks_by_pseudonym ON tasks(pseudonym, emit_at);
CREATE TABLE IF NOT EXISTS answers(
  task_id TEXT NOT NULL,
  item INTEGER NOT NULL,
  pseudonym TEXT NOT NULL,
  kind TEXT NOT NULL,
  episode_start INTEGER NOT NULL,
  codebook TEXT NOT NULL,
  code INTEGER NOT NULL,
  open_text TEXT,
  PRIMARY KEY(task_id, item));
CREATE INDEX IF NOT EXISTS answers_by_pseudonym ON answers(pseudonym, episode_start);
CREATE TABLE IF NOT EXISTS telemetry(
  task_id TEXT PRIMARY KEY,
  pseudonym TEXT NOT NULL,
  episode_start INTEGER NOT NULL,
  notified_at INTEGER NOT NULL,
  reaction_ms INTEGER NOT NULL,
  completion_ms INTEGER NOT NULL,
  delivered_offline INTEGER NOT NULL,
  answered_at_start INTEGER NOT NULL,
  answered_at_end INTEGER NOT NULL,
  same_as_previous INTEGER NOT NULL);
CREATE INDEX IF NOT EXISTS telemetry_by_pseudonym ON telemetry(pseudonym);
CREATE TABLE IF NOT EXISTS commands(
  pseudonym TEXT NOT NULL,
  kind TEXT NOT NULL,
  issued_at INTEGER NOT NULL,
  delivered_at INTEGER);
CREATE INDEX IF NOT EXISTS commands_by_pseudonym ON commands(pseudonym);
CREATE TABLE IF NOT EXISTS erasures(
  erased_at INTEGER NOT NULL,
  readings INTEGER NOT NULL,
  partitions INTEGER NOT NULL,
  chunks INTEGER NOT NULL,
  answers INTEGER NOT NULL,
  telemetry INTEGER NOT NULL,
  tasks INTEGER NOT NULL,
  commands INTEGER NOT NULL,
  dead_letters INTEGER NOT NULL);
)";

constexpr const char* kIdentitySchema = R"(
CREATE TABLE IF NOT EXISTS identity(
  contact_ref TEXT PRIMARY KEY,
  contact TEXT NOT NULL UNIQUE,
  created_at INTEGER NOT NULL);
)";

constexpr const char* kLinkageSchema = R"(
CREATE TABLE IF NOT EXISTS linkage(
  pseudonym TEXT PRIMARY KEY,
  contact_ref TEXT NOT NULL);
CREATE INDEX IF NOT EXISTS linkage_by_contact ON linkage(contact_ref);
)";

Id128 id_of(const std::string& hex) {
    auto id = Id128::from_hex(hex);
    if (!id) throw Error(Errc::io_failure, "corrupt id in database: " + hex);
    return *id;
}

std::string sensors_text(const std::set<SensorId>& s) {
    std::string out;
    for (auto id : s) {
        if (!out.empty()) out += ',';
        out += std::to_string(id);
    }
    return out;
}

std::set<SensorId> sensors_of(std::string_view text) {
    std::set<SensorId> out;
    while (!text.empty()) {
        auto comma = text.find(',');
        auto part = text.substr(0, comma);
        unsigned v = 0;
        std::from_chars(part.data(), part.data() + part.size(), v);
        out.insert(static_cast<SensorId>(v));
        if (comma == std::string_view::npos) break;
        text.remove_prefix(comma + 1);
    }
    return out;
}

CodebookId codebook_of(const std::string& s) {
    for (int i = 1; i <= 5; ++i)
        if (to_string(static_cast<CodebookId>(i)) == s) return static_cast<CodebookId>(i);
    throw Error(Errc::io_failure, "corrupt codebook in database: " + s);
}

}  // namespace

CollectionDb::CollectionDb(const fs::path& file, bool read_only)
    : db_(std::make_unique<sql::Db>(file, read_only)) {
    if (!read_only) db_->exec(kCollectionSchema);
}

CollectionDb::~CollectionDb() = default;

std::vector<ParticipantRow> CollectionDb::participants() const {
    std::vector<ParticipantRow> out;
    auto st = db_->prepare(
        "SELECT pseudonym, consent, registered_at, tz_offset_min, enabled_sensors, background "
        "FROM participants ORDER BY pseudonym");
    while (st.step()) {
        ParticipantRow r;
        r.pseudonym_id = id_of(st.text(0));
        r.consent = consent_from_string(st.text(1)).value_or(Consent::pending);
        r.registered_at = st.i64(2);
        r.tz_offset_min = static_cast<int>(st.i64(3));
        r.enabled_sensors = sensors_of(st.text(4));
        r.background = nlohmann::json::parse(st.text(5)).get<Background>();
        out.push_back(std::move(r));
    }
    return out;
}

std::vector<AnswerRow> CollectionDb::answers(TimestampMs t0, TimestampMs t1) const {
    std::vector<AnswerRow> out;
    auto st = db_->prepare(
        "SELECT task_id, pseudonym, kind, episode_start, codebook, code, open_text FROM answers "
        "WHERE episode_start >= ?1 AND episode_start < ?2 ORDER BY pseudonym, episode_start, task_id, item");
    st.bind(1, t0).bind(2, t1);
    while (st.step()) {
        AnswerRow r;
        r.task_id = id_of(st.text(0));
        r.pseudonym_id = id_of(st.text(1));
        r.kind = task_kind_from_string(st.text(2)).value_or(TaskKind::episode);
        r.episode_start = st.i64(3);
        r.codebook = codebook_of(st.text(4));
        r.code = static_cast<int>(st.i64(5));
        if (!st.is_null(6)) r.open_text = st.text(6);
        out.push_back(std::move(r));
    }
    return out;
}

std::vector<TelemetryRow> CollectionDb::telemetry(TimestampMs t0, TimestampMs t1) const {
    std::vector<TelemetryRow> out;
    auto st = db_->prepare(
        "SELECT task_id, pseudonym, episode_start, notified_at, reaction_ms, completion_ms, delivered_offline, "
        "answered_at_start, answered_at_end FROM telemetry WHERE episode_start >= ?1 AND episode_start < ?2 "
        "ORDER BY pseudonym, episode_start, task_id");
    st.bind(1, t0).bind(2, t1);
    while (st.step()) {
        TelemetryRow r;
        r.task_id = id_of(st.text(0));
        r.pseudonym_id = id_of(st.text(1));
        r.episode_start = st.i64(2);
        r.telemetry = {r.task_id, st.i64(3), st.i64(4), st.i64(5), st.i64(6) != 0};
        r.answered_at_start = st.i64(7);
        r.answered_at_end = st.i64(8);
        out.push_back(r);
    }
    return out;
}

std::uint64_t CollectionDb::answer_count(const Id128& pseudonym_id) const {
    auto st = db_->prepare("SELECT count(*) FROM telemetry WHERE pseudonym = ?1");
    st.bind(1, pseudonym_id.hex());
    st.step();
    return static_cast<std::uint64_t>(st.i64(0));
}

// ---- backend ----

struct Backend::Participant {
    std::mutex m;
    Id128 id;
    Key256 device_key;
    Consent consent = Consent::granted;
    TimestampMs registered_at = 0;
    int tz_offset_min = 0;
    TimestampMs advanced_to = 0;
    bool erased = false;

    bool loaded = false;  // queue and timeline built
    std::vector<DiaryTask> timeline;
    std::size_t cursor = 0;
    std::optional<TaskQueue> queue;
    std::size_t expired_synced = 0;
};

Backend::Backend(StudyConfig config, BackendOptions options, const Clock& clock)
    : config_(std::move(config)), options_(std::move(options)), clock_(clock) {
    validate(config_);
    fs::create_directories(options_.data_dir);
    store_ = std::make_unique<SeriesStore>(options_.data_dir / "series", options_.store);
    collection_ = std::make_unique<CollectionDb>(options_.data_dir / "collection.db");
    identity_ = std::make_unique<sql::Db>(options_.data_dir / "identity.db");
    identity_->exec(kIdentitySchema);
    linkage_ = std::make_unique<sql::Db>(options_.data_dir / "linkage.db");
    linkage_->exec(kLinkageSchema);

    auto st = collection_->db().prepare(
        "SELECT pseudonym, device_key, consent, registered_at, tz_offset_min, advanced_to FROM participants");
    while (st.step()) {
        auto p = std::make_unique<Participant>();
        p->id = id_of(st.text(0));
        auto key = st.blob(1);
        if (key.size() != 32) throw Error(Errc::io_failure, "corrupt device key for " + p->id.hex());
        std::copy(key.begin(), key.end(), p->device_key.bytes.begin());
        p->consent = consent_from_string(st.text(2)).value_or(Consent::pending);
        p->registered_at = st.i64(3);
        p->tz_offset_min = static_cast<int>(st.i64(4));
        p->advanced_to = st.i64(5);
        participants_.emplace(p->id, std::move(p));
    }
}

Backend::~Backend() = default;

Registration Backend::register_participant(const RegisterRequest& req) {
    if (!verify_study_code(req.study_code, config_)) throw Error(Errc::bad_study_code, "study code does not match");
    const auto now = clock_.now();
    if (now >= config_.end_ms()) throw Error(Errc::study_closed, "study " + config_.name + " has ended");
    if (req.contact.empty()) throw Error(Errc::validation_error, "contact is required", "contact");
    if (req.tz_offset_min < -14 * 60 || req.tz_offset_min > 14 * 60)
        throw Error(Errc::validation_error, "tz_offset_min out of range", "tz_offset_min");
    std::set<SensorId> enabled;
    for (const auto& [id, _] : config_.sensors_enabled) enabled.insert(id);
    if (!req.enabled_sensors.empty()) {
        for (auto id : req.enabled_sensors)
            if (!enabled.count(id))
                throw Error(Errc::validation_error, "sensor " + std::to_string(id) + " is not enabled by the study",
                            "enabled_sensors");
        enabled = req.enabled_sensors;
    }

    auto p = std::make_unique<Participant>();
    p->id = crypto::random_fixed<Id128>();
    p->device_key = crypto::random_fixed<Key256>();
    p->consent = Consent::granted;
    p->registered_at = now;
    p->tz_offset_min = req.tz_offset_min;
    p->advanced_to = now;

    std::vector<Id128> revoked;
    {
        std::lock_guard lock(db_mutex_);
        Id128 contact_ref;
        {
            sql::Transaction tx(*identity_);
            auto find = identity_->prepare("SELECT contact_ref FROM identity WHERE contact = ?1");
            find.bind(1, req.contact);
            if (find.step()) {
                contact_ref = id_of(find.text(0));
            } else {
                contact_ref = crypto::random_fixed<Id128>();
                identity_->prepare("INSERT INTO identity(contact_ref, contact, created_at) VALUES(?1, ?2, ?3)")
                    .bind(1, contact_ref.hex()).bind(2, req.contact).bind(3, now).run();
            }
            tx.commit();
        }
        {
            sql::Transaction tx(*linkage_);
            auto prior = linkage_->prepare("SELECT pseudonym FROM linkage WHERE contact_ref = ?1");
            prior.bind(1, contact_ref.hex());
            while (prior.step()) revoked.push_back(id_of(prior.text(0)));
            linkage_->prepare("INSERT INTO linkage(pseudonym, contact_ref) VALUES(?1, ?2)")
                .bind(1, p->id.hex()).bind(2, contact_ref.hex()).run();
            tx.commit();
        }
        auto& db = collection_->db();
        sql::Transaction tx(db);
        db.prepare(
              "INSERT INTO participants(pseudonym, device_key, consent, registered_at, tz_offset_min, "
              "enabled_sensors, background, advanced_to) VALUES(?1, ?2, 'granted', ?3, ?4, ?5, ?6, ?3)")
            .bind(1, p->id.hex())
            .bind_blob(2, p->device_key.bytes.data(), p->device_key.bytes.size())
            .bind(3, now)
            .bind(4, req.tz_offset_min)
            .bind(5, sensors_text(enabled))
            .bind(6, nlohmann::json(req.background).dump())
            .run();
        for (const auto& old : revoked)
            db.prepare("UPDATE participants SET consent = 'revoked' WHERE pseudonym = ?1").bind(1, old.hex()).run();
        tx.commit();
    }

    Registration reg{p->id, SessionToken::issue(options_.server_key, p->id, now).encode(), p->device_key, now};
    std::lock_guard lock(registry_mutex_);
    for (const auto& old : revoked)
        if (auto it = participants_.find(old); it != participants_.end()) {
            std::lock_guard plock(it->second->m);
            it->second->consent = Consent::revoked;
        }
    participants_.emplace(p->id, std::move(p));
    return reg;
}

Backend::Participant& Backend::participant(const Id128& pseudonym_id) {
    std::lock_guard lock(registry_mutex_);
    auto it = participants_.find(pseudonym_id);
    if (it == participants_.end()) throw Error(Errc::unknown_participant, "no participant " + pseudonym_id.hex());
    return *it->second;
}

Backend::Participant& Backend::authenticate(std::string_view token) {
    auto t = SessionToken::verify(options_.server_key, token);
    std::lock_guard lock(registry_mutex_);
    auto it = participants_.find(t.pseudonym_id);
    if (it == participants_.end()) throw Error(Errc::auth_failure, "token for an unknown participant");
    if (it->second->consent != Consent::granted) throw Error(Errc::auth_failure, "participant has been revoked");
    return *it->second;
}

void Backend::require_supervisor(std::string_view credential) const {
    const auto& key = options_.supervisor_key;
    if (key.empty() || credential.size() != key.size() ||
        !crypto::constant_time_equal(ByteView(reinterpret_cast<const std::uint8_t*>(credential.data()), credential.size()),
                                     ByteView(reinterpret_cast<const std::uint8_t*>(key.data()), key.size())))
        throw Error(Errc::unauthorized, "supervisor credential required");
}

// Builds the in-memory queue on first use and enqueues everything emitted
// up to `now`. Caller holds p.m.
void Backend::advance(Participant& p, TimestampMs now) {
    if (!p.loaded) {
        p.timeline = generate_timeline(config_, p.tz_offset_min, p.id);
        p.queue.emplace(TaskQueue::for_study(config_));
        std::lock_guard lock(db_mutex_);
        auto& db = collection_->db();
        auto st = db.prepare(
            "SELECT task_id, kind, episode_start, emit_at, expiry, state, first_delivered_at, delivered_offline "
            "FROM tasks WHERE pseudonym = ?1 ORDER BY emit_at, rowid");
        st.bind(1, p.id.hex());
        while (st.step()) {
            DiaryTask t;
            t.task_id = id_of(st.text(0));
            t.kind = task_kind_from_string(st.text(1)).value_or(TaskKind::episode);
            t.episode_start = st.i64(2);
            t.emit_at = st.i64(3);
            if (!st.is_null(4)) t.expiry = st.i64(4);
            t.questions = task_questions(t.kind, config_);
            auto state = st.text(5);
            if (state == "pending") {
                std::optional<TaskQueue::Delivery> d;
                if (!st.is_null(6)) d = TaskQueue::Delivery{st.i64(6), st.i64(7) != 0};
                p.queue->restore_pending(std::move(t), d);
            } else if (auto o = task_outcome_from_string(state)) {
                p.queue->restore_outcome(t.task_id, *o);
            }
        }
        auto prev = db.prepare(
            "SELECT task_id FROM answers WHERE pseudonym = ?1 AND kind = 'episode' "
            "ORDER BY episode_start DESC LIMIT 1");
        prev.bind(1, p.id.hex());
        if (prev.step()) {
            auto items = db.prepare("SELECT codebook, code, open_text FROM answers WHERE task_id = ?1 ORDER BY item");
            items.bind(1, prev.text(0));
            std::vector<AnswerItem> answers;
            while (items.step())
                answers.push_back({codebook_of(items.text(0)), static_cast<int>(items.i64(1)),
                                   items.is_null(2) ? std::nullopt : std::optional(items.text(2))});
            p.queue->restore_previous_episode(std::move(answers));
        }
        p.cursor = static_cast<std::size_t>(
            std::upper_bound(p.timeline.begin(), p.timeline.end(), p.advanced_to,
                             [](TimestampMs t, const DiaryTask& d) { return t < d.emit_at; }) -
            p.timeline.begin());
        p.loaded = true;
    }
    // Tasks emitted before registration are never shown to the participant.
    for (; p.cursor < p.timeline.size() && p.timeline[p.cursor].emit_at <= now; ++p.cursor) {
        const auto& t = p.timeline[p.cursor];
        if (t.emit_at > p.registered_at && !p.queue->outcome(t.task_id) && !p.queue->is_pending(t.task_id))
            p.queue->enqueue(t);
    }
    p.advanced_to = std::max(p.advanced_to, now);
}

// Writes queue state changes since the last call. Caller holds p.m.
void Backend::persist_queue(Participant& p) {
    std::lock_guard lock(db_mutex_);
    auto& db = collection_->db();
    sql::Transaction tx(db);
    auto upsert = db.prepare(
        "INSERT INTO tasks(task_id, pseudonym, kind, episode_start, emit_at, expiry, state, first_delivered_at, "
        "delivered_offline) VALUES(?1, ?2, ?3, ?4, ?5, ?6, 'pending', ?7, ?8) "
        "ON CONFLICT(task_id) DO UPDATE SET state = 'pending', first_delivered_at = ?7, delivered_offline = ?8");
    for (const auto& t : p.queue->pending()) {
        auto d = p.queue->delivery(t.task_id);
        upsert.reset();
        upsert.bind(1, t.task_id.hex())
            .bind(2, p.id.hex())
            .bind(3, to_string(t.kind))
            .bind(4, t.episode_start)
            .bind(5, t.emit_at)
            .bind(6, t.expiry)
            .bind(7, d ? std::optional(d->first_delivered_at) : std::nullopt)
            .bind(8, d && d->offline ? 1 : 0)
            .run();
    }
    const auto& expired = p.queue->expired();
    auto set_state = db.prepare(
        "INSERT INTO tasks(task_id, pseudonym, kind, episode_start, emit_at, expiry, state) "
        "VALUES(?1, ?2, ?3, ?4, ?5, ?6, ?7) ON CONFLICT(task_id) DO UPDATE SET state = ?7");
    for (; p.expired_synced < expired.size(); ++p.expired_synced) {
        const auto& e = expired[p.expired_synced];
        auto it = std::find_if(p.timeline.begin(), p.timeline.end(), [&](auto& t) { return t.task_id == e.task_id; });
        if (it == p.timeline.end()) continue;
        set_state.reset();
        set_state.bind(1, e.task_id.hex())
            .bind(2, p.id.hex())
            .bind(3, to_string(it->kind))
            .bind(4, it->episode_start)
            .bind(5, it->emit_at)
            .bind(6, it->expiry)
            .bind(7, to_string(e.reason))
            .run();
    }
    db.prepare("UPDATE participants SET advanced_to = ?2 WHERE pseudonym = ?1")
        .bind(1, p.id.hex())
        .bind(2, p.advanced_to)
        .run();
    tx.commit();
}

UploadReceipt Backend::receive_chunk(std::string_view token, ByteView chunk_bytes) {
    auto& p = authenticate(token);
    std::lock_guard plock(p.m);
    if (p.erased) throw Error(Errc::auth_failure, "participant has been erased");

    auto chunk = LogChunk::parse(chunk_bytes);
    if (chunk.header.pseudonym_id != p.id)
        throw Error(Errc::pseudonym_mismatch, "chunk belongs to another participant");
    const auto& id = chunk.header.chunk_id;

    std::vector<SensorReading> readings;
    try {
        readings = open_chunk(chunk, p.device_key);
    } catch (const Error& e) {
        if (e.code() == Errc::auth_failure) throw;
        auto dir = dead_letter_dir() / p.id.hex();
        fs::create_directories(dir);
        std::ofstream out(dir / (id.hex() + ".ilg"), std::ios::binary | std::ios::trunc);
        out.write(reinterpret_cast<const char*>(chunk_bytes.data()), static_cast<std::streamsize>(chunk_bytes.size()));
        throw Error(Errc::decode_error, std::string("chunk quarantined: ") + e.what());
    }

    UploadReceipt receipt{id, UploadReceipt::Status::duplicate, 0};
    if (!store_->has_batch(id)) {
        store_->write_batch(readings, p.id, id);
        receipt.status = UploadReceipt::Status::stored;
        receipt.readings_stored = readings.size();
    }
    // Also on duplicates: a crash between the store commit and this insert
    // leaves the chunk stored but unrecorded until the device resends it.
    const auto now = clock_.now();
    std::lock_guard lock(db_mutex_);
    auto& db = collection_->db();
    sql::Transaction tx(db);
    db.prepare(
          "INSERT OR IGNORE INTO chunks(chunk_id, pseudonym, received_at, readings, ts_min, ts_max) "
          "VALUES(?1, ?2, ?3, ?4, ?5, ?6)")
        .bind(1, id.hex())
        .bind(2, p.id.hex())
        .bind(3, now)
        .bind(4, static_cast<std::int64_t>(readings.size()))
        .bind(5, chunk.header.ts_min)
        .bind(6, chunk.header.ts_max)
        .run();
    if (db.changes() > 0)
        db.prepare("UPDATE participants SET last_chunk_at = max(coalesce(last_chunk_at, ?2), ?2) WHERE pseudonym = ?1")
            .bind(1, p.id.hex())
            .bind(2, now)
            .run();
    tx.commit();
    return receipt;
}

TaskFeed Backend::fetch_tasks(std::string_view token, std::optional<TimestampMs> since,
                              std::optional<TimestampMs> offline_since) {
    auto& p = authenticate(token);
    std::lock_guard plock(p.m);
    if (p.erased) throw Error(Errc::auth_failure, "participant has been erased");
    const auto now = clock_.now();
    advance(p, now);
    TaskFeed feed;
    for (auto& t : p.queue->deliver_pending(now, offline_since))
        if (!since || t.emit_at > *since) feed.tasks.push_back(std::move(t));
    persist_queue(p);

    std::lock_guard lock(db_mutex_);
    auto& db = collection_->db();
    sql::Transaction tx(db);
    auto st = db.prepare(
        "SELECT rowid, kind, issued_at FROM commands WHERE pseudonym = ?1 AND delivered_at IS NULL ORDER BY rowid");
    st.bind(1, p.id.hex());
    std::vector<std::int64_t> rows;
    while (st.step()) {
        rows.push_back(st.i64(0));
        feed.commands.push_back({p.id, SyncCommand::Kind::force_sync_wifi, st.i64(2), now});
    }
    for (auto row : rows) db.prepare("UPDATE commands SET delivered_at = ?2 WHERE rowid = ?1").bind(1, row).bind(2, now).run();
    tx.commit();
    return feed;
}

std::vector<AnswerStatus> Backend::submit_answers(std::string_view token, const std::vector<AnswerSubmission>& answers) {
    auto& p = authenticate(token);
    std::lock_guard plock(p.m);
    if (p.erased) throw Error(Errc::auth_failure, "participant has been erased");
    const auto now = clock_.now();
    advance(p, now);

    std::vector<AnswerStatus> statuses;
    for (const auto& sub : answers) {
        const auto& id = sub.answer.task_id;
        AnswerStatus status{id, AnswerStatus::Status::accepted, std::nullopt, {}};
        if (p.queue->outcome(id) == TaskOutcome::answered) {
            status.status = AnswerStatus::Status::duplicate;
            statuses.push_back(std::move(status));
            continue;
        }
        auto task_it = std::find_if(p.queue->pending().begin(), p.queue->pending().end(),
                                    [&](auto& t) { return t.task_id == id; });
        std::optional<DiaryTask> task;
        if (task_it != p.queue->pending().end()) task = *task_it;
        try {
            auto acc = p.queue->accept_answer(id, sub.answer, sub.notified_at, config_);
            std::lock_guard lock(db_mutex_);
            auto& db = collection_->db();
            sql::Transaction tx(db);
            auto ins = db.prepare(
                "INSERT INTO answers(task_id, item, pseudonym, kind, episode_start, codebook, code, open_text) "
                "VALUES(?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8)");
            for (std::size_t i = 0; i < acc.answer.answers.size(); ++i) {
                const auto& item = acc.answer.answers[i];
                ins.reset();
                ins.bind(1, id.hex())
                    .bind(2, static_cast<std::int64_t>(i))
                    .bind(3, p.id.hex())
                    .bind(4, to_string(task->kind))
                    .bind(5, task->episode_start)
                    .bind(6, to_string(item.codebook))
                    .bind(7, item.code)
                    .bind(8, item.open_text)
                    .run();
            }
            const auto& tm = acc.telemetry;
            db.prepare(
                  "INSERT INTO telemetry(task_id, pseudonym, episode_start, notified_at, reaction_ms, completion_ms, "
                  "delivered_offline, answered_at_start, answered_at_end, same_as_previous) "
                  "VALUES(?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10)")
                .bind(1, id.hex())
                .bind(2, p.id.hex())
                .bind(3, task->episode_start)
                .bind(4, tm.notified_at)
                .bind(5, tm.reaction_ms)
                .bind(6, tm.completion_ms)
                .bind(7, tm.delivered_offline ? 1 : 0)
                .bind(8, acc.answer.answered_at_start)
                .bind(9, acc.answer.answered_at_end)
                .bind(10, acc.answer.same_as_previous ? 1 : 0)
                .run();
            db.prepare(
                  "INSERT INTO tasks(task_id, pseudonym, kind, episode_start, emit_at, expiry, state) "
                  "VALUES(?1, ?2, ?3, ?4, ?5, ?6, 'answered') ON CONFLICT(task_id) DO UPDATE SET state = 'answered'")
                .bind(1, id.hex())
                .bind(2, p.id.hex())
                .bind(3, to_string(task->kind))
                .bind(4, task->episode_start)
                .bind(5, task->emit_at)
                .bind(6, task->expiry)
                .run();
            db.prepare("UPDATE participants SET last_answer_at = ?2 WHERE pseudonym = ?1")
                .bind(1, p.id.hex())
                .bind(2, now)
                .run();
            tx.commit();
        } catch (const Error& e) {
            if (e.code() != Errc::unknown_task && e.code() != Errc::window_expired && e.code() != Errc::invalid_answer)
                throw;
            status.status = AnswerStatus::Status::rejected;
            status.error = e.code();
            status.message = e.what();
        }
        statuses.push_back(std::move(status));
    }
    persist_queue(p);
    return statuses;
}

SupervisorStatus Backend::supervisor_status(std::string_view credential) {
    require_supervisor(credential);
    SupervisorStatus s;
    s.generated_at = clock_.now();
    s.silence_threshold_ms = options_.silence_threshold_ms;

    std::vector<Participant*> all;
    {
        std::lock_guard lock(registry_mutex_);
        for (auto& [_, p] : participants_) all.push_back(p.get());
    }
    std::map<Id128, std::size_t> backlog;
    for (auto* p : all) {
        std::lock_guard plock(p->m);
        if (p->erased || p->consent != Consent::granted) continue;
        advance(*p, s.generated_at);
        persist_queue(*p);
        backlog[p->id] = p->queue->pending().size();
    }

    std::lock_guard lock(db_mutex_);
    auto& db = collection_->db();
    db.exec("BEGIN");
    try {
        std::map<Id128, ParticipantStatus> rows;
        auto st = db.prepare("SELECT pseudonym, consent, registered_at, last_chunk_at, last_answer_at FROM participants");
        while (st.step()) {
            ParticipantStatus r;
            r.pseudonym_id = id_of(st.text(0));
            r.consent = consent_from_string(st.text(1)).value_or(Consent::pending);
            r.registered_at = st.i64(2);
            r.last_chunk_at = st.opt_i64(3);
            r.last_answer_at = st.opt_i64(4);
            rows.emplace(r.pseudonym_id, std::move(r));
        }
        auto chunks = db.prepare("SELECT pseudonym, count(*), sum(readings) FROM chunks GROUP BY pseudonym");
        while (chunks.step())
            if (auto it = rows.find(id_of(chunks.text(0))); it != rows.end()) {
                it->second.chunks_total = static_cast<std::uint64_t>(chunks.i64(1));
                it->second.readings_total = static_cast<std::uint64_t>(chunks.i64(2));
            }
        auto answers = db.prepare("SELECT pseudonym, count(*) FROM telemetry GROUP BY pseudonym");
        while (answers.step())
            if (auto it = rows.find(id_of(answers.text(0))); it != rows.end())
                it->second.answers_total = static_cast<std::uint64_t>(answers.i64(1));
        auto cmds = db.prepare("SELECT pseudonym, kind, issued_at FROM commands WHERE delivered_at IS NULL ORDER BY rowid");
        while (cmds.step())
            if (auto it = rows.find(id_of(cmds.text(0))); it != rows.end())
                it->second.pending_commands.push_back({it->first, SyncCommand::Kind::force_sync_wifi, cmds.i64(2), {}});
        db.exec("COMMIT");
        for (auto& [id, r] : rows) {
            if (r.consent != Consent::granted) continue;
            r.backlog_size = backlog.count(id) ? backlog[id] : 0;
            r.silent = s.generated_at - r.last_chunk_at.value_or(r.registered_at) > options_.silence_threshold_ms;
            s.participants.push_back(std::move(r));
        }
    } catch (...) {
        db.exec("ROLLBACK");
        throw;
    }
    return s;
}

SyncCommand Backend::trigger_sync(std::string_view credential, const Id128& pseudonym_id) {
    require_supervisor(credential);
    auto& p = participant(pseudonym_id);
    std::lock_guard plock(p.m);
    if (p.erased || p.consent != Consent::granted)
        throw Error(Errc::unknown_participant, "no active participant " + pseudonym_id.hex());
    std::lock_guard lock(db_mutex_);
    auto& db = collection_->db();
    sql::Transaction tx(db);
    auto st = db.prepare(
        "SELECT issued_at FROM commands WHERE pseudonym = ?1 AND kind = 'force_sync_wifi' AND delivered_at IS NULL");
    st.bind(1, pseudonym_id.hex());
    if (st.step()) return {pseudonym_id, SyncCommand::Kind::force_sync_wifi, st.i64(0), {}};
    SyncCommand cmd{pseudonym_id, SyncCommand::Kind::force_sync_wifi, clock_.now(), {}};
    db.prepare("INSERT INTO commands(pseudonym, kind, issued_at) VALUES(?1, 'force_sync_wifi', ?2)")
        .bind(1, pseudonym_id.hex())
        .bind(2, cmd.issued_at)
        .run();
    tx.commit();
    return cmd;
}

ErasureReport Backend::erase_participant(std::string_view credential, const Id128& pseudonym_id) {
    bool supervisor = true;
    try {
        require_supervisor(credential);
    } catch (const Error&) {
        supervisor = false;
    }
    if (!supervisor) {
        SessionToken t;
        try {
            t = SessionToken::verify(options_.server_key, credential);
        } catch (const Error&) {
            throw Error(Errc::unauthorized, "erasure needs the participant's token or the supervisor credential");
        }
        if (t.pseudonym_id != pseudonym_id) throw Error(Errc::unauthorized, "token belongs to another participant");
    }
    auto& p = participant(pseudonym_id);
    std::lock_guard plock(p.m);
    if (p.erased) throw Error(Errc::unknown_participant, "no participant " + pseudonym_id.hex());

    ErasureReport r;
    r.pseudonym_id = pseudonym_id;
    auto store_report = store_->erase_pseudonym(pseudonym_id);
    r.readings = store_report.readings;
    r.partitions = store_report.partitions;

    auto dl = dead_letter_dir() / pseudonym_id.hex();
    if (fs::exists(dl)) {
        for (auto& e : fs::directory_iterator(dl))
            if (e.is_regular_file()) ++r.dead_letters;
        fs::remove_all(dl);
    }

    const auto hex = pseudonym_id.hex();
    std::lock_guard lock(db_mutex_);
    {
        auto& db = collection_->db();
        sql::Transaction tx(db);
        auto del = [&](const char* table) {
            db.prepare(std::string("DELETE FROM ") + table + " WHERE pseudonym = ?1").bind(1, hex).run();
            return static_cast<std::size_t>(db.changes());
        };
        r.chunks = del("chunks");
        del("answers");
        auto answered = db.prepare("SELECT count(*) FROM telemetry WHERE pseudonym = ?1");
        answered.bind(1, hex);
        answered.step();
        r.answers = static_cast<std::size_t>(answered.i64(0));
        answered.reset();
        r.telemetry = del("telemetry");
        r.tasks = del("tasks");
        r.commands = del("commands");
        del("participants");
        db.prepare(
              "INSERT INTO erasures(erased_at, readings, partitions, chunks, answers, telemetry, tasks, commands, "
              "dead_letters) VALUES(?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9)")
            .bind(1, clock_.now())
            .bind(2, static_cast<std::int64_t>(r.readings))
            .bind(3, static_cast<std::int64_t>(r.partitions))
            .bind(4, static_cast<std::int64_t>(r.chunks))
            .bind(5, static_cast<std::int64_t>(r.answers))
            .bind(6, static_cast<std::int64_t>(r.telemetry))
            .bind(7, static_cast<std::int64_t>(r.tasks))
            .bind(8, static_cast<std::int64_t>(r.commands))
            .bind(9, static_cast<std::int64_t>(r.dead_letters))
            .run();
        tx.commit();
    }
    std::optional<std::string> contact_ref;
    {
        sql::Transaction tx(*linkage_);
        auto st = linkage_->prepare("SELECT contact_ref FROM linkage WHERE pseudonym = ?1");
        st.bind(1, hex);
        if (st.step()) contact_ref = st.text(0);
        linkage_->prepare("DELETE FROM linkage WHERE pseudonym = ?1").bind(1, hex).run();
        bool orphan = false;
        if (contact_ref) {
            auto rest = linkage_->prepare("SELECT count(*) FROM linkage WHERE contact_ref = ?1");
            rest.bind(1, *contact_ref);
            rest.step();
            orphan = rest.i64(0) == 0;
        }
        tx.commit();
        if (orphan) identity_->prepare("DELETE FROM identity WHERE contact_ref = ?1").bind(1, *contact_ref).run();
    }
    // Deleted rows may linger in free pages and the WAL until overwritten.
    for (auto* db : {&collection_->db(), linkage_.get(), identity_.get()}) {
        db->exec("VACUUM");
        db->exec("PRAGMA wal_checkpoint(TRUNCATE)");
    }

    p.erased = true;
    p.queue.reset();
    p.timeline.clear();
    return r;
}

std::vector<IdentityRecord> Backend::identity_export(std::string_view credential) {
    require_supervisor(credential);
    std::lock_guard lock(db_mutex_);
    std::vector<IdentityRecord> out;
    auto st = identity_->prepare("SELECT contact_ref, contact, created_at FROM identity ORDER BY created_at, contact_ref");
    while (st.step()) out.push_back({id_of(st.text(0)), st.text(1), st.i64(2)});
    return out;
}

}  // namespace ilog
