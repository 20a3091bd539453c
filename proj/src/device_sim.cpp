#include "ilog/device_sim.hpp"

#include <boost/algorithm/string.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <thread>

namespace ilog {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

std::mt19937_64 rng_for(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
    return std::mt19937_64(splitmix64(seed ^ splitmix64(a ^ splitmix64(b))));
}

double uniform(std::mt19937_64& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

template <typename T, std::size_t N>
const T& pick(std::mt19937_64& rng, const std::array<T, N>& xs) {
    return xs[rng() % N];
}

double round3(double v) { return std::round(v * 1000.0) / 1000.0; }

[[noreturn]] void invalid(const std::string& field, const std::string& what) {
    throw Error(Errc::validation_error, field + ": " + what, field);
}

constexpr std::array<const char*, 6> kApps = {"com.whatsapp", "com.google.android.gm", "org.mozilla.firefox",
                                              "com.spotify.music", "com.instagram.android", "com.android.dialer"};
constexpr std::array<const char*, 5> kNotifiers = {"com.whatsapp", "com.google.android.gm", "com.facebook.orca",
                                                   "org.telegram.messenger", "com.instagram.android"};
constexpr std::array<const char*, 4> kSsids = {"home-net", "office-wifi", "eduroam", ""};
constexpr std::array<const char*, 3> kAudioModes = {"normal", "vibrate", "silent"};
constexpr std::array<const char*, 4> kCellular = {"LTE", "HSPA+", "UMTS", "EDGE"};

const char* text_choice(const SensorSpec& spec, std::mt19937_64& rng) {
    if (spec.key == "audio_mode") return pick(rng, kAudioModes);
    if (spec.key == "notifications") return pick(rng, kNotifiers);
    if (spec.key == "wifi_network_connected") return pick(rng, kSsids);
    if (spec.key == "cellular_network_info") return pick(rng, kCellular);
    return pick(rng, kApps);
}

// Slow sinusoid + activity-dependent amplitude + noise.
void waveform(const SensorSpec& spec, TimestampMs ts, int tz_offset_min, std::mt19937_64& rng,
              std::vector<Value>& out) {
    auto local_hour = utc_hour(ts + tz_offset_min * kMsPerMinute);
    double amp = (local_hour < 7) ? 0.05 : (local_hour >= 9 && local_hour < 18 ? 1.0 : 0.6);
    double phase = 2.0 * std::numbers::pi * static_cast<double>(ts % (10 * kMsPerMinute)) / (10.0 * kMsPerMinute);
    std::normal_distribution<double> noise(0.0, 0.02 * amp + 0.001);
    for (int i = 0; i < spec.value_arity; ++i) {
        double base = 0;
        if (spec.key == "temperature") base = 21;
        else if (spec.key == "atmospheric_pressure") base = 1013;
        else if (spec.key == "humidity") base = 45;
        else if (i == 2 && (spec.key == "acceleration" || spec.key == "gravity")) base = 9.81;
        out.push_back(round3(base + 0.5 * amp * std::sin(phase + i) + noise(rng)));
    }
}

void polled_values(const SensorSpec& spec, std::mt19937_64& rng, std::vector<Value>& out) {
    if (spec.key == "location") {
        std::normal_distribution<double> jitter(0.0, 0.002);
        out.push_back(std::round((46.0667 + jitter(rng)) * 1e5) / 1e5);
        out.push_back(std::round((11.1500 + jitter(rng)) * 1e5) / 1e5);
        out.push_back(static_cast<double>(5 + rng() % 40));
        return;
    }
    for (int i = 0; i < spec.value_arity; ++i) {
        switch (spec.value_kind) {
            case ValueKind::numeric: out.push_back(static_cast<double>(rng() % 13)); break;
            case ValueKind::text: out.push_back(std::string(text_choice(spec, rng))); break;
            case ValueKind::boolean: out.push_back(static_cast<bool>(rng() % 2)); break;
        }
    }
}

Value on_change_value(const SensorSpec& spec, std::mt19937_64& rng, OnChangeState& st) {
    if (spec.key == "screen_status") {
        st.screen_on = !st.screen_on;
        return st.screen_on;
    }
    if (spec.key == "battery_level") {
        if (st.battery <= 15) st.battery = 100;
        else st.battery = std::max(15.0, st.battery - static_cast<double>(1 + rng() % 2));
        return st.battery;
    }
    if (spec.key == "battery_charge") {
        st.charging = !st.charging;
        return st.charging;
    }
    switch (spec.value_kind) {
        case ValueKind::boolean: {
            auto& b = st.toggles[spec.id];
            b = !b;
            return b;
        }
        case ValueKind::text: return std::string(text_choice(spec, rng));
        case ValueKind::numeric:
            if (spec.key == "proximity") return (rng() % 2) ? 5.0 : 0.0;
            return static_cast<double>(rng() % 600);  // call duration / message length
    }
    return 0.0;
}

}  // namespace

std::int64_t LogNormal::sample_ms(std::mt19937_64& rng) const {
    std::lognormal_distribution<double> d(std::log(median_s), sigma);
    return static_cast<std::int64_t>(std::llround(d(rng) * 1000.0));
}

bool ConnectivityModel::online_at(TimestampMs t) const { return !window_start(t); }

std::optional<TimestampMs> ConnectivityModel::window_start(TimestampMs t) const {
    for (const auto& w : schedule) {
        if (t < w.start) break;
        if (t < w.end) return w.start;
    }
    return std::nullopt;
}

void validate(const DeviceProfile& p) {
    auto prob = [](const char* field, double v) {
        if (!(v >= 0.0 && v <= 1.0)) invalid(field, "must be within [0, 1]");
    };
    prob("answer_prob", p.behavior.answer_prob);
    prob("same_as_previous_prob", p.behavior.same_as_previous_prob);
    for (auto [field, d] : {std::pair{"reaction", p.behavior.reaction_delay},
                            std::pair{"completion", p.behavior.completion_time}})
        if (!(d.median_s > 0) || !(d.sigma > 0)) invalid(field, "median and sigma must be > 0");
    if (p.behavior.dropout_day && *p.behavior.dropout_day < p.join_day)
        invalid("dropout_day", "before join_day");
    if (p.join_day < 0) invalid("join_day", "must be >= 0");
    if (p.connectivity.sync_period_s < 1) invalid("sync_period_s", "must be >= 1");
    TimestampMs prev_end = INT64_MIN;
    for (const auto& w : p.connectivity.schedule) {
        if (w.end <= w.start) invalid("offline", "window end must follow its start");
        if (w.start < prev_end) invalid("offline", "windows must be disjoint and ordered");
        prev_end = w.end;
    }
}

std::uint64_t derive_device_seed(std::uint64_t master_seed, std::size_t index) {
    return splitmix64(splitmix64(master_seed) ^ (0xa5a5a5a5ull + index));
}

std::vector<SensorReading> synthesize_on_change(const StudyConfig& config, SensorId sensor_id, TimestampMs tick,
                                                std::int64_t tick_len_ms, std::mt19937_64& rng,
                                                OnChangeState& state, const SensorCatalog& catalog) {
    const auto& spec = catalog.at(sensor_id);
    auto sampling = config.sampling_of(sensor_id, catalog);
    const auto* oc = std::get_if<OnChange>(sampling ? &*sampling : &spec.sampling);
    if (!oc) throw Error(Errc::wrong_kind, spec.key + " is not an on-change sensor");
    std::vector<SensorReading> out;
    if (!sampling || tick_len_ms <= 0) return out;

    double lambda = oc->events_per_day * static_cast<double>(tick_len_ms) / static_cast<double>(kMsPerDay);
    auto n = lambda > 0 ? std::poisson_distribution<int>(lambda)(rng) : 0;
    std::vector<TimestampMs> at(static_cast<std::size_t>(n));
    for (auto& t : at) t = tick + static_cast<TimestampMs>(rng() % static_cast<std::uint64_t>(tick_len_ms));
    std::sort(at.begin(), at.end());
    for (auto t : at) out.push_back({sensor_id, t, {on_change_value(spec, rng, state)}});
    return out;
}

// ---- SimDevice ----

SimDevice::SimDevice(const StudyConfig& config, DeviceProfile profile, const SensorCatalog& catalog)
    : config_(config), catalog_(catalog), profile_(std::move(profile)) {
    validate(profile_);
    for (const auto& [id, _] : config_.sensors_enabled) {
        if (!config_.sampling_of(id, catalog_)) continue;
        if (!profile_.enabled_sensors.empty() && !profile_.enabled_sensors.count(id)) continue;
        sensors_.push_back(id);
    }
    join_at_ = config_.start_ms() + profile_.join_day * kMsPerDay;
    if (profile_.behavior.dropout_day) stop_at_ = config_.start_ms() + (*profile_.behavior.dropout_day + 1) * kMsPerDay;
}

std::size_t SimDevice::buffered_readings() const { return buffer_ ? buffer_->size() : 0; }

bool SimDevice::answering(TimestampMs t) const {
    return profile_.active && registered() && t >= join_at_ && (!stop_at_ || t < *stop_at_);
}

bool SimDevice::collecting(TimestampMs t) const { return answering(t) && t < config_.end_ms(); }

std::vector<SensorReading> SimDevice::sense(TimestampMs tick, std::int64_t len) {
    std::vector<SensorReading> out;
    auto rng = rng_for(profile_.seed, static_cast<std::uint64_t>(tick), 1);
    const TimestampMs end = tick + len;
    for (auto id : sensors_) {
        const auto& spec = catalog_.at(id);
        auto sampling = *config_.sampling_of(id, catalog_);
        if (auto* f = std::get_if<FixedRate>(&sampling)) {
            // Reading k at floor(k * den * 1000 / num).
            const __int128 num = f->rate.num, step = static_cast<__int128>(f->rate.den) * 1000;
            __int128 k = (static_cast<__int128>(tick) * num + step - 1) / step;
            for (;; ++k) {
                auto ts = static_cast<TimestampMs>(k * step / num);
                if (ts >= end) break;
                SensorReading r{id, ts, {}};
                r.values.reserve(static_cast<std::size_t>(spec.value_arity));
                waveform(spec, ts, profile_.tz_offset_min, rng, r.values);
                out.push_back(std::move(r));
            }
        } else if (auto* p = std::get_if<Polled>(&sampling)) {
            const TimestampMs period = p->period_s * kMsPerSecond;
            for (TimestampMs ts = (tick + period - 1) / period * period; ts < end; ts += period) {
                SensorReading r{id, ts, {}};
                polled_values(spec, rng, r.values);
                out.push_back(std::move(r));
            }
        } else {
            auto ev = synthesize_on_change(config_, id, tick, len, rng, on_change_, catalog_);
            std::move(ev.begin(), ev.end(), std::back_inserter(out));
        }
    }
    std::stable_sort(out.begin(), out.end(), reading_order);
    return out;
}

void SimDevice::do_register(BackendApi& api, TimestampMs tick) {
    RegisterRequest req;
    req.study_code = config_.study_code;
    req.contact = "participant-" + profile_.label + "@example.org";
    req.tz_offset_min = profile_.tz_offset_min;
    req.enabled_sensors = profile_.enabled_sensors;
    req.background = {{"occupation", "student"}, {"activity_status", "full-time"}};
    auto reg = api.register_participant(req);
    token_ = reg.token;
    key_ = reg.device_key;
    profile_.pseudonym_id = reg.pseudonym_id;
    buffer_.emplace(reg.pseudonym_id, tick);
    last_sync_ = last_poll_ = tick;
    for (const auto& t : generate_timeline(config_, profile_.tz_offset_min, reg.pseudonym_id))
        if (t.emit_at > reg.registered_at) emit_times_.push_back(t.emit_at);
}

void SimDevice::seal() {
    if (!buffer_ || buffer_->empty()) return;
    outbox_.push_back(seal_chunk(*buffer_, key_));
    ++counters_.chunks_sealed;
}

bool SimDevice::upload(BackendApi& api, TimestampMs tick, StepResult& out) {
    while (!outbox_.empty()) {
        auto& chunk = outbox_.front();
        auto bytes = chunk.serialize();
        try {
            api.upload_chunk(token_, bytes);
            if (duplicate_uploads_) {
                auto again = api.upload_chunk(token_, bytes);
                if (again.status == UploadReceipt::Status::duplicate) ++counters_.duplicate_receipts;
            }
        } catch (const Error& e) {
            if (e.code() != Errc::backend_unavailable) throw;
            ++counters_.upload_failures;
            if (++failures_ > 8) throw;
            auto backoff = std::min<std::int64_t>(kMsPerMinute << failures_,
                                                  profile_.connectivity.sync_period_s * kMsPerSecond);
            retry_at_ = tick + backoff;
            return false;
        }
        failures_ = 0;
        ++counters_.chunks_uploaded;
        counters_.readings_acknowledged += chunk.header.reading_count;
        out.uploads.push_back(std::move(chunk));
        outbox_.erase(outbox_.begin());
    }
    return true;
}

void SimDevice::plan_answer(const DiaryTask& task, TimestampMs notified_at) {
    auto rng = rng_for(profile_.seed, static_cast<std::uint64_t>(task.episode_start),
                       static_cast<std::uint64_t>(task.kind) + 2);
    const auto& b = profile_.behavior;
    if (uniform(rng) >= b.answer_prob) return;
    Planned p;
    p.task = task;
    p.notified_at = notified_at;
    auto reaction = b.reaction_delay.sample_ms(rng);
    auto completion = b.completion_time.sample_ms(rng);
    p.answer.task_id = task.task_id;
    p.answer.answered_at_start = notified_at + reaction;
    p.answer.answered_at_end = p.answer.answered_at_start + completion;
    p.submit_at = p.answer.answered_at_end;
    if (stop_at_ && p.submit_at >= *stop_at_) return;

    std::optional<int> activity;
    for (const auto& q : task.questions) {
        if (q.conditional && !(q.codebook == CodebookId::transport && activity == config_.travelling_code)) continue;
        const auto& cb = config_.codebook(q.codebook);
        AnswerItem item{q.codebook, 0, std::nullopt};
        auto open = cb.open_code();
        int closed = static_cast<int>(cb.entries.size()) - (open ? 1 : 0);
        if (open && uniform(rng) < 0.03) {
            item.code = *open;
            item.open_text = "other " + std::string(to_string(q.codebook));
        } else {
            item.code = 1 + static_cast<int>(rng() % static_cast<std::uint64_t>(closed));
        }
        if (q.codebook == CodebookId::activity) activity = item.code;
        p.answer.answers.push_back(std::move(item));
    }
    p.answer.same_as_previous = task.kind == TaskKind::episode && uniform(rng) < b.same_as_previous_prob;
    planned_.push_back(std::move(p));
}

void SimDevice::submit_due(BackendApi& api, TimestampMs tick, StepResult& out, bool all) {
    std::vector<Planned> due, later;
    for (auto& p : planned_) (all || p.submit_at <= tick ? due : later).push_back(std::move(p));
    planned_ = std::move(later);
    if (due.empty()) return;
    std::stable_sort(due.begin(), due.end(),
                     [](const Planned& a, const Planned& b) { return a.submit_at < b.submit_at; });

    std::vector<AnswerSubmission> subs;
    for (auto& p : due) {
        DiaryAnswer a = p.answer;
        if (a.same_as_previous) {
            if (accepted_episode_) a.answers.clear();
            else a.same_as_previous = false;
        }
        subs.push_back({std::move(a), p.notified_at});
    }
    std::vector<AnswerStatus> results;
    try {
        results = api.submit_answers(token_, subs);
    } catch (const Error& e) {
        if (e.code() != Errc::backend_unavailable) throw;
        ++counters_.upload_failures;
        if (++failures_ > 8) throw;
        for (auto& p : due) planned_.push_back(std::move(p));  // next tick
        return;
    }
    for (std::size_t i = 0; i < due.size() && i < results.size(); ++i) {
        const auto& p = due[i];
        ++counters_.answers_submitted;
        auto st = results[i].status;
        if (st == AnswerStatus::Status::rejected) ++counters_.answers_rejected;
        else ++counters_.answers_accepted;
        if (st == AnswerStatus::Status::accepted && p.task.kind == TaskKind::episode) accepted_episode_ = true;
        if (st != AnswerStatus::Status::rejected) out.answers.push_back(subs[i].answer);
        answer_log_.push_back({p.task.task_id, p.task.kind, p.task.episode_start, p.task.emit_at, p.notified_at,
                               p.answer.answered_at_start - p.notified_at,
                               p.answer.answered_at_end - p.answer.answered_at_start, st});
    }
}

void SimDevice::poll(BackendApi& api, TimestampMs tick, StepResult&) {
    TaskFeed feed;
    try {
        feed = api.fetch_tasks(token_, offline_since_);
    } catch (const Error& e) {
        if (e.code() != Errc::backend_unavailable) throw;
        ++counters_.upload_failures;
        if (++failures_ > 8) throw;
        return;
    }
    offline_since_.reset();
    last_poll_ = tick;
    while (emit_cursor_ < emit_times_.size() && emit_times_[emit_cursor_] <= tick) ++emit_cursor_;
    const bool live = answering(tick);
    for (const auto& t : feed.tasks) {
        if (!seen_.insert(t.task_id).second) continue;
        ++counters_.tasks_seen;
        if (live) plan_answer(t, tick);
    }
    for (const auto& c : feed.commands) {
        ++counters_.commands_received;
        if (c.kind == SyncCommand::Kind::force_sync_wifi) force_sync_ = true;
    }
}

StepResult SimDevice::step(BackendApi& api, TimestampMs tick, std::int64_t tick_len_ms) {
    StepResult out;
    if (!profile_.active) {
        if (!registered()) do_register(api, tick);
        return out;
    }
    if (tick < join_at_) return out;
    if (!registered()) do_register(api, tick);

    const bool sensing = collecting(tick);
    const bool live = answering(tick);
    if (sensing) {
        out.readings = sense(tick, tick_len_ms);
        counters_.readings_generated += out.readings.size();
        for (const auto& r : out.readings)
            if (buffer_->append(r, config_, catalog_) == ReadingBuffer::Append::seal_requested) seal();
    } else if (!live && buffer_->empty() && outbox_.empty() && planned_.empty()) {
        return out;
    }

    const auto& conn = profile_.connectivity;
    if (auto w = conn.window_start(tick)) {
        if (!was_offline_) offline_since_ = *w;
        was_offline_ = true;
        return out;
    }
    const bool reconnected = was_offline_;
    was_offline_ = false;

    const TimestampMs period = conn.sync_period_s * kMsPerSecond;
    const bool task_due = emit_cursor_ < emit_times_.size() && emit_times_[emit_cursor_] <= tick;
    if (live && (task_due || reconnected || tick - last_poll_ >= period)) poll(api, tick, out);
    submit_due(api, tick, out, false);

    bool sync = force_sync_ || (conn.auto_sync && (reconnected || tick - last_sync_ >= period)) || !sensing;
    if (failures_ > 0) sync = sync || tick >= retry_at_;
    if (failures_ > 0 && tick < retry_at_) sync = false;
    if (sync) {
        seal();
        if (upload(api, tick, out)) {
            last_sync_ = tick;
            force_sync_ = false;
        }
    }
    return out;
}

StepResult SimDevice::drain(BackendApi& api, TimestampMs now) {
    StepResult out;
    if (!profile_.active || !registered()) return out;
    submit_due(api, now, out, false);
    planned_.clear();
    seal();
    while (!upload(api, now, out)) std::this_thread::sleep_for(std::chrono::milliseconds(50));
    return out;
}

// ---- fleet ----

FleetRun run_fleet(const StudyConfig& config, std::vector<DeviceProfile> fleet, std::uint64_t master_seed,
                   BackendApi& api, const FleetOptions& options, const SensorCatalog& catalog) {
    if (fleet.empty()) throw Error(Errc::validation_error, "fleet must not be empty", "fleet");
    if (options.tick_ms <= 0 || kMsPerMinute % options.tick_ms != 0)
        throw Error(Errc::validation_error, "tick must divide one minute", "tick_ms");
    const int days = config.span_days();
    const TimestampMs t0 = config.start_ms(), t1 = config.end_ms();

    std::vector<SimDevice> devices;
    devices.reserve(fleet.size());
    for (std::size_t i = 0; i < fleet.size(); ++i) {
        if (!fleet[i].seed) fleet[i].seed = derive_device_seed(master_seed, i);
        devices.emplace_back(config, fleet[i], catalog);
        devices.back().set_duplicate_uploads(options.duplicate_uploads);
    }

    // Per device: reporting days, per-sensor hour masks, readings per day.
    struct Acc {
        std::vector<std::int64_t> readings;
        std::map<SensorId, std::vector<std::uint32_t>> hours;
    };
    std::vector<Acc> acc(devices.size());
    for (auto& a : acc) a.readings.assign(static_cast<std::size_t>(days), 0);

    const auto real_start = std::chrono::steady_clock::now();
    const TimestampMs stop = t1 + std::max<std::int64_t>(0, options.answer_grace_ms);
    for (TimestampMs tick = t0; tick < stop; tick += options.tick_ms) {
        if (tick < t1 && (tick - t0) % kMsPerDay == 0 && options.on_day) options.on_day(tick);
        if (options.faster_than_real > 0) {
            auto due = real_start + std::chrono::microseconds(static_cast<std::int64_t>(
                                        static_cast<double>(tick - t0) * 1000.0 / options.faster_than_real));
            std::this_thread::sleep_until(due);
        }
        api.set_time(tick);
        for (std::size_t i = 0; i < devices.size(); ++i) {
            auto res = devices[i].step(api, tick, options.tick_ms);
            for (const auto& r : res.readings) {
                auto day = static_cast<std::size_t>((r.ts_ms - t0) / kMsPerDay);
                if (day >= static_cast<std::size_t>(days)) continue;
                ++acc[i].readings[day];
                auto& mask = acc[i].hours[r.sensor_id];
                if (mask.empty()) mask.assign(static_cast<std::size_t>(days), 0);
                mask[day] |= 1u << utc_hour(r.ts_ms);
            }
        }
    }
    api.set_time(stop);
    for (auto& d : devices) d.drain(api, stop);

    FleetRun run;
    auto& rep = run.report;
    rep.days.resize(static_cast<std::size_t>(days));
    for (int d = 0; d < days; ++d) rep.days[static_cast<std::size_t>(d)].day = Date{config.start.days + d};
    auto& tot = rep.totals;
    tot.fleet_size = static_cast<int>(devices.size());
    int with_days = 0;
    double entries_rate_sum = 0;
    for (std::size_t i = 0; i < devices.size(); ++i) {
        const auto& dev = devices[i];
        const auto& c = dev.counters();
        ParticipantReport pr;
        pr.label = dev.profile().label;
        pr.active = dev.profile().active;
        for (int d = 0; d < days; ++d) {
            auto di = static_cast<std::size_t>(d);
            auto& day = rep.days[di];
            if (acc[i].readings[di] > 0) {
                ++day.participants_reporting;
                ++pr.days_reporting;
            }
            day.readings += acc[i].readings[di];
            pr.readings += acc[i].readings[di];
            for (const auto& [sensor, mask] : acc[i].hours) {
                auto h = std::popcount(mask[di]);
                if (h) day.sensor_hours[sensor] += h;
                tot.sensor_hours += h;
            }
        }
        for (const auto& a : dev.answer_log()) {
            if (a.status != AnswerStatus::Status::accepted) continue;
            auto day = (a.episode_start - t0) / kMsPerDay;
            if (a.episode_start < t0 || day >= days) continue;
            ++rep.days[static_cast<std::size_t>(day)].diary_entries;
            ++pr.diary_entries;
        }
        if (pr.days_reporting) {
            pr.entries_per_day = static_cast<double>(pr.diary_entries) / pr.days_reporting;
            ++with_days;
            entries_rate_sum += pr.entries_per_day;
        }
        if (pr.readings > 0) ++tot.participants_reporting;
        tot.readings_generated += c.readings_generated;
        tot.readings_acknowledged += c.readings_acknowledged;
        tot.chunks_uploaded += c.chunks_uploaded;
        tot.duplicate_receipts += c.duplicate_receipts;
        tot.upload_failures += c.upload_failures;
        tot.tasks_seen += c.tasks_seen;
        tot.answers_submitted += c.answers_submitted;
        tot.answers_accepted += c.answers_accepted;
        tot.answers_rejected += c.answers_rejected;
        rep.participants.push_back(std::move(pr));
        run.pseudonyms.push_back(dev.profile().pseudonym_id);
        run.answer_logs.push_back(dev.answer_log());
    }
    tot.mean_entries_per_day = with_days ? entries_rate_sum / with_days : 0.0;
    return run;
}

// ---- fleet file ----

namespace {

std::optional<TimestampMs> parse_instant(std::string_view s) {
    // YYYY-MM-DDTHH:MM[Z]
    if (!s.empty() && s.back() == 'Z') s.remove_suffix(1);
    auto t = s.find('T');
    if (t == std::string_view::npos) return std::nullopt;
    auto d = Date::parse(s.substr(0, t));
    auto hm = TimeOfDay::parse(s.substr(t + 1));
    if (!d || !hm) return std::nullopt;
    return d->start_ms() + hm->minutes * kMsPerMinute;
}

template <typename T>
T number(const std::string& field, const std::string& v) {
    std::istringstream in(v);
    T out{};
    in >> out;
    if (in.fail() || !in.eof()) invalid(field, "expected a number, got '" + v + "'");
    return out;
}

bool boolean(const std::string& field, const std::string& v) {
    if (v == "true" || v == "yes" || v == "1") return true;
    if (v == "false" || v == "no" || v == "0") return false;
    invalid(field, "expected true/false");
}

void apply(DeviceProfile& p, const std::string& field, const std::string& key, const std::string& v,
           const SensorCatalog& catalog) {
    auto& b = p.behavior;
    if (key == "seed") p.seed = number<std::uint64_t>(field, v);
    else if (key == "active") p.active = boolean(field, v);
    else if (key == "join_day") p.join_day = number<int>(field, v);
    else if (key == "dropout_day") {
        if (v == "none") b.dropout_day.reset();
        else b.dropout_day = number<int>(field, v);
    } else if (key == "tz_offset_min") p.tz_offset_min = number<int>(field, v);
    else if (key == "answer_prob") b.answer_prob = number<double>(field, v);
    else if (key == "same_as_previous_prob") b.same_as_previous_prob = number<double>(field, v);
    else if (key == "reaction_median_s") b.reaction_delay.median_s = number<double>(field, v);
    else if (key == "reaction_sigma") b.reaction_delay.sigma = number<double>(field, v);
    else if (key == "completion_median_s") b.completion_time.median_s = number<double>(field, v);
    else if (key == "completion_sigma") b.completion_time.sigma = number<double>(field, v);
    else if (key == "sync_period_s") p.connectivity.sync_period_s = number<int>(field, v);
    else if (key == "auto_sync") p.connectivity.auto_sync = boolean(field, v);
    else if (key == "sensors") {
        p.enabled_sensors.clear();
        if (v == "all") return;
        std::vector<std::string> names;
        boost::split(names, v, boost::is_any_of(","));
        for (auto& n : names) {
            boost::trim(n);
            auto* spec = catalog.find(n);
            if (!spec) invalid(field, "unknown sensor '" + n + "'");
            p.enabled_sensors.insert(spec->id);
        }
    } else if (key == "offline") {
        p.connectivity.schedule.clear();
        std::vector<std::string> items;
        boost::split(items, v, boost::is_any_of(","));
        for (auto& it : items) {
            boost::trim(it);
            if (it.empty()) continue;
            auto slash = it.find('/');
            auto a = slash == std::string::npos ? std::nullopt : parse_instant(std::string_view(it).substr(0, slash));
            auto z = slash == std::string::npos ? std::nullopt : parse_instant(std::string_view(it).substr(slash + 1));
            if (!a || !z) invalid(field, "expected <YYYY-MM-DDTHH:MM>/<YYYY-MM-DDTHH:MM>, got '" + it + "'");
            p.connectivity.schedule.push_back({*a, *z});
        }
    } else {
        invalid(field, "unknown key");
    }
}

}  // namespace

std::vector<DeviceProfile> load_fleet(std::string_view document, const SensorCatalog& catalog) {
    namespace pt = boost::property_tree;
    pt::ptree tree;
    try {
        std::istringstream in{std::string(document)};
        pt::read_ini(in, tree);
    } catch (const pt::ini_parser_error& e) {
        throw Error(Errc::parse_error, e.message() + " at line " + std::to_string(e.line()));
    }
    for (const auto& [key, body] : tree)
        if (!body.data().empty()) throw Error(Errc::parse_error, "key '" + key + "' outside any section");
    // The tree drops sections without keys; take the order from the text.
    std::vector<std::string> sections;
    {
        std::istringstream in{std::string(document)};
        for (std::string line; std::getline(in, line);) {
            boost::trim(line);
            if (line.size() > 2 && line.front() == '[' && line.back() == ']')
                sections.push_back(boost::trim_copy(line.substr(1, line.size() - 2)));
        }
    }
    DeviceProfile defaults;
    std::vector<DeviceProfile> out;
    const pt::ptree empty;
    for (const auto& section : sections) {
        auto found = tree.get_child_optional(pt::ptree::path_type(section, '\0'));
        const auto& body = found ? *found : empty;
        const bool group = section.rfind("group.", 0) == 0;
        if (section == "defaults") {
            for (const auto& [k, v] : body) apply(defaults, section + "." + k, k, boost::trim_copy(v.data()), catalog);
            continue;
        }
        if (!group && section.rfind("profile.", 0) != 0)
            throw Error(Errc::parse_error, "unknown section [" + section + "]");
        DeviceProfile p = defaults;
        p.label = section.substr(group ? 6 : 8);
        int count = 1;
        for (const auto& [k, v] : body) {
            auto field = section + "." + k;
            auto val = boost::trim_copy(v.data());
            if (k == "count" && group) count = number<int>(field, val);
            else apply(p, field, k, val, catalog);
        }
        if (count < 1) invalid(section + ".count", "must be >= 1");
        try {
            validate(p);
        } catch (const Error& e) {
            invalid(section + "." + e.field(), e.what());
        }
        for (int i = 1; i <= count; ++i) {
            auto q = p;
            if (group) {
                q.label = p.label + (i < 10 ? "-0" : "-") + std::to_string(i);
                if (q.seed) q.seed = splitmix64(q.seed + static_cast<std::uint64_t>(i));
            }
            out.push_back(std::move(q));
        }
    }
    if (out.empty()) throw Error(Errc::validation_error, "fleet has no profiles", "fleet");
    return out;
}

namespace {

std::string instant(TimestampMs t) {
    auto d = Date::of(t);
    return d.iso() + "T" + TimeOfDay{static_cast<int>((t - d.start_ms()) / kMsPerMinute)}.str();
}

std::string num(double v) {
    std::ostringstream o;
    o << v;
    return o.str();
}

// key = value lines of `p` that differ from `base`.
std::vector<std::pair<std::string, std::string>> keys_of(const DeviceProfile& p, const DeviceProfile& base,
                                                         const SensorCatalog& catalog) {
    std::vector<std::pair<std::string, std::string>> kv;
    auto put = [&](bool differs, const char* k, std::string v) {
        if (differs) kv.emplace_back(k, std::move(v));
    };
    const auto &b = p.behavior, &d = base.behavior;
    put(p.seed != base.seed, "seed", std::to_string(p.seed));
    put(p.active != base.active, "active", p.active ? "true" : "false");
    put(p.join_day != base.join_day, "join_day", std::to_string(p.join_day));
    put(b.dropout_day != d.dropout_day, "dropout_day", b.dropout_day ? std::to_string(*b.dropout_day) : "none");
    put(p.tz_offset_min != base.tz_offset_min, "tz_offset_min", std::to_string(p.tz_offset_min));
    put(b.answer_prob != d.answer_prob, "answer_prob", num(b.answer_prob));
    put(b.reaction_delay.median_s != d.reaction_delay.median_s, "reaction_median_s", num(b.reaction_delay.median_s));
    put(b.reaction_delay.sigma != d.reaction_delay.sigma, "reaction_sigma", num(b.reaction_delay.sigma));
    put(b.completion_time.median_s != d.completion_time.median_s, "completion_median_s",
        num(b.completion_time.median_s));
    put(b.completion_time.sigma != d.completion_time.sigma, "completion_sigma", num(b.completion_time.sigma));
    put(b.same_as_previous_prob != d.same_as_previous_prob, "same_as_previous_prob", num(b.same_as_previous_prob));
    put(p.connectivity.sync_period_s != base.connectivity.sync_period_s, "sync_period_s",
        std::to_string(p.connectivity.sync_period_s));
    put(p.connectivity.auto_sync != base.connectivity.auto_sync, "auto_sync",
        p.connectivity.auto_sync ? "true" : "false");
    if (p.enabled_sensors != base.enabled_sensors) {
        std::string v;
        for (auto id : p.enabled_sensors) v += (v.empty() ? "" : ", ") + catalog.at(id).key;
        kv.emplace_back("sensors", v.empty() ? "all" : v);
    }
    if (p.connectivity.schedule != base.connectivity.schedule) {
        std::string v;
        for (auto& w : p.connectivity.schedule) v += (v.empty() ? "" : ", ") + instant(w.start) + "/" + instant(w.end);
        kv.emplace_back("offline", v);
    }
    return kv;
}

}  // namespace

std::string format_fleet(const std::vector<DeviceProfile>& fleet, const SensorCatalog& catalog) {
    std::ostringstream out;
    DeviceProfile defaults;
    if (!fleet.empty()) {
        defaults.behavior = fleet.front().behavior;
        defaults.behavior.dropout_day.reset();
        defaults.connectivity.sync_period_s = fleet.front().connectivity.sync_period_s;
    }
    out << "[defaults]\n";
    for (auto& [k, v] : keys_of(defaults, DeviceProfile{}, catalog)) out << k << " = " << v << "\n";
    for (const auto& p : fleet) {
        out << "\n[profile." << p.label << "]\n";
        for (auto& [k, v] : keys_of(p, defaults, catalog)) out << k << " = " << v << "\n";
    }
    return out.str();
}

std::vector<DeviceProfile> load_fleet_file(const std::filesystem::path& path, const SensorCatalog& catalog) {
    std::ifstream in(path);
    if (!in) throw Error(Errc::io_failure, "cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return load_fleet(ss.str(), catalog);
}

// ---- calibration ----

namespace {
// Joiners per study day; everyone else present on day 0.
constexpr std::array<int, 14> kJoiners = {42, 5, 3, 2, 2, 2, 2, 2, 1, 1, 1, 1, 1, 1};
}  // namespace

const std::vector<int>& calibration_reporting_curve() {
    static const std::vector<int> curve = {42, 46, 48, 47, 46, 45, 44, 43, 42, 41, 40, 40, 39, 39};
    return curve;
}

std::vector<DeviceProfile> calibration_fleet() {
    const auto& curve = calibration_reporting_curve();
    BehaviorModel behavior;
    behavior.answer_prob = 0.55;
    behavior.reaction_delay = {300, 1.0};
    behavior.completion_time = {25, 0.4};
    behavior.same_as_previous_prob = 0.3;

    // Join order; the earliest still present drops first.
    std::vector<DeviceProfile> active;
    std::size_t next_drop = 0;
    for (int d = 0; d < static_cast<int>(kJoiners.size()); ++d) {
        for (int j = 0; j < kJoiners[static_cast<std::size_t>(d)]; ++j) {
            DeviceProfile p;
            p.join_day = d;
            p.behavior = behavior;
            active.push_back(std::move(p));
        }
        if (d == 0) continue;
        int drops = curve[static_cast<std::size_t>(d) - 1] + kJoiners[static_cast<std::size_t>(d)] -
                    curve[static_cast<std::size_t>(d)];
        for (int k = 0; k < drops; ++k) active[next_drop++].behavior.dropout_day = d - 1;
    }

    std::vector<DeviceProfile> fleet;
    int n = 0;
    char label[16];
    for (auto& p : active) {
        std::snprintf(label, sizeof label, "a%02d", ++n);
        p.label = label;
        // Every seventh phone loses connectivity for ten hours one night.
        if (n % 7 == 0) {
            int night = std::min(p.join_day + 1, p.behavior.dropout_day.value_or(13));
            auto at = Date::from_ymd(2019, 1, 28).start_ms() + night * kMsPerDay + 22 * kMsPerHour;
            p.connectivity.schedule.push_back({at, at + 10 * kMsPerHour});
        }
        fleet.push_back(std::move(p));
    }
    for (int i = 1; i <= 29; ++i) {
        DeviceProfile p;
        std::snprintf(label, sizeof label, "n%02d", i);
        p.label = label;
        p.behavior = behavior;
        p.active = false;
        fleet.push_back(std::move(p));
    }
    return fleet;
}

StudyConfig desk_scale(StudyConfig config) {
    config.sensors_enabled.clear();
    const auto& cat = SensorCatalog::builtin();
    config.sensors_enabled[cat.find("acceleration")->id] = FixedRate{Rate{1, 60}};
    config.sensors_enabled[cat.find("location")->id] = Polled{300};
    config.sensors_enabled[cat.find("screen_status")->id] = std::nullopt;
    config.sensors_enabled[cat.find("battery_level")->id] = std::nullopt;
    validate(config);
    return config;
}

}  // namespace ilog
