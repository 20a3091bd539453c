#include "ilog/study.hpp"
#include "ilog/crypto.hpp"
#include "ilog/error.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

namespace ilog {

namespace {

SensorSpec hw(SensorId id, std::string key, std::string name, int arity) {
    return {id, std::move(key), std::move(name), SensorKind::hardware,
            FixedRate{Rate{20, 1}}, arity, ValueKind::numeric};
}

SensorSpec event(SensorId id, std::string key, std::string name, double per_day, ValueKind vk,
                 SensorKind kind = SensorKind::software) {
    return {id, std::move(key), std::move(name), kind, OnChange{per_day}, 1, vk};
}

SensorSpec polled(SensorId id, std::string key, std::string name, int period_s, int arity,
                  ValueKind vk, SensorKind kind = SensorKind::software) {
    return {id, std::move(key), std::move(name), kind, Polled{period_s}, arity, vk};
}

std::vector<SensorSpec> builtin_entries() {
    using VK = ValueKind;
    return {
        hw(1, "acceleration", "Acceleration", 3),
        hw(2, "linear_acceleration", "Linear Acceleration", 3),
        hw(3, "gyroscope", "Gyroscope", 3),
        hw(4, "gravity", "Gravity", 3),
        hw(5, "rotation_vector", "Rotation Vector", 3),
        hw(6, "magnetic_field", "Magnetic Field", 3),
        hw(7, "orientation", "Orientation", 3),
        hw(8, "temperature", "Temperature", 1),
        hw(9, "atmospheric_pressure", "Atmospheric Pressure", 1),
        hw(10, "humidity", "Humidity", 1),
        event(11, "screen_status", "Screen Status", 60, VK::boolean),
        event(12, "flight_mode", "Flight Mode", 0.2, VK::boolean),
        event(13, "audio_mode", "Audio Mode", 4, VK::text),
        event(14, "battery_charge", "Battery Charge", 2, VK::boolean),
        event(15, "battery_level", "Battery Level", 85, VK::numeric),
        event(16, "doze_modality", "Doze Modality", 10, VK::boolean),
        event(17, "headset", "Headset", 2, VK::boolean),
        event(18, "music_playback", "Music Playback", 4, VK::boolean),
        event(19, "wifi_network_connected", "WIFI Network Connected", 6, VK::text),
        event(20, "proximity", "Proximity", 40, VK::numeric, SensorKind::hardware),
        event(21, "incoming_calls", "Incoming Calls", 6, VK::numeric),
        event(22, "outgoing_calls", "Outgoing Calls", 4, VK::numeric),
        event(23, "incoming_sms", "Incoming Sms", 5, VK::numeric),
        event(24, "outgoing_sms", "Outgoing Sms", 3, VK::numeric),
        event(25, "notifications", "Notifications", 120, VK::text),
        polled(26, "wifi_networks_available", "WIFI Networks Available", 60, 1, VK::numeric),
        polled(27, "bluetooth_devices", "Bluetooth Device Available", 60, 1, VK::numeric),
        polled(28, "bluetooth_le_devices", "Bluetooth LE Available", 60, 1, VK::numeric),
        polled(29, "location", "Location", 60, 3, VK::numeric, SensorKind::hardware),
        polled(30, "running_application", "Running Application", 5, 1, VK::text),
        event(31, "touch_event", "Touch Event", 500, VK::boolean),
        event(32, "cellular_network_info", "Cellular Network Info", 12, VK::text),
    };
}

Codebook make_codebook(CodebookId id, std::initializer_list<const char*> labels, bool open) {
    Codebook cb{id, {}, open};
    int code = 1;
    for (const char* l : labels) cb.entries.push_back({code++, l});
    return cb;
}

[[noreturn]] void invalid(const std::string& field, const std::string& what) {
    throw Error(Errc::validation_error, field + ": " + what, field);
}

template <typename T>
T parse_number(const std::string& field, std::string_view s) {
    T out{};
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    if (ec != std::errc{} || ptr != s.data() + s.size()) invalid(field, "not a number: " + std::string(s));
    return out;
}

std::string trim(std::string_view s) {
    auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(std::string_view s) {
    std::vector<std::string> out;
    std::size_t pos = 0;
    while (pos <= s.size()) {
        auto comma = s.find(',', pos);
        auto item = trim(s.substr(pos, comma == std::string_view::npos ? s.npos : comma - pos));
        if (!item.empty()) out.push_back(item);
        if (comma == std::string_view::npos) break;
        pos = comma + 1;
    }
    return out;
}

bool parse_bool(const std::string& field, const std::string& v) {
    if (v == "true" || v == "yes" || v == "1") return true;
    if (v == "false" || v == "no" || v == "0") return false;
    invalid(field, "expected true/false, got " + v);
}

/// "default" | "<n>hz" | "<a>/<b>hz" | "every <n>s" | "on_change" | "on_change <x>/day"
std::optional<Sampling> parse_sampling(const std::string& field, const std::string& raw,
                                       const SensorSpec& spec) {
    auto v = trim(raw);
    if (v == "default" || v.empty()) return std::nullopt;
    if (v.size() > 2 && v.substr(v.size() - 2) == "hz") {
        auto r = v.substr(0, v.size() - 2);
        Rate rate;
        if (auto slash = r.find('/'); slash != std::string::npos) {
            rate.num = parse_number<std::int64_t>(field, trim(r.substr(0, slash)));
            rate.den = parse_number<std::int64_t>(field, trim(r.substr(slash + 1)));
        } else {
            rate.num = parse_number<std::int64_t>(field, trim(r));
        }
        return FixedRate{rate};
    }
    if (v.rfind("every ", 0) == 0 && v.back() == 's')
        return Polled{parse_number<int>(field, trim(v.substr(6, v.size() - 7)))};
    if (v.rfind("on_change", 0) == 0) {
        auto rest = trim(v.substr(9));
        if (rest.empty()) {
            if (auto* oc = std::get_if<OnChange>(&spec.sampling)) return *oc;
            return OnChange{};
        }
        if (rest.size() < 5 || rest.substr(rest.size() - 4) != "/day")
            invalid(field, "expected on_change <n>/day");
        return OnChange{parse_number<double>(field, trim(rest.substr(0, rest.size() - 4)))};
    }
    invalid(field, "unrecognised sampling '" + v + "'");
}

void validate_sampling(const std::string& field, const Sampling& s) {
    if (auto* f = std::get_if<FixedRate>(&s)) {
        if (f->rate.num <= 0 || f->rate.den <= 0) invalid(field, "fixed rate must be > 0");
    } else if (auto* p = std::get_if<Polled>(&s)) {
        if (p->period_s < 1) invalid(field, "polling period must be >= 1 s");
    } else if (auto* o = std::get_if<OnChange>(&s)) {
        if (!(o->events_per_day >= 0)) invalid(field, "event rate must be >= 0");
    }
}

}  // namespace

std::string Rate::str() const {
    if (den == 1) return std::to_string(num) + "hz";
    return std::to_string(num) + "/" + std::to_string(den) + "hz";
}

std::string to_string(const Sampling& s) {
    if (auto* f = std::get_if<FixedRate>(&s)) return f->rate.str();
    if (auto* p = std::get_if<Polled>(&s)) return "every " + std::to_string(p->period_s) + "s";
    std::ostringstream os;
    os << "on_change " << std::get<OnChange>(s).events_per_day << "/day";
    return os.str();
}

SensorCatalog::SensorCatalog(std::vector<SensorSpec> entries) : entries_(std::move(entries)) {
    std::set<SensorId> ids;
    for (const auto& e : entries_) {
        if (!ids.insert(e.id).second)
            throw Error(Errc::validation_error, "duplicate sensor id " + std::to_string(e.id));
        validate_sampling("catalog." + e.key, e.sampling);
        if (e.value_arity < 1) throw Error(Errc::validation_error, "arity must be >= 1");
    }
}

const SensorCatalog& SensorCatalog::builtin() {
    static const SensorCatalog catalog{builtin_entries()};
    return catalog;
}

const SensorSpec* SensorCatalog::find(SensorId id) const {
    for (const auto& e : entries_)
        if (e.id == id) return &e;
    return nullptr;
}

const SensorSpec* SensorCatalog::find(std::string_view key) const {
    for (const auto& e : entries_)
        if (e.key == key) return &e;
    return nullptr;
}

const SensorSpec& SensorCatalog::at(SensorId id) const {
    if (auto* s = find(id)) return *s;
    throw Error(Errc::validation_error, "unknown sensor id " + std::to_string(id));
}

std::string_view to_string(CodebookId id) {
    switch (id) {
        case CodebookId::activity: return "activity";
        case CodebookId::location: return "location";
        case CodebookId::transport: return "transport";
        case CodebookId::with_whom: return "with_whom";
        case CodebookId::mood: return "mood";
    }
    return "?";
}

std::optional<CodebookId> codebook_from_string(std::string_view s) {
    for (auto id : kAllCodebooks)
        if (to_string(id) == s) return id;
    return std::nullopt;
}

int expected_codebook_size(CodebookId id) {
    switch (id) {
        case CodebookId::activity: return 19;
        case CodebookId::location: return 13;
        case CodebookId::transport: return 8;
        case CodebookId::with_whom: return 7;
        case CodebookId::mood: return 7;
    }
    return 0;
}

const std::array<Codebook, 5>& default_codebooks() {
    static const std::array<Codebook, 5> books = {
        make_codebook(CodebookId::activity,
                      {"Sleeping", "Eating", "Personal care", "Working", "Studying",
                       "Household and family care", "Volunteering", "Social life",
                       "Entertainment and culture", "Sports", "Hobbies and games", "Reading",
                       "TV and video", "Radio and music", "Internet and smartphone", "Shopping",
                       "Travelling", "Resting", "Other (specify)"},
                      true),
        make_codebook(CodebookId::location,
                      {"Home", "Workplace", "School or university", "Relatives or friends' home",
                       "Restaurant or bar", "Shop", "Sports venue", "Outdoors", "Second home",
                       "Public transport", "Car", "Other public place", "Other (specify)"},
                      true),
        make_codebook(CodebookId::transport,
                      {"On foot", "Bicycle", "Motorbike", "Car", "Bus", "Train", "Tram or metro",
                       "Other (specify)"},
                      true),
        make_codebook(CodebookId::with_whom,
                      {"Nobody", "Partner", "Children", "Other family", "Friends", "Colleagues",
                       "Other (specify)"},
                      true),
        make_codebook(CodebookId::mood,
                      {"1 Very bad", "2 Bad", "3 Rather bad", "4 Neutral", "5 Rather good",
                       "6 Good", "7 Very good"},
                      false),
    };
    return books;
}

std::optional<Sampling> StudyConfig::sampling_of(SensorId id, const SensorCatalog& catalog) const {
    auto it = sensors_enabled.find(id);
    if (it == sensors_enabled.end()) return std::nullopt;
    if (it->second) return *it->second;
    if (auto* spec = catalog.find(id)) return spec->sampling;
    return std::nullopt;
}

void validate(const StudyConfig& c, const SensorCatalog& catalog) {
    if (c.study_code.empty()) invalid("study.study_code", "must not be empty");
    if (c.start > c.end) invalid("study.end", "start must not be after end");
    if (c.diary_resolution_min <= 0 || 1440 % c.diary_resolution_min != 0)
        invalid("study.diary_resolution_min", "must be positive and divide 1440");
    if (c.backlog_cap < 1) invalid("study.backlog_cap", "must be >= 1");
    if (c.reply_window_min && *c.reply_window_min <= 0)
        invalid("study.reply_window", "limited window must be > 0 minutes");
    if (c.sync_period_s < 1) invalid("study.sync_period_s", "must be >= 1");
    if (c.chunk_target_bytes < 1) invalid("study.chunk_target_bytes", "must be >= 1");
    std::set<TimeOfDay> prompts;
    for (auto t : c.mood_prompts)
        if (!prompts.insert(t).second) invalid("study.mood_prompts", "duplicate time " + t.str());
    for (const auto& [id, override] : c.sensors_enabled) {
        auto* spec = catalog.find(id);
        if (!spec) invalid("sensors", "unknown sensor id " + std::to_string(id));
        if (override) validate_sampling("sensors." + spec->key, *override);
    }
    for (auto id : kAllCodebooks) {
        const auto& cb = c.codebook(id);
        auto field = "codebook." + std::string(to_string(id));
        if (cb.id != id) invalid(field, "codebook slot mismatch");
        if (static_cast<int>(cb.entries.size()) != expected_codebook_size(id))
            invalid(field, "expected " + std::to_string(expected_codebook_size(id)) +
                               " entries, got " + std::to_string(cb.entries.size()));
        for (std::size_t i = 0; i < cb.entries.size(); ++i)
            if (cb.entries[i].code != static_cast<int>(i) + 1)
                invalid(field, "codes must be contiguous from 1");
        if (id != CodebookId::mood && !cb.allows_open_text)
            invalid(field, "must include an open-ended category");
    }
    if (!c.codebook(CodebookId::activity).contains(c.travelling_code))
        invalid("study.travelling_code", "not an activity code");
}

StudyConfig load_study_config(std::string_view document, const SensorCatalog& catalog) {
    namespace pt = boost::property_tree;
    pt::ptree tree;
    try {
        std::istringstream in{std::string(document)};
        pt::read_ini(in, tree);
    } catch (const pt::ini_parser_error& e) {
        throw Error(Errc::parse_error, e.message() + " at line " + std::to_string(e.line()));
    }

    StudyConfig c;
    bool saw_study = false;
    bool saw_sensors = false;
    for (const auto& [section, body] : tree) {
        if (!body.data().empty())
            throw Error(Errc::parse_error, "key '" + section + "' outside any section");
        if (section == "study") {
            saw_study = true;
            for (const auto& [k, v] : body) {
                auto field = "study." + k;
                auto val = trim(v.data());
                if (k == "name") c.name = val;
                else if (k == "study_code") c.study_code = val;
                else if (k == "start" || k == "end") {
                    auto d = Date::parse(val);
                    if (!d) invalid(field, "expected YYYY-MM-DD");
                    (k == "start" ? c.start : c.end) = *d;
                } else if (k == "diary_resolution_min") c.diary_resolution_min = parse_number<int>(field, val);
                else if (k == "backlog_cap") c.backlog_cap = parse_number<int>(field, val);
                else if (k == "reply_window") {
                    if (val == "unlimited") c.reply_window_min.reset();
                    else if (val.size() > 3 && val.substr(val.size() - 3) == "min")
                        c.reply_window_min = parse_number<int>(field, trim(val.substr(0, val.size() - 3)));
                    else invalid(field, "expected 'unlimited' or '<n>min'");
                } else if (k == "mood_prompts") {
                    c.mood_prompts.clear();
                    for (const auto& item : split_list(val)) {
                        auto t = TimeOfDay::parse(item);
                        if (!t) invalid(field, "expected HH:MM, got " + item);
                        c.mood_prompts.push_back(*t);
                    }
                } else if (k == "mood_per_episode") c.mood_per_episode = parse_bool(field, val);
                else if (k == "travelling_code") c.travelling_code = parse_number<int>(field, val);
                else if (k == "sync_period_s") c.sync_period_s = parse_number<int>(field, val);
                else if (k == "chunk_target_bytes") c.chunk_target_bytes = parse_number<std::int64_t>(field, val);
                else invalid(field, "unknown key");
            }
        } else if (section == "sensors") {
            saw_sensors = true;
            for (const auto& [k, v] : body) {
                auto field = "sensors." + k;
                auto* spec = catalog.find(k);
                if (!spec) invalid(field, "unknown sensor");
                c.sensors_enabled[spec->id] = parse_sampling(field, v.data(), *spec);
            }
        } else if (section.rfind("codebook.", 0) == 0) {
            auto id = codebook_from_string(section.substr(9));
            if (!id) invalid(section, "unknown codebook");
            Codebook cb{*id, {}, false};
            for (const auto& [k, v] : body) {
                auto field = section + "." + k;
                if (k == "open_text") {
                    cb.allows_open_text = parse_bool(field, trim(v.data()));
                    continue;
                }
                cb.entries.push_back({parse_number<int>(field, k), trim(v.data())});
            }
            c.codebooks[static_cast<std::size_t>(*id) - 1] = std::move(cb);
        } else {
            throw Error(Errc::parse_error, "unknown section [" + section + "]");
        }
    }
    if (!saw_study) throw Error(Errc::parse_error, "missing [study] section");
    if (!saw_sensors) c.sensors_enabled.clear();
    validate(c, catalog);
    return c;
}

StudyConfig load_study_config_file(const std::filesystem::path& path, const SensorCatalog& catalog) {
    std::ifstream in(path);
    if (!in) throw Error(Errc::io_failure, "cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return load_study_config(ss.str(), catalog);
}

bool verify_study_code(std::string_view code, const StudyConfig& config) {
    auto as_bytes = [](std::string_view s) {
        return ByteView{reinterpret_cast<const std::uint8_t*>(s.data()), s.size()};
    };
    auto a = crypto::sha256(as_bytes(code));
    auto b = crypto::sha256(as_bytes(config.study_code));
    return crypto::constant_time_equal(a, b) && code.size() == config.study_code.size();
}

std::int64_t expected_daily_readings(const Sampling& sampling) {
    if (auto* f = std::get_if<FixedRate>(&sampling))
        return f->rate.num * kSecondsPerDay / f->rate.den;
    if (auto* p = std::get_if<Polled>(&sampling)) return kSecondsPerDay / p->period_s;
    throw Error(Errc::not_deterministic, "on_change sensors have no closed-form daily count");
}

std::int64_t expected_daily_readings(const SensorSpec& spec) {
    return expected_daily_readings(spec.sampling);
}

std::int64_t expected_daily_volume(const StudyConfig& config, std::int64_t bytes_per_reading,
                                   bool include_on_change, const SensorCatalog& catalog) {
    std::int64_t readings = 0;
    for (const auto& [id, _] : config.sensors_enabled) {
        auto s = config.sampling_of(id, catalog);
        if (!s) continue;
        if (auto* oc = std::get_if<OnChange>(&*s)) {
            if (include_on_change) readings += static_cast<std::int64_t>(oc->events_per_day);
            continue;
        }
        readings += expected_daily_readings(*s);
    }
    return readings * bytes_per_reading;
}

std::int64_t expected_daily_volume(const StudyConfig& config, const std::set<SensorId>& enabled,
                                   std::int64_t bytes_per_reading, const SensorCatalog& catalog) {
    StudyConfig subset = config;
    std::erase_if(subset.sensors_enabled, [&](const auto& kv) { return !enabled.count(kv.first); });
    return expected_daily_volume(subset, bytes_per_reading, false, catalog);
}

std::string_view to_string(Consent c) {
    switch (c) {
        case Consent::pending: return "pending";
        case Consent::granted: return "granted";
        case Consent::revoked: return "revoked";
    }
    return "?";
}

std::optional<Consent> consent_from_string(std::string_view s) {
    if (s == "pending") return Consent::pending;
    if (s == "granted") return Consent::granted;
    if (s == "revoked") return Consent::revoked;
    return std::nullopt;
}

}  // namespace ilog
