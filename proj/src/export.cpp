#include "ilog/export.hpp"
#include "ilog/crypto.hpp"

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace ilog {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

std::string hex_of(const std::array<std::uint8_t, 32>& h) { return to_hex(h); }

std::array<std::uint8_t, 32> sha256_of(std::string_view s) {
    return crypto::sha256(ByteView(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

void put_double(std::string& out, double v) {
    char buf[32];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    out.append(buf, p);
}

void put_text(std::string& out, std::string_view s) {
    for (char c : s) {
        switch (c) {
            case '\t': out += "\\t"; break;
            case '\n': out += "\\n"; break;
            case '\r': out += "\\r"; break;
            case '\\': out += "\\\\"; break;
            default: out += c;
        }
    }
}

void put_value(std::string& out, const Value& v) {
    if (auto* d = std::get_if<double>(&v)) put_double(out, *d);
    else if (auto* s = std::get_if<std::string>(&v)) put_text(out, *s);
    else out += std::get<bool>(v) ? "true" : "false";
}

const char* type_name(ValueKind k) {
    switch (k) {
        case ValueKind::numeric: return "float64";
        case ValueKind::text: return "string";
        case ValueKind::boolean: return "bool";
    }
    return "string";
}

struct Column {
    std::string name;
    std::string type;
};

class TableWriter {
public:
    TableWriter(const fs::path& dir, std::string name, std::vector<Column> columns, json extra = json::object())
        : dir_(dir), name_(std::move(name)), columns_(std::move(columns)) {
        json schema = {{"table", name_}, {"format", "tsv"}, {"header", true}};
        for (auto& [k, v] : extra.items()) schema[k] = v;
        json cols = json::array();
        for (auto& c : columns_) cols.push_back({{"name", c.name}, {"type", c.type}});
        schema["columns"] = cols;
        auto text = schema.dump(2) + "\n";
        schema_hash_ = hex_of(sha256_of(text));
        write_file(dir_ / (name_ + ".schema.json"), text);

        out_.open(dir_ / file(), std::ios::binary | std::ios::trunc);
        if (!out_) throw Error(Errc::io_failure, "cannot create " + (dir_ / file()).string());
        std::string header;
        for (std::size_t i = 0; i < columns_.size(); ++i)
            header += (i ? "\t" : "") + columns_[i].name + ":" + columns_[i].type;
        header += "\n";
        out_ << header;
    }

    std::string file() const { return name_ + ".tsv"; }
    void row(const std::string& line) {
        out_ << line;
        ++rows_;
        if (!out_) throw Error(Errc::io_failure, "write failed on " + file());
    }
    ExportTable finish() {
        out_.close();
        if (!out_) throw Error(Errc::io_failure, "write failed on " + file());
        return {name_, rows_, file(), schema_hash_};
    }

    static void write_file(const fs::path& p, const std::string& text) {
        std::ofstream f(p, std::ios::binary | std::ios::trunc);
        f << text;
        if (!f) throw Error(Errc::io_failure, "cannot write " + p.string());
    }

private:
    fs::path dir_;
    std::string name_;
    std::vector<Column> columns_;
    std::string schema_hash_;
    std::ofstream out_;
    std::uint64_t rows_ = 0;
};

std::string id_of(const ExportManifest& m) {
    std::string basis = std::to_string(m.range_from) + "/" + std::to_string(m.range_to);
    for (const auto& t : m.tables) basis += "|" + t.name + ":" + std::to_string(t.row_count) + ":" + t.schema_hash;
    return hex_of(sha256_of(basis)).substr(0, 32);
}

json manifest_json(const ExportManifest& m) {
    json tables = json::array();
    for (const auto& t : m.tables)
        tables.push_back({{"name", t.name}, {"row_count", t.row_count}, {"file", t.file}, {"schema_hash", t.schema_hash}});
    return {{"export_id", m.export_id},
            {"created_at", m.created_at},
            {"range", {{"from", m.range_from}, {"to", m.range_to}}},
            {"tables", tables}};
}

}  // namespace

const ExportTable* ExportManifest::table(std::string_view name) const {
    for (const auto& t : tables)
        if (t.name == name) return &t;
    return nullptr;
}

ExportManifest export_tables(const SeriesStore& store, const CollectionDb& diary, const ExportRequest& req,
                             const fs::path& out_dir, const SensorCatalog& catalog) {
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw Error(Errc::io_failure, "cannot create " + out_dir.string() + ": " + ec.message());

    ExportManifest m;
    m.created_at = req.created_at;
    m.range_from = req.from;
    m.range_to = req.to;
    if (req.to <= req.from) {
        m.export_id = id_of(m);
        TableWriter::write_file(out_dir / "manifest.json", manifest_json(m).dump(2) + "\n");
        return m;
    }

    const Date d0 = Date::of(req.from), d1 = Date::of(req.to - 1);
    std::set<SensorId> sensors = req.sensors;
    std::set<Id128> pseudonyms;
    for (const auto& p : store.partitions()) {
        if (p.key.day < d0 || p.key.day > d1 || p.readings == 0) continue;
        sensors.insert(p.key.sensor_id);
        pseudonyms.insert(p.key.pseudonym_id);
    }

    std::string line;
    for (auto sid : sensors) {
        const auto& spec = catalog.at(sid);
        std::vector<Column> cols = {{"pseudonym", "string"}, {"ts_ms", "int64"}};
        for (int i = 1; i <= spec.value_arity; ++i)
            cols.push_back({"value_" + std::to_string(i), type_name(spec.value_kind)});
        TableWriter w(out_dir, spec.key, cols, {{"sensor_id", sid}});
        for (const auto& pid : pseudonyms) {
            const auto hex = pid.hex();
            for (Date d = d0; d <= d1; d = d.next()) {
                auto a = std::max(req.from, d.start_ms()), b = std::min(req.to, d.next().start_ms());
                for (const auto& r : store.query_range(pid, sid, a, b)) {
                    line.clear();
                    line += hex;
                    line += '\t';
                    line += std::to_string(r.ts_ms);
                    for (const auto& v : r.values) {
                        line += '\t';
                        put_value(line, v);
                    }
                    line += '\n';
                    w.row(line);
                }
            }
        }
        m.tables.push_back(w.finish());
    }

    {
        TableWriter w(out_dir, "answers",
                      {{"task_id", "string"}, {"pseudonym", "string"}, {"episode_start", "int64"},
                       {"codebook", "string"}, {"code", "int32"}, {"open_text", "string?"}});
        for (const auto& a : diary.answers(req.from, req.to)) {
            line = a.task_id.hex() + "\t" + a.pseudonym_id.hex() + "\t" + std::to_string(a.episode_start) + "\t" +
                   std::string(to_string(a.codebook)) + "\t" + std::to_string(a.code) + "\t";
            if (a.open_text) put_text(line, *a.open_text);
            line += '\n';
            w.row(line);
        }
        m.tables.push_back(w.finish());
    }
    {
        TableWriter w(out_dir, "telemetry",
                      {{"task_id", "string"}, {"notified_at", "int64"}, {"reaction_ms", "int64"},
                       {"completion_ms", "int64"}, {"delivered_offline", "bool"}});
        auto rows = diary.telemetry(req.from, req.to);
        for (const auto& t : rows) {
            const auto& tm = t.telemetry;
            line = t.task_id.hex() + "\t" + std::to_string(tm.notified_at) + "\t" + std::to_string(tm.reaction_ms) +
                   "\t" + std::to_string(tm.completion_ms) + "\t" + (tm.delivered_offline ? "true" : "false") + "\n";
            w.row(line);
        }
        m.tables.push_back(w.finish());
    }

    m.export_id = id_of(m);
    TableWriter::write_file(out_dir / "manifest.json", manifest_json(m).dump(2) + "\n");
    return m;
}

// ---- compliance ----

ComplianceReport compliance_report(const SeriesStore& store, const CollectionDb& diary, Date first, Date last) {
    ComplianceReport r;
    r.first = first;
    r.last = last;
    if (last < first) return r;
    const auto n = static_cast<std::size_t>(last.days - first.days + 1);
    r.days.resize(n);
    for (std::size_t i = 0; i < n; ++i) r.days[i].day = Date{first.days + static_cast<std::int64_t>(i)};

    auto participants = diary.participants();
    r.registered = static_cast<int>(participants.size());

    // pseudonym -> per-day "has data"
    std::map<Id128, std::vector<bool>> reporting;
    for (const auto& p : store.partitions()) {
        if (p.key.day < first || p.key.day > last || p.readings == 0) continue;
        auto i = static_cast<std::size_t>(p.key.day.days - first.days);
        auto& flags = reporting[p.key.pseudonym_id];
        if (flags.empty()) flags.assign(n, false);
        flags[i] = true;
        auto h = store.coverage_hours(p.key.pseudonym_id, p.key.sensor_id, p.key.day);
        r.days[i].sensor_hours += h;
        r.days[i].sensor_hours_by_sensor[p.key.sensor_id] += h;
        r.sensor_hours[p.key.sensor_id] += h;
        r.sensor_hours_total += h;
    }
    std::map<Id128, std::int64_t> entries;
    for (const auto& t : diary.telemetry(first.start_ms(), last.next().start_ms())) {
        auto i = static_cast<std::size_t>(Date::of(t.episode_start).days - first.days);
        ++r.days[i].diary_entries;
        ++r.diary_entries_total;
        ++entries[t.pseudonym_id];
    }
    double sum = 0;
    for (const auto& [pid, flags] : reporting) {
        int days = 0;
        for (std::size_t i = 0; i < n; ++i)
            if (flags[i]) {
                ++days;
                ++r.days[i].participants_reporting;
            }
        auto it = entries.find(pid);
        double per_day = static_cast<double>(it == entries.end() ? 0 : it->second) / days;
        r.entries_per_day[pid] = per_day;
        sum += per_day;
    }
    r.participants_with_data = static_cast<int>(reporting.size());
    r.mean_entries_per_day = reporting.empty() ? 0.0 : sum / static_cast<double>(reporting.size());
    return r;
}

void write_compliance_report(const ComplianceReport& r, const fs::path& dir, const SensorCatalog& catalog) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw Error(Errc::io_failure, "cannot create " + dir.string() + ": " + ec.message());
    auto fixed = [](double v, int prec) {
        std::ostringstream o;
        o.setf(std::ios::fixed);
        o.precision(prec);
        o << v;
        return o.str();
    };

    std::ostringstream txt;
    txt << "compliance report " << r.first.iso() << " .. " << r.last.iso() << "\n\n";
    txt << "registered participants      " << r.registered << "\n";
    txt << "participants with data       " << r.participants_with_data << "\n";
    txt << "diary entries                " << r.diary_entries_total << "\n";
    txt << "sensor hours                 " << r.sensor_hours_total << "\n";
    txt << "mean entries/day/participant " << fixed(r.mean_entries_per_day, 2) << "\n\n";
    txt << "day         reporting  entries  sensor_hours\n";
    for (const auto& d : r.days) {
        char line[96];
        std::snprintf(line, sizeof line, "%s  %9d  %7lld  %12lld\n", d.day.iso().c_str(), d.participants_reporting,
                      static_cast<long long>(d.diary_entries), static_cast<long long>(d.sensor_hours));
        txt << line;
    }
    txt << "\nsensor hours by sensor\n";
    for (const auto& [sid, h] : r.sensor_hours) {
        const auto* s = catalog.find(sid);
        txt << "  " << (s ? s->key : std::to_string(sid)) << " " << h << "\n";
    }
    TableWriter::write_file(dir / "report.txt", txt.str());

    std::string ppd = "day,participants_reporting\n", epd = "day,diary_entries\n", shd = "day,sensor_hours";
    for (const auto& [sid, _] : r.sensor_hours) {
        const auto* s = catalog.find(sid);
        shd += "," + (s ? s->key : std::to_string(sid));
    }
    shd += "\n";
    for (const auto& d : r.days) {
        ppd += d.day.iso() + "," + std::to_string(d.participants_reporting) + "\n";
        epd += d.day.iso() + "," + std::to_string(d.diary_entries) + "\n";
        shd += d.day.iso() + "," + std::to_string(d.sensor_hours);
        for (const auto& [sid, _] : r.sensor_hours) {
            auto it = d.sensor_hours_by_sensor.find(sid);
            shd += "," + std::to_string(it == d.sensor_hours_by_sensor.end() ? 0 : it->second);
        }
        shd += "\n";
    }
    std::string parts = "pseudonym,entries_per_day\n";
    for (const auto& [pid, v] : r.entries_per_day) parts += pid.hex() + "," + fixed(v, 3) + "\n";
    TableWriter::write_file(dir / "participants_per_day.csv", ppd);
    TableWriter::write_file(dir / "entries_per_day.csv", epd);
    TableWriter::write_file(dir / "sensor_hours_per_day.csv", shd);
    TableWriter::write_file(dir / "participants.csv", parts);
}

// ---- volume ----

std::vector<VolumeRow> volume_report(const SeriesStore& store, const CollectionDb& diary, const StudyConfig& config,
                                     TimestampMs from, TimestampMs to, std::int64_t bytes_per_reading,
                                     const SensorCatalog& catalog) {
    std::vector<VolumeRow> rows;
    if (to <= from) return rows;
    std::map<Id128, std::set<SensorId>> enabled;
    for (const auto& p : diary.participants()) enabled[p.pseudonym_id] = p.enabled_sensors;
    for (const auto& pid : store.pseudonyms())
        if (!enabled.count(pid)) {
            auto& all = enabled[pid];
            for (const auto& [id, _] : config.sensors_enabled) all.insert(id);
        }

    const Date d0 = Date::of(from), d1 = Date::of(to - 1);
    for (const auto& [pid, sensors] : enabled) {
        auto expected = expected_daily_volume(config, sensors, bytes_per_reading, catalog);
        for (Date d = d0; d <= d1; d = d.next()) {
            auto a = std::max(from, d.start_ms()), b = std::min(to, d.next().start_ms());
            VolumeRow row{pid, d};
            for (auto sid : sensors) row.readings += store.count_range(pid, sid, a, b);
            if (row.readings == 0) continue;  // not collecting that day
            row.bytes = static_cast<std::int64_t>(row.readings) * bytes_per_reading;
            // Partial days are compared with the matching share of a day.
            row.expected_bytes = expected * (b - a) / kMsPerDay;
            if (row.expected_bytes > 0) {
                row.deviation = static_cast<double>(row.bytes - row.expected_bytes) / static_cast<double>(row.expected_bytes);
                row.flagged = std::abs(row.deviation) > kVolumeFlagThreshold;
            }
            rows.push_back(row);
        }
    }
    return rows;
}

void write_volume_report(const std::vector<VolumeRow>& rows, const fs::path& file) {
    std::ostringstream o;
    o << "pseudonym,day,readings,bytes,expected_bytes,deviation,flagged\n";
    for (const auto& r : rows) {
        char dev[32];
        std::snprintf(dev, sizeof dev, "%.4f", r.deviation);
        o << r.pseudonym_id.hex() << "," << r.day.iso() << "," << r.readings << "," << r.bytes << ","
          << r.expected_bytes << "," << dev << "," << (r.flagged ? "true" : "false") << "\n";
    }
    TableWriter::write_file(file, o.str());
}

}  // namespace ilog
