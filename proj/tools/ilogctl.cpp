// ilogctl: operator tool for chunks, the backend, the simulator and exports.

#include "ilog/api.hpp"
#include "ilog/device_sim.hpp"
#include "ilog/export.hpp"
#include "ilog/http.hpp"
#include "ilog/ingest.hpp"
#include "ilog/logpack.hpp"
#include "ilog/series_store.hpp"
#include "ilog/study.hpp"

#include <CLI11.hpp>

#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <thread>

using namespace ilog;

namespace {

Bytes read_file(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw Error(Errc::io_failure, "cannot read " + p.string());
    return Bytes(std::istreambuf_iterator<char>(f), {});
}

// Milliseconds, YYYY-MM-DD, or YYYY-MM-DDTHH:MM[:SS][Z] (UTC).
TimestampMs parse_time(const std::string& s) {
    if (!s.empty() && s.find_first_not_of("-0123456789") == std::string::npos && s.find('-', 1) == std::string::npos)
        return std::stoll(s);
    auto d = Date::parse(std::string_view(s).substr(0, 10));
    if (!d) throw Error(Errc::validation_error, "bad time: " + s, "time");
    TimestampMs t = d->start_ms();
    if (s.size() == 10) return t;
    std::string rest = s.substr(11);
    if (s[10] != 'T' && s[10] != ' ') throw Error(Errc::validation_error, "bad time: " + s, "time");
    if (!rest.empty() && rest.back() == 'Z') rest.pop_back();
    int h = 0, m = 0, sec = 0;
    if (std::sscanf(rest.c_str(), "%d:%d:%d", &h, &m, &sec) < 2 || h > 23 || m > 59 || sec > 59)
        throw Error(Errc::validation_error, "bad time: " + s, "time");
    return t + h * kMsPerHour + m * kMsPerMinute + sec * 1000;
}

std::pair<std::string, int> split_addr(const std::string& addr) {
    auto colon = addr.rfind(':');
    if (colon == std::string::npos) throw Error(Errc::validation_error, "expected host:port", "addr");
    return {addr.substr(0, colon), std::stoi(addr.substr(colon + 1))};
}

std::filesystem::path data_dir(const std::string& opt) {
    if (!opt.empty()) return opt;
    if (const char* e = std::getenv("ILOG_DATA_DIR")) return e;
    return "./ilog-data";
}

int cmd_inspect(const std::string& file, const std::string& key_hex) {
    auto bytes = read_file(file);
    auto chunk = LogChunk::parse(bytes);
    const auto& h = chunk.header;
    std::cout << "chunk_id       " << h.chunk_id.hex() << "\n"
              << "pseudonym      " << h.pseudonym_id.hex() << "\n"
              << "readings       " << h.reading_count << "\n"
              << "ts_min         " << iso_timestamp(h.ts_min) << " (" << h.ts_min << ")\n"
              << "ts_max         " << iso_timestamp(h.ts_max) << " (" << h.ts_max << ")\n"
              << "plaintext_len  " << h.plaintext_len << "\n"
              << "ciphertext_len " << chunk.ciphertext.size() << "\n"
              << "nonce          " << h.nonce.hex() << "\n";
    auto key = Key256::from_hex(key_hex);
    if (!key) throw Error(Errc::validation_error, "key must be 64 hex digits", "key");
    auto readings = open_chunk(chunk, *key);
    std::map<SensorId, std::uint64_t> counts;
    for (const auto& r : readings) ++counts[r.sensor_id];
    std::cout << "\nsensor                        id  readings\n";
    for (auto [id, n] : counts) {
        const auto* spec = SensorCatalog::builtin().find(id);
        std::printf("%-28s %3u  %8llu\n", spec ? spec->key.c_str() : "?", static_cast<unsigned>(id),
                    static_cast<unsigned long long>(n));
    }
    return 0;
}

int cmd_serve(const std::string& config_file, const std::string& addr, const std::string& data, bool sim_clock) {
    auto config = load_study_config_file(config_file);
    auto options = BackendOptions::from_env(data.empty() ? std::nullopt
                                                         : std::optional<std::filesystem::path>(data));
    SystemClock wall;
    ManualClock sim(config.start_ms());
    Backend backend(config, options, sim_clock ? static_cast<const Clock&>(sim) : wall);
    HttpServer server(backend, sim_clock ? &sim : nullptr);
    auto [host, port] = split_addr(addr);
    int bound = server.bind(host, port);
    std::cout << "listening on http://" << host << ":" << bound << (sim_clock ? " (sim clock)" : "") << std::endl;

    sigset_t set;
    sigemptyset(&set);
    sigaddset(&set, SIGINT);
    sigaddset(&set, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &set, nullptr);
    std::thread waiter([&] {
        int sig = 0;
        sigwait(&set, &sig);
        server.stop();
    });
    server.run();
    pthread_kill(waiter.native_handle(), SIGTERM);
    waiter.join();
    backend.store().checkpoint();
    return 0;
}

void print_fleet_report(const FleetRunReport& r, const StudyConfig& config) {
    std::cout << "day         reporting  entries   readings\n";
    for (const auto& d : r.days)
        std::printf("%s  %9d  %7lld  %9lld\n", d.day.iso().c_str(), d.participants_reporting,
                    static_cast<long long>(d.diary_entries), static_cast<long long>(d.readings));
    const auto& t = r.totals;
    std::printf("\nstudy %s, fleet %d\n", config.name.c_str(), t.fleet_size);
    std::printf("participants reporting   %d\n", t.participants_reporting);
    std::printf("readings generated       %llu\n", static_cast<unsigned long long>(t.readings_generated));
    std::printf("readings acknowledged    %llu\n", static_cast<unsigned long long>(t.readings_acknowledged));
    std::printf("chunks uploaded          %llu\n", static_cast<unsigned long long>(t.chunks_uploaded));
    std::printf("upload failures          %llu\n", static_cast<unsigned long long>(t.upload_failures));
    std::printf("tasks seen               %llu\n", static_cast<unsigned long long>(t.tasks_seen));
    std::printf("answers accepted         %llu / %llu\n", static_cast<unsigned long long>(t.answers_accepted),
                static_cast<unsigned long long>(t.answers_submitted));
    std::printf("sensor hours             %lld\n", static_cast<long long>(t.sensor_hours));
    std::printf("mean entries per day     %.2f\n", t.mean_entries_per_day);
}

int cmd_simulate(const std::string& config_file, const std::string& fleet_file, std::uint64_t seed,
                 const std::string& server, double faster, bool duplicates) {
    auto config = load_study_config_file(config_file);
    auto fleet = load_fleet_file(fleet_file);
    HttpApi api(server, /*send_sim_time=*/true);
    FleetOptions opt;
    opt.faster_than_real = faster;
    opt.duplicate_uploads = duplicates;
    opt.on_day = [](TimestampMs t) { std::cerr << "sim " << Date::of(t).iso() << std::endl; };
    auto run = run_fleet(config, std::move(fleet), seed, api, opt);
    print_fleet_report(run.report, config);
    return 0;
}

int cmd_export(const std::string& data, const std::string& from, const std::string& to, const std::string& out) {
    auto root = data_dir(data);
    SeriesStore store(root / "series");
    CollectionDb diary(root / "collection.db", /*read_only=*/true);
    ExportRequest req{parse_time(from), parse_time(to), {}, wall_clock_ms()};
    auto m = export_tables(store, diary, req, out);
    std::cout << "export " << m.export_id << "\n";
    for (const auto& t : m.tables) std::printf("%-28s %10llu\n", t.name.c_str(), static_cast<unsigned long long>(t.row_count));
    return 0;
}

int cmd_report(const std::string& data, const std::string& study_file, const std::string& out) {
    auto config = load_study_config_file(study_file);
    auto root = data_dir(data);
    SeriesStore store(root / "series");
    CollectionDb diary(root / "collection.db", /*read_only=*/true);
    auto r = compliance_report(store, diary, config.start, config.end);
    write_compliance_report(r, out);
    write_volume_report(volume_report(store, diary, config, config.start_ms(), config.end_ms()), std::filesystem::path(out) / "volume.csv");
    std::ifstream txt(std::filesystem::path(out) / "report.txt");
    std::cout << txt.rdbuf();
    return 0;
}

int cmd_store_verify(const std::string& root) {
    auto r = SeriesStore::verify(root);
    std::printf("segments %zu  blocks %zu  readings %llu  batches %zu  wal records %zu\n", r.segments, r.blocks,
                static_cast<unsigned long long>(r.readings), r.batches, r.wal_records);
    for (const auto& p : r.problems) std::cout << "problem: " << p << "\n";
    std::cout << (r.ok() ? "OK" : "DAMAGED") << "\n";
    return r.ok() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"i-Log smart survey tool"};
    app.require_subcommand(1);

    std::string file, key, config, fleet, server, addr, data, from, to, out, study, root;
    std::uint64_t seed = 1;
    double faster = 0;
    bool sim_clock = false, duplicates = false;

    auto* inspect = app.add_subcommand("inspect", "decrypt a chunk file and count readings per sensor");
    inspect->add_option("chunk-file", file)->required()->check(CLI::ExistingFile);
    inspect->add_option("--key", key, "device key, 64 hex digits")->required();

    auto* simulate = app.add_subcommand("simulate", "run a simulated fleet against a server");
    simulate->add_option("--config", config)->required()->check(CLI::ExistingFile);
    simulate->add_option("--fleet", fleet)->required()->check(CLI::ExistingFile);
    simulate->add_option("--seed", seed)->required();
    simulate->add_option("--server", server, "e.g. http://127.0.0.1:8080")->required();
    simulate->add_option("--faster-than-real", faster, "simulated seconds per real second; 0 = unpaced");
    simulate->add_flag("--duplicate-uploads", duplicates, "send every chunk twice");

    auto* serve = app.add_subcommand("serve", "run the backend");
    serve->add_option("--config", config)->required()->check(CLI::ExistingFile);
    serve->add_option("--addr", addr)->required();
    serve->add_option("--data", data, "data directory (default $ILOG_DATA_DIR)");
    serve->add_flag("--sim-clock", sim_clock, "take time from the X-Ilog-Sim-Time header");

    auto* exp = app.add_subcommand("export", "write analysis tables for a time range");
    exp->add_option("--from", from, "ms, YYYY-MM-DD or YYYY-MM-DDTHH:MM")->required();
    exp->add_option("--to", to)->required();
    exp->add_option("--out", out)->required();
    exp->add_option("--data", data);

    auto* report = app.add_subcommand("report", "compliance and volume report for the study span");
    report->add_option("--study", study)->required()->check(CLI::ExistingFile);
    report->add_option("--out", out)->required();
    report->add_option("--data", data);

    auto* verify = app.add_subcommand("store-verify", "check segment and WAL checksums");
    verify->add_option("root", root)->required()->check(CLI::ExistingDirectory);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*inspect) return cmd_inspect(file, key);
        if (*simulate) return cmd_simulate(config, fleet, seed, server, faster, duplicates);
        if (*serve) return cmd_serve(config, addr, data, sim_clock);
        if (*exp) return cmd_export(data, from, to, out);
        if (*report) return cmd_report(data, study, out);
        if (*verify) return cmd_store_verify(root);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what();
        if (!e.field().empty()) std::cerr << " [" << e.field() << "]";
        std::cerr << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
