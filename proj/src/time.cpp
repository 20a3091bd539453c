#include "ilog/time.hpp"
#include "ilog/error.hpp"

#include <charconv>
#include <cstdio>

namespace ilog {

Date Date::from_ymd(int year, unsigned month, unsigned day) {
    using namespace std::chrono;
    auto ymd = year_month_day{std::chrono::year{year}, std::chrono::month{month},
                              std::chrono::day{day}};
    return Date{sys_days{ymd}.time_since_epoch().count()};
}

namespace {
template <typename T>
bool parse_int(std::string_view s, T& out) {
    if (s.empty()) return false;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc{} && ptr == s.data() + s.size();
}
}  // namespace

std::optional<Date> Date::parse(std::string_view iso) {
    if (iso.size() != 10 || iso[4] != '-' || iso[7] != '-') return std::nullopt;
    int y = 0;
    unsigned m = 0, d = 0;
    if (!parse_int(iso.substr(0, 4), y) || !parse_int(iso.substr(5, 2), m) ||
        !parse_int(iso.substr(8, 2), d))
        return std::nullopt;
    using namespace std::chrono;
    auto ymd = year_month_day{std::chrono::year{y}, std::chrono::month{m}, std::chrono::day{d}};
    if (!ymd.ok()) return std::nullopt;
    return Date{sys_days{ymd}.time_since_epoch().count()};
}

std::string Date::iso() const {
    using namespace std::chrono;
    year_month_day ymd{sys_days{std::chrono::days{days}}};
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(ymd.year()),
                  static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()));
    return buf;
}

std::optional<TimeOfDay> TimeOfDay::parse(std::string_view hhmm) {
    if (hhmm.size() != 5 || hhmm[2] != ':') return std::nullopt;
    int h = 0, m = 0;
    if (!parse_int(hhmm.substr(0, 2), h) || !parse_int(hhmm.substr(3, 2), m)) return std::nullopt;
    if (h < 0 || h > 23 || m < 0 || m > 59) return std::nullopt;
    return TimeOfDay{h * 60 + m};
}

std::string TimeOfDay::str() const {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%02d:%02d", minutes / 60, minutes % 60);
    return buf;
}

std::string iso_timestamp(TimestampMs ts) {
    auto day = Date::of(ts);
    auto in_day = ts - day.start_ms();
    char buf[40];
    std::snprintf(buf, sizeof buf, "%sT%02lld:%02lld:%02lld.%03lldZ", day.iso().c_str(),
                  static_cast<long long>(in_day / kMsPerHour),
                  static_cast<long long>(in_day / kMsPerMinute % 60),
                  static_cast<long long>(in_day / kMsPerSecond % 60),
                  static_cast<long long>(in_day % 1000));
    return buf;
}

std::string_view to_string(Errc code) noexcept {
    switch (code) {
        case Errc::parse_error: return "ParseError";
        case Errc::validation_error: return "ValidationError";
        case Errc::not_deterministic: return "NotDeterministic";
        case Errc::wrong_kind: return "WrongKind";
        case Errc::arity_mismatch: return "ArityMismatch";
        case Errc::empty_buffer: return "EmptyBuffer";
        case Errc::auth_failure: return "AuthFailure";
        case Errc::corrupt_payload: return "CorruptPayload";
        case Errc::count_mismatch: return "CountMismatch";
        case Errc::duplicate_task: return "DuplicateTask";
        case Errc::unknown_task: return "UnknownTask";
        case Errc::window_expired: return "WindowExpired";
        case Errc::invalid_answer: return "InvalidAnswer";
        case Errc::bad_study_code: return "BadStudyCode";
        case Errc::study_closed: return "StudyClosed";
        case Errc::pseudonym_mismatch: return "PseudonymMismatch";
        case Errc::decode_error: return "DecodeError";
        case Errc::unauthorized: return "Unauthorized";
        case Errc::unknown_participant: return "UnknownParticipant";
        case Errc::storage_full: return "StorageFull";
        case Errc::io_failure: return "IoFailure";
        case Errc::backend_unavailable: return "BackendUnavailable";
    }
    return "Unknown";
}

std::optional<Errc> errc_from_string(std::string_view s) noexcept {
    for (int i = 0; i <= static_cast<int>(Errc::backend_unavailable); ++i)
        if (to_string(static_cast<Errc>(i)) == s) return static_cast<Errc>(i);
    return std::nullopt;
}

}  // namespace ilog
