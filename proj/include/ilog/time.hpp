#pragma once

#include <chrono>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace ilog {

/// Milliseconds since the Unix epoch, UTC.
using TimestampMs = std::int64_t;

inline constexpr std::int64_t kMsPerSecond = 1000;
inline constexpr std::int64_t kMsPerMinute = 60 * kMsPerSecond;
inline constexpr std::int64_t kMsPerHour = 60 * kMsPerMinute;
inline constexpr std::int64_t kMsPerDay = 24 * kMsPerHour;
inline constexpr std::int64_t kSecondsPerDay = 86400;

/// UTC calendar date stored as days since 1970-01-01.
struct Date {
    std::int64_t days = 0;

    static Date from_ymd(int year, unsigned month, unsigned day);
    static std::optional<Date> parse(std::string_view iso);  // YYYY-MM-DD
    static Date of(TimestampMs ts) {
        return Date{ts >= 0 ? ts / kMsPerDay : (ts - kMsPerDay + 1) / kMsPerDay};
    }

    TimestampMs start_ms() const { return days * kMsPerDay; }
    std::string iso() const;
    Date next() const { return Date{days + 1}; }

    friend auto operator<=>(const Date&, const Date&) = default;
};

/// Minutes since local midnight, used for mood prompt times ("08:00").
struct TimeOfDay {
    int minutes = 0;
    static std::optional<TimeOfDay> parse(std::string_view hhmm);
    std::string str() const;
    friend auto operator<=>(const TimeOfDay&, const TimeOfDay&) = default;
};

/// Hour of the UTC day (0..23) a timestamp falls in.
inline int utc_hour(TimestampMs ts) {
    auto in_day = ts - Date::of(ts).start_ms();
    return static_cast<int>(in_day / kMsPerHour);
}

std::string iso_timestamp(TimestampMs ts);  // 2019-01-28T09:00:00.000Z

inline TimestampMs wall_clock_ms() {
    using namespace std::chrono;
    return duration_cast<milliseconds>(system_clock::now().time_since_epoch()).count();
}

}  // namespace ilog
