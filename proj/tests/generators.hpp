#pragma once

#include "ilog/logpack.hpp"

#include <random>

namespace ilog::test {

inline Value random_value(std::mt19937_64& rng, ValueKind kind) {
    switch (kind) {
        case ValueKind::numeric: {
            std::normal_distribution<double> d(0.0, 100.0);
            return d(rng);
        }
        case ValueKind::text: {
            std::string s(rng() % 24, 'a');
            for (auto& ch : s) ch = static_cast<char>('a' + rng() % 26);
            if (rng() % 5 == 0) s += "\xc3\xa9\xe2\x82\xac";  // some UTF-8
            return s;
        }
        case ValueKind::boolean: return static_cast<bool>(rng() % 2);
    }
    return 0.0;
}

inline SensorReading random_reading(std::mt19937_64& rng, TimestampMs t0, TimestampMs span,
                                    const SensorCatalog& cat = SensorCatalog::builtin()) {
    const auto& spec = cat.entries()[rng() % cat.entries().size()];
    SensorReading r{spec.id, t0 + static_cast<TimestampMs>(rng() % static_cast<std::uint64_t>(span)), {}};
    for (int i = 0; i < spec.value_arity; ++i) r.values.push_back(random_value(rng, spec.value_kind));
    return r;
}

inline SensorReading accel(TimestampMs ts, double x = 0.1, double y = 0.2, double z = 9.8) {
    return {1, ts, {x, y, z}};
}

}  // namespace ilog::test
