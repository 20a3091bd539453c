#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace ilog {

using Bytes = std::vector<std::uint8_t>;
using ByteView = std::span<const std::uint8_t>;

std::string to_hex(ByteView bytes);
std::optional<Bytes> from_hex(std::string_view hex);

/// Fixed-width opaque byte string with hex rendering. Used for pseudonyms,
/// chunk and task ids (N = 16) and device keys (N = 32).
template <std::size_t N>
struct FixedBytes {
    std::array<std::uint8_t, N> bytes{};

    static constexpr std::size_t size() { return N; }
    std::string hex() const { return to_hex(bytes); }
    static std::optional<FixedBytes> from_hex(std::string_view s) {
        auto raw = ilog::from_hex(s);
        if (!raw || raw->size() != N) return std::nullopt;
        FixedBytes out;
        std::copy(raw->begin(), raw->end(), out.bytes.begin());
        return out;
    }
    bool is_zero() const {
        for (auto b : bytes)
            if (b != 0) return false;
        return true;
    }

    friend auto operator<=>(const FixedBytes&, const FixedBytes&) = default;
};

using Id128 = FixedBytes<16>;
using Key256 = FixedBytes<32>;
using Nonce96 = FixedBytes<12>;

}  // namespace ilog

template <std::size_t N>
struct std::hash<ilog::FixedBytes<N>> {
    std::size_t operator()(const ilog::FixedBytes<N>& v) const noexcept {
        std::size_t h = 1469598103934665603ull;
        for (auto b : v.bytes) h = (h ^ b) * 1099511628211ull;
        return h;
    }
};
