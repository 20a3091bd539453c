#pragma once

// Thin wrappers over OpenSSL. Nothing here knows about chunks or tokens.

#include "ilog/bytes.hpp"

#include <array>
#include <optional>

namespace ilog::crypto {

void random_bytes(std::span<std::uint8_t> out);

template <typename T>
T random_fixed() {
    T v;
    random_bytes(v.bytes);
    return v;
}

/// AES-256-GCM. Returns ciphertext (same length as plaintext) and writes the tag.
Bytes aes256gcm_seal(const Key256& key, const Nonce96& nonce, ByteView aad, ByteView plaintext,
                     std::array<std::uint8_t, 16>& tag);

/// nullopt on authentication failure.
std::optional<Bytes> aes256gcm_open(const Key256& key, const Nonce96& nonce, ByteView aad,
                                    ByteView ciphertext, ByteView tag);

std::array<std::uint8_t, 32> hmac_sha256(ByteView key, ByteView message);
std::array<std::uint8_t, 32> sha256(ByteView message);

bool constant_time_equal(ByteView a, ByteView b);

}  // namespace ilog::crypto
