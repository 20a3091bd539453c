#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace ilog {

enum class Errc {
    parse_error,
    validation_error,
    not_deterministic,
    wrong_kind,
    arity_mismatch,
    empty_buffer,
    auth_failure,
    corrupt_payload,
    count_mismatch,
    duplicate_task,
    unknown_task,
    window_expired,
    invalid_answer,
    bad_study_code,
    study_closed,
    pseudonym_mismatch,
    decode_error,
    unauthorized,
    unknown_participant,
    storage_full,
    io_failure,
    backend_unavailable,
};

std::string_view to_string(Errc code) noexcept;
std::optional<Errc> errc_from_string(std::string_view s) noexcept;

/// Every failure the library reports carries one of the codes above. `field`
/// names the offending config key or request item when there is one.
class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& message, std::string field = {})
        : std::runtime_error(std::string(to_string(code)) + ": " + message),
          code_(code), field_(std::move(field)) {}

    Errc code() const noexcept { return code_; }
    const std::string& field() const noexcept { return field_; }

private:
    Errc code_;
    std::string field_;
};

}  // namespace ilog
