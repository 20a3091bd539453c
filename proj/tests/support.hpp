#pragma once

#include "ilog/error.hpp"

#include <doctest.h>

#include <filesystem>
#include <optional>
#include <random>
#include <string>

namespace ilog::test {

/// The error code a callable throws, or nullopt if it returns normally.
template <typename F>
std::optional<Errc> error_of(F&& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    return std::nullopt;
}

inline std::filesystem::path presets_dir() { return ILOG_PRESETS_DIR; }

class TempDir {
public:
    explicit TempDir(const std::string& tag = "ilog") {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() /
                (tag + "-" + std::to_string(rd()) + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

private:
    std::filesystem::path path_;
};

}  // namespace ilog::test

#define CHECK_ERRC(expr, code) CHECK(::ilog::test::error_of([&] { (void)(expr); }) == (code))
#define REQUIRE_ERRC(expr, code) REQUIRE(::ilog::test::error_of([&] { (void)(expr); }) == (code))
