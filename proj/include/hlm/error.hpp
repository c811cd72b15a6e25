// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace hlm {

enum class errc {
    shape_mismatch,
    non_finite,
    invalid_argument,
    format,
    missing_checkpoint,
    io,
    divergence,
    evaluation_blocked,
};

inline const char* errc_name(errc c) {
    switch (c) {
        case errc::shape_mismatch: return "shape_mismatch";
        case errc::non_finite: return "non_finite";
        case errc::invalid_argument: return "invalid_argument";
        case errc::format: return "format";
        case errc::missing_checkpoint: return "missing_checkpoint";
        case errc::io: return "io";
        case errc::divergence: return "divergence";
        case errc::evaluation_blocked: return "evaluation_blocked";
    }
    return "unknown";
}

class error : public std::runtime_error {
public:
    error(errc code, const std::string& what) : std::runtime_error(what), code_(code) {}
    errc code() const noexcept { return code_; }

private:
    errc code_;
};

inline void require(bool cond, errc code, const std::string& what) {
    if (!cond) {
        throw error(code, what);
    }
}

}  // namespace hlm
