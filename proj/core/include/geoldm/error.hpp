#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace geoldm {

/// Error with a stable module-prefixed code ("geogen/conditioning-infeasible",
/// "flowsim/solver-failure", ...) so the CLI can map failures to exit categories.
class Error : public std::runtime_error {
public:
    Error(std::string code, const std::string& message)
        : std::runtime_error(code + ": " + message), code_(std::move(code)) {}

    const std::string& code() const noexcept { return code_; }

private:
    std::string code_;
};

inline void require(bool ok, const std::string& code, const std::string& message) {
    if (!ok) throw Error(code, message);
}

} // namespace geoldm
