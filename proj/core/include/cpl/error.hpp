#pragma once

#include <stdexcept>
#include <string>

namespace cpl {

// All library failures surface as cpl::Error with a human-readable message.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

[[noreturn]] inline void fail(const std::string& msg) { throw Error(msg); }

// The const char* overload keeps literal-message checks allocation-free on
// the passing path; composed messages belong behind CPL_REQUIRE so they are
// only built on failure.
inline void require(bool cond, const char* msg) {
    if (!cond) [[unlikely]] throw Error(msg);
}

inline void require(bool cond, const std::string& msg) {
    if (!cond) [[unlikely]] throw Error(msg);
}

#define CPL_REQUIRE(cond, msg_expr)                    \
    do {                                               \
        if (!(cond)) [[unlikely]] ::cpl::fail(msg_expr); \
    } while (0)

} // namespace cpl
