#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace sere {

enum ExitCode { exit_ok = 0, exit_usage = 1, exit_validation = 2, exit_numeric = 3 };

struct VerifyCheck {
    std::string name;
    double value = 0.0;
    double limit = 0.0;
    bool upper = true;  // value ≤ limit, else value > limit
    bool pass() const { return upper ? value <= limit : value > limit; }
};

// suite: all | factorization | gradients | bijectors
std::vector<VerifyCheck> run_verify_suite(const std::string& suite, std::uint64_t seed = 1);

// `sere <train|eval|sample|verify> ...`; returns an ExitCode.
int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace sere
