#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "dkfac/config.hpp"
#include "dkfac/data.hpp"

namespace dkfac::cli {

enum ExitCode : int { kOk = 0, kFailure = 1, kConfigError = 2, kDataError = 3, kConsistencyError = 4 };

/// Train/validation data described by `config.data`. IDX sources keep the
/// last data.n_val samples for validation.
data::Split load_data(const RunConfig& config);

/// Missing dataset files raise FormatError; an unwritable metrics_out
/// directory raises ConfigError.
void check_paths(const RunConfig& config);

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

/// Oracle parity suites behind `verify`.
std::vector<CheckResult> run_verify_suites(std::uint64_t seed);

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace dkfac::cli
