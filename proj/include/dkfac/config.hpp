#pragma once

// Flat `section.key = value` configuration with `#` comments.

#include <string>
#include <string_view>
#include <vector>

#include "dkfac/trainer.hpp"

namespace dkfac::cli {

enum class Precision { f64, f32 };

struct DataConfig {
  // "synthetic" or "idx:IMAGES:LABELS"
  std::string source = "synthetic";
  int n_train = 2000;
  int n_val = 500;
  int n_features = 16;
  int n_classes = 5;
  double difficulty = 3.0;

  bool operator==(const DataConfig&) const = default;
};

struct RunConfig {
  train::TrainConfig train;
  DataConfig data;
  std::string model = "mlp";
  std::vector<int> mlp_widths{64, 64};
  Precision precision = Precision::f64;
  std::string metrics_out;

  bool operator==(const RunConfig&) const = default;
};

struct KeyInfo {
  std::string key;
  std::string default_value;
  std::string help;
};

/// Every accepted key with its default rendering.
std::vector<KeyInfo> config_keys();

/// Sets one key. Throws ConfigError (carrying `line`) for unknown keys and
/// malformed or out-of-range values.
void apply_setting(RunConfig& config, std::string_view key, std::string_view value, int line = 0);

/// Parses `text` on top of `base`, then validates the result.
RunConfig parse_config(std::string_view text, RunConfig base = {});

/// Renders every key; parse_config(serialize_config(c)) == c.
std::string serialize_config(const RunConfig& config);

/// Cross-key invariants; throws ConfigError.
void validate(const RunConfig& config);

}  // namespace dkfac::cli
