#include "dkfac/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>

namespace dkfac::cli {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

struct BadValue {
  std::string why;
};

template <typename Int>
Int to_int(const std::string& s) {
  Int v{};
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw BadValue{"expected an integer, got '" + s + "'"};
  return v;
}

double to_double(const std::string& s) {
  double v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) {
    throw BadValue{"expected a finite number, got '" + s + "'"};
  }
  return v;
}

bool to_bool(const std::string& s) {
  if (s == "true" || s == "on" || s == "1") return true;
  if (s == "false" || s == "off" || s == "0") return false;
  throw BadValue{"expected true/false, got '" + s + "'"};
}

std::string fmt_double(double v) {
  char buf[40];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <typename T>
std::string join(const std::vector<T>& xs, const std::function<std::string(const T&)>& f) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ",";
    out += f(xs[i]);
  }
  return out;
}

std::vector<kfac::Milestone> to_milestones(const std::string& s) {
  std::vector<kfac::Milestone> out;
  for (const auto& item : split(s, ',')) {
    const auto parts = split(item, ':');
    if (parts.size() != 2) throw BadValue{"expected epoch:multiplier, got '" + item + "'"};
    out.push_back({to_int<int>(parts[0]), to_double(parts[1])});
  }
  return out;
}

std::string from_milestones(const std::vector<kfac::Milestone>& ms) {
  return join<kfac::Milestone>(ms, [](const kfac::Milestone& m) {
    return std::to_string(m.epoch) + ":" + fmt_double(m.multiplier);
  });
}

void require(bool ok, const std::string& why) {
  if (!ok) throw BadValue{why};
}

struct Key {
  std::string name;
  std::string help;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

const std::vector<Key>& keys() {
  static const std::vector<Key> table = [] {
    std::vector<Key> k;
    auto int_key = [&k](std::string name, std::string help, auto member, int min) {
      k.push_back({std::move(name), std::move(help),
                   [member, min](RunConfig& c, const std::string& v) {
                     const int x = to_int<int>(v);
                     require(x >= min, "must be >= " + std::to_string(min));
                     member(c) = x;
                   },
                   [member](const RunConfig& c) { return std::to_string(member(const_cast<RunConfig&>(c))); }});
    };
    auto real_key = [&k](std::string name, std::string help, auto member, auto check, std::string why) {
      k.push_back({std::move(name), std::move(help),
                   [member, check, why](RunConfig& c, const std::string& v) {
                     const double x = to_double(v);
                     require(check(x), why);
                     member(c) = x;
                   },
                   [member](const RunConfig& c) { return fmt_double(member(const_cast<RunConfig&>(c))); }});
    };
    auto positive = [](double x) { return x > 0; };

    int_key("world_size", "number of simulated workers", [](RunConfig& c) -> int& { return c.train.world_size; }, 1);
    int_key("epochs", "training epochs", [](RunConfig& c) -> int& { return c.train.epochs; }, 1);
    int_key("global_batch", "samples per iteration across all workers",
            [](RunConfig& c) -> int& { return c.train.global_batch; }, 1);
    real_key("lr", "base learning rate", [](RunConfig& c) -> double& { return c.train.base_lr; }, positive,
             "must be positive");
    k.push_back({"scale_lr_with_workers", "multiply lr by world_size",
                 [](RunConfig& c, const std::string& v) { c.train.scale_lr_with_workers = to_bool(v); },
                 [](const RunConfig& c) { return std::string(c.train.scale_lr_with_workers ? "true" : "false"); }});
    int_key("warmup_epochs", "linear warmup length in epochs",
            [](RunConfig& c) -> int& { return c.train.warmup_epochs; }, 0);
    k.push_back({"lr_milestones", "comma-separated epochs where lr decays",
                 [](RunConfig& c, const std::string& v) {
                   std::vector<int> ms;
                   for (const auto& s : split(v, ',')) ms.push_back(to_int<int>(s));
                   c.train.lr_milestones = std::move(ms);
                 },
                 [](const RunConfig& c) {
                   return join<int>(c.train.lr_milestones, [](const int& x) { return std::to_string(x); });
                 }});
    real_key("lr_decay", "lr multiplier at each milestone", [](RunConfig& c) -> double& { return c.train.lr_decay; },
             [](double x) { return x > 0 && x <= 1; }, "must lie in (0, 1]");
    real_key("momentum", "SGD momentum", [](RunConfig& c) -> double& { return c.train.momentum; },
             [](double x) { return x >= 0 && x < 1; }, "must lie in [0, 1)");
    real_key("label_smoothing", "label smoothing factor",
             [](RunConfig& c) -> double& { return c.train.label_smoothing; },
             [](double x) { return x >= 0 && x < 1; }, "must lie in [0, 1)");
    k.push_back({"seed", "seed for data, shuffling and initialization",
                 [](RunConfig& c, const std::string& v) { c.train.seed = to_int<std::uint64_t>(v); },
                 [](const RunConfig& c) { return std::to_string(c.train.seed); }});
    k.push_back({"optimizer", "sgd or kfac+sgd",
                 [](RunConfig& c, const std::string& v) {
                   try {
                     c.train.optimizer = train::parse_optimizer(v);
                   } catch (const ValueError& e) {
                     throw BadValue{e.what()};
                   }
                 },
                 [](const RunConfig& c) { return train::to_string(c.train.optimizer); }});
    k.push_back({"placement", "factor placement: roundrobin or sized",
                 [](RunConfig& c, const std::string& v) {
                   try {
                     c.train.placement = dist::parse_placement(v);
                   } catch (const ValueError& e) {
                     throw BadValue{e.what()};
                   }
                 },
                 [](const RunConfig& c) { return dist::to_string(c.train.placement); }});
    k.push_back({"mode", "worker execution: threaded or lockstep",
                 [](RunConfig& c, const std::string& v) {
                   try {
                     c.train.mode = train::parse_execution_mode(v);
                   } catch (const ValueError& e) {
                     throw BadValue{e.what()};
                   }
                 },
                 [](const RunConfig& c) { return train::to_string(c.train.mode); }});
    k.push_back({"max_iterations", "stop after this many iterations (0 = all epochs)",
                 [](RunConfig& c, const std::string& v) {
                   const long x = to_int<long>(v);
                   require(x >= 0, "must be >= 0");
                   c.train.max_iterations = x;
                 },
                 [](const RunConfig& c) { return std::to_string(c.train.max_iterations); }});
    k.push_back({"precision", "64 or 32 bit scalars",
                 [](RunConfig& c, const std::string& v) {
                   if (v == "64") c.precision = Precision::f64;
                   else if (v == "32") c.precision = Precision::f32;
                   else throw BadValue{"expected 64 or 32, got '" + v + "'"};
                 },
                 [](const RunConfig& c) { return std::string(c.precision == Precision::f64 ? "64" : "32"); }});
    k.push_back({"model", "mlp or smallconv",
                 [](RunConfig& c, const std::string& v) {
                   require(v == "mlp" || v == "smallconv", "expected mlp or smallconv, got '" + v + "'");
                   c.model = v;
                 },
                 [](const RunConfig& c) { return c.model; }});
    k.push_back({"mlp_widths", "comma-separated hidden widths of the mlp",
                 [](RunConfig& c, const std::string& v) {
                   std::vector<int> ws;
                   for (const auto& s : split(v, ',')) {
                     ws.push_back(to_int<int>(s));
                     require(ws.back() > 0, "widths must be positive");
                   }
                   c.mlp_widths = std::move(ws);
                 },
                 [](const RunConfig& c) {
                   return join<int>(c.mlp_widths, [](const int& x) { return std::to_string(x); });
                 }});
    k.push_back({"dataset", "synthetic or idx:IMAGES:LABELS",
                 [](RunConfig& c, const std::string& v) {
                   if (v != "synthetic") {
                     const auto parts = split(v, ':');
                     require(parts.size() == 3 && parts[0] == "idx" && !parts[1].empty() && !parts[2].empty(),
                             "expected synthetic or idx:IMAGES:LABELS, got '" + v + "'");
                   }
                   c.data.source = v;
                 },
                 [](const RunConfig& c) { return c.data.source; }});
    k.push_back({"metrics_out", "CSV path for per-iteration metrics (empty = none)",
                 [](RunConfig& c, const std::string& v) { c.metrics_out = v; },
                 [](const RunConfig& c) { return c.metrics_out; }});
    int_key("data.n_train", "training samples (synthetic)", [](RunConfig& c) -> int& { return c.data.n_train; }, 1);
    int_key("data.n_val", "validation samples", [](RunConfig& c) -> int& { return c.data.n_val; }, 0);
    int_key("data.n_features", "features per sample (synthetic)",
            [](RunConfig& c) -> int& { return c.data.n_features; }, 1);
    int_key("data.n_classes", "classes (synthetic)", [](RunConfig& c) -> int& { return c.data.n_classes; }, 2);
    real_key("data.difficulty", "distance of class centres from the origin (synthetic)",
             [](RunConfig& c) -> double& { return c.data.difficulty; }, [](double x) { return x >= 0; },
             "must be >= 0");
    real_key("kfac.damping", "Tikhonov damping", [](RunConfig& c) -> double& { return c.train.kfac.damping; },
             [](double x) { return x >= 0; }, "must be >= 0");
    real_key("kfac.running_avg", "weight of the newest factor estimate",
             [](RunConfig& c) -> double& { return c.train.kfac.running_avg; },
             [](double x) { return x > 0 && x <= 1; }, "must lie in (0, 1]");
    real_key("kfac.kl_clip", "gradient scaling constant", [](RunConfig& c) -> double& { return c.train.kfac.kl_clip; },
             positive, "must be positive");
    int_key("kfac.decomp_interval", "iterations between eigendecompositions",
            [](RunConfig& c) -> int& { return c.train.kfac.decomp_interval; }, 1);
    k.push_back({"kfac.factor_interval", "iterations between factor updates (auto = decomp_interval / 10)",
                 [](RunConfig& c, const std::string& v) {
                   if (v == "auto") {
                     c.train.kfac.factor_interval.reset();
                     return;
                   }
                   const int x = to_int<int>(v);
                   require(x >= 1, "must be >= 1");
                   c.train.kfac.factor_interval = x;
                 },
                 [](const RunConfig& c) {
                   return c.train.kfac.factor_interval ? std::to_string(*c.train.kfac.factor_interval)
                                                       : std::string("auto");
                 }});
    k.push_back({"kfac.damping_decay", "epoch:multiplier list applied to damping",
                 [](RunConfig& c, const std::string& v) { c.train.kfac.damping_decay = to_milestones(v); },
                 [](const RunConfig& c) { return from_milestones(c.train.kfac.damping_decay); }});
    k.push_back({"kfac.interval_decay", "epoch:multiplier list applied to decomp_interval",
                 [](RunConfig& c, const std::string& v) { c.train.kfac.interval_decay = to_milestones(v); },
                 [](const RunConfig& c) { return from_milestones(c.train.kfac.interval_decay); }});
    k.push_back({"kfac.method", "eigen or inverse",
                 [](RunConfig& c, const std::string& v) {
                   try {
                     c.train.kfac.method = kfac::parse_inverse_method(v);
                   } catch (const ValueError& e) {
                     throw BadValue{e.what()};
                   }
                 },
                 [](const RunConfig& c) { return kfac::to_string(c.train.kfac.method); }});
    return k;
  }();
  return table;
}

}  // namespace

std::vector<KeyInfo> config_keys() {
  const RunConfig defaults;
  std::vector<KeyInfo> out;
  for (const auto& k : keys()) out.push_back({k.name, k.get(defaults), k.help});
  return out;
}

void apply_setting(RunConfig& config, std::string_view key, std::string_view value, int line) {
  const std::string k = trim(key);
  for (const auto& entry : keys()) {
    if (entry.name != k) continue;
    try {
      entry.set(config, trim(value));
    } catch (const BadValue& e) {
      throw ConfigError(k + ": " + e.why, line);
    }
    return;
  }
  throw ConfigError("unknown key '" + k + "'", line);
}

void validate(const RunConfig& config) {
  try {
    config.train.validate();
  } catch (const ValueError& e) {
    throw ConfigError(e.what());
  }
  if (config.data.source == "synthetic" && config.data.n_train < config.train.global_batch) {
    throw ConfigError("data.n_train must be at least global_batch");
  }
}

RunConfig parse_config(std::string_view text, RunConfig base) {
  std::istringstream in{std::string(text)};
  std::string raw;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const auto hash = raw.find('#');
    const std::string content = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (content.empty()) continue;
    const auto eq = content.find('=');
    if (eq == std::string::npos) throw ConfigError("expected 'key = value'", line);
    const std::string key = trim(std::string_view(content).substr(0, eq));
    if (key.empty()) throw ConfigError("missing key before '='", line);
    apply_setting(base, key, std::string_view(content).substr(eq + 1), line);
  }
  validate(base);
  return base;
}

std::string serialize_config(const RunConfig& config) {
  std::string out;
  for (const auto& k : keys()) out += k.name + " = " + k.get(config) + "\n";
  return out;
}

}  // namespace dkfac::cli
