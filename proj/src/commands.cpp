#include "dkfac/cli.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <sstream>

#include "dkfac/errors.hpp"
#include "dkfac/kfac.hpp"
#include "dkfac/linalg.hpp"
#include "dkfac/oracle.hpp"
#include "dkfac/report.hpp"
#include "dkfac/trainer.hpp"

namespace dkfac::cli {

namespace {

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

struct IdxPaths {
  std::string images;
  std::string labels;
};

std::optional<IdxPaths> idx_paths(const std::string& source) {
  if (source.rfind("idx:", 0) != 0) return std::nullopt;
  const std::string rest = source.substr(4);
  const auto colon = rest.find(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == rest.size()) {
    throw ConfigError("dataset must be 'synthetic' or 'idx:IMAGES:LABELS', got '" + source + "'");
  }
  return IdxPaths{rest.substr(0, colon), rest.substr(colon + 1)};
}

template <typename Scalar>
nn::Model<Scalar> build_model(const RunConfig& config, const data::Dataset& train) {
  if (config.model == "mlp") {
    return nn::make_mlp<Scalar>(nn::Shape{train.shape.size(), 1, 1}, config.mlp_widths, train.n_classes,
                                config.train.seed);
  }
  if (train.shape.height < 3 || train.shape.width < 3) {
    throw ConfigError("smallconv needs image-shaped inputs; use a square data.n_features or an IDX dataset");
  }
  return nn::make_smallconv<Scalar>(train.shape, train.n_classes, config.train.seed);
}

template <typename Scalar>
int train_with(const RunConfig& config, std::ostream& out) {
  const data::Split split = load_data(config);
  const nn::Model<Scalar> model = build_model<Scalar>(config, split.train);
  std::optional<data::Dataset> val;
  if (split.val.size() > 0) val = split.val;
  train::Trainer<Scalar> trainer(config.train, model, split.train, val);

  std::optional<report::CsvSink> csv;
  if (!config.metrics_out.empty()) csv.emplace(config.metrics_out);

  out << "workers " << config.train.world_size << ", " << train::to_string(config.train.optimizer) << ", "
      << trainer.iters_per_epoch() << " iterations/epoch, " << trainer.total_iterations() << " total\n";
  const long ipe = trainer.iters_per_epoch();
  std::optional<train::MetricsRow> last;
  trainer.run([&](const train::MetricsRow& row) {
    if (csv) csv->write(row);
    last = row;
    if ((row.iteration + 1) % ipe == 0) {
      out << "epoch " << row.epoch << "  iter " << row.iteration + 1 << "  loss " << fmt("%.5f", row.train_loss)
          << "  acc " << fmt("%.4f", row.train_acc) << "  val_acc " << fmt("%.4f", row.val_acc) << "  lr "
          << fmt("%.5g", row.lr) << '\n';
    }
  });
  if (last) {
    out << "done: " << last->iteration + 1 << " iterations, loss " << fmt("%.5f", last->train_loss)
        << ", val_acc " << fmt("%.4f", last->val_acc) << ", allreduce " << last->allreduce_calls << ", allgather "
        << last->allgather_calls << ", volume " << last->element_volume << '\n';
  }
  return kOk;
}

// Config flags shared by train and bench-comm. Each maps to one config key.
struct FlagSet {
  std::string config_path;
  std::vector<std::pair<std::string, std::string>> settings;
  std::map<std::string, std::string> values;

  void add(CLI::App& app, const std::string& flag, const std::string& key, const std::string& help) {
    app.add_option_function<std::string>(
        flag, [this, key](const std::string& v) { values[key] = v; }, help + " (" + key + ")");
  }

  RunConfig resolve(RunConfig base) const {
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      if (!in) throw ConfigError("cannot read config file " + config_path);
      std::stringstream text;
      text << in.rdbuf();
      base = parse_config(text.str(), base);
    }
    for (const auto& [key, value] : values) {
      std::string v = value;
      if (key == "optimizer") {
        if (v == "on") v = "kfac+sgd";
        else if (v == "off") v = "sgd";
        else throw ConfigError("--kfac expects on or off, got '" + value + "'");
      }
      apply_setting(base, key, v);
    }
    validate(base);
    return base;
  }
};

void add_run_flags(CLI::App& app, FlagSet& flags) {
  app.add_option("--config", flags.config_path, "config file of 'key = value' lines");
  flags.add(app, "--workers", "world_size", "number of simulated workers");
  flags.add(app, "--model", "model", "mlp or smallconv");
  flags.add(app, "--dataset", "dataset", "synthetic or idx:IMAGES:LABELS");
  flags.add(app, "--epochs", "epochs", "training epochs");
  flags.add(app, "--global-batch", "global_batch", "samples per iteration");
  flags.add(app, "--lr", "lr", "base learning rate");
  flags.add(app, "--kfac", "optimizer", "on or off");
  flags.add(app, "--kfac-update-freq", "kfac.decomp_interval", "iterations between eigendecompositions");
  flags.add(app, "--factor-interval", "kfac.factor_interval", "iterations between factor updates");
  flags.add(app, "--damping", "kfac.damping", "Tikhonov damping");
  flags.add(app, "--seed", "seed", "random seed");
  flags.add(app, "--metrics-out", "metrics_out", "CSV metrics path");
  flags.add(app, "--placement", "placement", "roundrobin or sized");
  flags.add(app, "--iterations", "max_iterations", "stop after this many iterations");
  flags.add(app, "--mode", "mode", "threaded or lockstep");
  flags.add(app, "--precision", "precision", "64 or 32");
}

std::string keys_footer() {
  std::string text = "\nConfig keys (defaults):\n";
  for (const auto& k : config_keys()) {
    char line[256];
    std::snprintf(line, sizeof line, "  %-24s = %-22s %s\n", k.key.c_str(), k.default_value.c_str(), k.help.c_str());
    text += line;
  }
  text += "\nExit codes: 0 success, 1 other failure, 2 config error, 3 data error, 4 consistency error\n";
  return text;
}

int cmd_train(const RunConfig& config, std::ostream& out) {
  check_paths(config);
  return config.precision == Precision::f32 ? train_with<float>(config, out) : train_with<double>(config, out);
}

int cmd_bench_comm(RunConfig config, std::ostream& out) {
  check_paths(config);
  const long T = config.train.max_iterations > 0 ? config.train.max_iterations : 100;
  train::TrainConfig& tc = config.train;
  tc.max_iterations = T;
  tc.warmup_epochs = 0;
  tc.lr_milestones.clear();
  tc.kfac.damping_decay.clear();
  tc.kfac.interval_decay.clear();
  const long ipe = 10;
  tc.epochs = static_cast<int>((T + ipe - 1) / ipe);
  data::Dataset ds = data::gen_synthetic(tc.seed, static_cast<int>(ipe * tc.global_batch), 1, 2, 1.0);
  const std::vector<nn::LayerSpec> specs{nn::LayerSpec::linear(1, 2, true)};
  const nn::Model<double> model(nn::Shape{1, 1, 1}, specs, tc.seed);

  train::Trainer<double> trainer(tc, model, ds);
  std::optional<report::CsvSink> csv;
  if (!config.metrics_out.empty()) csv.emplace(config.metrics_out);
  std::optional<train::MetricsRow> last;
  trainer.run([&](const train::MetricsRow& row) {
    if (csv) csv->write(row);
    last = row;
  });

  const auto dims = train::layer_dims(model);
  const int fi = tc.kfac.effective_factor_interval();
  const auto expect = train::expected_traffic(T, fi, tc.kfac.decomp_interval, dims,
                                              tc.optimizer == train::Optimizer::kfac_sgd, tc.kfac.method);
  const auto c = trainer.counters();
  using dist::Channel;
  struct Line {
    const char* name;
    std::uint64_t got;
    std::uint64_t want;
  };
  const Line lines[] = {
      {"gradient allreduce calls", c.channel(Channel::gradients), expect.gradient_calls},
      {"factor allreduce calls", c.channel(Channel::factors), expect.factor_calls},
      {"decomposition allgather calls", c.channel(Channel::decompositions), expect.decomposition_calls},
      {"weight broadcast calls", c.channel(Channel::weights), expect.broadcast_calls},
      {"gradient volume", c.volume(Channel::gradients), expect.gradient_volume},
      {"factor volume", c.volume(Channel::factors), expect.factor_volume},
      {"decomposition volume", c.volume(Channel::decompositions), expect.decomposition_volume},
      {"weight volume", c.volume(Channel::weights), expect.broadcast_volume},
      {"allreduce calls (final row)", last ? last->allreduce_calls : 0, expect.allreduce_calls()},
      {"allgather calls (final row)", last ? last->allgather_calls : 0, expect.decomposition_calls},
      {"element volume (final row)", last ? last->element_volume : 0, expect.element_volume()},
  };
  out << "bench-comm: T=" << T << " W=" << tc.world_size << " decomp_interval=" << tc.kfac.decomp_interval
      << " factor_interval=" << fi << '\n';
  bool ok = true;
  for (const auto& l : lines) {
    const bool match = l.got == l.want;
    ok = ok && match;
    char buf[160];
    std::snprintf(buf, sizeof buf, "  %-32s %10llu  expected %10llu  %s\n", l.name,
                  static_cast<unsigned long long>(l.got), static_cast<unsigned long long>(l.want),
                  match ? "ok" : "MISMATCH");
    out << buf;
  }
  return ok ? kOk : kConsistencyError;
}

int cmd_placement_report(std::uint64_t seed, int layers, int sets, const std::vector<int>& worlds, std::ostream& out) {
  const auto dims = dist::heavy_tailed_layer_dims(seed, layers);
  const auto factors = dist::enumerate_factors(dims);
  out << "factor-size set: seed " << seed << ", " << layers << " layers, " << factors.size() << " factors\n";
  char buf[200];
  std::snprintf(buf, sizeof buf, "%4s  %-10s  %12s  %12s  %11s  %11s  %12s\n", "W", "policy", "min params",
                "max params", "min speedup", "max speedup", "max cost");
  out << buf;
  for (int w : worlds) {
    for (auto p : {dist::Placement::round_robin, dist::Placement::size_balanced}) {
      const auto r = dist::report_imbalance(dist::assign(p, factors, w));
      std::snprintf(buf, sizeof buf, "%4d  %-10s  %12.4g  %12.4g  %11.3f  %11.3f  %12.4g\n", w,
                    dist::to_string(p).c_str(), r.min_parameters, r.max_parameters, r.min_speedup, r.max_speedup,
                    r.max_cost);
      out << buf;
    }
  }
  for (int w : worlds) {
    int wins = 0;
    for (int s = 0; s < sets; ++s) {
      const auto f = dist::enumerate_factors(dist::heavy_tailed_layer_dims(seed + 1 + static_cast<std::uint64_t>(s), layers));
      const double rr = dist::report_imbalance(dist::assign_round_robin(f, w)).max_cost;
      const double sb = dist::report_imbalance(dist::assign_size_balanced(f, w)).max_cost;
      if (sb <= rr) ++wins;
    }
    out << "W=" << w << ": sized max cost <= roundrobin max cost on " << wins << " of " << sets << " sets\n";
  }
  return kOk;
}

int cmd_verify(std::uint64_t seed, std::ostream& out) {
  bool ok = true;
  for (const auto& r : run_verify_suites(seed)) {
    out << (r.pass ? "PASS  " : "FAIL  ") << r.name << "  " << r.detail << '\n';
    ok = ok && r.pass;
  }
  return ok ? kOk : kConsistencyError;
}

// ---------------------------------------------------------------------------
// verify suites

MatrixXd random_spd(std::mt19937_64& rng, Eigen::Index n) {
  std::normal_distribution<double> normal;
  MatrixXd x(n, n + 8);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = normal(rng);
  return x * x.transpose() / static_cast<double>(x.cols());
}

MatrixXd random_matrix(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c) {
  std::normal_distribution<double> normal;
  MatrixXd x(r, c);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = normal(rng);
  return x;
}

CheckResult check_kron() {
  MatrixXd a(2, 2), b(3, 2);
  a << 1, 2, 3, 4;
  b << 5, 6, 7, 8, 9, 0;
  MatrixXd want(6, 4);
  want << 5, 6, 10, 12, 7, 8, 14, 16, 9, 0, 18, 0, 15, 18, 20, 24, 21, 24, 28, 32, 27, 0, 36, 0;
  const bool pass = linalg::identical(linalg::kron(a, b), want);
  return {"kron worked example", pass, pass ? "exact" : "entries differ"};
}

CheckResult check_eigen_path(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> dim(2, 6);
  double worst = 0;
  for (int c = 0; c < 30; ++c) {
    const int m = dim(rng), n = dim(rng);
    const MatrixXd a = random_spd(rng, m), g = random_spd(rng, n), v = random_matrix(rng, n, m);
    for (double gamma : {0.0, 1e-3, 1.0}) {
      const auto ae = linalg::psd_clamped(linalg::sym_eig(a));
      const auto ge = linalg::psd_clamped(linalg::sym_eig(g));
      const MatrixXd got = kfac::precondition_eigen<double>(ae, ge, v, gamma);
      const MatrixXd want = oracle::dense_damped_kron<double>(a, g, v, gamma);
      worst = std::max(worst, linalg::max_abs((got - want).eval()));
    }
  }
  return {"eigen path vs dense kron oracle", worst <= 1e-8, "max abs error " + fmt("%.3g", worst)};
}

CheckResult check_factored_path(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> dim(2, 6);
  double worst = 0;
  for (int c = 0; c < 30; ++c) {
    const int m = dim(rng), n = dim(rng);
    kfac::LayerKfacState<double> s;
    s.a_factor = random_spd(rng, m);
    s.g_factor = random_spd(rng, n);
    s.have_factors = true;
    const MatrixXd v = random_matrix(rng, n, m);
    for (double gamma : {1e-3, 1.0}) {
      const MatrixXd got = kfac::precondition_factored_inverse<double>(s, v, gamma);
      const MatrixXd want = oracle::dense_factored_damping<double>(s.a_factor, s.g_factor, v, gamma);
      worst = std::max(worst, linalg::max_abs((got - want).eval()));
    }
  }
  return {"factored inverse vs dense oracle", worst <= 1e-8, "max abs error " + fmt("%.3g", worst)};
}

template <typename Build>
double gradient_error(Build build, std::mt19937_64& rng, Eigen::Index features, int classes) {
  nn::Model<double> model = build();
  const Eigen::Index batch = 5;
  const MatrixXd x = random_matrix(rng, batch, features);
  std::vector<int> y;
  for (Eigen::Index i = 0; i < batch; ++i) y.push_back(static_cast<int>(i % classes));
  auto fr = nn::forward<double>(model, x, y, 0.1);
  const auto grads = nn::backward<double>(model, fr.capture);
  const double h = 1e-5;
  double worst = 0;
  for (std::size_t t = 0; t < model.weights().size(); ++t) {
    for (Eigen::Index i = 0; i < model.weights()[t].size(); ++i) {
      double& w = model.weights()[t].data()[i];
      const double saved = w;
      w = saved + h;
      const double up = nn::forward<double>(model, x, y, 0.1).loss;
      w = saved - h;
      const double down = nn::forward<double>(model, x, y, 0.1).loss;
      w = saved;
      const double fd = (up - down) / (2 * h);
      const double an = grads[t].data()[i];
      worst = std::max(worst, std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-4}));
    }
  }
  return worst;
}

CheckResult check_gradients(std::mt19937_64& rng) {
  const int widths[] = {6};
  const double mlp = gradient_error(
      [&] { return nn::make_mlp<double>(nn::Shape{4, 1, 1}, widths, 3, 7); }, rng, 4, 3);
  const double conv = gradient_error(
      [&] { return nn::make_smallconv<double>(nn::Shape{1, 5, 5}, 3, 7, 2, 6); }, rng, 25, 3);
  const double worst = std::max(mlp, conv);
  return {"finite-difference gradients", worst <= 1e-5,
          "max relative error mlp " + fmt("%.3g", mlp) + ", smallconv " + fmt("%.3g", conv)};
}

CheckResult check_sgd_equivalence(std::uint64_t seed) {
  const data::Dataset ds = data::gen_synthetic(seed, 256, 8, 3, 2.0);
  const int widths[] = {8};
  const auto model = nn::make_mlp<double>(nn::Shape{8, 1, 1}, widths, 3, seed);
  train::TrainConfig tc;
  tc.optimizer = train::Optimizer::sgd;
  tc.global_batch = 32;
  tc.epochs = 3;
  tc.warmup_epochs = 1;
  tc.lr_milestones = {2};
  tc.seed = seed;
  std::vector<double> reference;
  double worst = 0;
  for (int w : {1, 2, 4}) {
    tc.world_size = w;
    train::Trainer<double> trainer(tc, model, ds);
    const auto rows = trainer.run();
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (w == 1) reference.push_back(rows[i].train_loss);
      else worst = std::max(worst, std::abs(rows[i].train_loss - reference[i]));
    }
  }
  return {"sgd loss W=1 vs W=2,4", worst <= 1e-10, "max loss difference " + fmt("%.3g", worst)};
}

CheckResult check_accounting(std::uint64_t seed) {
  const data::Dataset ds = data::gen_synthetic(seed, 160, 1, 2, 1.0);
  const nn::Model<double> model(nn::Shape{1, 1, 1}, {nn::LayerSpec::linear(1, 2, true)}, seed);
  train::TrainConfig tc;
  tc.world_size = 4;
  tc.global_batch = 16;
  tc.epochs = 10;
  tc.warmup_epochs = 0;
  tc.lr_milestones.clear();
  tc.kfac.decomp_interval = 10;
  tc.kfac.factor_interval = 1;
  tc.max_iterations = 100;
  train::Trainer<double> trainer(tc, model, ds);
  trainer.run();
  const auto dims = train::layer_dims(model);
  const auto e = train::expected_traffic(100, 1, 10, dims, true);
  const auto c = trainer.counters();
  using dist::Channel;
  const bool pass = c.channel(Channel::gradients) == e.gradient_calls && c.channel(Channel::factors) == e.factor_calls &&
                    c.channel(Channel::decompositions) == e.decomposition_calls &&
                    c.element_volume == e.element_volume();
  return {"collective counts vs closed form", pass,
          std::to_string(c.channel(Channel::gradients)) + "/" + std::to_string(c.channel(Channel::factors)) + "/" +
              std::to_string(c.channel(Channel::decompositions)) + " calls, volume " +
              std::to_string(c.element_volume)};
}

}  // namespace

data::Split load_data(const RunConfig& config) {
  const DataConfig& d = config.data;
  if (const auto paths = idx_paths(d.source)) {
    data::Dataset all = data::load_idx(paths->images, paths->labels);
    if (d.n_val >= all.size()) {
      throw FormatError("IDX dataset has " + std::to_string(all.size()) + " samples, not enough for data.n_val = " +
                        std::to_string(d.n_val));
    }
    const Eigen::Index cut = all.size() - d.n_val;
    return {data::slice(all, 0, cut), data::slice(all, cut, all.size())};
  }
  if (d.source != "synthetic") {
    throw ConfigError("dataset must be 'synthetic' or 'idx:IMAGES:LABELS', got '" + d.source + "'");
  }
  return data::gen_synthetic_split(config.train.seed, d.n_train, d.n_val, d.n_features, d.n_classes, d.difficulty);
}

void check_paths(const RunConfig& config) {
  namespace fs = std::filesystem;
  if (const auto paths = idx_paths(config.data.source)) {
    for (const auto& p : {paths->images, paths->labels}) {
      if (!fs::is_regular_file(p)) throw FormatError("dataset file not found: " + p);
    }
  }
  if (!config.metrics_out.empty()) {
    const fs::path parent = fs::path(config.metrics_out).parent_path();
    if (!parent.empty() && !fs::is_directory(parent)) {
      throw ConfigError("metrics_out directory does not exist: " + parent.string());
    }
  }
}

std::vector<CheckResult> run_verify_suites(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<CheckResult> out;
  out.push_back(check_kron());
  out.push_back(check_eigen_path(rng));
  out.push_back(check_factored_path(rng));
  out.push_back(check_gradients(rng));
  out.push_back(check_sgd_equivalence(seed));
  out.push_back(check_accounting(seed));
  return out;
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Distributed K-FAC training on a simulated data-parallel cluster", "dkfac"};
  app.require_subcommand(1);
  app.footer(keys_footer());

  FlagSet train_flags;
  auto* train_cmd = app.add_subcommand("train", "train a model");
  add_run_flags(*train_cmd, train_flags);
  train_cmd->footer(keys_footer());

  auto* verify_cmd = app.add_subcommand("verify", "run the oracle parity suites");
  std::uint64_t verify_seed = 1;
  verify_cmd->add_option("--seed", verify_seed, "seed for the random cases");

  FlagSet bench_flags;
  auto* bench_cmd = app.add_subcommand("bench-comm", "count collectives on a 2x2-factor model");
  add_run_flags(*bench_cmd, bench_flags);
  bench_cmd->footer(keys_footer());

  auto* placement_cmd = app.add_subcommand("placement-report", "round-robin vs size-balanced factor placement");
  std::uint64_t placement_seed = 1;
  int placement_layers = 54;
  int placement_sets = 100;
  std::vector<int> placement_worlds{1, 2, 4, 8, 16};
  placement_cmd->add_option("--seed", placement_seed, "seed of the factor-size set");
  placement_cmd->add_option("--layers", placement_layers, "layers per size set")->check(CLI::PositiveNumber);
  placement_cmd->add_option("--sets", placement_sets, "random size sets for the win count")->check(CLI::PositiveNumber);
  placement_cmd->add_option("--workers", placement_worlds, "worker counts")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kConfigError;
  }

  try {
    if (*train_cmd) return cmd_train(train_flags.resolve({}), out);
    if (*verify_cmd) return cmd_verify(verify_seed, out);
    if (*bench_cmd) {
      RunConfig base;
      base.train.world_size = 4;
      base.train.global_batch = 16;
      base.train.kfac.decomp_interval = 10;
      base.train.kfac.factor_interval = 1;
      base.train.max_iterations = 100;
      return cmd_bench_comm(bench_flags.resolve(base), out);
    }
    if (*placement_cmd) return cmd_placement_report(placement_seed, placement_layers, placement_sets, placement_worlds, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const FormatError& e) {
    err << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const ConsistencyError& e) {
    err << "consistency error: " << e.what() << '\n';
    return kConsistencyError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kFailure;
}

}  // namespace dkfac::cli
