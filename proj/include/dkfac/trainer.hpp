#pragma once

// Data-parallel training over a SimCluster. Each iteration runs, per worker:
//
//   forward/backward on the local shard
//   allreduce(gradients)
//   [factor iterations]  local running-average factors, allreduce(factors)
//   [decomp iterations]  decompose owned factors, allgather(decompositions)
//   precondition with cached decompositions, nu-scale, momentum SGD update
//
// Iterations that refresh neither factors nor decompositions only exchange
// gradients and precondition with the stale cached decompositions.

#include <chrono>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <utility>
#include <string>
#include <vector>

#include "dkfac/data.hpp"
#include "dkfac/dist.hpp"
#include "dkfac/kfac.hpp"
#include "dkfac/nn.hpp"

namespace dkfac::train {

enum class Optimizer { sgd, kfac_sgd };
enum class ExecutionMode { threaded, lockstep };

std::string to_string(Optimizer o);
Optimizer parse_optimizer(const std::string& s);
std::string to_string(ExecutionMode m);
ExecutionMode parse_execution_mode(const std::string& s);

struct TrainConfig {
  int world_size = 1;
  int epochs = 55;
  int global_batch = 128;
  double base_lr = 0.1;
  // Multiply base_lr by world_size (linear scaling for a fixed per-worker batch).
  bool scale_lr_with_workers = false;
  int warmup_epochs = 5;
  std::vector<int> lr_milestones{25, 35, 40, 45, 50};
  double lr_decay = 0.1;
  double momentum = 0.9;
  double label_smoothing = 0.1;
  std::uint64_t seed = 42;
  Optimizer optimizer = Optimizer::kfac_sgd;
  dist::Placement placement = dist::Placement::round_robin;
  ExecutionMode mode = ExecutionMode::threaded;
  // Stop after this many iterations; 0 runs all epochs.
  long max_iterations = 0;
  kfac::KfacConfig kfac;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

/// Linear warmup from base/warmup_iters to base over the warmup epochs, then
/// a decay by lr_decay at every milestone reached.
double lr_at(const TrainConfig& config, int epoch, long iteration, long iters_per_epoch);

struct MetricsRow {
  int epoch = 0;
  long iteration = 0;
  double train_loss = 0;
  double train_acc = 0;
  double val_acc = std::numeric_limits<double>::quiet_NaN();
  double lr = 0;
  double damping = 0;
  int decomp_interval = 0;
  std::uint64_t allreduce_calls = 0;
  std::uint64_t allgather_calls = 0;
  std::uint64_t element_volume = 0;
  double wall_ms = 0;
};

/// Collective counts and element volumes a run of `iterations` steps should
/// produce, assuming constant intervals. `layer_dims` holds (A dim, G dim)
/// per trainable layer; weights are G dim x A dim.
struct TrafficForecast {
  std::uint64_t gradient_calls = 0;
  std::uint64_t factor_calls = 0;
  std::uint64_t decomposition_calls = 0;
  std::uint64_t broadcast_calls = 0;
  std::uint64_t gradient_volume = 0;
  std::uint64_t factor_volume = 0;
  std::uint64_t decomposition_volume = 0;
  std::uint64_t broadcast_volume = 0;

  std::uint64_t allreduce_calls() const { return gradient_calls + factor_calls; }
  std::uint64_t element_volume() const {
    return gradient_volume + factor_volume + decomposition_volume + broadcast_volume;
  }
};

TrafficForecast expected_traffic(long iterations, int factor_interval, int decomp_interval,
                                 std::span<const std::pair<Eigen::Index, Eigen::Index>> layer_dims, bool kfac,
                                 kfac::InverseMethod method = kfac::InverseMethod::eigen);

/// (A dim, G dim) of every trainable layer.
template <typename Scalar>
std::vector<std::pair<Eigen::Index, Eigen::Index>> layer_dims(const nn::Model<Scalar>& model);

/// Fraction of argmax-correct predictions.
template <typename Scalar>
double evaluate(const nn::Model<Scalar>& model, const data::Dataset& ds);

/// Loss of `model` over the whole dataset with the given smoothing.
template <typename Scalar>
double dataset_loss(const nn::Model<Scalar>& model, const data::Dataset& ds, double smoothing);

template <typename Scalar>
class Trainer {
 public:
  Trainer(TrainConfig config, const nn::Model<Scalar>& initial, data::Dataset train,
          std::optional<data::Dataset> val = std::nullopt);

  const TrainConfig& config() const { return config_; }
  long iters_per_epoch() const { return iters_per_epoch_; }
  long total_iterations() const;
  long iteration() const { return iteration_; }
  bool done() const { return iteration_ >= total_iterations(); }

  MetricsRow step();
  std::vector<MetricsRow> run(const std::function<void(const MetricsRow&)>& sink = {});

  const nn::Model<Scalar>& model(int rank = 0) const { return workers_.at(static_cast<std::size_t>(rank)).model; }
  const std::vector<kfac::LayerKfacState<Scalar>>& kfac_state(int rank = 0) const {
    return workers_.at(static_cast<std::size_t>(rank)).states;
  }
  const dist::Assignment& assignment() const { return assignment_; }
  dist::TrafficCounters counters() const { return cluster_.counters(); }
  double last_nu() const { return static_cast<double>(workers_.front().nu); }

  /// Throws ConsistencyError if any replica differs bitwise from rank 0.
  void check_replicas() const;

 private:
  struct Worker {
    nn::Model<Scalar> model;
    std::vector<kfac::LayerKfacState<Scalar>> states;
    std::vector<Matrix<Scalar>> momentum;
    Scalar loss = 0;
    Eigen::Index correct = 0;
    nn::BatchCapture<Scalar> capture;
    std::vector<Matrix<Scalar>> grads;
    Scalar nu = 1;
  };

  struct StepPlan {
    int epoch;
    long batch;
    double lr;
    kfac::Schedule schedule;
    bool kfac;
    bool update_factors;
    bool decompose;
  };

  StepPlan plan(long k) const;
  void local_compute(Worker& w, int rank, const StepPlan& p);
  std::vector<Matrix<Scalar>> factor_payload(const Worker& w) const;
  void set_factors(Worker& w, const std::vector<Matrix<Scalar>>& factors) const;
  template <typename Payload>
  dist::FactorTable<Payload> decompose_owned(const Worker& w, int rank, const StepPlan& p) const;
  void set_decompositions(Worker& w, const dist::FactorTable<SymEig<Scalar>>& table) const;
  void set_inverses(Worker& w, const dist::FactorTable<Matrix<Scalar>>& table) const;
  void update_weights(Worker& w, const StepPlan& p) const;

  void run_worker_threaded(int rank, const StepPlan& p);
  void run_lockstep(const StepPlan& p);
  void broadcast_initial_weights();

  TrainConfig config_;
  data::Dataset train_;
  std::optional<data::Dataset> val_;
  Matrix<Scalar> train_inputs_;
  long iters_per_epoch_;
  long iteration_ = 0;
  int cached_epoch_ = -1;
  std::vector<Eigen::Index> permutation_;
  double last_val_acc_ = std::numeric_limits<double>::quiet_NaN();

  dist::SimCluster<Scalar> cluster_;
  dist::Assignment assignment_;
  std::vector<Worker> workers_;
  std::chrono::steady_clock::time_point started_;
};

}  // namespace dkfac::train
