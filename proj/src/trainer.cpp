#include "dkfac/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <numeric>
#include <thread>

namespace dkfac::train {

std::string to_string(Optimizer o) { return o == Optimizer::sgd ? "sgd" : "kfac+sgd"; }

Optimizer parse_optimizer(const std::string& s) {
  if (s == "sgd") return Optimizer::sgd;
  if (s == "kfac+sgd" || s == "kfac") return Optimizer::kfac_sgd;
  throw ValueError("unknown optimizer '" + s + "' (expected sgd or kfac+sgd)");
}

std::string to_string(ExecutionMode m) { return m == ExecutionMode::threaded ? "threaded" : "lockstep"; }

ExecutionMode parse_execution_mode(const std::string& s) {
  if (s == "threaded") return ExecutionMode::threaded;
  if (s == "lockstep") return ExecutionMode::lockstep;
  throw ValueError("unknown execution mode '" + s + "' (expected threaded or lockstep)");
}

void TrainConfig::validate() const {
  if (world_size < 1) throw ValueError("world_size must be >= 1");
  if (epochs < 1) throw ValueError("epochs must be >= 1");
  if (global_batch < 1) throw ValueError("global_batch must be >= 1");
  if (global_batch % world_size != 0) {
    throw ValueError("global_batch " + std::to_string(global_batch) + " is not divisible by world_size " +
                     std::to_string(world_size));
  }
  if (!(base_lr > 0.0)) throw ValueError("lr must be positive");
  if (warmup_epochs < 0) throw ValueError("warmup_epochs must be >= 0");
  if (!std::is_sorted(lr_milestones.begin(), lr_milestones.end())) throw ValueError("lr_milestones must be sorted");
  if (!lr_milestones.empty() && warmup_epochs >= lr_milestones.front()) {
    throw ValueError("warmup_epochs must be smaller than the first lr milestone");
  }
  if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ValueError("lr_decay must lie in (0, 1]");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ValueError("momentum must lie in [0, 1)");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) throw ValueError("label_smoothing must lie in [0, 1)");
  if (max_iterations < 0) throw ValueError("max_iterations must be >= 0");
  kfac.validate();
}

double lr_at(const TrainConfig& config, int epoch, long iteration, long iters_per_epoch) {
  const double base = config.base_lr * (config.scale_lr_with_workers ? config.world_size : 1);
  const long warmup_iters = static_cast<long>(config.warmup_epochs) * iters_per_epoch;
  if (iteration < warmup_iters) return base * static_cast<double>(iteration + 1) / static_cast<double>(warmup_iters);
  double lr = base;
  for (int m : config.lr_milestones)
    if (epoch >= m) lr *= config.lr_decay;
  return lr;
}

namespace {
std::uint64_t ceil_div(long a, long b) { return static_cast<std::uint64_t>((a + b - 1) / b); }
}  // namespace

TrafficForecast expected_traffic(long iterations, int factor_interval, int decomp_interval,
                                 std::span<const std::pair<Eigen::Index, Eigen::Index>> layer_dims, bool kfac,
                                 kfac::InverseMethod method) {
  if (iterations < 0 || factor_interval < 1 || decomp_interval < 1) {
    throw ValueError("expected_traffic: iterations must be >= 0 and intervals >= 1");
  }
  TrafficForecast f;
  std::uint64_t weights = 0, factors = 0, decomps = 0;
  for (const auto& [a, g] : layer_dims) {
    weights += static_cast<std::uint64_t>(a * g);
    factors += static_cast<std::uint64_t>(a * a + g * g);
    decomps += static_cast<std::uint64_t>(a * a + g * g);
    if (method == kfac::InverseMethod::eigen) decomps += static_cast<std::uint64_t>(a + g);
  }
  f.broadcast_calls = 1;
  f.broadcast_volume = weights;
  f.gradient_calls = static_cast<std::uint64_t>(iterations);
  f.gradient_volume = f.gradient_calls * weights;
  if (kfac) {
    const long lcm = std::lcm(static_cast<long>(factor_interval), static_cast<long>(decomp_interval));
    f.decomposition_calls = ceil_div(iterations, decomp_interval);
    f.factor_calls = ceil_div(iterations, factor_interval) + f.decomposition_calls - ceil_div(iterations, lcm);
    f.factor_volume = f.factor_calls * factors;
    f.decomposition_volume = f.decomposition_calls * decomps;
  }
  return f;
}

template <typename Scalar>
std::vector<std::pair<Eigen::Index, Eigen::Index>> layer_dims(const nn::Model<Scalar>& model) {
  std::vector<std::pair<Eigen::Index, Eigen::Index>> dims;
  for (const auto& w : model.weights()) dims.emplace_back(w.cols(), w.rows());
  return dims;
}

template <typename Scalar>
double evaluate(const nn::Model<Scalar>& model, const data::Dataset& ds) {
  if (ds.size() == 0) throw DimensionError("evaluate: empty validation set");
  const Matrix<Scalar> logits = nn::predict<Scalar>(model, ds.inputs.cast<Scalar>());
  return static_cast<double>(nn::count_correct<Scalar>(logits, ds.labels)) / static_cast<double>(ds.size());
}

template <typename Scalar>
double dataset_loss(const nn::Model<Scalar>& model, const data::Dataset& ds, double smoothing) {
  const Matrix<Scalar> logits = nn::predict<Scalar>(model, ds.inputs.cast<Scalar>());
  return static_cast<double>(nn::cross_entropy<Scalar>(logits, ds.labels, static_cast<Scalar>(smoothing)));
}

// ---------------------------------------------------------------------------

template <typename Scalar>
Trainer<Scalar>::Trainer(TrainConfig config, const nn::Model<Scalar>& initial, data::Dataset train,
                         std::optional<data::Dataset> val)
    : config_(std::move(config)),
      train_(std::move(train)),
      val_(std::move(val)),
      iters_per_epoch_(0),
      cluster_(std::max(1, config_.world_size)) {
  config_.validate();
  train_.validate();
  if (train_.shape.size() != initial.input_shape().size()) {
    throw DimensionError("dataset features do not match the model input");
  }
  if (train_.n_classes != initial.num_classes()) throw DimensionError("dataset classes do not match the model output");
  iters_per_epoch_ = train_.size() / config_.global_batch;
  if (iters_per_epoch_ < 1) {
    throw ValueError("global_batch " + std::to_string(config_.global_batch) + " exceeds the training set size " +
                     std::to_string(train_.size()));
  }
  train_inputs_ = train_.inputs.cast<Scalar>();

  const auto dims = layer_dims(initial);
  assignment_ = dist::assign(config_.placement, dist::enumerate_factors(dims), config_.world_size);

  for (int r = 0; r < config_.world_size; ++r) {
    Worker w{initial, {}, {}, Scalar(0), 0, {}, {}, Scalar(1)};
    for (std::size_t t = 0; t < initial.num_trainable(); ++t) {
      kfac::LayerKfacState<Scalar> s;
      s.layer_id = static_cast<int>(t);
      s.a_owner = assignment_.owner_of({static_cast<int>(t), dist::FactorKind::A});
      s.g_owner = assignment_.owner_of({static_cast<int>(t), dist::FactorKind::G});
      w.states.push_back(std::move(s));
      w.momentum.push_back(Matrix<Scalar>::Zero(initial.weights()[t].rows(), initial.weights()[t].cols()));
    }
    workers_.push_back(std::move(w));
  }
  broadcast_initial_weights();
  started_ = std::chrono::steady_clock::now();
}

template <typename Scalar>
long Trainer<Scalar>::total_iterations() const {
  const long all = static_cast<long>(config_.epochs) * iters_per_epoch_;
  return config_.max_iterations > 0 ? std::min(all, config_.max_iterations) : all;
}

template <typename Scalar>
void Trainer<Scalar>::broadcast_initial_weights() {
  const int world = config_.world_size;
  if (config_.mode == ExecutionMode::lockstep) {
    std::vector<std::vector<Matrix<Scalar>>> per_rank;
    for (const auto& w : workers_) per_rank.push_back(w.model.weights());
    auto weights = cluster_.broadcast_all(0, dist::Channel::weights, per_rank);
    for (auto& w : workers_) w.model.weights() = weights;
    return;
  }
  std::vector<std::thread> threads;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(world));
  for (int r = 0; r < world; ++r) {
    threads.emplace_back([this, r, &errors] {
      try {
        Worker& w = workers_[static_cast<std::size_t>(r)];
        w.model.weights() = cluster_.broadcast(r, 0, dist::Channel::weights, w.model.weights());
      } catch (...) {
        errors[static_cast<std::size_t>(r)] = std::current_exception();
        cluster_.abort("broadcast failed");
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

template <typename Scalar>
typename Trainer<Scalar>::StepPlan Trainer<Scalar>::plan(long k) const {
  StepPlan p{};
  p.epoch = static_cast<int>(k / iters_per_epoch_);
  p.batch = k % iters_per_epoch_;
  p.lr = lr_at(config_, p.epoch, k, iters_per_epoch_);
  p.schedule = kfac::apply_schedules(config_.kfac, p.epoch);
  p.kfac = config_.optimizer == Optimizer::kfac_sgd;
  p.decompose = p.kfac && (k % p.schedule.decomp_interval == 0);
  p.update_factors = p.kfac && (p.decompose || k % p.schedule.factor_interval == 0);
  return p;
}

template <typename Scalar>
void Trainer<Scalar>::local_compute(Worker& w, int rank, const StepPlan& p) {
  const long local = config_.global_batch / config_.world_size;
  const long begin = p.batch * config_.global_batch + static_cast<long>(rank) * local;
  Matrix<Scalar> x(local, train_inputs_.cols());
  std::vector<int> y(static_cast<std::size_t>(local));
  for (long i = 0; i < local; ++i) {
    const Eigen::Index src = permutation_[static_cast<std::size_t>(begin + i)];
    x.row(i) = train_inputs_.row(src);
    y[static_cast<std::size_t>(i)] = train_.labels[static_cast<std::size_t>(src)];
  }
  auto fr = nn::forward<Scalar>(w.model, x, y, static_cast<Scalar>(config_.label_smoothing));
  w.loss = fr.loss;
  w.correct = fr.correct;
  w.capture = std::move(fr.capture);
  w.grads = nn::backward<Scalar>(w.model, w.capture);
}

template <typename Scalar>
std::vector<Matrix<Scalar>> Trainer<Scalar>::factor_payload(const Worker& w) const {
  const auto xi = static_cast<Scalar>(config_.kfac.running_avg);
  std::vector<Matrix<Scalar>> out;
  out.reserve(w.states.size() * 2);
  for (std::size_t t = 0; t < w.states.size(); ++t) {
    kfac::LayerKfacState<Scalar> local;
    local.layer_id = w.states[t].layer_id;
    local.have_factors = w.states[t].have_factors;
    local.a_factor = w.states[t].a_factor;
    local.g_factor = w.states[t].g_factor;
    kfac::update_factors<Scalar>(local, w.capture.layers[t], xi);
    out.push_back(std::move(local.a_factor));
    out.push_back(std::move(local.g_factor));
  }
  return out;
}

template <typename Scalar>
void Trainer<Scalar>::set_factors(Worker& w, const std::vector<Matrix<Scalar>>& factors) const {
  for (std::size_t t = 0; t < w.states.size(); ++t) {
    w.states[t].a_factor = factors[2 * t];
    w.states[t].g_factor = factors[2 * t + 1];
    w.states[t].have_factors = true;
  }
}

template <typename Scalar>
template <typename Payload>
dist::FactorTable<Payload> Trainer<Scalar>::decompose_owned(const Worker& w, int rank, const StepPlan& p) const {
  dist::FactorTable<Payload> owned;
  for (const auto& f : assignment_.owned_by(rank)) {
    const auto& s = w.states[static_cast<std::size_t>(f.id.layer)];
    const Matrix<Scalar>& factor = f.id.kind == dist::FactorKind::A ? s.a_factor : s.g_factor;
    if constexpr (std::is_same_v<Payload, SymEig<Scalar>>) {
      owned.emplace(f.id, linalg::psd_clamped(linalg::sym_eig(factor)));
    } else {
      owned.emplace(f.id, kfac::damped_inverse<Scalar>(factor, static_cast<Scalar>(p.schedule.damping)));
    }
  }
  return owned;
}

template <typename Scalar>
void Trainer<Scalar>::set_decompositions(Worker& w, const dist::FactorTable<SymEig<Scalar>>& table) const {
  for (const auto& [id, eig] : table) {
    auto& s = w.states[static_cast<std::size_t>(id.layer)];
    (id.kind == dist::FactorKind::A ? s.a_eig : s.g_eig) = eig;
  }
}

template <typename Scalar>
void Trainer<Scalar>::set_inverses(Worker& w, const dist::FactorTable<Matrix<Scalar>>& table) const {
  for (const auto& [id, inv] : table) {
    auto& s = w.states[static_cast<std::size_t>(id.layer)];
    (id.kind == dist::FactorKind::A ? s.a_inv : s.g_inv) = inv;
  }
}

template <typename Scalar>
void Trainer<Scalar>::update_weights(Worker& w, const StepPlan& p) const {
  const auto lr = static_cast<Scalar>(p.lr);
  const auto mom = static_cast<Scalar>(config_.momentum);
  std::vector<Matrix<Scalar>> direction;
  if (p.kfac) {
    const auto damping = static_cast<Scalar>(p.schedule.damping);
    direction.reserve(w.grads.size());
    for (std::size_t t = 0; t < w.grads.size(); ++t) {
      const auto& s = w.states[t];
      if (config_.kfac.method == kfac::InverseMethod::eigen) {
        direction.push_back(kfac::precondition_eigen<Scalar>(s, w.grads[t], damping));
      } else {
        if (!s.a_inv || !s.g_inv) throw StateError("no cached inverses for layer " + std::to_string(t));
        direction.push_back(*s.g_inv * w.grads[t] * *s.a_inv);
      }
    }
    w.nu = kfac::scale_grads<Scalar>(direction, w.grads, lr, static_cast<Scalar>(config_.kfac.kl_clip));
  } else {
    direction = w.grads;
    w.nu = Scalar(1);
  }
  for (std::size_t t = 0; t < direction.size(); ++t) {
    w.momentum[t] = mom * w.momentum[t] + direction[t];
    w.model.weights()[t] -= lr * w.momentum[t];
  }
}

template <typename Scalar>
void Trainer<Scalar>::run_worker_threaded(int rank, const StepPlan& p) {
  Worker& w = workers_[static_cast<std::size_t>(rank)];
  local_compute(w, rank, p);
  w.grads = cluster_.allreduce_avg(rank, dist::Channel::gradients, std::move(w.grads));
  if (p.update_factors) {
    set_factors(w, cluster_.allreduce_avg(rank, dist::Channel::factors, factor_payload(w)));
  }
  if (p.decompose) {
    if (config_.kfac.method == kfac::InverseMethod::eigen) {
      set_decompositions(w, cluster_.allgather(rank, dist::Channel::decompositions,
                                               decompose_owned<SymEig<Scalar>>(w, rank, p), assignment_));
    } else {
      set_inverses(w, cluster_.allgather(rank, dist::Channel::decompositions,
                                         decompose_owned<Matrix<Scalar>>(w, rank, p), assignment_));
    }
  }
  update_weights(w, p);
}

template <typename Scalar>
void Trainer<Scalar>::run_lockstep(const StepPlan& p) {
  const auto world = static_cast<std::size_t>(config_.world_size);
  std::vector<std::vector<Matrix<Scalar>>> payload(world);
  for (std::size_t r = 0; r < world; ++r) {
    local_compute(workers_[r], static_cast<int>(r), p);
    payload[r] = std::move(workers_[r].grads);
  }
  const auto grads = cluster_.allreduce_avg_all(dist::Channel::gradients, payload);
  for (auto& w : workers_) w.grads = grads;

  if (p.update_factors) {
    for (std::size_t r = 0; r < world; ++r) payload[r] = factor_payload(workers_[r]);
    const auto factors = cluster_.allreduce_avg_all(dist::Channel::factors, payload);
    for (auto& w : workers_) set_factors(w, factors);
  }
  if (p.decompose) {
    if (config_.kfac.method == kfac::InverseMethod::eigen) {
      std::vector<dist::FactorTable<SymEig<Scalar>>> owned(world);
      for (std::size_t r = 0; r < world; ++r)
        owned[r] = decompose_owned<SymEig<Scalar>>(workers_[r], static_cast<int>(r), p);
      const auto table = cluster_.allgather_all(dist::Channel::decompositions, owned, assignment_);
      for (auto& w : workers_) set_decompositions(w, table);
    } else {
      std::vector<dist::FactorTable<Matrix<Scalar>>> owned(world);
      for (std::size_t r = 0; r < world; ++r)
        owned[r] = decompose_owned<Matrix<Scalar>>(workers_[r], static_cast<int>(r), p);
      const auto table = cluster_.allgather_all(dist::Channel::decompositions, owned, assignment_);
      for (auto& w : workers_) set_inverses(w, table);
    }
  }
  for (auto& w : workers_) update_weights(w, p);
}

template <typename Scalar>
MetricsRow Trainer<Scalar>::step() {
  if (done()) throw StateError("training already finished");
  const long k = iteration_;
  const StepPlan p = plan(k);
  if (p.epoch != cached_epoch_) {
    permutation_ = data::epoch_permutation(train_.size(), config_.seed, p.epoch);
    cached_epoch_ = p.epoch;
  }

  if (config_.mode == ExecutionMode::lockstep) {
    run_lockstep(p);
  } else {
    const int world = config_.world_size;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(world));
    std::vector<std::thread> threads;
    threads.reserve(static_cast<std::size_t>(world));
    for (int r = 0; r < world; ++r) {
      threads.emplace_back([this, r, &p, &errors] {
        try {
          run_worker_threaded(r, p);
        } catch (const std::exception& e) {
          errors[static_cast<std::size_t>(r)] = std::current_exception();
          cluster_.abort(std::string("rank ") + std::to_string(r) + ": " + e.what());
        }
      });
    }
    for (auto& t : threads) t.join();
    // Report the root cause rather than the abort it triggered on other ranks.
    std::exception_ptr first;
    for (auto& e : errors) {
      if (!e) continue;
      if (!first) first = e;
      try {
        std::rethrow_exception(e);
      } catch (const ProtocolError& pe) {
        if (std::string(pe.what()).rfind("cluster aborted", 0) == 0) continue;
        std::rethrow_exception(e);
      } catch (...) {
        std::rethrow_exception(e);
      }
    }
    if (first) std::rethrow_exception(first);
  }
  ++iteration_;
  check_replicas();

  MetricsRow row;
  row.epoch = p.epoch;
  row.iteration = k;
  double loss = 0;
  Eigen::Index correct = 0;
  for (const auto& w : workers_) {
    loss += static_cast<double>(w.loss);
    correct += w.correct;
  }
  row.train_loss = loss / static_cast<double>(workers_.size());
  row.train_acc = static_cast<double>(correct) / static_cast<double>(config_.global_batch);
  if (val_ && (p.batch == iters_per_epoch_ - 1 || done())) last_val_acc_ = evaluate(workers_.front().model, *val_);
  row.val_acc = last_val_acc_;
  row.lr = p.lr;
  row.damping = p.kfac ? p.schedule.damping : 0.0;
  row.decomp_interval = p.kfac ? p.schedule.decomp_interval : 0;
  const auto c = cluster_.counters();
  row.allreduce_calls = c.op_calls(dist::Op::allreduce);
  row.allgather_calls = c.op_calls(dist::Op::allgather);
  row.element_volume = c.element_volume;
  row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started_).count();
  return row;
}

template <typename Scalar>
std::vector<MetricsRow> Trainer<Scalar>::run(const std::function<void(const MetricsRow&)>& sink) {
  std::vector<MetricsRow> rows;
  while (!done()) {
    rows.push_back(step());
    if (sink) sink(rows.back());
  }
  return rows;
}

template <typename Scalar>
void Trainer<Scalar>::check_replicas() const {
  const Worker& ref = workers_.front();
  for (std::size_t r = 1; r < workers_.size(); ++r) {
    const Worker& w = workers_[r];
    for (std::size_t t = 0; t < ref.states.size(); ++t) {
      if (!linalg::identical(w.model.weights()[t], ref.model.weights()[t]) ||
          !linalg::identical(w.momentum[t], ref.momentum[t])) {
        throw ConsistencyError("replica " + std::to_string(r) + " weights diverged at layer " + std::to_string(t));
      }
      if (!kfac::identical(w.states[t], ref.states[t])) {
        throw ConsistencyError("replica " + std::to_string(r) + " K-FAC state diverged at layer " + std::to_string(t));
      }
    }
  }
}

template std::vector<std::pair<Eigen::Index, Eigen::Index>> layer_dims<float>(const nn::Model<float>&);
template std::vector<std::pair<Eigen::Index, Eigen::Index>> layer_dims<double>(const nn::Model<double>&);
template class Trainer<float>;
template class Trainer<double>;
template double evaluate<float>(const nn::Model<float>&, const data::Dataset&);
template double evaluate<double>(const nn::Model<double>&, const data::Dataset&);
template double dataset_loss<float>(const nn::Model<float>&, const data::Dataset&, double);
template double dataset_loss<double>(const nn::Model<double>&, const data::Dataset&, double);

}  // namespace dkfac::train
