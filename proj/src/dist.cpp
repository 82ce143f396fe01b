#include "dkfac/dist.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace dkfac::dist {

std::string to_string(const FactorId& id) {
  return std::string(id.kind == FactorKind::A ? "A" : "G") + "[" + std::to_string(id.layer) + "]";
}

std::string to_string(Channel c) {
  switch (c) {
    case Channel::gradients:
      return "gradients";
    case Channel::factors:
      return "factors";
    case Channel::decompositions:
      return "decompositions";
    case Channel::weights:
      return "weights";
    case Channel::other:
      return "other";
  }
  return "unknown";
}

std::string to_string(Placement p) { return p == Placement::round_robin ? "roundrobin" : "sized"; }

Placement parse_placement(const std::string& s) {
  if (s == "roundrobin") return Placement::round_robin;
  if (s == "sized") return Placement::size_balanced;
  throw ValueError("unknown placement '" + s + "' (expected roundrobin or sized)");
}

std::vector<FactorInfo> enumerate_factors(std::span<const std::pair<Eigen::Index, Eigen::Index>> layer_dims) {
  std::vector<FactorInfo> out;
  out.reserve(layer_dims.size() * 2);
  for (std::size_t l = 0; l < layer_dims.size(); ++l) {
    out.push_back({{static_cast<int>(l), FactorKind::A}, layer_dims[l].first});
    out.push_back({{static_cast<int>(l), FactorKind::G}, layer_dims[l].second});
  }
  return out;
}

int Assignment::owner_of(const FactorId& id) const {
  for (std::size_t i = 0; i < factors.size(); ++i)
    if (factors[i].id == id) return owner[i];
  throw ProtocolError("factor " + to_string(id) + " is not part of the assignment");
}

std::vector<FactorInfo> Assignment::owned_by(int rank) const {
  std::vector<FactorInfo> out;
  for (std::size_t i = 0; i < factors.size(); ++i)
    if (owner[i] == rank) out.push_back(factors[i]);
  return out;
}

std::vector<int> Assignment::counts() const {
  std::vector<int> c(static_cast<std::size_t>(world_size), 0);
  for (int o : owner) ++c[static_cast<std::size_t>(o)];
  return c;
}

namespace {
void check_world(int world_size) {
  if (world_size < 1) throw ValueError("world size must be >= 1");
}
double cube(Eigen::Index n) { return static_cast<double>(n) * static_cast<double>(n) * static_cast<double>(n); }
}  // namespace

Assignment assign_round_robin(std::vector<FactorInfo> factors, int world_size) {
  check_world(world_size);
  Assignment a;
  a.world_size = world_size;
  a.owner.resize(factors.size());
  for (std::size_t i = 0; i < factors.size(); ++i) a.owner[i] = static_cast<int>(i % static_cast<std::size_t>(world_size));
  a.factors = std::move(factors);
  return a;
}

Assignment assign_size_balanced(std::vector<FactorInfo> factors, int world_size) {
  check_world(world_size);
  std::vector<std::size_t> order(factors.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return factors[i].dim > factors[j].dim; });

  Assignment a;
  a.world_size = world_size;
  a.owner.assign(factors.size(), 0);
  std::vector<double> load(static_cast<std::size_t>(world_size), 0.0);
  for (std::size_t i : order) {
    const auto it = std::min_element(load.begin(), load.end());
    const int rank = static_cast<int>(it - load.begin());
    a.owner[i] = rank;
    *it += cube(factors[i].dim);
  }
  a.factors = std::move(factors);
  return a;
}

Assignment assign(Placement p, std::vector<FactorInfo> factors, int world_size) {
  return p == Placement::round_robin ? assign_round_robin(std::move(factors), world_size)
                                     : assign_size_balanced(std::move(factors), world_size);
}

std::vector<std::pair<Eigen::Index, Eigen::Index>> heavy_tailed_layer_dims(std::uint64_t seed, int layers,
                                                                           double alpha, Eigen::Index min_dim,
                                                                           Eigen::Index max_dim) {
  if (layers < 1 || !(alpha > 0.0) || min_dim < 1 || max_dim < min_dim) {
    throw ValueError("heavy_tailed_layer_dims: invalid parameters");
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto draw = [&] {
    const double u = 1.0 - unit(rng);
    const double x = static_cast<double>(min_dim) * std::pow(u, -1.0 / alpha);
    return std::min(max_dim, static_cast<Eigen::Index>(std::llround(std::min(x, static_cast<double>(max_dim)))));
  };
  std::vector<std::pair<Eigen::Index, Eigen::Index>> dims;
  for (int l = 0; l < layers; ++l) {
    const Eigen::Index a = draw();
    dims.emplace_back(a, draw());
  }
  return dims;
}

ImbalanceReport report_imbalance(const Assignment& assignment) {
  const auto w = static_cast<std::size_t>(assignment.world_size);
  ImbalanceReport r;
  r.parameters.assign(w, 0.0);
  r.cost.assign(w, 0.0);
  r.speedup.assign(w, 0.0);
  double total = 0;
  for (std::size_t i = 0; i < assignment.factors.size(); ++i) {
    const auto n = static_cast<double>(assignment.factors[i].dim);
    const auto o = static_cast<std::size_t>(assignment.owner[i]);
    r.parameters[o] += n * n;
    r.cost[o] += n * n * n;
    total += n * n * n;
  }
  bool any = false;
  for (std::size_t k = 0; k < w; ++k) {
    if (r.cost[k] <= 0) continue;
    r.speedup[k] = total / r.cost[k];
    if (!any) {
      r.min_parameters = r.max_parameters = r.parameters[k];
      r.min_speedup = r.max_speedup = r.speedup[k];
      any = true;
    } else {
      r.min_parameters = std::min(r.min_parameters, r.parameters[k]);
      r.max_parameters = std::max(r.max_parameters, r.parameters[k]);
      r.min_speedup = std::min(r.min_speedup, r.speedup[k]);
      r.max_speedup = std::max(r.max_speedup, r.speedup[k]);
    }
    r.max_cost = std::max(r.max_cost, r.cost[k]);
  }
  return r;
}

// ---------------------------------------------------------------------------

Rendezvous::Rendezvous(int world_size, std::chrono::milliseconds timeout)
    : world_size_(world_size), timeout_(timeout), round_(std::make_shared<Round>()) {
  check_world(world_size);
  round_->slots.resize(static_cast<std::size_t>(world_size));
  round_->sites.resize(static_cast<std::size_t>(world_size));
  round_->present.assign(static_cast<std::size_t>(world_size), false);
}

void Rendezvous::abort(const std::string& reason) {
  std::lock_guard lock(mu_);
  if (abort_reason_.empty()) abort_reason_ = reason.empty() ? "aborted" : reason;
  cv_.notify_all();
}

bool Rendezvous::broken() const {
  std::lock_guard lock(mu_);
  return !abort_reason_.empty();
}

std::shared_ptr<const void> Rendezvous::arrive(int rank, const std::string& site, std::any contribution,
                                               const Combine& combine) {
  if (rank < 0 || rank >= world_size_) throw ProtocolError("rank " + std::to_string(rank) + " out of range", rank);
  std::unique_lock lock(mu_);
  if (!abort_reason_.empty()) throw ProtocolError("cluster aborted: " + abort_reason_, rank);

  std::shared_ptr<Round> round = round_;
  const auto r = static_cast<std::size_t>(rank);
  if (round->present[r]) {
    throw ProtocolError("rank " + std::to_string(rank) + " entered " + site + " twice in one round", rank);
  }
  round->present[r] = true;
  round->slots[r] = std::move(contribution);
  round->sites[r] = site;

  if (++round->arrived == world_size_) {
    for (int k = 0; k < world_size_; ++k) {
      if (round->sites[static_cast<std::size_t>(k)] != round->sites[0]) {
        round->error = "collective mismatch: rank 0 called " + round->sites[0] + " but rank " + std::to_string(k) +
                       " called " + round->sites[static_cast<std::size_t>(k)];
        round->error_rank = k;
        break;
      }
    }
    if (round->error.empty()) {
      try {
        round->result = combine(round->slots);
      } catch (const ProtocolError& e) {
        round->error = e.what();
        round->error_rank = e.rank();
      } catch (const std::exception& e) {
        round->error = e.what();
      }
    }
    round->done = true;
    round->slots.clear();

    auto next = std::make_shared<Round>();
    next->slots.resize(static_cast<std::size_t>(world_size_));
    next->sites.resize(static_cast<std::size_t>(world_size_));
    next->present.assign(static_cast<std::size_t>(world_size_), false);
    round_ = std::move(next);
    cv_.notify_all();
  } else {
    const bool finished = cv_.wait_for(lock, timeout_, [&] { return round->done || !abort_reason_.empty(); });
    if (!round->done) {
      if (!abort_reason_.empty()) throw ProtocolError("cluster aborted: " + abort_reason_, rank);
      (void)finished;
      const std::string msg = "rendezvous timeout at " + site + ": " + std::to_string(round->arrived) + " of " +
                              std::to_string(world_size_) + " ranks arrived";
      if (abort_reason_.empty()) abort_reason_ = msg;
      cv_.notify_all();
      throw ProtocolError(msg, rank);
    }
  }
  if (!round->error.empty()) throw ProtocolError(round->error, round->error_rank);
  return round->result;
}

// ---------------------------------------------------------------------------

template <typename Scalar>
SimCluster<Scalar>::SimCluster(int world_size, std::chrono::milliseconds timeout)
    : world_size_(world_size), rendezvous_(world_size, timeout) {}

template <typename Scalar>
TrafficCounters SimCluster<Scalar>::counters() const {
  std::lock_guard lock(counters_mu_);
  return counters_;
}

template <typename Scalar>
void SimCluster<Scalar>::account(Op op, Channel channel, std::uint64_t volume) {
  std::lock_guard lock(counters_mu_);
  counters_.calls[static_cast<std::size_t>(op)] += 1;
  counters_.channel_calls[static_cast<std::size_t>(channel)] += 1;
  counters_.channel_volume[static_cast<std::size_t>(channel)] += volume;
  counters_.element_volume += volume;
}

template <typename Scalar>
typename SimCluster<Scalar>::Tensors SimCluster<Scalar>::reduce_mean(Channel channel,
                                                                     const std::vector<const Tensors*>& contributions) {
  const Tensors& first = *contributions.front();
  for (int r = 1; r < world_size_; ++r) {
    const Tensors& t = *contributions[static_cast<std::size_t>(r)];
    if (t.size() != first.size()) {
      throw ProtocolError("allreduce: rank " + std::to_string(r) + " contributed " + std::to_string(t.size()) +
                              " tensors, rank 0 contributed " + std::to_string(first.size()),
                          r);
    }
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (t[i].rows() != first[i].rows() || t[i].cols() != first[i].cols()) {
        throw ProtocolError("allreduce: rank " + std::to_string(r) + " tensor " + std::to_string(i) +
                                " has shape " + std::to_string(t[i].rows()) + "x" + std::to_string(t[i].cols()) +
                                ", expected " + std::to_string(first[i].rows()) + "x" +
                                std::to_string(first[i].cols()),
                            r);
      }
    }
  }
  Tensors out = first;
  std::uint64_t volume = 0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    for (int r = 1; r < world_size_; ++r) out[i] += (*contributions[static_cast<std::size_t>(r)])[i];
    out[i] /= Scalar(world_size_);
    volume += static_cast<std::uint64_t>(out[i].size());
  }
  account(Op::allreduce, channel, volume);
  return out;
}

template <typename Scalar>
typename SimCluster<Scalar>::Tensors SimCluster<Scalar>::pick_root(int root, Channel channel,
                                                                   const std::vector<const Tensors*>& contributions) {
  if (root < 0 || root >= world_size_) throw ProtocolError("broadcast: root " + std::to_string(root) + " out of range");
  Tensors out = *contributions[static_cast<std::size_t>(root)];
  std::uint64_t volume = 0;
  for (const auto& t : out) volume += static_cast<std::uint64_t>(t.size());
  account(Op::broadcast, channel, volume);
  return out;
}

template <typename Scalar>
typename SimCluster<Scalar>::Tensors SimCluster<Scalar>::allreduce_avg(int rank, Channel channel, Tensors tensors) {
  auto combine = [this, channel](std::vector<std::any>& slots) -> std::shared_ptr<const void> {
    std::vector<const Tensors*> views;
    for (auto& s : slots) views.push_back(std::any_cast<Tensors>(&s));
    return std::make_shared<const Tensors>(reduce_mean(channel, views));
  };
  auto result = rendezvous_.arrive(rank, "allreduce:" + to_string(channel), std::any(std::move(tensors)), combine);
  return *std::static_pointer_cast<const Tensors>(result);
}

template <typename Scalar>
typename SimCluster<Scalar>::Tensors SimCluster<Scalar>::broadcast(int rank, int root, Channel channel,
                                                                   Tensors tensors) {
  auto combine = [this, root, channel](std::vector<std::any>& slots) -> std::shared_ptr<const void> {
    std::vector<const Tensors*> views;
    for (auto& s : slots) views.push_back(std::any_cast<Tensors>(&s));
    return std::make_shared<const Tensors>(pick_root(root, channel, views));
  };
  auto result = rendezvous_.arrive(rank, "broadcast:" + to_string(channel) + ":" + std::to_string(root),
                                   std::any(std::move(tensors)), combine);
  return *std::static_pointer_cast<const Tensors>(result);
}

template <typename Scalar>
typename SimCluster<Scalar>::Tensors SimCluster<Scalar>::allreduce_avg_all(Channel channel,
                                                                           const std::vector<Tensors>& per_rank) {
  if (static_cast<int>(per_rank.size()) != world_size_) throw ProtocolError("allreduce_all: wrong number of ranks");
  std::vector<const Tensors*> views;
  for (const auto& t : per_rank) views.push_back(&t);
  return reduce_mean(channel, views);
}

template <typename Scalar>
typename SimCluster<Scalar>::Tensors SimCluster<Scalar>::broadcast_all(int root, Channel channel,
                                                                       const std::vector<Tensors>& per_rank) {
  if (static_cast<int>(per_rank.size()) != world_size_) throw ProtocolError("broadcast_all: wrong number of ranks");
  std::vector<const Tensors*> views;
  for (const auto& t : per_rank) views.push_back(&t);
  return pick_root(root, channel, views);
}

template class SimCluster<float>;
template class SimCluster<double>;

}  // namespace dkfac::dist
