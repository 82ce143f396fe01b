#pragma once

// In-process simulation of a data-parallel cluster: blocking collectives with
// barrier semantics, a lockstep mode that takes every rank's contribution at
// once, factor placement policies and traffic accounting.

#include <any>
#include <array>
#include <chrono>
#include <compare>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include "dkfac/linalg.hpp"

namespace dkfac::dist {

enum class FactorKind { A, G };

struct FactorId {
  int layer = 0;
  FactorKind kind = FactorKind::A;
  auto operator<=>(const FactorId&) const = default;
};

std::string to_string(const FactorId& id);

struct FactorInfo {
  FactorId id;
  Eigen::Index dim = 0;
};

template <typename Payload>
using FactorTable = std::map<FactorId, Payload>;

/// Factors of `layer_dims` (pairs of A and G dimensions) in placement order:
/// A_0, G_0, A_1, G_1, ...
std::vector<FactorInfo> enumerate_factors(std::span<const std::pair<Eigen::Index, Eigen::Index>> layer_dims);

struct Assignment {
  int world_size = 1;
  std::vector<FactorInfo> factors;
  std::vector<int> owner;  // parallel to factors

  int owner_of(const FactorId& id) const;
  std::vector<FactorInfo> owned_by(int rank) const;
  std::vector<int> counts() const;
};

/// Factor i goes to rank i mod world_size.
Assignment assign_round_robin(std::vector<FactorInfo> factors, int world_size);

/// Longest-processing-time greedy on cost n^3: largest factor first, each to
/// the rank with the least accumulated cost (lowest rank on ties).
Assignment assign_size_balanced(std::vector<FactorInfo> factors, int world_size);

enum class Placement { round_robin, size_balanced };
std::string to_string(Placement p);
Placement parse_placement(const std::string& s);
Assignment assign(Placement p, std::vector<FactorInfo> factors, int world_size);

/// Seeded (A dim, G dim) pairs for `layers` layers with Pareto-distributed
/// sizes (shape `alpha`, minimum `min_dim`, capped at `max_dim`).
std::vector<std::pair<Eigen::Index, Eigen::Index>> heavy_tailed_layer_dims(std::uint64_t seed, int layers,
                                                                           double alpha = 1.2,
                                                                           Eigen::Index min_dim = 16,
                                                                           Eigen::Index max_dim = 4096);

struct ImbalanceReport {
  std::vector<double> parameters;  // sum of n^2 per rank
  std::vector<double> cost;        // sum of n^3 per rank
  std::vector<double> speedup;     // total cost / rank cost (0 for idle ranks)
  double min_parameters = 0;
  double max_parameters = 0;
  double min_speedup = 0;  // slowest worker
  double max_speedup = 0;  // fastest busy worker
  double max_cost = 0;
};

/// Idle ranks are excluded from the min/max summaries.
ImbalanceReport report_imbalance(const Assignment& assignment);

enum class Channel : int { gradients = 0, factors, decompositions, weights, other };
inline constexpr std::size_t kChannelCount = 5;
std::string to_string(Channel c);

enum class Op : int { allreduce = 0, allgather, broadcast };
inline constexpr std::size_t kOpCount = 3;

/// One entry per collective (not per rank). Volume is the scalar element
/// count of the collective's result.
struct TrafficCounters {
  std::array<std::uint64_t, kOpCount> calls{};
  std::array<std::uint64_t, kChannelCount> channel_calls{};
  std::array<std::uint64_t, kChannelCount> channel_volume{};
  std::uint64_t element_volume = 0;

  std::uint64_t op_calls(Op op) const { return calls[static_cast<std::size_t>(op)]; }
  std::uint64_t channel(Channel c) const { return channel_calls[static_cast<std::size_t>(c)]; }
  std::uint64_t volume(Channel c) const { return channel_volume[static_cast<std::size_t>(c)]; }
  bool operator==(const TrafficCounters&) const = default;
};

template <typename Scalar>
inline Eigen::Index element_count(const Matrix<Scalar>& m) {
  return m.size();
}
template <typename Scalar>
inline Eigen::Index element_count(const SymEig<Scalar>& e) {
  return e.element_count();
}

/// Generation-counted rendezvous. Each rank deposits a contribution; the last
/// arrival combines all of them under the lock and publishes the result to
/// every rank. Ranks that call different sites in the same round, or that
/// wait longer than the timeout, get a ProtocolError.
class Rendezvous {
 public:
  using Combine = std::function<std::shared_ptr<const void>(std::vector<std::any>&)>;

  Rendezvous(int world_size, std::chrono::milliseconds timeout);

  std::shared_ptr<const void> arrive(int rank, const std::string& site, std::any contribution, const Combine& combine);

  // Wakes every waiter with a ProtocolError and fails all later calls.
  void abort(const std::string& reason);
  bool broken() const;

 private:
  struct Round {
    std::vector<std::any> slots;
    std::vector<std::string> sites;
    std::vector<bool> present;
    int arrived = 0;
    bool done = false;
    std::shared_ptr<const void> result;
    std::string error;
    int error_rank = -1;
  };

  int world_size_;
  std::chrono::milliseconds timeout_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::shared_ptr<Round> round_;
  std::string abort_reason_;
};

template <typename Scalar>
class SimCluster {
 public:
  using Tensors = std::vector<Matrix<Scalar>>;

  explicit SimCluster(int world_size, std::chrono::milliseconds timeout = std::chrono::seconds(30));

  int world_size() const { return world_size_; }

  // Blocking collectives: every rank calls once per collective.
  Tensors allreduce_avg(int rank, Channel channel, Tensors tensors);
  template <typename Payload>
  FactorTable<Payload> allgather(int rank, Channel channel, FactorTable<Payload> owned, const Assignment& assignment);
  Tensors broadcast(int rank, int root, Channel channel, Tensors tensors);

  // Lockstep collectives: contributions of all ranks, indexed by rank.
  Tensors allreduce_avg_all(Channel channel, const std::vector<Tensors>& per_rank);
  template <typename Payload>
  FactorTable<Payload> allgather_all(Channel channel, const std::vector<FactorTable<Payload>>& per_rank,
                                     const Assignment& assignment);
  Tensors broadcast_all(int root, Channel channel, const std::vector<Tensors>& per_rank);

  void abort(const std::string& reason) { rendezvous_.abort(reason); }
  TrafficCounters counters() const;

 private:
  Tensors reduce_mean(Channel channel, const std::vector<const Tensors*>& contributions);
  template <typename Payload>
  FactorTable<Payload> merge_tables(Channel channel, const std::vector<const FactorTable<Payload>*>& contributions,
                                    const Assignment& assignment);
  Tensors pick_root(int root, Channel channel, const std::vector<const Tensors*>& contributions);
  void account(Op op, Channel channel, std::uint64_t volume);

  int world_size_;
  Rendezvous rendezvous_;
  mutable std::mutex counters_mu_;
  TrafficCounters counters_;
};

// ---------------------------------------------------------------------------

template <typename Scalar>
template <typename Payload>
FactorTable<Payload> SimCluster<Scalar>::merge_tables(Channel channel,
                                                      const std::vector<const FactorTable<Payload>*>& contributions,
                                                      const Assignment& assignment) {
  if (assignment.world_size != world_size_) {
    throw ProtocolError("allgather: assignment built for " + std::to_string(assignment.world_size) +
                        " workers, cluster has " + std::to_string(world_size_));
  }
  FactorTable<Payload> table;
  std::uint64_t volume = 0;
  for (int r = 0; r < world_size_; ++r) {
    for (const auto& [id, payload] : *contributions[static_cast<std::size_t>(r)]) {
      const int owner = assignment.owner_of(id);
      if (owner != r) {
        throw ProtocolError("allgather: rank " + std::to_string(r) + " contributed " + to_string(id) +
                                " owned by rank " + std::to_string(owner),
                            r);
      }
      volume += static_cast<std::uint64_t>(element_count(payload));
      table.emplace(id, payload);
    }
  }
  for (std::size_t i = 0; i < assignment.factors.size(); ++i) {
    if (!table.contains(assignment.factors[i].id)) {
      throw ProtocolError("allgather: rank " + std::to_string(assignment.owner[i]) + " did not contribute " +
                              to_string(assignment.factors[i].id),
                          assignment.owner[i]);
    }
  }
  if (table.size() != assignment.factors.size()) throw ProtocolError("allgather: contribution outside the assignment");
  account(Op::allgather, channel, volume);
  return table;
}

template <typename Scalar>
template <typename Payload>
FactorTable<Payload> SimCluster<Scalar>::allgather(int rank, Channel channel, FactorTable<Payload> owned,
                                                   const Assignment& assignment) {
  auto combine = [this, channel, &assignment](std::vector<std::any>& slots) -> std::shared_ptr<const void> {
    std::vector<const FactorTable<Payload>*> views;
    for (auto& s : slots) views.push_back(std::any_cast<FactorTable<Payload>>(&s));
    return std::make_shared<const FactorTable<Payload>>(merge_tables(channel, views, assignment));
  };
  auto result = rendezvous_.arrive(rank, "allgather:" + to_string(channel), std::any(std::move(owned)), combine);
  return *std::static_pointer_cast<const FactorTable<Payload>>(result);
}

template <typename Scalar>
template <typename Payload>
FactorTable<Payload> SimCluster<Scalar>::allgather_all(Channel channel,
                                                       const std::vector<FactorTable<Payload>>& per_rank,
                                                       const Assignment& assignment) {
  if (static_cast<int>(per_rank.size()) != world_size_) throw ProtocolError("allgather_all: wrong number of ranks");
  std::vector<const FactorTable<Payload>*> views;
  for (const auto& t : per_rank) views.push_back(&t);
  return merge_tables(channel, views, assignment);
}

}  // namespace dkfac::dist
