#include <gtest/gtest.h>

#include <thread>

#include "dkfac/dist.hpp"
#include "support.hpp"

using namespace dkfac;
using namespace testing_support;
using dist::Channel;
using dist::FactorKind;

namespace {

using Tensors = std::vector<MatrixXd>;

// Runs fn(rank) on one thread per rank and returns the per-rank results.
template <typename Fn>
auto on_all_ranks(int world, Fn fn) {
  using R = decltype(fn(0));
  std::vector<R> out(static_cast<std::size_t>(world));
  std::vector<std::thread> threads;
  for (int r = 0; r < world; ++r) threads.emplace_back([&, r] { out[static_cast<std::size_t>(r)] = fn(r); });
  for (auto& t : threads) t.join();
  return out;
}

std::vector<dist::FactorInfo> sized_factors(const std::vector<Eigen::Index>& dims) {
  std::vector<dist::FactorInfo> f;
  for (std::size_t i = 0; i < dims.size(); ++i) {
    f.push_back({{static_cast<int>(i / 2), i % 2 == 0 ? FactorKind::A : FactorKind::G}, dims[i]});
  }
  return f;
}

std::vector<std::pair<Eigen::Index, Eigen::Index>> layers(int n, Eigen::Index dim = 3) {
  return std::vector<std::pair<Eigen::Index, Eigen::Index>>(static_cast<std::size_t>(n), {dim, dim});
}

}  // namespace

TEST(Allreduce, ConstantInput) {
  dist::SimCluster<double> cluster(4);
  const auto out = on_all_ranks(4, [&](int r) {
    return cluster.allreduce_avg(r, Channel::gradients, {Eigen::Vector3d(1, 2, 3)});
  });
  for (const auto& t : out) EXPECT_TRUE(linalg::identical(t[0], Eigen::Vector3d(1, 2, 3)));
  EXPECT_EQ(cluster.counters().op_calls(dist::Op::allreduce), 1u);
  EXPECT_EQ(cluster.counters().volume(Channel::gradients), 3u);
}

TEST(Allreduce, TwoRanks) {
  dist::SimCluster<double> cluster(2);
  const auto out = on_all_ranks(2, [&](int r) {
    return cluster.allreduce_avg(r, Channel::gradients, {MatrixXd::Constant(1, 1, r == 0 ? 0.0 : 2.0)});
  });
  EXPECT_EQ(out[0][0](0, 0), 1.0);
  EXPECT_EQ(out[1][0](0, 0), 1.0);
}

TEST(Allreduce, FixedOrderAndDeterministic) {
  std::mt19937_64 rng(1);
  std::vector<Tensors> inputs;
  for (int r = 0; r < 3; ++r) inputs.push_back({random_matrix(rng, 5, 1), random_matrix(rng, 2, 2)});
  const MatrixXd want0 = (inputs[0][0] + inputs[1][0] + inputs[2][0]) / 3.0;
  Tensors first;
  for (int run = 0; run < 5; ++run) {
    dist::SimCluster<double> cluster(3);
    const auto out = on_all_ranks(3, [&](int r) {
      return cluster.allreduce_avg(r, Channel::gradients, inputs[static_cast<std::size_t>(r)]);
    });
    EXPECT_TRUE(linalg::identical(out[0][0], want0));
    for (const auto& t : out) {
      EXPECT_TRUE(linalg::identical(t[0], out[0][0]));
      EXPECT_TRUE(linalg::identical(t[1], out[0][1]));
    }
    if (run == 0) first = out[0];
    EXPECT_TRUE(linalg::identical(out[0][1], first[1]));
    const auto lock = dist::SimCluster<double>(3).allreduce_avg_all(Channel::gradients, inputs);
    EXPECT_TRUE(linalg::identical(lock[1], out[0][1]));
  }
}

TEST(Allreduce, ShapeMismatchIsProtocolError) {
  dist::SimCluster<double> cluster(2);
  EXPECT_THROW(cluster.allreduce_avg_all(Channel::gradients, {{MatrixXd::Zero(2, 1)}, {MatrixXd::Zero(3, 1)}}),
               ProtocolError);
}

TEST(Allgather, SingleWorker) {
  const auto a = dist::assign_round_robin(dist::enumerate_factors(layers(2)), 1);
  dist::SimCluster<double> cluster(1);
  dist::FactorTable<MatrixXd> local;
  for (const auto& f : a.factors) local[f.id] = MatrixXd::Identity(f.dim, f.dim);
  const auto table = cluster.allgather<MatrixXd>(0, Channel::decompositions, local, a);
  EXPECT_EQ(table.size(), local.size());
  for (const auto& [id, m] : local) EXPECT_TRUE(linalg::identical(table.at(id), m));
}

TEST(Allgather, TwoWorkersEachHoldAll) {
  const auto a = dist::assign_round_robin(dist::enumerate_factors(layers(2)), 2);
  dist::SimCluster<double> cluster(2);
  std::mt19937_64 rng(2);
  std::vector<dist::FactorTable<SymEig<double>>> owned(2);
  std::uint64_t expected_volume = 0;
  for (std::size_t i = 0; i < a.factors.size(); ++i) {
    const auto& f = a.factors[i];
    owned[static_cast<std::size_t>(a.owner[i])][f.id] = linalg::sym_eig(random_spd(rng, f.dim));
    expected_volume += static_cast<std::uint64_t>(f.dim * f.dim + f.dim);
  }
  EXPECT_EQ(owned[0].size(), 2u);
  EXPECT_EQ(owned[1].size(), 2u);
  const auto out = on_all_ranks(2, [&](int r) {
    return cluster.allgather<SymEig<double>>(r, Channel::decompositions, owned[static_cast<std::size_t>(r)], a);
  });
  for (const auto& table : out) {
    ASSERT_EQ(table.size(), 4u);
    for (int r = 0; r < 2; ++r)
      for (const auto& [id, e] : owned[static_cast<std::size_t>(r)]) EXPECT_TRUE(table.at(id) == e);
  }
  EXPECT_EQ(cluster.counters().volume(Channel::decompositions), expected_volume);
  EXPECT_EQ(cluster.counters().op_calls(dist::Op::allgather), 1u);
}

TEST(Allgather, WrongOwnerOrMissingFactor) {
  const auto a = dist::assign_round_robin(dist::enumerate_factors(layers(1)), 2);
  dist::SimCluster<double> cluster(2);
  const dist::FactorId a0{0, FactorKind::A}, g0{0, FactorKind::G};
  std::vector<dist::FactorTable<MatrixXd>> swapped{{{g0, MatrixXd::Zero(3, 3)}}, {{a0, MatrixXd::Zero(3, 3)}}};
  EXPECT_THROW(cluster.allgather_all(Channel::decompositions, swapped, a), ProtocolError);
  std::vector<dist::FactorTable<MatrixXd>> missing{{{a0, MatrixXd::Zero(3, 3)}}, {}};
  EXPECT_THROW(cluster.allgather_all(Channel::decompositions, missing, a), ProtocolError);
}

TEST(Broadcast, RootWins) {
  dist::SimCluster<double> cluster(3);
  const auto out = on_all_ranks(3, [&](int r) {
    return cluster.broadcast(r, 1, Channel::weights, {MatrixXd::Constant(2, 2, r)});
  });
  for (const auto& t : out) EXPECT_EQ(t[0](1, 1), 1.0);
  EXPECT_EQ(cluster.counters().op_calls(dist::Op::broadcast), 1u);
}

TEST(FaultInjection, MismatchedCallSites) {
  dist::SimCluster<double> cluster(2, std::chrono::milliseconds(2000));
  const auto a = dist::assign_round_robin(dist::enumerate_factors(layers(1)), 2);
  std::vector<int> protocol_errors(2, 0);
  std::vector<std::thread> threads;
  threads.emplace_back([&] {
    try {
      cluster.allreduce_avg(0, Channel::gradients, {MatrixXd::Zero(1, 1)});
    } catch (const ProtocolError&) {
      protocol_errors[0] = 1;
    }
  });
  threads.emplace_back([&] {
    try {
      dist::FactorTable<MatrixXd> owned{{{0, FactorKind::G}, MatrixXd::Zero(3, 3)}};
      cluster.allgather<MatrixXd>(1, Channel::decompositions, owned, a);
    } catch (const ProtocolError&) {
      protocol_errors[1] = 1;
    }
  });
  for (auto& t : threads) t.join();
  EXPECT_EQ(protocol_errors[0] + protocol_errors[1], 2);
}

TEST(FaultInjection, MissingRankTimesOut) {
  dist::SimCluster<double> cluster(2, std::chrono::milliseconds(50));
  EXPECT_THROW(cluster.allreduce_avg(0, Channel::gradients, {MatrixXd::Zero(1, 1)}), ProtocolError);
  EXPECT_THROW(cluster.allreduce_avg(1, Channel::gradients, {MatrixXd::Zero(1, 1)}), ProtocolError);
}

TEST(FaultInjection, AbortWakesWaiters) {
  dist::SimCluster<double> cluster(2, std::chrono::seconds(30));
  bool threw = false;
  std::thread waiter([&] {
    try {
      cluster.allreduce_avg(0, Channel::gradients, {MatrixXd::Zero(1, 1)});
    } catch (const ProtocolError&) {
      threw = true;
    }
  });
  std::this_thread::sleep_for(std::chrono::milliseconds(20));
  cluster.abort("test");
  waiter.join();
  EXPECT_TRUE(threw);
}

TEST(FaultInjection, BadRank) {
  dist::SimCluster<double> cluster(2);
  EXPECT_THROW(cluster.allreduce_avg(2, Channel::gradients, {MatrixXd::Zero(1, 1)}), ProtocolError);
}

TEST(RoundRobin, Counting) {
  auto two = dist::assign_round_robin(dist::enumerate_factors(layers(2)), 4);
  EXPECT_EQ(two.counts(), (std::vector<int>{1, 1, 1, 1}));
  auto idle = dist::assign_round_robin(dist::enumerate_factors(layers(2)), 8);
  EXPECT_EQ(idle.counts(), (std::vector<int>{1, 1, 1, 1, 0, 0, 0, 0}));
  auto three = dist::assign_round_robin(dist::enumerate_factors(layers(3)), 2);
  EXPECT_EQ(three.counts(), (std::vector<int>{3, 3}));
}

TEST(RoundRobin, OrderInterleavesFactors) {
  const auto a = dist::assign_round_robin(dist::enumerate_factors(layers(2)), 2);
  EXPECT_EQ(a.owner_of({0, FactorKind::A}), 0);
  EXPECT_EQ(a.owner_of({0, FactorKind::G}), 1);
  EXPECT_EQ(a.owner_of({1, FactorKind::A}), 0);
  EXPECT_EQ(a.owner_of({1, FactorKind::G}), 1);
}

TEST(SizeBalanced, EqualSizesBalanceCounts) {
  const auto a = dist::assign_size_balanced(dist::enumerate_factors(layers(3)), 3);
  EXPECT_EQ(a.counts(), (std::vector<int>{2, 2, 2}));
}

TEST(SizeBalanced, GreedyTrace) {
  const auto f = sized_factors({8, 1, 1, 1, 1, 1, 1, 1});
  const auto sized = dist::assign_size_balanced(f, 2);
  EXPECT_EQ(sized.owner[0], 0);
  for (std::size_t i = 1; i < f.size(); ++i) EXPECT_EQ(sized.owner[i], 1);
  const auto r = dist::report_imbalance(sized);
  EXPECT_EQ(r.cost[0], 512.0);
  EXPECT_EQ(r.cost[1], 7.0);
  const auto rr = dist::report_imbalance(dist::assign_round_robin(f, 2));
  EXPECT_EQ(rr.max_cost, 515.0);
  EXPECT_LT(r.max_cost, rr.max_cost);
}

TEST(SizeBalanced, NeverWorseThanRoundRobinOnRandomSets) {
  int wins = 0;
  for (int s = 0; s < 100; ++s) {
    const auto f = dist::enumerate_factors(dist::heavy_tailed_layer_dims(1000 + static_cast<std::uint64_t>(s), 20));
    const double rr = dist::report_imbalance(dist::assign_round_robin(f, 4)).max_cost;
    const double sb = dist::report_imbalance(dist::assign_size_balanced(f, 4)).max_cost;
    if (sb <= rr) ++wins;
  }
  EXPECT_EQ(wins, 100);
}

TEST(Imbalance, SingleWorker) {
  const auto r = dist::report_imbalance(dist::assign_round_robin(dist::enumerate_factors(layers(3)), 1));
  EXPECT_EQ(r.speedup[0], 1.0);
  EXPECT_EQ(r.min_speedup, 1.0);
}

TEST(Imbalance, EqualCostTwoWorkers) {
  const auto r = dist::report_imbalance(dist::assign_round_robin(dist::enumerate_factors(layers(1)), 2));
  EXPECT_EQ(r.speedup, (std::vector<double>{2.0, 2.0}));
  EXPECT_EQ(r.parameters, (std::vector<double>{9.0, 9.0}));
}

TEST(Imbalance, HeavyTailTrend) {
  const auto f = dist::enumerate_factors(dist::heavy_tailed_layer_dims(7, 54));
  std::vector<double> min_s, max_s;
  for (int w : {1, 2, 4}) {
    const auto r = dist::report_imbalance(dist::assign_round_robin(f, w));
    min_s.push_back(r.min_speedup);
    max_s.push_back(r.max_speedup);
  }
  EXPECT_LT(min_s[2] / min_s[0], 4.0);
  EXPECT_GT(max_s[2] / max_s[0], 4.0);
  EXPECT_LT(min_s[2], max_s[2]);
}

TEST(Imbalance, HeavyTailedDimsAreSeeded) {
  EXPECT_EQ(dist::heavy_tailed_layer_dims(3, 10), dist::heavy_tailed_layer_dims(3, 10));
  EXPECT_NE(dist::heavy_tailed_layer_dims(3, 10), dist::heavy_tailed_layer_dims(4, 10));
  for (const auto& [a, g] : dist::heavy_tailed_layer_dims(5, 200)) {
    EXPECT_GE(a, 16);
    EXPECT_LE(g, 4096);
  }
}

TEST(Placement, Parse) {
  EXPECT_EQ(dist::parse_placement("roundrobin"), dist::Placement::round_robin);
  EXPECT_EQ(dist::parse_placement("sized"), dist::Placement::size_balanced);
  EXPECT_THROW(dist::parse_placement("random"), ValueError);
}
