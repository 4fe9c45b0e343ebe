#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "metalqr/meta.hpp"
#include "support.hpp"

using namespace metalqr;
using namespace metalqr::testing;

namespace {

struct Collection {
  std::vector<LqrSystemd> systems;
  std::vector<double> weights;
  Matrix K;
};

// Systems around one random instance, sharing a gain that stabilizes all.
Collection similar_systems(std::mt19937_64& rng, Index d, Index k, std::size_t n,
                           double jitter = 0.05) {
  for (;;) {
    const auto base = random_instance(rng, d, k, 0.1, 0.8);
    Collection c;
    c.K = base.K;
    bool ok = true;
    for (std::size_t i = 0; i < n && ok; ++i) {
      LqrSystemd s = base.sys;
      if (i > 0) {
        s.A += jitter * gaussian(rng, d, d);
        s.B += jitter * gaussian(rng, d, k);
      }
      ok = is_stable(s, c.K, 0.05);
      c.systems.push_back(s);
    }
    if (!ok) continue;
    c.weights = uniform_weights(n);
    return c;
  }
}

}  // namespace

TEST(Meta, ZeroEtaGradientIsWeightedTaskGradient) {
  std::mt19937_64 rng(1);
  const auto c = similar_systems(rng, 2, 2, 3);
  Matrix ref = Matrix::Zero(2, 2);
  for (std::size_t i = 0; i < 3; ++i) ref += c.weights[i] * exact_gradient(c.systems[i], c.K);
  EXPECT_EQ(exact_meta_gradient(c.systems, c.weights, c.K, 0.0), ref);
}

TEST(Meta, MetaGradientMatchesDifferencesOfMetaLoss) {
  std::mt19937_64 rng(2);
  for (Index d : {1, 2}) {
    const auto c = similar_systems(rng, d, d, 3);
    const double eta = 1e-2;
    const Matrix G = exact_meta_gradient(c.systems, c.weights, c.K, eta);
    const Matrix ref = five_point_gradient(
        [&](const Matrix& K) { return exact_meta_loss(c.systems, c.weights, K, eta); },
        c.K, 1e-3);
    EXPECT_LT(rel_err(G, ref), 1e-5) << "d=" << d;
  }
}

TEST(Meta, CostDifferenceRatio) {
  const std::vector<double> J{2.0, 3.0};
  const std::vector<double> opt{1.0, 3.0};
  EXPECT_DOUBLE_EQ(cost_difference_ratio(J, opt), 0.25);
  EXPECT_DOUBLE_EQ(cost_difference_ratio(opt, opt), 0.0);
  EXPECT_THROW(cost_difference_ratio(J, std::vector<double>{1.0}), std::invalid_argument);
}

TEST(Meta, ExactDescentZeroIterations) {
  const std::vector<LqrSystemd> s{scalar_system(0.5, 1.0)};
  const auto curve = run_exact_descent(s, uniform_weights(1), Matrix(Matrix::Zero(1, 1)),
                                       {1e-2, 0.0, 0, 1e-6});
  EXPECT_TRUE(curve.records.empty());
  EXPECT_EQ(curve.stop, StopReason::MaxIters);
  EXPECT_EQ(curve.iterations, 0u);
}

TEST(Meta, ExactDescentReachesRiccatiGain) {
  const auto s = scalar_system(0.8, 1.0, 1.0, 0.5, 1.0);
  const std::vector<LqrSystemd> sys{s};
  const double kstar = solve_optimal_gain(s)(0, 0);
  const auto curve = run_exact_descent(sys, uniform_weights(1), Matrix(Matrix::Zero(1, 1)),
                                       {0.05, 0.0, 100000, 1e-10});
  EXPECT_EQ(curve.stop, StopReason::Epsilon);
  EXPECT_NEAR(curve.final_gain(0, 0), kstar, 1e-8);
  const auto report = check_descent(curve, sys, uniform_weights(1), 0.0);
  EXPECT_TRUE(report.monotone());
}

TEST(Meta, ExactDescentBlowsUpWithHugeStep) {
  const std::vector<LqrSystemd> sys{scalar_system(0.8, 1.0)};
  try {
    run_exact_descent(sys, uniform_weights(1), Matrix(Matrix::Zero(1, 1)),
                      {100.0, 0.0, 10, 1e-9});
    FAIL() << "expected InstabilityError";
  } catch (const InstabilityError& e) {
    ASSERT_TRUE(e.iteration().has_value());
    EXPECT_EQ(*e.iteration(), 1u);
  }
}

TEST(Meta, MamlOracleModeIsDeterministic) {
  std::mt19937_64 rng(3);
  const auto c = similar_systems(rng, 2, 2, 3);
  MetaConfig cfg;
  cfg.D = 10;
  cfg.M = 10;
  cfg.max_iters = 5;
  cfg.source = CostSource::ExactOracle;
  cfg.root_seed = 99;
  const auto a = run_maml(c.systems, c.weights, c.K, cfg);
  const auto b = run_maml(c.systems, c.weights, c.K, cfg);
  ASSERT_EQ(a.records.size(), 5u);
  for (std::size_t n = 0; n < 5; ++n) {
    EXPECT_EQ(a.records[n].K, b.records[n].K);
    EXPECT_EQ(a.records[n].grad_norm, b.records[n].grad_norm);
    EXPECT_GE(a.records[n].ratio, 0.0);
  }
}

TEST(Meta, MamlHaltsOnInstabilityWithReport) {
  const std::vector<LqrSystemd> sys{scalar_system(0.9, 1.0), scalar_system(0.5, 1.0)};
  MetaConfig cfg;
  cfg.D = 20;
  cfg.M = 5;
  cfg.alpha = 10.0;
  cfg.max_iters = 50;
  cfg.source = CostSource::ExactOracle;
  const auto curve = run_maml(sys, uniform_weights(2), Matrix(Matrix::Zero(1, 1)), cfg);
  EXPECT_EQ(curve.stop, StopReason::InstabilityHalt);
  ASSERT_TRUE(curve.halt_system.has_value());
  EXPECT_FALSE(curve.halt_message.empty());
}

TEST(Meta, MamlBatchSamplingIsDeterministic) {
  std::mt19937_64 rng(4);
  const auto c = similar_systems(rng, 1, 1, 4);
  MetaConfig cfg;
  cfg.D = 5;
  cfg.M = 5;
  cfg.max_iters = 3;
  cfg.batch_size = 2;
  cfg.source = CostSource::ExactOracle;
  const auto a = run_maml(c.systems, c.weights, c.K, cfg);
  const auto b = run_maml(c.systems, c.weights, c.K, cfg);
  EXPECT_EQ(a.final_gain, b.final_gain);
  cfg.batch_size = 5;
  EXPECT_THROW(run_maml(c.systems, c.weights, c.K, cfg), std::invalid_argument);
}

TEST(Meta, UnstableInitialGainRejected) {
  const std::vector<LqrSystemd> sys{scalar_system(2.0, 1.0)};
  EXPECT_THROW(run_maml(sys, uniform_weights(1), Matrix(Matrix::Zero(1, 1)), MetaConfig{}),
               InstabilityError);
}
