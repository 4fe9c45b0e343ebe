#pragma once

// Zeroth-order gradient estimation on the Frobenius sphere of radius r:
//   grad_r J(K) = (dk / r^2) E[J(K + U) U],  U ~ Unif(S_r),
// for a single task, and the Hessian-free meta-gradient built from it.

#include <cstddef>
#include <cstdint>
#include <span>

#include "metalqr/lqr.hpp"
#include "metalqr/seeding.hpp"

namespace metalqr {

/// Where sampled costs come from: simulated rollouts, or the exact cost
/// J(K) used as a noiseless function oracle.
enum class CostSource { Rollout, ExactOracle };

struct GradEstimate {
  Matrix value;
  std::size_t samples_used = 0;  // cost evaluations attempted
  std::size_t divergences = 0;   // evaluations dropped as divergent
};

/// Uniform draw on {U in R^{rows x cols} : ||U||_F = radius}.
Matrix sample_sphere(Index rows, Index cols, double radius, SplitMix64& engine);

struct GradientEstimatorConfig {
  std::size_t M = 100;
  double radius = 0.05;
  std::size_t horizon = 50;
  CostSource source = CostSource::Rollout;
};

/// Single-task estimate (1/M) sum_m (dk/r^2) Jhat_m U_m. Divergent samples
/// are dropped and counted; the mean runs over the survivors. Throws
/// EstimationError if none survive.
GradEstimate estimate_gradient(const LqrSystemd& sys, const Matrix& K,
                               const GradientEstimatorConfig& cfg,
                               SeedStream stream);

struct MetaEstimatorConfig {
  std::size_t D = 100;
  std::size_t M = 100;
  double eta = 1e-5;
  double radius = 0.05;
  std::size_t horizon = 50;
  CostSource source = CostSource::Rollout;
  /// One U_d per meta-perturbation index shared by all systems in the batch.
  bool share_meta_perturbations = true;
};

/// One drawn task. stream_id selects its random streams; label names it in
/// error messages.
struct BatchEntry {
  const LqrSystemd* system = nullptr;
  double weight = 1.0;
  std::uint64_t stream_id = 0;
  std::size_t label = 0;
};

/// Meta-gradient estimate: for each task and perturbation U_d, adapt
/// K + U_d by one inner zeroth-order step of size eta, evaluate the adapted
/// gain, and average (dk/r^2) Jhat U_d with the entry weights.
GradEstimate estimate_meta_gradient(std::span<const BatchEntry> batch,
                                    const Matrix& K,
                                    const MetaEstimatorConfig& cfg,
                                    SeedStream stream);

}  // namespace metalqr
