#pragma once

// Meta-objective over a weighted task collection,
//   L(K) = sum_i p_i J_i(K - eta grad J_i(K)),
// its exact gradient, and the two training loops: exact meta-gradient
// descent and the zeroth-order MAML loop.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "metalqr/estimator.hpp"
#include "metalqr/lqr.hpp"

namespace metalqr {

/// K - eta grad J(K); throws InstabilityError if K is not stabilizing.
Matrix post_step_gain(const LqrSystemd& sys, const Matrix& K, double eta);

/// Noiseless meta-loss. Throws InstabilityError naming the system when K or
/// a post-step gain is not stabilizing.
double exact_meta_loss(std::span<const LqrSystemd> systems,
                       std::span<const double> weights, const Matrix& K,
                       double eta);

/// sum_i p_i (I - eta H_i(K)) vec(grad J_i(K')), with H_i the
/// finite-difference Hessian of J_i and K' the post-step gain.
Matrix exact_meta_gradient(std::span<const LqrSystemd> systems,
                           std::span<const double> weights, const Matrix& K,
                           double eta);

/// [sum_i J_i(K) - J_i(K_i*)] / sum_i J_i(K_i*).
double cost_difference_ratio(std::span<const double> costs,
                             std::span<const double> optimal_costs);

enum class StopReason { Epsilon, MaxIters, WallClock, InstabilityHalt };

const char* to_string(StopReason r);

struct CurveRecord {
  std::size_t n = 0;
  Matrix K;
  double grad_norm = 0.0;  // exact or estimated, depending on the loop
  double loss = 0.0;       // exact L(K_n); NaN when not computable
  std::vector<double> costs;  // J_i(K_n) per system
  double ratio = 0.0;
  double seconds = 0.0;
};

/// One record per gradient evaluation. iterations counts the updates
/// actually applied.
struct LearningCurve {
  std::vector<CurveRecord> records;
  std::vector<double> optimal_costs;
  std::size_t iterations = 0;
  StopReason stop = StopReason::MaxIters;
  double final_alpha = 0.0;
  Matrix final_gain;
  std::optional<std::size_t> halt_system;
  std::string halt_message;
};

struct ExactDescentConfig {
  double alpha = 1e-3;
  double eta = 1e-5;
  std::size_t max_iters = 2000;
  double epsilon = 1e-3;
};

/// K_{n+1} = K_n - alpha grad L(K_n) with the exact meta-gradient. Throws
/// InstabilityError carrying the iteration index if an iterate leaves the
/// common stable set.
LearningCurve run_exact_descent(std::span<const LqrSystemd> systems,
                                std::span<const double> weights,
                                const Matrix& K0,
                                const ExactDescentConfig& cfg);

enum class InstabilityPolicy { Halt, BacktrackOnce };

struct MetaConfig {
  std::size_t D = 100;
  std::size_t M = 100;
  double eta = 1e-5;
  double alpha = 1e-3;
  double radius = 0.05;
  std::size_t horizon = 50;
  double epsilon = 1e-3;  // non-finite disables the tolerance stop
  std::size_t max_iters = 2000;
  std::uint64_t root_seed = 0;
  std::size_t batch_size = 0;  // 0 means the whole collection
  CostSource source = CostSource::Rollout;
  bool share_meta_perturbations = true;
  InstabilityPolicy on_instability = InstabilityPolicy::Halt;
  std::optional<double> wall_clock_budget;  // seconds
  bool record_loss = true;
};

/// Zeroth-order MAML loop. Batches cover the whole collection (weighted by
/// p) when batch_size equals its size, and are drawn i.i.d. from p
/// otherwise.
LearningCurve run_maml(std::span<const LqrSystemd> systems,
                       std::span<const double> weights, const Matrix& K0,
                       const MetaConfig& cfg);

struct DescentReport {
  std::vector<double> losses;
  std::vector<double> grad_norms;
  double max_increase = 0.0;
  std::size_t violations = 0;
  bool monotone() const { return violations == 0; }
};

/// Recomputes L and ||grad L||_F at every recorded iterate and counts
/// increases above tolerance.
DescentReport check_descent(const LearningCurve& curve,
                            std::span<const LqrSystemd> systems,
                            std::span<const double> weights, double eta,
                            double tolerance = 1e-10);

/// Uniform weights of length n.
std::vector<double> uniform_weights(std::size_t n);

}  // namespace metalqr
