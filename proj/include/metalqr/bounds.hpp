#pragma once

// Analysis constants for the ergodic LQR cost and its meta-objective, and
// harnesses that compare them against measured quantities.
//
// Norm conventions: ||.|| is the spectral norm, ||.||_F the Frobenius norm,
// sigma_min the smallest eigenvalue of a symmetric PSD matrix.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "metalqr/lqr.hpp"

namespace metalqr {

struct HessianConstants {
  double c1 = 0.0;
  double c2 = 0.0;
  double c3 = 0.0;
};

/// c1 = (||R|| + ||B||^2 J / smin(Psi)) J / smin(Q)
/// c3 = (J / smin(Q)) (||R|| ||K|| + ||B|| ||A-BK|| J / smin(Psi))
/// c2 = c3 ||A-BK|| ||B|| J / (smin(Q) smin(Psi))
/// Throws InvariantError when smin(Q) = 0.
HessianConstants lemma3_constants(const LqrSystemd& sys, const Matrix& K);

/// c4 = (J d / smin(Q)) (||RK||_F + d ||B'(A-BK)||_F J d / smin(Psi)).
double lemma4_c4(const LqrSystemd& sys, const Matrix& K);

/// (1 + eta (2 c1 + 4 c2)) 2 c4.
double lemma4_gradient_bound(const LqrSystemd& sys, const Matrix& K,
                             double eta);

/// max_i of lemma4_gradient_bound over a collection.
double ensemble_gradient_bound(std::span<const LqrSystemd> systems,
                               const Matrix& K, double eta);

/// min(smin(Q) smin(Psi) / (4 J ||B|| (||A-BK|| + 1)), ||K||). Zero when
/// K = 0.
double lemma2_safe_radius(const LqrSystemd& sys, const Matrix& K);

struct BoundReport {
  double c1 = 0.0;
  double c2 = 0.0;
  double c3 = 0.0;
  double c4 = 0.0;
  double hessian_bound = 0.0;
  double grad_bound = 0.0;
  double safe_radius = 0.0;
  double measured_hessian_norm = 0.0;
  double measured_grad_norm = 0.0;

  static constexpr double slack = 1e-6;
  bool hessian_ok() const {
    return measured_hessian_norm <= hessian_bound * (1.0 + slack) + slack;
  }
  bool grad_ok() const {
    return measured_grad_norm <= grad_bound * (1.0 + slack) + slack;
  }
};

/// Measures the spectral norm of the kd x kd finite-difference Hessian and
/// the single-task meta-gradient norm, alongside every constant.
BoundReport check_hessian_bound(const LqrSystemd& sys, const Matrix& K,
                                double eta = 0.0);

struct StabilityProbe {
  double radius = 0.0;
  std::size_t trials = 0;
  std::size_t failures = 0;
};

/// Draws random directions scaled to spectral norm equal to the safe radius
/// and counts perturbed gains that are not stabilizing.
StabilityProbe probe_safe_radius(const LqrSystemd& sys, const Matrix& K,
                                 std::size_t trials, std::uint64_t seed);

struct LipschitzSurrogate {
  double spectral_ball = 0.0;   // K' drawn with ||K - K'|| = radius
  double frobenius_ball = 0.0;  // K' drawn with ||K - K'||_F = radius
  double radius = 0.0;
  std::size_t samples = 0;
};

/// Largest ||grad L(K) - grad L(K')||_F / ||K - K'||_F over samples drawn on
/// the common safe ball, under both readings of the ball's norm.
LipschitzSurrogate empirical_lipschitz(std::span<const LqrSystemd> systems,
                                       std::span<const double> weights,
                                       const Matrix& K, double eta,
                                       std::size_t samples,
                                       std::uint64_t seed);

/// Open interval of stabilizing scalar gains {k : |a - b k| < 1}; nullopt
/// when empty. Unbounded ends are +-inf.
std::optional<std::pair<double, double>> scalar_stable_interval(
    const LqrSystemd& sys);

struct LearnabilityVerdict {
  bool found = false;
  Matrix K;
  std::size_t trials = 0;
  /// Scalar collections only: exact interval intersection proved empty.
  bool certified_empty = false;
  std::optional<std::pair<double, double>> scalar_intersection;
  std::string note;
};

/// Multi-start search for a gain stabilizing every system: each system's
/// optimal gain, their average, zero, then random draws around them.
/// NOT_FOUND is a heuristic verdict except when certified_empty is set.
LearnabilityVerdict check_learnability(std::span<const LqrSystemd> systems,
                                       std::size_t max_trials = 1000,
                                       std::uint64_t seed = 0);

}  // namespace metalqr
