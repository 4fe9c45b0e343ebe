#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <vector>

#include "metalqr/lqr.hpp"

namespace metalqr {

/// State-norm ceiling beyond which a rollout is declared divergent.
inline constexpr double kOverflowCap = 1e100;

struct RolloutConfig {
  std::size_t horizon = 50;
  std::uint64_t seed = 0;
  bool noise_on = true;
  /// Replaces the x0 ~ N(0, Sigma0) draw when set.
  std::optional<Vector> initial_state;
};

/// states has horizon + 1 entries; controls and costs have horizon entries.
/// A divergent rollout is truncated at divergence_step.
struct Trajectory {
  std::vector<Vector> states;
  std::vector<Vector> controls;
  std::vector<double> costs;
  std::optional<std::size_t> divergence_step;

  bool diverged() const { return divergence_step.has_value(); }
};

/// Lower factors L with L L' = S for Psi and Sigma0. Works for singular
/// PSD Sigma0.
struct NoiseModel {
  Matrix psi_factor;
  Matrix sigma0_factor;

  explicit NoiseModel(const LqrSystemd& sys);
};

Matrix covariance_factor(const Matrix& S);

/// Simulates u = -Kx, x' = Ax + Bu + w for cfg.horizon steps. Stability is
/// not required; divergence is recorded on the trajectory.
Trajectory simulate(const LqrSystemd& sys, const Matrix& K,
                    const RolloutConfig& cfg);
Trajectory simulate(const LqrSystemd& sys, const NoiseModel& noise,
                    const Matrix& K, const RolloutConfig& cfg);

/// Mean stage cost over the horizon. Throws DivergenceError for a divergent
/// trajectory and std::invalid_argument for an empty one.
double empirical_cost(const Trajectory& traj);

/// Same value as empirical_cost(simulate(...)) bit for bit, without storing
/// the trajectory. Returns nullopt on divergence.
std::optional<double> rollout_cost(const LqrSystemd& sys,
                                   const NoiseModel& noise, const Matrix& K,
                                   const RolloutConfig& cfg);

/// CSV with columns t, x0..x{d-1}, u0..u{k-1}, g.
void write_trajectory_csv(std::ostream& os, const Trajectory& traj);

}  // namespace metalqr
