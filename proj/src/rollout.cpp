#include "metalqr/rollout.hpp"

#include <boost/random/normal_distribution.hpp>

#include <ostream>
#include <stdexcept>

#include "metalqr/seeding.hpp"

namespace metalqr {

Matrix covariance_factor(const Matrix& S) {
  if (S.rows() != S.cols()) {
    throw DimensionError("covariance_factor: matrix is not square");
  }
  if (S.size() == 0) return S;
  Eigen::LLT<Matrix> llt(S);
  if (llt.info() == Eigen::Success) return llt.matrixL();
  // Singular PSD (e.g. Sigma0 = 0): symmetric square root.
  Eigen::SelfAdjointEigenSolver<Matrix> es((S + S.transpose()) / 2.0);
  const Vector root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal();
}

NoiseModel::NoiseModel(const LqrSystemd& sys)
    : psi_factor(covariance_factor(sys.Psi)),
      sigma0_factor(covariance_factor(sys.Sigma0)) {}

namespace {

struct NullRecorder {
  template <typename V>
  void state(const V&) {}
  template <typename V>
  void stage(const V&, double) {}
};

struct TrajectoryRecorder {
  const Matrix& K;
  Trajectory& traj;

  template <typename V>
  void state(const V& x) {
    traj.states.emplace_back(x);
  }
  template <typename V>
  void stage(const V& x, double g) {
    traj.controls.emplace_back(-K * Vector(x));
    traj.costs.push_back(g);
  }
};

// Closed-loop recursion x' = F x + L_psi z with stage cost x'Mx, where
// F = A - BK and M = Q + K'RK. Fixed-size instantiations cover small d.
template <int Dim, typename Recorder>
std::optional<std::size_t> run_kernel(const Matrix& Fd, const Matrix& Md,
                                      const NoiseModel& noise,
                                      const RolloutConfig& cfg, double& sum,
                                      Recorder& rec) {
  using Mat = Eigen::Matrix<double, Dim, Dim>;
  using Vec = Eigen::Matrix<double, Dim, 1>;
  const Index d = Fd.rows();
  const Mat F = Fd;
  const Mat M = Md;
  const Mat L = noise.psi_factor;

  SplitMix64 engine(cfg.seed);
  boost::random::normal_distribution<double> normal;
  Vec x;
  Vec z;
  Vec next;
  x.resize(d);
  z.resize(d);
  next.resize(d);

  if (cfg.initial_state) {
    if (cfg.initial_state->size() != d) {
      throw DimensionError("initial_state has wrong dimension");
    }
    x = *cfg.initial_state;
  } else {
    const Mat L0 = noise.sigma0_factor;
    for (Index i = 0; i < d; ++i) z(i) = normal(engine);
    x.noalias() = L0 * z;
  }
  rec.state(x);

  constexpr double cap2 = kOverflowCap * kOverflowCap;
  sum = 0.0;
  for (std::size_t t = 0; t < cfg.horizon; ++t) {
    const double g = x.dot(M * x);
    if (!std::isfinite(g)) return t;
    rec.stage(x, g);
    sum += g;
    next.noalias() = F * x;
    if (cfg.noise_on) {
      for (Index i = 0; i < d; ++i) z(i) = normal(engine);
      next.noalias() += L * z;
    }
    x = next;
    if (!(x.squaredNorm() <= cap2)) return t + 1;
    rec.state(x);
  }
  return std::nullopt;
}

template <typename Recorder>
std::optional<std::size_t> dispatch(const Matrix& F, const Matrix& M,
                                    const NoiseModel& noise,
                                    const RolloutConfig& cfg, double& sum,
                                    Recorder& rec) {
  switch (F.rows()) {
    case 1:
      return run_kernel<1>(F, M, noise, cfg, sum, rec);
    case 2:
      return run_kernel<2>(F, M, noise, cfg, sum, rec);
    case 3:
      return run_kernel<3>(F, M, noise, cfg, sum, rec);
    case 4:
      return run_kernel<4>(F, M, noise, cfg, sum, rec);
    default:
      return run_kernel<Eigen::Dynamic>(F, M, noise, cfg, sum, rec);
  }
}

void check_config(const LqrSystemd& sys, const NoiseModel& noise,
                  const RolloutConfig& cfg) {
  if (cfg.horizon < 1) throw std::invalid_argument("horizon must be >= 1");
  const Index d = sys.state_dim();
  if (noise.psi_factor.rows() != d || noise.sigma0_factor.rows() != d) {
    throw DimensionError("noise model does not match system");
  }
}

}  // namespace

Trajectory simulate(const LqrSystemd& sys, const Matrix& K,
                    const RolloutConfig& cfg) {
  check_dimensions(sys);
  return simulate(sys, NoiseModel(sys), K, cfg);
}

Trajectory simulate(const LqrSystemd& sys, const NoiseModel& noise,
                    const Matrix& K, const RolloutConfig& cfg) {
  check_config(sys, noise, cfg);
  const Matrix F = closed_loop(sys, K);
  const Matrix M = closed_loop_cost(sys, K);
  Trajectory traj;
  traj.states.reserve(cfg.horizon + 1);
  traj.controls.reserve(cfg.horizon);
  traj.costs.reserve(cfg.horizon);
  TrajectoryRecorder rec{K, traj};
  double sum = 0.0;
  traj.divergence_step = dispatch(F, M, noise, cfg, sum, rec);
  return traj;
}

double empirical_cost(const Trajectory& traj) {
  if (traj.diverged()) {
    throw DivergenceError("trajectory diverged", *traj.divergence_step);
  }
  if (traj.costs.empty()) {
    throw std::invalid_argument("empirical_cost: empty trajectory");
  }
  double sum = 0.0;
  for (double g : traj.costs) sum += g;
  return sum / static_cast<double>(traj.costs.size());
}

std::optional<double> rollout_cost(const LqrSystemd& sys,
                                   const NoiseModel& noise, const Matrix& K,
                                   const RolloutConfig& cfg) {
  check_config(sys, noise, cfg);
  const Matrix F = closed_loop(sys, K);
  const Matrix M = closed_loop_cost(sys, K);
  NullRecorder rec;
  double sum = 0.0;
  if (dispatch(F, M, noise, cfg, sum, rec)) return std::nullopt;
  return sum / static_cast<double>(cfg.horizon);
}

void write_trajectory_csv(std::ostream& os, const Trajectory& traj) {
  const Index d = traj.states.empty() ? 0 : traj.states.front().size();
  const Index k = traj.controls.empty() ? 0 : traj.controls.front().size();
  os << "t";
  for (Index i = 0; i < d; ++i) os << ",x" << i;
  for (Index i = 0; i < k; ++i) os << ",u" << i;
  os << ",g\n";
  const auto prec = os.precision(17);
  for (std::size_t t = 0; t < traj.costs.size(); ++t) {
    os << t;
    for (Index i = 0; i < d; ++i) os << ',' << traj.states[t](i);
    for (Index i = 0; i < k; ++i) os << ',' << traj.controls[t](i);
    os << ',' << traj.costs[t] << '\n';
  }
  os.precision(prec);
}

}  // namespace metalqr
