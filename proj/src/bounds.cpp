#include "metalqr/bounds.hpp"

#include <boost/random/normal_distribution.hpp>
#include <boost/random/uniform_01.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "metalqr/meta.hpp"
#include "metalqr/seeding.hpp"

namespace metalqr {

namespace {

double spectral_norm(const Matrix& m) {
  if (m.size() == 0) return 0.0;
  Eigen::JacobiSVD<Matrix> svd(m);
  return svd.singularValues()(0);
}

struct Quantities {
  double J;
  double smin_q;
  double smin_psi;
  double norm_r;
  double norm_b;
  double norm_f;
  double norm_k;
};

Quantities quantities(const LqrSystemd& sys, const Matrix& K) {
  require_stable(sys, K);
  Quantities q{};
  q.J = exact_cost(sys, K);
  q.smin_q = detail::min_eigenvalue<double>(sys.Q);
  q.smin_psi = detail::min_eigenvalue<double>(sys.Psi);
  if (!(q.smin_q > 0.0)) {
    throw InvariantError("smallest eigenvalue of Q is zero; bound is infinite");
  }
  if (!(q.smin_psi > 0.0)) {
    throw InvariantError("Psi is not positive definite");
  }
  q.norm_r = spectral_norm(sys.R);
  q.norm_b = spectral_norm(sys.B);
  q.norm_f = spectral_norm(closed_loop(sys, K));
  q.norm_k = spectral_norm(K);
  return q;
}

Matrix gaussian_matrix(Index rows, Index cols, SplitMix64& engine) {
  boost::random::normal_distribution<double> normal;
  Matrix G(rows, cols);
  for (Index i = 0; i < G.size(); ++i) G.reshaped()(i) = normal(engine);
  return G;
}

}  // namespace

HessianConstants lemma3_constants(const LqrSystemd& sys, const Matrix& K) {
  const Quantities q = quantities(sys, K);
  HessianConstants c;
  c.c1 = (q.norm_r + q.norm_b * q.norm_b * q.J / q.smin_psi) * q.J / q.smin_q;
  c.c3 = (q.J / q.smin_q) *
         (q.norm_r * q.norm_k + q.norm_b * q.norm_f * q.J / q.smin_psi);
  c.c2 = c.c3 * q.norm_f * q.norm_b * q.J / (q.smin_q * q.smin_psi);
  return c;
}

double lemma4_c4(const LqrSystemd& sys, const Matrix& K) {
  const Quantities q = quantities(sys, K);
  const double d = static_cast<double>(sys.state_dim());
  const double rk = (sys.R * K).norm();
  const double bf = (sys.B.transpose() * closed_loop(sys, K)).norm();
  return (q.J * d / q.smin_q) * (rk + d * bf * q.J * d / q.smin_psi);
}

double lemma4_gradient_bound(const LqrSystemd& sys, const Matrix& K,
                             double eta) {
  const HessianConstants c = lemma3_constants(sys, K);
  return (1.0 + eta * (2.0 * c.c1 + 4.0 * c.c2)) * 2.0 * lemma4_c4(sys, K);
}

double ensemble_gradient_bound(std::span<const LqrSystemd> systems,
                               const Matrix& K, double eta) {
  double bound = 0.0;
  for (const auto& s : systems) {
    bound = std::max(bound, lemma4_gradient_bound(s, K, eta));
  }
  return bound;
}

double lemma2_safe_radius(const LqrSystemd& sys, const Matrix& K) {
  const Quantities q = quantities(sys, K);
  const double arm =
      q.smin_q * q.smin_psi / (4.0 * q.J * q.norm_b * (q.norm_f + 1.0));
  return std::min(arm, q.norm_k);
}

BoundReport check_hessian_bound(const LqrSystemd& sys, const Matrix& K,
                                double eta) {
  BoundReport r;
  const HessianConstants c = lemma3_constants(sys, K);
  r.c1 = c.c1;
  r.c2 = c.c2;
  r.c3 = c.c3;
  r.c4 = lemma4_c4(sys, K);
  r.hessian_bound = 2.0 * c.c1 + 4.0 * c.c2;
  r.grad_bound = (1.0 + eta * r.hessian_bound) * 2.0 * r.c4;
  r.safe_radius = lemma2_safe_radius(sys, K);
  r.measured_hessian_norm = spectral_norm(finite_difference_hessian(sys, K));
  const double w = 1.0;
  r.measured_grad_norm =
      exact_meta_gradient(std::span(&sys, 1), std::span(&w, 1), K, eta).norm();
  return r;
}

StabilityProbe probe_safe_radius(const LqrSystemd& sys, const Matrix& K,
                                 std::size_t trials, std::uint64_t seed) {
  StabilityProbe p;
  p.radius = lemma2_safe_radius(sys, K);
  const SeedStream root(seed);
  for (std::size_t t = 0; t < trials; ++t) {
    auto engine = root.child(t).engine();
    Matrix G = gaussian_matrix(K.rows(), K.cols(), engine);
    const double s = spectral_norm(G);
    if (s > 0.0) G *= p.radius / s;
    ++p.trials;
    if (!is_stable(sys, Matrix(K + G))) ++p.failures;
  }
  return p;
}

LipschitzSurrogate empirical_lipschitz(std::span<const LqrSystemd> systems,
                                       std::span<const double> weights,
                                       const Matrix& K, double eta,
                                       std::size_t samples,
                                       std::uint64_t seed) {
  LipschitzSurrogate out;
  out.radius = std::numeric_limits<double>::infinity();
  for (const auto& s : systems) {
    out.radius = std::min(out.radius, lemma2_safe_radius(s, K));
  }
  if (!(out.radius > 0.0)) {
    out.radius = 0.0;
    return out;
  }
  const Matrix g0 = exact_meta_gradient(systems, weights, K, eta);
  const SeedStream root(seed);
  boost::random::uniform_01<double> unit;
  for (std::size_t t = 0; t < samples; ++t) {
    auto engine = root.child(t).engine();
    const Matrix G = gaussian_matrix(K.rows(), K.cols(), engine);
    const double scale = out.radius * (0.5 + 0.5 * unit(engine));
    for (int reading = 0; reading < 2; ++reading) {
      const double n = reading == 0 ? spectral_norm(G) : G.norm();
      if (!(n > 0.0)) continue;
      const Matrix delta = G * (scale / n);
      try {
        const Matrix g1 = exact_meta_gradient(systems, weights, K + delta, eta);
        const double ratio = (g1 - g0).norm() / delta.norm();
        double& slot = reading == 0 ? out.spectral_ball : out.frobenius_ball;
        slot = std::max(slot, ratio);
      } catch (const Error&) {
        // Left the stable set or the stencil failed; not a Lipschitz sample.
      }
    }
    ++out.samples;
  }
  return out;
}

std::optional<std::pair<double, double>> scalar_stable_interval(
    const LqrSystemd& sys) {
  if (sys.state_dim() != 1 || sys.input_dim() != 1) {
    throw DimensionError("scalar_stable_interval needs d = k = 1");
  }
  const double a = sys.A(0, 0);
  const double b = sys.B(0, 0);
  constexpr double inf = std::numeric_limits<double>::infinity();
  if (b == 0.0) {
    if (std::abs(a) < 1.0) return std::pair{-inf, inf};
    return std::nullopt;
  }
  const double lo = (a - 1.0) / b;
  const double hi = (a + 1.0) / b;
  // + 0.0 turns a -0 end into 0
  return std::pair{std::min(lo, hi) + 0.0, std::max(lo, hi) + 0.0};
}

LearnabilityVerdict check_learnability(std::span<const LqrSystemd> systems,
                                       std::size_t max_trials,
                                       std::uint64_t seed) {
  LearnabilityVerdict v;
  if (systems.empty()) {
    v.note = "empty collection";
    return v;
  }
  const Index k = systems.front().input_dim();
  const Index d = systems.front().state_dim();

  std::vector<Matrix> seeds;
  std::optional<Matrix> midpoint;
  bool scalar = (d == 1 && k == 1);
  if (scalar) {
    double lo = -std::numeric_limits<double>::infinity();
    double hi = std::numeric_limits<double>::infinity();
    bool empty = false;
    for (const auto& s : systems) {
      const auto iv = scalar_stable_interval(s);
      if (!iv) {
        empty = true;
        break;
      }
      lo = std::max(lo, iv->first);
      hi = std::min(hi, iv->second);
    }
    if (empty || !(lo < hi)) {
      v.certified_empty = true;
      std::ostringstream os;
      os << "scalar stable intervals have empty intersection";
      if (!empty) os << " (lower " << lo << " >= upper " << hi << ")";
      v.note = os.str();
    } else {
      v.scalar_intersection = std::pair{lo, hi};
      if (std::isfinite(lo) && std::isfinite(hi)) {
        midpoint = Matrix::Constant(1, 1, 0.5 * (lo + hi));
      }
    }
  }

  std::vector<Matrix> optimal;
  for (const auto& s : systems) {
    try {
      optimal.push_back(solve_optimal_gain(s));
    } catch (const Error&) {
    }
  }
  seeds.insert(seeds.end(), optimal.begin(), optimal.end());
  double spread = 1.0;
  if (!optimal.empty()) {
    Matrix avg = Matrix::Zero(k, d);
    for (const auto& K : optimal) {
      avg += K;
      spread = std::max(spread, K.norm());
    }
    seeds.push_back(avg / static_cast<double>(optimal.size()));
  }
  if (midpoint) seeds.push_back(*midpoint);
  seeds.push_back(Matrix::Zero(k, d));

  auto stabilizes_all = [&](const Matrix& K) {
    for (const auto& s : systems) {
      if (!is_stable(s, K)) return false;
    }
    return true;
  };

  const SeedStream root(seed);
  boost::random::uniform_01<double> unit;
  for (std::size_t t = 0; t < max_trials; ++t) {
    Matrix candidate;
    if (t < seeds.size()) {
      candidate = seeds[t];
    } else {
      auto engine = root.child(t).engine();
      const Matrix& center = seeds[t % seeds.size()];
      const double scale = spread * unit(engine);
      candidate = center + scale * gaussian_matrix(k, d, engine);
    }
    v.trials = t + 1;
    if (stabilizes_all(candidate)) {
      v.found = true;
      v.K = candidate;
      return v;
    }
  }
  if (v.note.empty()) {
    v.note = "no common stabilizing gain found (heuristic search)";
  }
  return v;
}

}  // namespace metalqr
