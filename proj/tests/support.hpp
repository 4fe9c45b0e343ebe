#pragma once

// Shared instance generator and independent reference computations for the
// tests. Nothing here calls the library's solvers.

#include <Eigen/Dense>

#include <cmath>
#include <random>

#include "metalqr/lqr.hpp"

namespace metalqr::testing {

using LMatrix = Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic>;

inline Matrix gaussian(std::mt19937_64& rng, Index rows, Index cols) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = n(rng);
  return m;
}

inline Matrix random_pd(std::mt19937_64& rng, Index n, double floor = 0.5) {
  const Matrix G = gaussian(rng, n, n);
  return G * G.transpose() / double(n) + floor * Matrix::Identity(n, n);
}

// Spectral radius from ||F^(2^m)||^(1/2^m), renormalized each squaring.
inline long double oracle_rho(LMatrix P) {
  long double s = P.norm();
  if (s == 0) return 0;
  P /= s;
  long double log_c = std::log(s);
  long double pow2 = 1;
  for (int m = 0; m < 40; ++m) {
    P = P * P;
    s = P.norm();
    if (s == 0) return 0;
    P /= s;
    log_c = 2 * log_c + std::log(s);
    pow2 *= 2;
  }
  return std::exp(log_c / pow2);
}

struct Instance {
  LqrSystemd sys;
  Matrix K;
};

// Random (A, B) scaled by 1/sqrt(d), Q, R, Psi = G G'/n + 0.5 I, and a gain
// near the optimal one with closed-loop spectral radius below rho_max.
// The optimal gain is found by plain Riccati iteration in long double.
inline LMatrix oracle_riccati(const LqrSystemd& s);

inline Instance random_instance(std::mt19937_64& rng, Index d, Index k,
                                double spread = 0.3, double rho_max = 0.95) {
  for (;;) {
    Instance in;
    const double scale = 1.0 / std::sqrt(double(d));
    in.sys = make_system<double>(gaussian(rng, d, d) * scale,
                                 gaussian(rng, d, k) * scale, random_pd(rng, d),
                                 random_pd(rng, k), random_pd(rng, d));
    const LMatrix P = oracle_riccati(in.sys);
    if (!P.allFinite()) continue;
    const LMatrix A = in.sys.A.cast<long double>();
    const LMatrix B = in.sys.B.cast<long double>();
    const LMatrix R = in.sys.R.cast<long double>();
    const LMatrix Kstar =
        (R + B.transpose() * P * B).ldlt().solve(B.transpose() * P * A);
    for (int tries = 0; tries < 50; ++tries) {
      Matrix dir = gaussian(rng, k, d);
      dir *= spread / dir.norm();
      const Matrix K = Kstar.cast<double>() + dir;
      const LMatrix F = A - B * K.cast<long double>();
      if (oracle_rho(F) < rho_max) {
        in.K = K;
        return in;
      }
    }
  }
}

// X = W + F X F' summed as a series in long double.
inline LMatrix oracle_lyapunov(const LMatrix& F, const LMatrix& W) {
  LMatrix X = W;
  LMatrix term = W;
  for (int t = 0; t < 200000; ++t) {
    term = F * term * F.transpose();
    X += term;
    if (term.norm() <= 1e-22L * X.norm()) break;
  }
  return X;
}

inline long double oracle_cost(const LqrSystemd& s, const Matrix& K) {
  const LMatrix Kl = K.cast<long double>();
  const LMatrix F = s.A.cast<long double>() - s.B.cast<long double>() * Kl;
  const LMatrix Sigma = oracle_lyapunov(F, s.Psi.cast<long double>());
  const LMatrix M = s.Q.cast<long double>() + Kl.transpose() * s.R.cast<long double>() * Kl;
  return (M * Sigma).trace();
}

// 2 E Sigma with both Lyapunov solves done as long double series.
inline LMatrix oracle_gradient(const LqrSystemd& s, const Matrix& K) {
  const LMatrix Kl = K.cast<long double>();
  const LMatrix A = s.A.cast<long double>();
  const LMatrix B = s.B.cast<long double>();
  const LMatrix R = s.R.cast<long double>();
  const LMatrix F = A - B * Kl;
  const LMatrix Sigma = oracle_lyapunov(F, s.Psi.cast<long double>());
  const LMatrix P =
      oracle_lyapunov(F.transpose(), s.Q.cast<long double>() + Kl.transpose() * R * Kl);
  return 2 * ((R + B.transpose() * P * B) * Kl - B.transpose() * P * A) * Sigma;
}

// Value iteration on the Riccati map, long double, to a fixed point.
inline LMatrix oracle_riccati(const LqrSystemd& s) {
  const LMatrix A = s.A.cast<long double>();
  const LMatrix B = s.B.cast<long double>();
  const LMatrix Q = s.Q.cast<long double>();
  const LMatrix R = s.R.cast<long double>();
  LMatrix P = Q;
  for (int it = 0; it < 2000000; ++it) {
    const LMatrix BtPA = B.transpose() * P * A;
    const LMatrix next = Q + A.transpose() * P * A -
                         BtPA.transpose() * (R + B.transpose() * P * B).ldlt().solve(BtPA);
    const long double change = (next - P).norm();
    P = (next + next.transpose()) / 2;
    if (!P.allFinite() || P.norm() > 1e12L) {
      return LMatrix::Constant(P.rows(), P.cols(), NAN);
    }
    if (change <= 1e-17L * (1 + P.norm())) break;
  }
  return P;
}

inline double oracle_optimal_cost(const LqrSystemd& s) {
  return double((oracle_riccati(s) * s.Psi.cast<long double>()).trace());
}

// Fourth-order central difference of f along every entry of K.
template <typename F>
Matrix five_point_gradient(F&& f, const Matrix& K, double h) {
  Matrix G(K.rows(), K.cols());
  for (Index j = 0; j < K.size(); ++j) {
    auto at = [&](double t) {
      Matrix Kt = K;
      Kt.reshaped()(j) += t;
      return static_cast<long double>(f(Kt));
    };
    const long double v = -at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h);
    G.reshaped()(j) = double(v / (12.0L * h));
  }
  return G;
}

inline double rel_err(const Matrix& a, const Matrix& b) {
  return (a - b).norm() / std::max(b.norm(), 1e-300);
}

}  // namespace metalqr::testing
