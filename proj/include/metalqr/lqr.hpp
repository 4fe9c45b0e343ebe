#pragma once

// Exact, model-known computations for the ergodic LQR problem
//   x_{t+1} = A x_t + B u_t + w_t,  w_t ~ N(0, Psi),  u_t = -K x_t,
// with stage cost x'Qx + u'Ru. Everything here is a pure function of its
// arguments and is templated on the scalar type.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <limits>
#include <sstream>
#include <string>

#include "metalqr/errors.hpp"

namespace metalqr {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Eigen::Index;

/// Solver tolerances shared by the exact routines.
struct Tolerances {
  static constexpr double stability_margin = 1e-9;
  static constexpr double lyapunov = 1e-10;  // relative residual
  static constexpr double optimality = 1e-8;
  static constexpr double riccati_step = 1e-12;
  static constexpr long riccati_max_iter = 100000;
  static constexpr Index kronecker_max_dim = 30;
};

/// One task: dynamics (A, B), stage cost (Q, R), process noise Psi and
/// initial-state covariance Sigma0.
template <typename Scalar = double>
struct LqrSystem {
  MatrixX<Scalar> A;
  MatrixX<Scalar> B;
  MatrixX<Scalar> Q;
  MatrixX<Scalar> R;
  MatrixX<Scalar> Psi;
  MatrixX<Scalar> Sigma0;

  Index state_dim() const { return A.rows(); }
  Index input_dim() const { return B.cols(); }

  bool operator==(const LqrSystem& o) const {
    auto same = [](const MatrixX<Scalar>& x, const MatrixX<Scalar>& y) {
      return x.rows() == y.rows() && x.cols() == y.cols() && x == y;
    };
    return same(A, o.A) && same(B, o.B) && same(Q, o.Q) && same(R, o.R) &&
           same(Psi, o.Psi) && same(Sigma0, o.Sigma0);
  }
};

using LqrSystemd = LqrSystem<double>;
using Matrix = MatrixX<double>;
using Vector = VectorX<double>;

/// Builds a system with Sigma0 defaulted to Psi.
template <typename Scalar>
LqrSystem<Scalar> make_system(MatrixX<Scalar> A, MatrixX<Scalar> B,
                              MatrixX<Scalar> Q, MatrixX<Scalar> R,
                              MatrixX<Scalar> Psi) {
  LqrSystem<Scalar> s{std::move(A), std::move(B), std::move(Q),
                      std::move(R), std::move(Psi), {}};
  s.Sigma0 = s.Psi;
  return s;
}

/// Scalar (d = k = 1) convenience constructor.
inline LqrSystemd scalar_system(double a, double b, double q = 1.0,
                                double r = 1.0, double psi = 1.0) {
  return make_system<double>(Matrix::Constant(1, 1, a),
                             Matrix::Constant(1, 1, b),
                             Matrix::Constant(1, 1, q),
                             Matrix::Constant(1, 1, r),
                             Matrix::Constant(1, 1, psi));
}

namespace detail {

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  return m.allFinite();
}

template <typename Scalar>
void require_shape(const MatrixX<Scalar>& m, Index rows, Index cols,
                   const char* name) {
  if (m.rows() != rows || m.cols() != cols) {
    std::ostringstream os;
    os << name << " is " << m.rows() << "x" << m.cols() << ", expected "
       << rows << "x" << cols;
    throw DimensionError(os.str());
  }
  if (!all_finite(m)) {
    throw DimensionError(std::string(name) + " has non-finite entries");
  }
}

template <typename Scalar>
MatrixX<Scalar> symmetrize(const MatrixX<Scalar>& m) {
  return (m + m.transpose()) / Scalar(2);
}

template <typename Scalar>
Scalar min_eigenvalue(const MatrixX<Scalar>& m) {
  if (m.size() == 0) return Scalar(0);
  Eigen::SelfAdjointEigenSolver<MatrixX<Scalar>> es(symmetrize(m),
                                                    Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff();
}

}  // namespace detail

/// Throws DimensionError unless all matrices are finite and shape-consistent.
template <typename Scalar>
void check_dimensions(const LqrSystem<Scalar>& sys) {
  const Index d = sys.A.rows();
  const Index k = sys.B.cols();
  detail::require_shape(sys.A, d, d, "A");
  detail::require_shape(sys.B, d, k, "B");
  detail::require_shape(sys.Q, d, d, "Q");
  detail::require_shape(sys.R, k, k, "R");
  detail::require_shape(sys.Psi, d, d, "Psi");
  detail::require_shape(sys.Sigma0, d, d, "Sigma0");
}

template <typename Scalar>
void check_gain(const LqrSystem<Scalar>& sys, const MatrixX<Scalar>& K) {
  detail::require_shape(K, sys.input_dim(), sys.state_dim(), "K");
}

/// Full invariant check: shapes plus symmetry and definiteness of the
/// weight and covariance matrices.
template <typename Scalar>
void validate(const LqrSystem<Scalar>& sys) {
  check_dimensions(sys);
  const Scalar sym_tol = Scalar(1e-12);
  auto check = [&](const MatrixX<Scalar>& m, const char* name, bool strict) {
    const Scalar scale = std::max(Scalar(1), m.norm());
    if ((m - m.transpose()).norm() > sym_tol * scale) {
      throw InvariantError(std::string(name) + " is not symmetric");
    }
    const Scalar lo = detail::min_eigenvalue(m);
    if (strict ? !(lo > Scalar(0)) : lo < -sym_tol * scale) {
      throw InvariantError(std::string(name) + (strict
                                                    ? " is not positive definite"
                                                    : " is not positive semidefinite"));
    }
  };
  check(sys.Q, "Q", false);
  check(sys.R, "R", true);
  check(sys.Psi, "Psi", true);
  check(sys.Sigma0, "Sigma0", false);
}

/// Largest eigenvalue modulus of a square matrix.
template <typename Derived>
typename Derived::RealScalar spectral_radius(
    const Eigen::MatrixBase<Derived>& M) {
  using Real = typename Derived::RealScalar;
  if (M.rows() != M.cols()) {
    throw DimensionError("spectral_radius: matrix is not square");
  }
  if (!M.allFinite()) {
    throw DimensionError("spectral_radius: non-finite entries");
  }
  if (M.size() == 0) return Real(0);
  if (M.rows() == 1) return std::abs(M(0, 0));
  using Plain = MatrixX<typename Derived::Scalar>;
  Eigen::EigenSolver<Plain> es(Plain(M), false);
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

/// A - B K.
template <typename Scalar>
MatrixX<Scalar> closed_loop(const LqrSystem<Scalar>& sys,
                            const MatrixX<Scalar>& K) {
  check_gain(sys, K);
  return sys.A - sys.B * K;
}

/// Q + K'RK.
template <typename Scalar>
MatrixX<Scalar> closed_loop_cost(const LqrSystem<Scalar>& sys,
                                 const MatrixX<Scalar>& K) {
  return detail::symmetrize<Scalar>(sys.Q + K.transpose() * sys.R * K);
}

/// True iff rho(A - BK) < 1 - margin.
template <typename Scalar>
bool is_stable(const LqrSystem<Scalar>& sys, const MatrixX<Scalar>& K,
               Scalar margin = Scalar(Tolerances::stability_margin)) {
  check_dimensions(sys);
  return spectral_radius(closed_loop(sys, K)) < Scalar(1) - margin;
}

template <typename Scalar>
void require_stable(const LqrSystem<Scalar>& sys, const MatrixX<Scalar>& K) {
  if (!is_stable(sys, K)) {
    std::ostringstream os;
    os << "gain is not stabilizing (spectral radius "
       << double(spectral_radius(closed_loop(sys, K))) << ")";
    throw InstabilityError(os.str());
  }
}

/// Solves X = W + F X F' for Schur-stable F. Kronecker-vectorized direct
/// solve up to kronecker_max_dim, doubling fixed-point iteration above.
template <typename Scalar>
MatrixX<Scalar> solve_discrete_lyapunov(const MatrixX<Scalar>& F,
                                        const MatrixX<Scalar>& W) {
  const Index d = F.rows();
  if (F.cols() != d || W.rows() != d || W.cols() != d) {
    throw DimensionError("solve_discrete_lyapunov: shape mismatch");
  }
  MatrixX<Scalar> X;
  if (d <= Tolerances::kronecker_max_dim) {
    const Index n = d * d;
    // vec(F X F') = (F kron F) vec(X), column-major vec.
    MatrixX<Scalar> op = MatrixX<Scalar>::Identity(n, n);
    for (Index i = 0; i < d; ++i) {
      for (Index j = 0; j < d; ++j) {
        op.block(i * d, j * d, d, d) -= F(i, j) * F;
      }
    }
    const VectorX<Scalar> rhs = W.reshaped();
    const VectorX<Scalar> sol = op.partialPivLu().solve(rhs);
    X = sol.reshaped(d, d);
  } else {
    X = W;
    MatrixX<Scalar> Fk = F;
    for (int it = 0; it < 200; ++it) {
      const MatrixX<Scalar> inc = Fk * X * Fk.transpose();
      X += inc;
      Fk = Fk * Fk;
      if (inc.norm() <= std::numeric_limits<Scalar>::epsilon() * X.norm()) {
        break;
      }
    }
  }
  X = detail::symmetrize<Scalar>(X);
  const Scalar residual = (X - W - F * X * F.transpose()).norm();
  const Scalar scale = std::max(Scalar(1), X.norm());
  if (!X.allFinite() || residual > Scalar(Tolerances::lyapunov) * scale) {
    throw ConvergenceError("Lyapunov solve did not reach tolerance",
                           double(residual / scale));
  }
  return X;
}

/// Stationary state Gramian Sigma_K = Psi + (A-BK) Sigma_K (A-BK)'.
template <typename Scalar>
MatrixX<Scalar> solve_lyapunov_gramian(const LqrSystem<Scalar>& sys,
                                       const MatrixX<Scalar>& K) {
  require_stable(sys, K);
  return solve_discrete_lyapunov<Scalar>(closed_loop(sys, K), sys.Psi);
}

/// Value matrix P_K = Q + K'RK + (A-BK)' P_K (A-BK).
template <typename Scalar>
MatrixX<Scalar> solve_value_matrix(const LqrSystem<Scalar>& sys,
                                   const MatrixX<Scalar>& K) {
  require_stable(sys, K);
  return solve_discrete_lyapunov<Scalar>(closed_loop(sys, K).transpose(),
                                         closed_loop_cost(sys, K));
}

/// P_K, Sigma_K, J(K) and the gradient core E_K for one stable gain.
template <typename Scalar = double>
struct CostCertificate {
  MatrixX<Scalar> P;
  MatrixX<Scalar> SigmaK;
  Scalar J;
  MatrixX<Scalar> E;

  MatrixX<Scalar> gradient() const { return Scalar(2) * E * SigmaK; }
};

template <typename Scalar>
CostCertificate<Scalar> certify(const LqrSystem<Scalar>& sys,
                                const MatrixX<Scalar>& K) {
  require_stable(sys, K);
  const MatrixX<Scalar> F = closed_loop(sys, K);
  CostCertificate<Scalar> c;
  c.P = solve_discrete_lyapunov<Scalar>(F.transpose(), closed_loop_cost(sys, K));
  c.SigmaK = solve_discrete_lyapunov<Scalar>(F, sys.Psi);
  c.J = (c.P * sys.Psi).trace();
  c.E = (sys.R + sys.B.transpose() * c.P * sys.B) * K -
        sys.B.transpose() * c.P * sys.A;
  return c;
}

/// Ergodic cost J(K) = tr(P_K Psi).
template <typename Scalar>
Scalar exact_cost(const LqrSystem<Scalar>& sys, const MatrixX<Scalar>& K) {
  return (solve_value_matrix(sys, K) * sys.Psi).trace();
}

/// Policy gradient 2 E_K Sigma_K.
template <typename Scalar>
MatrixX<Scalar> exact_gradient(const LqrSystem<Scalar>& sys,
                               const MatrixX<Scalar>& K) {
  return certify(sys, K).gradient();
}

template <typename Scalar = double>
struct RiccatiSolution {
  MatrixX<Scalar> K;
  MatrixX<Scalar> P;
  long iterations = 0;
};

/// Optimal gain from value iteration on the Riccati map starting at P = Q,
/// followed by policy-iteration polishing until the gradient stops shrinking.
template <typename Scalar>
RiccatiSolution<Scalar> solve_riccati(const LqrSystem<Scalar>& sys) {
  check_dimensions(sys);
  const auto& A = sys.A;
  const auto& B = sys.B;
  auto gain_from = [&](const MatrixX<Scalar>& P) -> MatrixX<Scalar> {
    const MatrixX<Scalar> S = sys.R + B.transpose() * P * B;
    return S.ldlt().solve(B.transpose() * P * A);
  };

  RiccatiSolution<Scalar> out;
  MatrixX<Scalar> P = sys.Q;
  bool converged = false;
  Scalar step = 0;
  for (long it = 1; it <= Tolerances::riccati_max_iter; ++it) {
    const MatrixX<Scalar> K = gain_from(P);
    MatrixX<Scalar> next = sys.Q + A.transpose() * P * A -
                           A.transpose() * P * B * K;
    next = detail::symmetrize<Scalar>(next);
    if (!next.allFinite()) break;
    step = (next - P).norm();
    P = std::move(next);
    out.iterations = it;
    if (step <= Scalar(Tolerances::riccati_step) *
                    std::max(Scalar(1), P.norm())) {
      converged = true;
      break;
    }
  }
  if (!converged) {
    throw ConvergenceError("Riccati iteration diverged; system not stabilizable",
                           double(step));
  }
  out.K = gain_from(P);
  out.P = P;
  if (!is_stable(sys, out.K)) {
    throw ConvergenceError("Riccati fixed point is not stabilizing",
                           double(step));
  }

  Scalar best = exact_gradient(sys, out.K).norm();
  for (int polish = 0; polish < 8 && best > Scalar(0); ++polish) {
    const MatrixX<Scalar> Pk = solve_value_matrix(sys, out.K);
    const MatrixX<Scalar> Kn = gain_from(Pk);
    if (!is_stable(sys, Kn)) break;
    const Scalar g = exact_gradient(sys, Kn).norm();
    if (!(g < best)) break;
    best = g;
    out.K = Kn;
    out.P = solve_value_matrix(sys, Kn);
  }
  return out;
}

template <typename Scalar>
MatrixX<Scalar> solve_optimal_gain(const LqrSystem<Scalar>& sys) {
  return solve_riccati(sys).K;
}

/// Truncated series sum_{t=0}^{truncation} F^t Sigma (F^t)', F = A - BK.
template <typename Scalar>
MatrixX<Scalar> apply_T_operator(const LqrSystem<Scalar>& sys,
                                 const MatrixX<Scalar>& K,
                                 const MatrixX<Scalar>& Sigma,
                                 std::size_t truncation) {
  require_stable(sys, K);
  const MatrixX<Scalar> F = closed_loop(sys, K);
  MatrixX<Scalar> term = Sigma;
  MatrixX<Scalar> acc = Sigma;
  for (std::size_t t = 1; t <= truncation; ++t) {
    term = F * term * F.transpose();
    acc += term;
  }
  return acc;
}

/// Adjoint series sum_{t=0}^{truncation} (F^t)' S F^t.
template <typename Scalar>
MatrixX<Scalar> apply_T_adjoint(const LqrSystem<Scalar>& sys,
                                const MatrixX<Scalar>& K,
                                const MatrixX<Scalar>& S,
                                std::size_t truncation) {
  require_stable(sys, K);
  const MatrixX<Scalar> F = closed_loop(sys, K);
  MatrixX<Scalar> term = S;
  MatrixX<Scalar> acc = S;
  for (std::size_t t = 1; t <= truncation; ++t) {
    term = F.transpose() * term * F;
    acc += term;
  }
  return acc;
}

/// Number of series terms after which rho^t falls below tol, times ten.
inline std::size_t series_truncation(double rho, double tol = 1e-16) {
  if (rho <= 0.0) return 1;
  return static_cast<std::size_t>(
      std::ceil(10.0 * std::log(tol) / std::log(rho)));
}

/// Central finite-difference Hessian of J, matricized as a kd x kd matrix
/// over column-major vec(K). Default step 1e-5 (1 + ||K||_F).
template <typename Scalar>
MatrixX<Scalar> finite_difference_hessian(const LqrSystem<Scalar>& sys,
                                          const MatrixX<Scalar>& K,
                                          Scalar step = Scalar(-1)) {
  require_stable(sys, K);
  const Index n = K.size();
  const Scalar h = step > Scalar(0) ? step : Scalar(1e-5) * (Scalar(1) + K.norm());
  MatrixX<Scalar> H(n, n);
  for (Index j = 0; j < n; ++j) {
    MatrixX<Scalar> Kp = K, Km = K;
    Kp.reshaped()(j) += h;
    Km.reshaped()(j) -= h;
    if (Kp.reshaped()(j) == K.reshaped()(j)) {
      throw NumericError("finite-difference step underflows against K");
    }
    if (!is_stable(sys, Kp) || !is_stable(sys, Km)) {
      throw NumericError("finite-difference stencil leaves the stable set");
    }
    const MatrixX<Scalar> diff = exact_gradient(sys, Kp) - exact_gradient(sys, Km);
    H.col(j) = diff.reshaped() / (Scalar(2) * h);
  }
  return detail::symmetrize<Scalar>(H);
}

}  // namespace metalqr
