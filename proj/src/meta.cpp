#include "metalqr/meta.hpp"

#include <boost/random/discrete_distribution.hpp>

#include <chrono>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace metalqr {

namespace {

void check_weights(std::span<const LqrSystemd> systems,
                   std::span<const double> weights) {
  if (systems.empty()) throw std::invalid_argument("empty system collection");
  if (systems.size() != weights.size()) {
    throw std::invalid_argument("weights and systems differ in length");
  }
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) {
      throw std::invalid_argument("weights must be finite and nonnegative");
    }
  }
}

[[noreturn]] void rethrow_for(const InstabilityError& e, std::size_t system,
                              std::optional<std::size_t> iteration = {}) {
  std::ostringstream os;
  os << "system " << system << ": " << e.what();
  if (iteration) os << " (iteration " << *iteration << ")";
  throw InstabilityError(os.str(), system, iteration);
}

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                         start_)
        .count();
  }

 private:
  std::chrono::steady_clock::time_point start_ =
      std::chrono::steady_clock::now();
};

std::vector<double> optimal_costs(std::span<const LqrSystemd> systems) {
  std::vector<double> out;
  out.reserve(systems.size());
  for (const auto& s : systems) out.push_back(exact_cost(s, solve_optimal_gain(s)));
  return out;
}

std::vector<double> costs_at(std::span<const LqrSystemd> systems,
                             const Matrix& K) {
  std::vector<double> out;
  out.reserve(systems.size());
  for (std::size_t i = 0; i < systems.size(); ++i) {
    try {
      out.push_back(exact_cost(systems[i], K));
    } catch (const InstabilityError& e) {
      rethrow_for(e, i);
    }
  }
  return out;
}

std::optional<std::size_t> first_unstable(std::span<const LqrSystemd> systems,
                                          const Matrix& K) {
  if (!K.allFinite()) return 0;
  for (std::size_t i = 0; i < systems.size(); ++i) {
    if (!is_stable(systems[i], K)) return i;
  }
  return std::nullopt;
}

bool tolerance_stop(double grad_norm, double epsilon) {
  return std::isfinite(epsilon) && grad_norm <= epsilon;
}

}  // namespace

const char* to_string(StopReason r) {
  switch (r) {
    case StopReason::Epsilon:
      return "epsilon";
    case StopReason::MaxIters:
      return "max_iters";
    case StopReason::WallClock:
      return "wall_clock";
    case StopReason::InstabilityHalt:
      return "instability_halt";
  }
  return "unknown";
}

std::vector<double> uniform_weights(std::size_t n) {
  return std::vector<double>(n, 1.0 / static_cast<double>(n));
}

Matrix post_step_gain(const LqrSystemd& sys, const Matrix& K, double eta) {
  if (eta == 0.0) {
    require_stable(sys, K);
    return K;
  }
  return K - eta * exact_gradient(sys, K);
}

double exact_meta_loss(std::span<const LqrSystemd> systems,
                       std::span<const double> weights, const Matrix& K,
                       double eta) {
  check_weights(systems, weights);
  double loss = 0.0;
  for (std::size_t i = 0; i < systems.size(); ++i) {
    try {
      loss += weights[i] * exact_cost(systems[i], post_step_gain(systems[i], K, eta));
    } catch (const InstabilityError& e) {
      rethrow_for(e, i);
    }
  }
  return loss;
}

Matrix exact_meta_gradient(std::span<const LqrSystemd> systems,
                           std::span<const double> weights, const Matrix& K,
                           double eta) {
  check_weights(systems, weights);
  Matrix out = Matrix::Zero(K.rows(), K.cols());
  for (std::size_t i = 0; i < systems.size(); ++i) {
    try {
      const LqrSystemd& sys = systems[i];
      const Matrix adapted = post_step_gain(sys, K, eta);
      const Matrix g = exact_gradient(sys, adapted);
      if (eta == 0.0) {
        out += weights[i] * g;
        continue;
      }
      const Matrix H = finite_difference_hessian(sys, K);
      const Vector v = g.reshaped() - eta * (H * g.reshaped());
      out += weights[i] * v.reshaped(K.rows(), K.cols());
    } catch (const InstabilityError& e) {
      rethrow_for(e, i);
    }
  }
  return out;
}

double cost_difference_ratio(std::span<const double> costs,
                             std::span<const double> optimal_costs) {
  if (costs.size() != optimal_costs.size() || costs.empty()) {
    throw std::invalid_argument("cost_difference_ratio: length mismatch");
  }
  double gap = 0.0;
  double base = 0.0;
  for (std::size_t i = 0; i < costs.size(); ++i) {
    gap += costs[i] - optimal_costs[i];
    base += optimal_costs[i];
  }
  return gap / base;
}

LearningCurve run_exact_descent(std::span<const LqrSystemd> systems,
                                std::span<const double> weights,
                                const Matrix& K0,
                                const ExactDescentConfig& cfg) {
  check_weights(systems, weights);
  if (!(cfg.alpha > 0.0)) throw std::invalid_argument("alpha must be positive");
  if (const auto bad = first_unstable(systems, K0)) {
    throw InstabilityError("initial gain is not stabilizing for system " +
                               std::to_string(*bad),
                           *bad, 0);
  }
  Stopwatch clock;
  LearningCurve curve;
  curve.optimal_costs = optimal_costs(systems);
  curve.final_alpha = cfg.alpha;
  Matrix K = K0;
  for (std::size_t n = 0;; ++n) {
    if (n == cfg.max_iters) {
      curve.stop = StopReason::MaxIters;
      break;
    }
    Matrix g;
    CurveRecord rec;
    try {
      g = exact_meta_gradient(systems, weights, K, cfg.eta);
      rec.loss = exact_meta_loss(systems, weights, K, cfg.eta);
    } catch (const InstabilityError& e) {
      throw InstabilityError(std::string(e.what()) + " at iteration " +
                                 std::to_string(n),
                             e.system(), n);
    }
    rec.n = n;
    rec.K = K;
    rec.grad_norm = g.norm();
    rec.costs = costs_at(systems, K);
    rec.ratio = cost_difference_ratio(rec.costs, curve.optimal_costs);
    rec.seconds = clock.seconds();
    curve.records.push_back(std::move(rec));
    if (tolerance_stop(curve.records.back().grad_norm, cfg.epsilon)) {
      curve.stop = StopReason::Epsilon;
      break;
    }
    Matrix next = K - cfg.alpha * g;
    if (const auto bad = first_unstable(systems, next)) {
      std::ostringstream os;
      os << "iterate " << n + 1 << " left the stable set of system " << *bad
         << "; step size too large";
      throw InstabilityError(os.str(), *bad, n + 1);
    }
    K = std::move(next);
    ++curve.iterations;
  }
  curve.final_gain = K;
  return curve;
}

LearningCurve run_maml(std::span<const LqrSystemd> systems,
                       std::span<const double> weights, const Matrix& K0,
                       const MetaConfig& cfg) {
  check_weights(systems, weights);
  if (!(cfg.alpha > 0.0)) throw std::invalid_argument("alpha must be positive");
  if (!(cfg.epsilon > 0.0)) throw std::invalid_argument("epsilon must be positive");
  const std::size_t batch_size = cfg.batch_size == 0 ? systems.size() : cfg.batch_size;
  if (batch_size > systems.size()) {
    throw std::invalid_argument("batch size exceeds collection size");
  }
  if (const auto bad = first_unstable(systems, K0)) {
    throw InstabilityError("initial gain is not stabilizing for system " +
                               std::to_string(*bad),
                           *bad, 0);
  }
  const MetaEstimatorConfig est{cfg.D,       cfg.M,       cfg.eta,
                                cfg.radius,  cfg.horizon, cfg.source,
                                cfg.share_meta_perturbations};
  const SeedStream root(cfg.root_seed);
  Stopwatch clock;
  LearningCurve curve;
  curve.optimal_costs = optimal_costs(systems);
  double alpha = cfg.alpha;
  bool backtracked = false;
  Matrix K = K0;

  std::vector<BatchEntry> full;
  for (std::size_t i = 0; i < systems.size(); ++i) {
    full.push_back({&systems[i], weights[i], i, i});
  }
  boost::random::discrete_distribution<std::size_t> pick(weights.begin(),
                                                         weights.end());

  for (std::size_t n = 0;; ++n) {
    if (n == cfg.max_iters) {
      curve.stop = StopReason::MaxIters;
      break;
    }
    if (cfg.wall_clock_budget && clock.seconds() > *cfg.wall_clock_budget) {
      curve.stop = StopReason::WallClock;
      break;
    }
    const SeedStream it = root.at({stream_tag::iteration, n});
    std::vector<BatchEntry> batch;
    if (batch_size == systems.size()) {
      batch = full;
    } else {
      auto engine = it.child(stream_tag::batch).engine();
      for (std::size_t j = 0; j < batch_size; ++j) {
        const std::size_t i = pick(engine);
        batch.push_back({&systems[i], 1.0, j, i});
      }
    }
    const GradEstimate g = estimate_meta_gradient(batch, K, est, it);

    CurveRecord rec;
    rec.n = n;
    rec.K = K;
    rec.grad_norm = g.value.norm();
    rec.loss = std::numeric_limits<double>::quiet_NaN();
    if (cfg.record_loss) {
      try {
        rec.loss = exact_meta_loss(systems, weights, K, cfg.eta);
      } catch (const InstabilityError&) {
      }
    }
    rec.costs = costs_at(systems, K);
    rec.ratio = cost_difference_ratio(rec.costs, curve.optimal_costs);
    rec.seconds = clock.seconds();
    curve.records.push_back(std::move(rec));

    if (tolerance_stop(curve.records.back().grad_norm, cfg.epsilon)) {
      curve.stop = StopReason::Epsilon;
      break;
    }
    Matrix next = K - alpha * g.value;
    auto bad = first_unstable(systems, next);
    if (bad && cfg.on_instability == InstabilityPolicy::BacktrackOnce &&
        !backtracked) {
      backtracked = true;
      alpha /= 2.0;
      next = K - alpha * g.value;
      bad = first_unstable(systems, next);
    }
    if (bad) {
      std::ostringstream os;
      os << "iterate " << n + 1 << " is not stabilizing for system " << *bad;
      curve.stop = StopReason::InstabilityHalt;
      curve.halt_system = *bad;
      curve.halt_message = os.str();
      break;
    }
    K = std::move(next);
    ++curve.iterations;
  }
  curve.final_alpha = alpha;
  curve.final_gain = K;
  return curve;
}

DescentReport check_descent(const LearningCurve& curve,
                            std::span<const LqrSystemd> systems,
                            std::span<const double> weights, double eta,
                            double tolerance) {
  DescentReport report;
  for (const auto& rec : curve.records) {
    report.losses.push_back(exact_meta_loss(systems, weights, rec.K, eta));
    report.grad_norms.push_back(
        exact_meta_gradient(systems, weights, rec.K, eta).norm());
  }
  for (std::size_t n = 1; n < report.losses.size(); ++n) {
    const double inc = report.losses[n] - report.losses[n - 1];
    report.max_increase = std::max(report.max_increase, inc);
    if (inc > tolerance) ++report.violations;
  }
  return report;
}

}  // namespace metalqr
