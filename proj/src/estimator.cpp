#include "metalqr/estimator.hpp"

#include <boost/random/normal_distribution.hpp>

#include <optional>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "metalqr/parallel.hpp"
#include "metalqr/rollout.hpp"

namespace metalqr {

Matrix sample_sphere(Index rows, Index cols, double radius,
                     SplitMix64& engine) {
  if (!(radius > 0.0)) {
    throw std::invalid_argument("sample_sphere: radius must be positive");
  }
  boost::random::normal_distribution<double> normal;
  Matrix U(rows, cols);
  double norm = 0.0;
  do {
    for (Index i = 0; i < U.size(); ++i) U.reshaped()(i) = normal(engine);
    norm = U.norm();
  } while (norm == 0.0);
  return U * (radius / norm);
}

namespace {

std::optional<double> sampled_cost(const LqrSystemd& sys,
                                   const NoiseModel& noise, const Matrix& K,
                                   std::size_t horizon, CostSource source,
                                   SeedStream stream) {
  if (source == CostSource::ExactOracle) {
    if (!is_stable(sys, K)) return std::nullopt;
    return exact_cost(sys, K);
  }
  RolloutConfig cfg;
  cfg.horizon = horizon;
  cfg.seed = stream.key();
  cfg.noise_on = true;
  return rollout_cost(sys, noise, K, cfg);
}

void check(const GradientEstimatorConfig& cfg) {
  if (cfg.M < 1) throw std::invalid_argument("M must be >= 1");
  if (!(cfg.radius > 0.0)) throw std::invalid_argument("r must be positive");
  if (cfg.horizon < 1) throw std::invalid_argument("horizon must be >= 1");
}

GradEstimate estimate_gradient_impl(const LqrSystemd& sys,
                                    const NoiseModel& noise, const Matrix& K,
                                    const GradientEstimatorConfig& cfg,
                                    SeedStream stream) {
  const Index k = K.rows();
  const Index d = K.cols();
  Matrix sum = Matrix::Zero(k, d);
  GradEstimate out;
  std::size_t kept = 0;
  for (std::size_t m = 0; m < cfg.M; ++m) {
    auto engine = stream.at({stream_tag::perturbation, m}).engine();
    const Matrix U = sample_sphere(k, d, cfg.radius, engine);
    const auto J = sampled_cost(sys, noise, K + U, cfg.horizon, cfg.source,
                                stream.at({stream_tag::rollout, m}));
    ++out.samples_used;
    if (!J) {
      ++out.divergences;
      continue;
    }
    sum += *J * U;
    ++kept;
  }
  if (kept == 0) {
    throw EstimationError("all perturbed rollouts diverged");
  }
  const double scale =
      static_cast<double>(d * k) / (cfg.radius * cfg.radius);
  out.value = (scale / static_cast<double>(kept)) * sum;
  return out;
}

}  // namespace

GradEstimate estimate_gradient(const LqrSystemd& sys, const Matrix& K,
                               const GradientEstimatorConfig& cfg,
                               SeedStream stream) {
  check(cfg);
  check_dimensions(sys);
  check_gain(sys, K);
  return estimate_gradient_impl(sys, NoiseModel(sys), K, cfg, stream);
}

GradEstimate estimate_meta_gradient(std::span<const BatchEntry> batch,
                                    const Matrix& K,
                                    const MetaEstimatorConfig& cfg,
                                    SeedStream stream) {
  if (batch.empty()) {
    throw std::invalid_argument("estimate_meta_gradient: empty system batch");
  }
  if (cfg.D < 1) throw std::invalid_argument("D must be >= 1");
  if (!(cfg.eta >= 0.0)) throw std::invalid_argument("eta must be >= 0");
  const GradientEstimatorConfig inner{cfg.M, cfg.radius, cfg.horizon,
                                      cfg.source};
  check(inner);

  const Index k = K.rows();
  const Index d = K.cols();
  std::vector<NoiseModel> noise;
  noise.reserve(batch.size());
  for (const auto& e : batch) {
    if (e.system == nullptr) throw std::invalid_argument("null system in batch");
    check_dimensions(*e.system);
    check_gain(*e.system, K);
    noise.emplace_back(*e.system);
  }

  auto perturbation = [&](std::uint64_t stream_id, std::size_t dd) {
    auto engine =
        (cfg.share_meta_perturbations
             ? stream.at({stream_tag::meta_perturbation, dd})
             : stream.at({stream_tag::meta_perturbation, stream_id, dd}))
            .engine();
    return sample_sphere(k, d, cfg.radius, engine);
  };
  std::vector<Matrix> shared;
  if (cfg.share_meta_perturbations) {
    shared.reserve(cfg.D);
    for (std::size_t dd = 0; dd < cfg.D; ++dd) shared.push_back(perturbation(0, dd));
  }

  struct Cell {
    std::optional<double> J;
    std::size_t inner_samples = 0;
    std::size_t inner_divergences = 0;
    Matrix U;
  };
  const std::size_t cells = batch.size() * cfg.D;
  std::vector<Cell> results(cells);

  parallel_for(cells, [&](std::size_t c) {
    const std::size_t e = c / cfg.D;
    const std::size_t dd = c % cfg.D;
    const BatchEntry& entry = batch[e];
    Cell& cell = results[c];
    cell.U = cfg.share_meta_perturbations ? shared[dd]
                                          : perturbation(entry.stream_id, dd);
    Matrix adapted = K + cell.U;
    if (cfg.eta != 0.0) {
      try {
        const GradEstimate g = estimate_gradient_impl(
            *entry.system, noise[e], adapted, inner,
            stream.at({stream_tag::inner, entry.stream_id, dd}));
        cell.inner_samples = g.samples_used;
        cell.inner_divergences = g.divergences;
        adapted -= cfg.eta * g.value;
      } catch (const EstimationError&) {
        cell.inner_samples = cfg.M;
        cell.inner_divergences = cfg.M;
        return;
      }
    }
    cell.J = sampled_cost(
        *entry.system, noise[e], adapted, cfg.horizon, cfg.source,
        stream.at({stream_tag::outer_rollout, entry.stream_id, dd}));
  });

  const double scale = static_cast<double>(d * k) / (cfg.radius * cfg.radius);
  GradEstimate out;
  out.value = Matrix::Zero(k, d);
  double weight_sum = 0.0;
  for (std::size_t e = 0; e < batch.size(); ++e) {
    Matrix sum = Matrix::Zero(k, d);
    std::size_t kept = 0;
    for (std::size_t dd = 0; dd < cfg.D; ++dd) {
      const Cell& cell = results[e * cfg.D + dd];
      out.samples_used += cell.inner_samples + 1;
      out.divergences += cell.inner_divergences + (cell.J ? 0 : 1);
      if (!cell.J) continue;
      sum += *cell.J * cell.U;
      ++kept;
    }
    if (kept == 0) {
      std::ostringstream os;
      os << "all rollouts diverged for system " << batch[e].label;
      throw EstimationError(os.str(), batch[e].label);
    }
    out.value += (batch[e].weight * scale / static_cast<double>(kept)) * sum;
    weight_sum += batch[e].weight;
  }
  if (!(weight_sum > 0.0)) {
    throw std::invalid_argument("batch weights must have positive sum");
  }
  out.value /= weight_sum;
  return out;
}

}  // namespace metalqr
