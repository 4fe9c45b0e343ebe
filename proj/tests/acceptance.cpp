// Acceptance gate. Prints one PASS/FAIL line per criterion and exits
// nonzero if any criterion fails. Pass criterion numbers as arguments to run
// a subset.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "metalqr/bounds.hpp"
#include "metalqr/ensemble.hpp"
#include "metalqr/estimator.hpp"
#include "metalqr/meta.hpp"
#include "support.hpp"

using namespace metalqr;
using namespace metalqr::testing;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Timer {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// The shared sweep: dimensions cycle through (d, k) in [1, dmax]^2.
std::vector<Instance> sweep(std::size_t n, Index dmax, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Instance> out;
  for (std::size_t i = 0; i < n; ++i) {
    const Index d = 1 + Index(i % dmax);
    const Index k = 1 + Index((i / dmax) % dmax);
    out.push_back(random_instance(rng, d, k));
  }
  return out;
}

// ---- 1 ----
Outcome gradient_oracle() {
  Timer t;
  const auto instances = sweep(100, 5, 1001);
  double worst = 0.0;
  double worst_ld = 0.0;
  for (const auto& in : instances) {
    const Matrix G = exact_gradient(in.sys, in.K);
    const Matrix fd = five_point_gradient(
        [&](const Matrix& K) { return exact_cost(in.sys, K); }, in.K,
        2.5e-4 * (1.0 + in.K.norm()));
    worst = std::max(worst, rel_err(G, fd));
    worst_ld = std::max(worst_ld, rel_err(G, oracle_gradient(in.sys, in.K).cast<double>()));
  }
  const double secs = t.seconds();
  return {worst <= 1e-5 && secs < 10.0,
          fmt("max relative error vs central differences %.3g over 100 instances (tol 1e-5; "
              "vs long double 2 E Sigma %.3g), %.2f s (limit 10 s)",
              worst, worst_ld, secs)};
}

// ---- 2 ----
Outcome adjointness() {
  const auto instances = sweep(100, 5, 1001);
  double worst = 0.0;
  for (const auto& in : instances) {
    const auto c = certify(in.sys, in.K);
    const double lhs = (c.P * in.sys.Psi).trace();
    const double rhs = (closed_loop_cost(in.sys, in.K) * c.SigmaK).trace();
    worst = std::max(worst, std::abs(lhs - rhs) / std::max(1.0, std::abs(lhs)));
  }
  return {worst <= 1e-8,
          fmt("max |tr(P Psi) - tr((Q+K'RK) Sigma)| / max(1, J) = %.3g (tol 1e-8)", worst)};
}

// ---- 3 ----
Outcome riccati_recovery() {
  std::mt19937_64 rng(1003);
  double worst_gap = 0.0;
  std::size_t worst_iters = 0;
  std::size_t failures = 0;
  const std::size_t count = 27;
  for (std::size_t i = 0; i < count; ++i) {
    const Index d = 1 + Index(i % 3);
    const Index k = 1 + Index((i / 3) % 3);
    const auto in = random_instance(rng, d, k);
    const double Jstar = oracle_optimal_cost(in.sys);
    const Matrix Kstar = solve_optimal_gain(in.sys);
    const double curvature = std::max(finite_difference_hessian(in.sys, in.K).operatorNorm(),
                                      finite_difference_hessian(in.sys, Kstar).operatorNorm());
    const std::vector<LqrSystemd> one{in.sys};
    const auto curve = run_exact_descent(one, uniform_weights(1), in.K,
                                         {0.5 / curvature, 0.0, 10000, 1e-9});
    double gap = std::numeric_limits<double>::infinity();
    std::size_t reached = curve.records.size();
    for (std::size_t n = 0; n < curve.records.size(); ++n) {
      gap = curve.records[n].costs[0] - Jstar;
      if (gap <= 1e-6) {
        reached = n;
        break;
      }
    }
    gap = std::min(gap, exact_cost(in.sys, curve.final_gain) - Jstar);
    if (!(gap <= 1e-6)) ++failures;
    worst_gap = std::max(worst_gap, gap);
    worst_iters = std::max(worst_iters, reached);
  }
  return {failures == 0,
          fmt("%zu/%zu systems reach J - J* <= 1e-6; worst gap %.3g, most iterations %zu "
              "(limit 10000)",
              count - failures, count, worst_gap, worst_iters)};
}

// ---- 4 ----
Outcome estimator_consistency() {
  std::mt19937_64 rng(1004);
  GradientEstimatorConfig cfg;
  cfg.radius = 0.01;
  cfg.M = 100000;
  cfg.source = CostSource::ExactOracle;
  double worst = 0.0;
  double worst_sigma = 0.0;
  const int count = 5;
  for (int i = 0; i < count; ++i) {
    const auto in = random_instance(rng, 1, 1);
    const Matrix g = exact_gradient(in.sys, in.K);
    const Matrix est = estimate_gradient(in.sys, in.K, cfg, SeedStream(4000 + i)).value;
    const double err = rel_err(est, g);
    // One-sample spread of (1/r^2) J(K+U) U with U = +-r is about J / r.
    const double sigma =
        exact_cost(in.sys, in.K) / (cfg.radius * std::sqrt(double(cfg.M))) / g.norm();
    worst = std::max(worst, err);
    worst_sigma = std::max(worst_sigma, sigma);
  }

  // Error slope: RMS error against the smoothed gradient, which for scalar
  // gains is exactly the central difference with step r.
  const auto in = random_instance(rng, 1, 1);
  const double k = in.K(0, 0);
  const double r = cfg.radius;
  const double smoothed =
      (exact_cost(in.sys, Matrix(Matrix::Constant(1, 1, k + r))) -
       exact_cost(in.sys, Matrix(Matrix::Constant(1, 1, k - r)))) / (2 * r);
  const std::vector<std::size_t> Ms{100, 316, 1000, 3162, 10000};
  const int reps = 40;
  std::vector<double> xs, ys;
  for (std::size_t M : Ms) {
    GradientEstimatorConfig c = cfg;
    c.M = M;
    double sq = 0.0;
    for (int rep = 0; rep < reps; ++rep) {
      const double e =
          estimate_gradient(in.sys, in.K, c, SeedStream(90000 + M * 1000 + rep)).value(0, 0) -
          smoothed;
      sq += e * e;
    }
    xs.push_back(std::log(double(M)));
    ys.push_back(0.5 * std::log(sq / reps));
  }
  const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / xs.size();
  const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / ys.size();
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
  }
  const double slope = sxy / sxx;
  const bool slope_ok = slope >= -0.65 && slope <= -0.35;
  return {worst <= 0.05 && slope_ok,
          fmt("max relative error %.3g at M=1e5, r=0.01 over %d scalar instances (tol 0.05; "
              "predicted one-sigma MC error up to %.3g); MC error slope %.3f (range "
              "[-0.65, -0.35])",
              worst, count, worst_sigma, slope)};
}

// ---- 5 ----
struct Collection {
  std::vector<LqrSystemd> systems;
  std::vector<double> weights;
  Matrix K;
};

Collection collection_around(std::mt19937_64& rng, Index d, std::size_t n) {
  for (;;) {
    const auto base = random_instance(rng, d, d, 0.2, 0.85);
    Collection c;
    c.K = base.K;
    bool ok = true;
    for (std::size_t i = 0; i < n && ok; ++i) {
      LqrSystemd s = base.sys;
      if (i > 0) {
        s.A += 0.05 * gaussian(rng, d, d);
        s.B += 0.05 * gaussian(rng, d, d);
      }
      ok = is_stable(s, c.K, 0.05);
      c.systems.push_back(std::move(s));
    }
    if (ok) {
      c.weights = uniform_weights(n);
      return c;
    }
  }
}

Outcome meta_gradient_oracle() {
  std::mt19937_64 rng(1005);
  double worst = 0.0;
  const double eta = 1e-2;
  int tested = 0;
  while (tested < 50) {
    const Index d = tested % 2 == 0 ? 1 : 2;
    const auto c = collection_around(rng, d, 3);
    try {
      exact_meta_loss(c.systems, c.weights, c.K, eta);
    } catch (const InstabilityError&) {
      continue;  // post-step gain leaves the stable set; not a valid instance
    }
    const Matrix G = exact_meta_gradient(c.systems, c.weights, c.K, eta);
    const Matrix fd = five_point_gradient(
        [&](const Matrix& K) { return exact_meta_loss(c.systems, c.weights, K, eta); }, c.K,
        2.5e-4 * (1.0 + c.K.norm()));
    worst = std::max(worst, rel_err(G, fd));
    ++tested;
  }
  return {worst <= 1e-4,
          fmt("max relative error %.3g over 50 three-system collections (25 scalar, 25 "
              "d=k=2, eta=1e-2; tol 1e-4)",
              worst)};
}

// ---- 6 ----
Outcome curvature_bounds() {
  const auto instances = sweep(100, 3, 1006);
  std::size_t hess_bad = 0, grad_bad = 0, scalar_bad = 0;
  double worst_ratio = 0.0, worst_grad_ratio = 0.0;
  for (const auto& in : instances) {
    const BoundReport r = check_hessian_bound(in.sys, in.K, 1e-5);
    if (!r.hessian_ok()) {
      ++hess_bad;
      if (in.K.size() == 1) ++scalar_bad;
    }
    if (!r.grad_ok()) ++grad_bad;
    worst_ratio = std::max(worst_ratio, r.measured_hessian_norm / r.hessian_bound);
    worst_grad_ratio = std::max(worst_grad_ratio, r.measured_grad_norm / r.grad_bound);
  }
  return {hess_bad == 0 && grad_bad == 0,
          fmt("Hessian bound violated on %zu/100 instances (%zu scalar), worst "
              "measured/bound %.4g; gradient bound violated on %zu/100, worst ratio %.4g",
              hess_bad, scalar_bad, worst_ratio, grad_bad, worst_grad_ratio)};
}

// ---- 7 ----
Outcome safe_radius() {
  const auto instances = sweep(100, 3, 1007);
  std::size_t failures = 0, bad_instances = 0;
  double min_radius = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const auto p = probe_safe_radius(instances[i].sys, instances[i].K, 100, 7000 + i);
    failures += p.failures;
    bad_instances += p.failures > 0;
    min_radius = std::min(min_radius, p.radius);
  }
  return {failures == 0,
          fmt("%zu destabilizing perturbations of 10000 on %zu/100 instances (smallest "
              "radius %.3g)",
              failures, bad_instances, min_radius)};
}

// ---- 8 ----
Outcome monotone_descent() {
  EnsembleSpec spec;
  spec.d = 1;
  spec.k = 1;
  spec.n_systems = 5;
  spec.seed = 8;
  const Ensemble e = generate(spec);
  const double eta = 1e-5;
  const Matrix K0 = Matrix::Zero(1, 1);

  double lo = 0.0, hi = 0.0;
  for (const auto& s : e.systems) {
    const double k = solve_optimal_gain(s)(0, 0);
    lo = std::min(lo, k);
    hi = std::max(hi, k);
  }
  // Step size from the largest curvature of L on the interval holding K0 and
  // every task optimum.
  double curvature = 0.0;
  const double h = 1e-4;
  for (int i = 0; i <= 40; ++i) {
    const double k = lo + (hi - lo) * i / 40.0;
    auto L = [&](double x) {
      return exact_meta_loss(e.systems, e.weights, Matrix(Matrix::Constant(1, 1, x)), eta);
    };
    curvature = std::max(curvature, std::abs(L(k + h) - 2 * L(k) + L(k - h)) / (h * h));
  }
  const double alpha = 0.1 / curvature;
  const auto curve = run_exact_descent(e.systems, e.weights, K0, {alpha, eta, 1000000, 1e-4});
  const auto report = check_descent(curve, e.systems, e.weights, eta, 1e-10);
  std::size_t grad_increases = 0;
  for (std::size_t n = 1; n < report.grad_norms.size(); ++n) {
    if (report.grad_norms[n] > report.grad_norms[n - 1] * (1 + 1e-9)) ++grad_increases;
  }
  const double final_grad = report.grad_norms.empty() ? NAN : report.grad_norms.back();
  const bool pass = report.violations == 0 && report.max_increase <= 1e-10 &&
                    curve.stop == StopReason::Epsilon && final_grad <= 1e-4 &&
                    grad_increases == 0;
  return {pass,
          fmt("alpha %.3g, %zu iterations, loss increases %zu (largest %.3g, tol 1e-10), "
              "gradient-norm increases %zu, final ||grad L||_F %.3g (target 1e-4)",
              alpha, curve.iterations, report.violations, report.max_increase, grad_increases,
              final_grad)};
}

// ---- 9 ----
Outcome counterexample() {
  const std::vector<LqrSystemd> pair{scalar_system(3.0, 4.0), scalar_system(1.0, -1.0)};
  const auto i1 = scalar_stable_interval(pair[0]);
  const auto i2 = scalar_stable_interval(pair[1]);
  const bool intervals = i1 && i2 && i1->first == 0.5 && i1->second == 1.0 &&
                         i2->first == -2.0 && i2->second == 0.0;
  const auto v = check_learnability(pair);
  return {intervals && v.certified_empty && !v.found,
          fmt("intervals (%g, %g) and (%g, %g); certified empty: %s; verdict %s after %zu "
              "trials",
              i1 ? i1->first : NAN, i1 ? i1->second : NAN, i2 ? i2->first : NAN,
              i2 ? i2->second : NAN, v.certified_empty ? "yes" : "no",
              v.found ? "FOUND" : "NOT_FOUND", v.trials)};
}

// ---- 10 ----
Outcome learning_curve() {
  Timer t;
  std::vector<double> reductions;
  std::string per_seed;
  MetaConfig cfg;
  cfg.alpha = 1e-3;
  cfg.eta = 1e-5;
  cfg.D = 100;
  cfg.M = 100;
  cfg.radius = 0.05;
  cfg.horizon = 50;
  cfg.max_iters = 1000;
  cfg.epsilon = std::numeric_limits<double>::infinity();
  bool all_ran = true;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    EnsembleSpec spec;
    spec.d = 2;
    spec.k = 2;
    spec.n_systems = 5;
    spec.seed = seed;
    const Ensemble e = generate(spec);
    cfg.root_seed = seed;
    const auto curve = run_maml(e.systems, e.weights, Matrix::Zero(2, 2), cfg);
    all_ran = all_ran && curve.stop == StopReason::MaxIters && curve.iterations == 1000;
    std::vector<double> costs;
    for (const auto& s : e.systems) costs.push_back(exact_cost(s, curve.final_gain));
    const double initial = curve.records.front().ratio;
    const double last = cost_difference_ratio(costs, curve.optimal_costs);
    reductions.push_back(last / initial);
    per_seed += fmt(" %.3f->%.3f", initial, last);
  }
  std::vector<double> sorted = reductions;
  std::sort(sorted.begin(), sorted.end());
  const double median = sorted[2];
  const double main_secs = t.seconds();

  // Large setting: 20 iterations without numeric failure.
  EnsembleSpec big;
  big.d = 20;
  big.k = 10;
  big.n_systems = 5;
  big.seed = 0;
  const Ensemble e = generate(big);
  MetaConfig smoke = cfg;
  smoke.max_iters = 20;
  smoke.root_seed = 0;
  bool smoke_ok = false;
  std::string smoke_note;
  try {
    const Matrix K0 = Matrix::Zero(10, 20);
    const auto curve = run_maml(e.systems, e.weights, K0, smoke);
    smoke_ok = curve.stop == StopReason::MaxIters && curve.final_gain.allFinite();
    const double exact = exact_meta_gradient(e.systems, e.weights, K0, 0.0).norm();
    smoke_note = fmt("%s after %zu of 20 iterations, first estimated ||grad|| %.3g vs exact "
                     "task-gradient average %.3g",
                     to_string(curve.stop), curve.iterations,
                     curve.records.empty() ? NAN : curve.records.front().grad_norm, exact);
  } catch (const std::exception& ex) {
    smoke_note = ex.what();
  }
  return {all_ran && median <= 0.5 && main_secs <= 600.0 && smoke_ok,
          fmt("median final/initial ratio %.3f (limit 0.5), per seed%s; %.0f s for 5x1000 "
              "iterations (limit 600 s); d=20,k=10 smoke: %s",
              median, per_seed.c_str(), main_secs, smoke_note.c_str())};
}

// ---- 11 ----
int run_cli(const std::string& args, const std::string& env) {
  const std::string cmd = env + " " + METALQR_CLI + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

Outcome determinism() {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "meta-lqr-acceptance";
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::vector<std::string> curves;
  int failures = 0;
  const std::vector<std::string> workers{"1", "4", "1"};
  for (std::size_t i = 0; i < workers.size(); ++i) {
    const std::string env = "METALQR_WORKERS=" + workers[i];
    const fs::path ens = dir / ("ens" + std::to_string(i) + ".txt");
    const fs::path out = dir / ("curve" + std::to_string(i) + ".csv");
    failures += run_cli("gen --d 2 --k 2 --n 5 --seed 11 --out " + ens.string(), env) != 0;
    failures += run_cli("train --oracle --D 20 --M 20 --max-iters 20 --seed 11 --ensemble " +
                            ens.string() + " --out " + out.string(),
                        env) != 0;
    curves.push_back(slurp(out));
  }
  const bool same = !curves[0].empty() && curves[0] == curves[1] && curves[1] == curves[2];
  return {failures == 0 && same,
          fmt("3 gen+train --oracle runs with workers 1/4/1: %s (%zu bytes), %d command "
              "failures",
              same ? "byte-identical" : "DIFFERENT", curves[0].size(), failures)};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all{
      {1, "gradient oracle", gradient_oracle},
      {2, "adjointness identity", adjointness},
      {3, "Riccati recovery", riccati_recovery},
      {4, "zeroth-order estimator consistency", estimator_consistency},
      {5, "meta-gradient oracle", meta_gradient_oracle},
      {6, "curvature and gradient bounds", curvature_bounds},
      {7, "safe radius preserves stability", safe_radius},
      {8, "monotone exact descent", monotone_descent},
      {9, "non-learnable scalar pair", counterexample},
      {10, "learning curve halving", learning_curve},
      {11, "determinism", determinism},
  };
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));

  int failed = 0;
  for (const auto& c : all) {
    if (!wanted.empty() && !wanted.count(c.id)) continue;
    Timer t;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << c.id << "] " << c.name << ": "
              << o.detail << fmt(" (%.1f s)", t.seconds()) << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
