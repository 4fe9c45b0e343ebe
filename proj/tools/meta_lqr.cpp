// meta-lqr: generate task collections, train meta-policies, audit the
// analysis bounds and merge learning curves for plotting.
//
// Exit codes:
//   0  success
//   2  usage error
//   3  no common stabilizing gain (learnability NOT_FOUND)
//   4  instability halt
//   5  numeric failure
//   6  input file error (parse, integrity, I/O)
//   7  validation found problems

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "metalqr/bounds.hpp"
#include "metalqr/curve_io.hpp"
#include "metalqr/ensemble.hpp"
#include "metalqr/meta.hpp"
#include "metalqr/rollout.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace metalqr;

namespace {

constexpr const char* kVersion = "1.0.0";

enum Exit : int {
  kOk = 0,
  kUsage = 2,
  kNotLearnable = 3,
  kInstability = 4,
  kNumeric = 5,
  kInput = 6,
  kInvalid = 7,
};

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

json to_json(const Range& r) { return json::array({r.low, r.high}); }

json to_json(const EnsembleSpec& s) {
  return {{"d", s.d},
          {"k", s.k},
          {"n_systems", s.n_systems},
          {"seed", s.seed},
          {"perturb_std", s.perturb_std},
          {"spectral_target", s.spectral_target},
          {"pd_floor", s.pd_floor},
          {"range_A", to_json(s.range_A)},
          {"range_B", to_json(s.range_B)},
          {"range_Q", to_json(s.range_Q)},
          {"range_R", to_json(s.range_R)},
          {"range_Psi", to_json(s.range_Psi)},
          {"perturb",
           {{"A", s.perturb.A},
            {"B", s.perturb.B},
            {"Q", s.perturb.Q},
            {"R", s.perturb.R},
            {"Psi", s.perturb.Psi}}}};
}

json matrix_json(const Matrix& m) {
  json rows = json::array();
  for (Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(row);
  }
  return rows;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

json base_manifest(const std::string& subcommand, int argc, char** argv) {
  json args = json::array();
  for (int i = 1; i < argc; ++i) args.push_back(argv[i]);
  return {{"tool", "meta-lqr"},
          {"artifact_version", kVersion},
          {"subcommand", subcommand},
          {"args", args}};
}

// ---- gen ----

struct GenOptions {
  EnsembleSpec spec;
  double range_low = -1.0;
  double range_high = 1.0;
  std::string perturb = "A,B,Q,R,Psi";
  std::string out;
  std::string manifest;
};

PerturbMask parse_mask(const std::string& list) {
  PerturbMask m{false, false, false, false, false};
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item == "A") m.A = true;
    else if (item == "B") m.B = true;
    else if (item == "Q") m.Q = true;
    else if (item == "R") m.R = true;
    else if (item == "Psi") m.Psi = true;
    else if (item == "none" || item.empty()) continue;
    else throw UsageError("unknown matrix '" + item + "' in --perturb");
  }
  return m;
}

int run_gen(GenOptions opt, int argc, char** argv) {
  const Range r{opt.range_low, opt.range_high};
  opt.spec.range_A = opt.spec.range_B = opt.spec.range_Q = opt.spec.range_R =
      opt.spec.range_Psi = r;
  opt.spec.perturb = parse_mask(opt.perturb);
  try {
    opt.spec.check();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const Ensemble e = generate(opt.spec);
  save_ensemble(opt.out, e);
  json m = base_manifest("gen", argc, argv);
  m["spec"] = to_json(opt.spec);
  m["ensemble_hash"] = format_hash(e.hash);
  m["outputs"] = {{"ensemble", opt.out}};
  write_json(opt.manifest.empty() ? opt.out + ".manifest.json" : opt.manifest, m);
  std::cout << "wrote " << opt.out << " (" << e.size() << " systems, hash "
            << format_hash(e.hash) << ")\n";
  return kOk;
}

// ---- train ----

struct TrainOptions {
  std::string ensemble;
  MetaConfig cfg;
  bool exact = false;
  bool oracle = false;
  bool no_share = false;
  std::string init = "zero";
  std::string gain;
  std::string out;
  std::string manifest;
  std::string final_gain;
  std::string dump_trajectory;
  std::string on_instability = "halt";
  double time_budget = 600.0;
  bool wall_time = false;
};

LoadedEnsemble load_checked(const std::string& path) {
  LoadedEnsemble loaded = load_ensemble(path);
  for (const auto& note : loaded.notes) std::cerr << "note: " << note << '\n';
  return loaded;
}

int run_train(TrainOptions opt, int argc, char** argv) {
  const LoadedEnsemble loaded = load_checked(opt.ensemble);
  const Ensemble& e = loaded.ensemble;
  const Index d = e.systems.front().state_dim();
  const Index k = e.systems.front().input_dim();

  Matrix K0;
  if (opt.init == "file") {
    if (opt.gain.empty()) throw UsageError("--init file requires --gain");
    K0 = load_gain(opt.gain);
    if (K0.rows() != k || K0.cols() != d) {
      throw UsageError("gain file has wrong shape");
    }
  } else if (opt.init == "zero") {
    K0 = Matrix::Zero(k, d);
  } else if (opt.init == "auto") {
    const LearnabilityVerdict v = check_learnability(e.systems);
    if (!v.found) {
      std::cerr << "learnability: NOT_FOUND after " << v.trials
                << " trials: " << v.note << '\n';
      return kNotLearnable;
    }
    K0 = v.K;
  } else {
    throw UsageError("--init must be zero, auto or file");
  }
  for (std::size_t i = 0; i < e.size(); ++i) {
    if (!is_stable(e.systems[i], K0)) {
      std::cerr << "initial gain does not stabilize system " << i
                << "; try --init auto\n";
      return kNotLearnable;
    }
  }

  MetaConfig& cfg = opt.cfg;
  cfg.source = opt.oracle ? CostSource::ExactOracle : CostSource::Rollout;
  cfg.share_meta_perturbations = !opt.no_share;
  cfg.wall_clock_budget = opt.time_budget;
  if (opt.on_instability == "halt") {
    cfg.on_instability = InstabilityPolicy::Halt;
  } else if (opt.on_instability == "backtrack") {
    cfg.on_instability = InstabilityPolicy::BacktrackOnce;
  } else {
    throw UsageError("--on-instability must be halt or backtrack");
  }
  if (cfg.batch_size > e.size()) throw UsageError("--batch exceeds ensemble size");

  LearningCurve curve;
  int code = kOk;
  if (opt.exact) {
    try {
      curve = run_exact_descent(e.systems, e.weights, K0,
                                {cfg.alpha, cfg.eta, cfg.max_iters, cfg.epsilon});
    } catch (const InstabilityError& err) {
      std::cerr << "instability halt: " << err.what() << '\n';
      return kInstability;
    }
  } else {
    curve = run_maml(e.systems, e.weights, K0, cfg);
    if (curve.stop == StopReason::InstabilityHalt) {
      std::cerr << "instability halt: " << curve.halt_message << '\n';
      code = kInstability;
    }
  }

  {
    std::ofstream os(opt.out);
    if (!os) throw std::runtime_error("cannot write " + opt.out);
    write_curve_csv(os, curve, e.size(), opt.wall_time);
  }
  if (!opt.final_gain.empty()) save_gain(opt.final_gain, curve.final_gain);
  if (!opt.dump_trajectory.empty()) {
    RolloutConfig rc;
    rc.horizon = cfg.horizon;
    rc.seed = cfg.root_seed;
    std::ofstream os(opt.dump_trajectory);
    write_trajectory_csv(os, simulate(e.systems.front(), curve.final_gain, rc));
  }

  json m = base_manifest("train", argc, argv);
  m["config"] = {{"D", cfg.D},
                 {"M", cfg.M},
                 {"eta", cfg.eta},
                 {"alpha", cfg.alpha},
                 {"r", cfg.radius},
                 {"ell", cfg.horizon},
                 {"epsilon", cfg.epsilon},
                 {"max_iters", cfg.max_iters},
                 {"seed", cfg.root_seed},
                 {"batch", cfg.batch_size},
                 {"mode", opt.exact ? "exact" : "maml"},
                 {"cost_source", opt.oracle ? "oracle" : "rollout"},
                 {"share_meta_perturbations", cfg.share_meta_perturbations},
                 {"on_instability", opt.on_instability},
                 {"time_budget_seconds", opt.time_budget},
                 {"init", opt.init}};
  m["ensemble"] = {{"path", opt.ensemble}, {"hash", format_hash(e.hash)}};
  if (e.spec) m["ensemble"]["spec"] = to_json(*e.spec);
  m["initial_gain"] = matrix_json(K0);
  m["result"] = {{"stop_reason", to_string(curve.stop)},
                 {"iterations", curve.iterations},
                 {"final_alpha", curve.final_alpha},
                 {"final_gain", matrix_json(curve.final_gain)}};
  m["outputs"] = {{"curve", opt.out}};
  if (!opt.final_gain.empty()) m["outputs"]["final_gain"] = opt.final_gain;
  write_json(opt.manifest.empty() ? opt.out + ".manifest.json" : opt.manifest, m);

  std::cerr << "stop: " << to_string(curve.stop) << " after " << curve.iterations
            << " iterations\n";
  return code;
}

// ---- audit ----

struct AuditOptions {
  std::string ensemble;
  std::string gain;
  double eta = 1e-5;
  std::size_t probe_trials = 100;
  std::size_t lipschitz_samples = 20;
  std::uint64_t seed = 0;
  std::string out;
};

int run_audit(const AuditOptions& opt) {
  const LoadedEnsemble loaded = load_checked(opt.ensemble);
  const Ensemble& e = loaded.ensemble;
  const LearnabilityVerdict verdict = check_learnability(e.systems, 1000, opt.seed);
  const std::string verdict_text = verdict.found ? "FOUND" : "NOT_FOUND";

  Matrix K;
  if (!opt.gain.empty()) {
    K = load_gain(opt.gain);
    for (std::size_t i = 0; i < e.size(); ++i) {
      if (K.rows() != e.systems[i].input_dim() ||
          K.cols() != e.systems[i].state_dim() || !is_stable(e.systems[i], K)) {
        std::cerr << "audit: gain does not stabilize system " << i
                  << "; learnability " << verdict_text << '\n';
        return kInstability;
      }
    }
  } else if (verdict.found) {
    K = verdict.K;
  } else {
    std::cerr << "audit: no common stabilizing gain; learnability "
              << verdict_text;
    if (verdict.certified_empty) std::cerr << " (certified: " << verdict.note << ")";
    std::cerr << '\n';
    return kNotLearnable;
  }

  std::ofstream file;
  if (!opt.out.empty()) {
    file.open(opt.out);
    if (!file) throw std::runtime_error("cannot write " + opt.out);
  }
  std::ostream& os = opt.out.empty() ? std::cout : file;
  os << "# meta-lqr audit v1 learnability=" << verdict_text << '\n';
  os << "system,J,c1,c2,c3,c4,hessian_bound,measured_hessian_norm,hessian_ok,"
        "grad_bound,measured_grad_norm,grad_ok,safe_radius,safe_radius_failures\n";
  std::size_t violations = 0;
  for (std::size_t i = 0; i < e.size(); ++i) {
    const auto& s = e.systems[i];
    const BoundReport r = check_hessian_bound(s, K, opt.eta);
    const StabilityProbe p = probe_safe_radius(s, K, opt.probe_trials, opt.seed + i);
    violations += !r.hessian_ok() + !r.grad_ok() + (p.failures > 0);
    os << i << ',' << format_double(exact_cost(s, K)) << ','
       << format_double(r.c1) << ',' << format_double(r.c2) << ','
       << format_double(r.c3) << ',' << format_double(r.c4) << ','
       << format_double(r.hessian_bound) << ','
       << format_double(r.measured_hessian_norm) << ',' << r.hessian_ok()
       << ',' << format_double(r.grad_bound) << ','
       << format_double(r.measured_grad_norm) << ',' << r.grad_ok() << ','
       << format_double(r.safe_radius) << ',' << p.failures << '\n';
  }
  const double bound = ensemble_gradient_bound(e.systems, K, opt.eta);
  const double measured = exact_meta_gradient(e.systems, e.weights, K, opt.eta).norm();
  const LipschitzSurrogate lip =
      empirical_lipschitz(e.systems, e.weights, K, opt.eta, opt.lipschitz_samples, opt.seed);
  const bool ens_ok = measured <= bound * (1.0 + BoundReport::slack) + BoundReport::slack;
  violations += !ens_ok;
  os << "# ensemble grad_bound=" << format_double(bound)
     << " measured_grad_norm=" << format_double(measured) << " grad_ok=" << ens_ok
     << " lipschitz_spectral=" << format_double(lip.spectral_ball)
     << " lipschitz_frobenius=" << format_double(lip.frobenius_ball)
     << " lipschitz_radius=" << format_double(lip.radius) << '\n';
  std::cerr << "audit: " << violations << " bound violations\n";
  return kOk;
}

// ---- plotdata ----

int run_plotdata(const std::vector<std::string>& inputs, const std::string& out) {
  std::vector<PlotInput> runs;
  for (const auto& spec : inputs) {
    std::string label;
    std::string path = spec;
    if (const auto eq = spec.find('='); eq != std::string::npos) {
      label = spec.substr(0, eq);
      path = spec.substr(eq + 1);
    } else {
      label = fs::path(spec).stem().string();
    }
    std::ifstream is(path);
    if (!is) throw ParseError("cannot open " + path);
    try {
      runs.push_back({label, read_curve_csv(is)});
    } catch (const ParseError& e) {
      throw ParseError(path + ": " + e.what());
    }
  }
  std::ofstream file;
  if (!out.empty()) file.open(out);
  write_plot_data(out.empty() ? std::cout : file, runs);
  return kOk;
}

// ---- validate ----

int run_validate(const std::string& path) {
  const LoadedEnsemble loaded = load_ensemble(path);
  for (const auto& note : loaded.notes) std::cout << "note," << note << '\n';
  const ValidationReport r = validate(loaded.ensemble);
  print_report(std::cout, r);
  return r.ok() ? kOk : kInvalid;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Meta-learning for collections of ergodic LQR tasks"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  GenOptions gen;
  auto* gen_cmd = app.add_subcommand("gen", "generate a task collection");
  gen_cmd->add_option("--d", gen.spec.d, "state dimension")->default_val(2);
  gen_cmd->add_option("--k", gen.spec.k, "input dimension")->default_val(2);
  gen_cmd->add_option("--n", gen.spec.n_systems, "number of systems")->default_val(5);
  gen_cmd->add_option("--seed", gen.spec.seed, "generator seed")->default_val(0);
  gen_cmd->add_option("--perturb-std", gen.spec.perturb_std)->default_val(0.25);
  gen_cmd->add_option("--spectral-target", gen.spec.spectral_target)->default_val(0.9);
  gen_cmd->add_option("--pd-floor", gen.spec.pd_floor)->default_val(1e-3);
  gen_cmd->add_option("--low", gen.range_low, "lower bound of base entries")->default_val(-1.0);
  gen_cmd->add_option("--high", gen.range_high, "upper bound of base entries")->default_val(1.0);
  gen_cmd->add_option("--perturb", gen.perturb, "perturbed matrices, e.g. A,B,Q,R,Psi");
  gen_cmd->add_option("--out", gen.out, "ensemble file")->required();
  gen_cmd->add_option("--manifest", gen.manifest, "manifest path (default <out>.manifest.json)");

  TrainOptions train;
  auto* train_cmd = app.add_subcommand("train", "run MAML or exact meta-gradient descent");
  train_cmd->add_option("--ensemble", train.ensemble)->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--alpha", train.cfg.alpha, "outer learning rate")->default_val(1e-3);
  train_cmd->add_option("--eta", train.cfg.eta, "inner learning rate")->default_val(1e-5);
  train_cmd->add_option("--D", train.cfg.D, "meta-perturbations")->default_val(100);
  train_cmd->add_option("--M", train.cfg.M, "inner perturbations")->default_val(100);
  train_cmd->add_option("--r", train.cfg.radius, "smoothing radius")->default_val(0.05);
  train_cmd->add_option("--ell", train.cfg.horizon, "rollout length")->default_val(50);
  train_cmd->add_option("--epsilon", train.cfg.epsilon, "gradient-norm tolerance")->default_val(1e-3);
  train_cmd->add_option("--max-iters", train.cfg.max_iters)->default_val(2000);
  train_cmd->add_option("--seed", train.cfg.root_seed, "root seed")->default_val(0);
  train_cmd->add_option("--batch", train.cfg.batch_size, "systems per batch (0 = all)")->default_val(0);
  train_cmd->add_flag("--exact", train.exact, "exact meta-gradient descent");
  train_cmd->add_flag("--oracle", train.oracle, "exact costs instead of rollouts");
  train_cmd->add_flag("--no-share", train.no_share, "independent U_d per system");
  train_cmd->add_option("--init", train.init, "zero | auto | file")->default_val("zero");
  train_cmd->add_option("--gain", train.gain, "initial gain file for --init file");
  train_cmd->add_option("--out", train.out, "curve CSV")->required();
  train_cmd->add_option("--manifest", train.manifest);
  train_cmd->add_option("--final-gain", train.final_gain, "write the final gain here");
  train_cmd->add_option("--dump-trajectory", train.dump_trajectory,
                        "CSV rollout of the final gain on system 0");
  train_cmd->add_option("--on-instability", train.on_instability, "halt | backtrack")
      ->default_val("halt");
  train_cmd->add_option("--time-budget", train.time_budget, "wall-clock cap in seconds")
      ->default_val(600.0);
  train_cmd->add_flag("--wall-time", train.wall_time, "record wall time in the curve");

  AuditOptions audit;
  auto* audit_cmd = app.add_subcommand("audit", "check bound constants against measurements");
  audit_cmd->add_option("--ensemble", audit.ensemble)->required()->check(CLI::ExistingFile);
  audit_cmd->add_option("--gain", audit.gain, "gain file (default: learnability search)");
  audit_cmd->add_option("--eta", audit.eta)->default_val(1e-5);
  audit_cmd->add_option("--probe-trials", audit.probe_trials)->default_val(100);
  audit_cmd->add_option("--lipschitz-samples", audit.lipschitz_samples)->default_val(20);
  audit_cmd->add_option("--seed", audit.seed)->default_val(0);
  audit_cmd->add_option("--out", audit.out, "CSV output (default stdout)");

  std::vector<std::string> plot_inputs;
  std::string plot_out;
  auto* plot_cmd = app.add_subcommand("plotdata", "merge curve CSVs into long format");
  plot_cmd->add_option("inputs", plot_inputs, "[label=]curve.csv")->required();
  plot_cmd->add_option("--out", plot_out, "output (default stdout)");

  std::string validate_path;
  auto* validate_cmd = app.add_subcommand("validate", "check an ensemble file");
  validate_cmd->add_option("--ensemble", validate_path)->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*gen_cmd) return run_gen(gen, argc, argv);
    if (*train_cmd) return run_train(train, argc, argv);
    if (*audit_cmd) return run_audit(audit);
    if (*plot_cmd) return run_plotdata(plot_inputs, plot_out);
    if (*validate_cmd) return run_validate(validate_path);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const ParseError& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return kInput;
  } catch (const IntegrityError& e) {
    std::cerr << "integrity error: " << e.what() << '\n';
    return kInput;
  } catch (const InstabilityError& e) {
    std::cerr << "instability: " << e.what() << '\n';
    return kInstability;
  } catch (const metalqr::Error& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kInput;
  }
  return kUsage;
}
