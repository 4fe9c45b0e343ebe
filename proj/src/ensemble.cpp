#include "metalqr/ensemble.hpp"

#include <boost/random/normal_distribution.hpp>
#include <boost/random/uniform_real_distribution.hpp>

#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "metalqr/seeding.hpp"

namespace metalqr {

namespace {

constexpr const char* kEnsembleMagic = "meta-lqr-ensemble";
constexpr const char* kGainMagic = "meta-lqr-gain";
constexpr int kFormatVersion = 1;

}  // namespace

void EnsembleSpec::check() const {
  if (d < 1 || k < 1) throw std::invalid_argument("d and k must be >= 1");
  if (n_systems < 1) throw std::invalid_argument("n_systems must be >= 1");
  if (!(spectral_target > 0.0 && spectral_target < 1.0)) {
    throw std::invalid_argument("spectral_target must lie in (0, 1)");
  }
  if (!(perturb_std >= 0.0)) throw std::invalid_argument("perturb_std must be >= 0");
  if (!(pd_floor > 0.0)) throw std::invalid_argument("pd_floor must be positive");
  for (const Range* r : {&range_A, &range_B, &range_Q, &range_R, &range_Psi}) {
    if (!(r->low <= r->high)) throw std::invalid_argument("range low exceeds high");
  }
}

Matrix floor_eigenvalues(const Matrix& m, double floor) {
  const Matrix sym = (m + m.transpose()) / 2.0;
  Eigen::SelfAdjointEigenSolver<Matrix> es(sym);
  const Vector lambda = es.eigenvalues().cwiseMax(floor);
  const Matrix out = es.eigenvectors() * lambda.asDiagonal() *
                     es.eigenvectors().transpose();
  return (out + out.transpose()) / 2.0;
}

namespace {

Matrix uniform_matrix(Index rows, Index cols, const Range& range,
                      SplitMix64& engine) {
  boost::random::uniform_real_distribution<double> dist(range.low, range.high);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.reshaped()(i) = range.low == range.high ? range.low : dist(engine);
  return m;
}

Matrix jitter(const Matrix& center, double std, bool enabled,
              SplitMix64& engine) {
  if (!enabled || std == 0.0) return center;
  boost::random::normal_distribution<double> normal(0.0, std);
  Matrix m = center;
  for (Index i = 0; i < m.size(); ++i) m.reshaped()(i) += normal(engine);
  return m;
}

// Only the matrices selected in touch are adjusted; the rest are copies of
// the already adjusted base and stay bit-identical to it.
LqrSystemd adjust(LqrSystemd s, const EnsembleSpec& spec, const PerturbMask& touch) {
  const double rho = spectral_radius(s.A);
  if (touch.A && rho >= spec.spectral_target) s.A *= spec.spectral_target / rho;
  if (touch.Q) s.Q = floor_eigenvalues(s.Q, spec.pd_floor);
  if (touch.R) s.R = floor_eigenvalues(s.R, spec.pd_floor);
  if (touch.Psi) s.Psi = floor_eigenvalues(s.Psi, spec.pd_floor);
  s.Sigma0 = s.Psi;
  return s;
}

}  // namespace

Ensemble make_ensemble(std::vector<LqrSystemd> systems,
                       std::vector<double> weights) {
  Ensemble e;
  if (weights.empty()) {
    weights.assign(systems.size(), 1.0 / static_cast<double>(systems.size()));
  }
  e.systems = std::move(systems);
  e.weights = std::move(weights);
  e.hash = content_hash(serialize_body(e));
  return e;
}

Ensemble generate(const EnsembleSpec& spec) {
  spec.check();
  const auto d = static_cast<Index>(spec.d);
  const auto k = static_cast<Index>(spec.k);
  const SeedStream root(spec.seed);

  auto base_engine = root.child(0).engine();
  LqrSystemd base;
  base.A = uniform_matrix(d, d, spec.range_A, base_engine);
  base.B = uniform_matrix(d, k, spec.range_B, base_engine);
  base.Q = uniform_matrix(d, d, spec.range_Q, base_engine);
  base.R = uniform_matrix(k, k, spec.range_R, base_engine);
  base.Psi = uniform_matrix(d, d, spec.range_Psi, base_engine);
  base = adjust(std::move(base), spec, PerturbMask{});

  std::vector<LqrSystemd> systems;
  systems.reserve(spec.n_systems);
  systems.push_back(base);
  for (std::size_t i = 1; i < spec.n_systems; ++i) {
    auto engine = root.child(i).engine();
    const double s = spec.perturb_std;
    LqrSystemd sys;
    sys.A = jitter(base.A, s, spec.perturb.A, engine);
    sys.B = jitter(base.B, s, spec.perturb.B, engine);
    sys.Q = jitter(base.Q, s, spec.perturb.Q, engine);
    sys.R = jitter(base.R, s, spec.perturb.R, engine);
    sys.Psi = jitter(base.Psi, s, spec.perturb.Psi, engine);
    systems.push_back(adjust(std::move(sys), spec, spec.perturb));
  }
  Ensemble e = make_ensemble(std::move(systems));
  e.spec = spec;
  e.hash = content_hash(serialize_body(e));
  return e;
}

bool ValidationReport::ok() const {
  if (!issues.empty()) return false;
  for (const auto& s : systems) {
    if (!s.issues.empty()) return false;
  }
  return true;
}

ValidationReport validate(const Ensemble& e, std::size_t learnability_trials) {
  ValidationReport r;
  if (e.systems.empty()) {
    r.issues.push_back("ensemble has no systems");
    return r;
  }
  if (e.weights.size() != e.systems.size()) {
    r.issues.push_back("weights length differs from system count");
  } else {
    double sum = 0.0;
    for (double w : e.weights) {
      if (!(w >= 0.0)) r.issues.push_back("negative or non-finite weight");
      sum += w;
    }
    if (std::abs(sum - 1.0) > 1e-12) {
      r.issues.push_back("weights sum to " + format_double(sum) + ", not 1");
    }
  }
  const Index d = e.systems.front().state_dim();
  const Index k = e.systems.front().input_dim();
  bool shapes_ok = true;
  for (std::size_t i = 0; i < e.systems.size(); ++i) {
    const auto& s = e.systems[i];
    SystemCheck c;
    try {
      check_dimensions(s);
    } catch (const Error& err) {
      c.issues.push_back(err.what());
      r.systems.push_back(std::move(c));
      shapes_ok = false;
      continue;
    }
    if (s.state_dim() != d || s.input_dim() != k) {
      c.issues.push_back("dimensions differ from system 0");
      shapes_ok = false;
    }
    c.rho_A = spectral_radius(s.A);
    c.smin_Q = detail::min_eigenvalue<double>(s.Q);
    c.smin_R = detail::min_eigenvalue<double>(s.R);
    c.smin_Psi = detail::min_eigenvalue<double>(s.Psi);
    if (!(c.rho_A < 1.0)) c.issues.push_back("spectral radius of A is not below 1");
    try {
      validate(s);
    } catch (const Error& err) {
      c.issues.push_back(err.what());
    }
    r.systems.push_back(std::move(c));
  }
  if (shapes_ok) {
    r.learnability = check_learnability(e.systems, learnability_trials);
    if (!r.learnability.found) {
      r.issues.push_back("learnability: NOT_FOUND (" + r.learnability.note + ")");
    }
  }
  return r;
}

void print_report(std::ostream& os, const ValidationReport& r) {
  os << "system,rho_A,smin_Q,smin_R,smin_Psi,issues\n";
  for (std::size_t i = 0; i < r.systems.size(); ++i) {
    const auto& c = r.systems[i];
    os << i << ',' << format_double(c.rho_A) << ',' << format_double(c.smin_Q)
       << ',' << format_double(c.smin_R) << ',' << format_double(c.smin_Psi)
       << ',';
    for (std::size_t j = 0; j < c.issues.size(); ++j) {
      os << (j ? "; " : "") << c.issues[j];
    }
    os << '\n';
  }
  os << "learnability," << (r.learnability.found ? "FOUND" : "NOT_FOUND")
     << ",trials=" << r.learnability.trials;
  if (r.learnability.certified_empty) os << ",certified_empty";
  os << '\n';
  for (const auto& issue : r.issues) os << "issue," << issue << '\n';
  os << "status," << (r.ok() ? "ok" : "failed") << '\n';
}

// ---- text format ----

std::string format_double(double x) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), x);
  if (ec != std::errc()) throw std::runtime_error("format_double failed");
  return std::string(buf, ptr);
}

std::uint64_t content_hash(const std::string& body) {
  // FNV-1a, 64 bit.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : body) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string format_hash(std::uint64_t h) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

namespace {

void write_matrix(std::ostream& os, const char* name, const Matrix& m) {
  os << name << ' ' << m.rows() << ' ' << m.cols() << '\n';
  for (Index i = 0; i < m.rows(); ++i) {
    for (Index j = 0; j < m.cols(); ++j) {
      os << (j ? " " : "") << format_double(m(i, j));
    }
    os << '\n';
  }
}

std::string format_range(const Range& r) {
  return format_double(r.low) + "," + format_double(r.high);
}

std::string format_spec(const EnsembleSpec& s) {
  std::ostringstream os;
  os << "spec d=" << s.d << " k=" << s.k << " n=" << s.n_systems
     << " seed=" << s.seed << " perturb_std=" << format_double(s.perturb_std)
     << " spectral_target=" << format_double(s.spectral_target)
     << " pd_floor=" << format_double(s.pd_floor)
     << " range_A=" << format_range(s.range_A)
     << " range_B=" << format_range(s.range_B)
     << " range_Q=" << format_range(s.range_Q)
     << " range_R=" << format_range(s.range_R)
     << " range_Psi=" << format_range(s.range_Psi) << " perturb="
     << s.perturb.A << s.perturb.B << s.perturb.Q << s.perturb.R
     << s.perturb.Psi;
  return os.str();
}

// Line-oriented reader that keeps the raw text for hashing.
class Reader {
 public:
  explicit Reader(std::istream& is) : is_(is) {}

  bool next(std::string& line) {
    while (std::getline(is_, line)) {
      ++lineno_;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      if (line.rfind("hash ", 0) != 0) raw_ += line + "\n";
      return true;
    }
    return false;
  }

  [[noreturn]] void fail(const std::string& msg) const {
    std::ostringstream os;
    os << "line " << lineno_ << ": " << msg;
    throw ParseError(os.str());
  }

  const std::string& raw() const { return raw_; }

 private:
  std::istream& is_;
  std::string raw_;
  std::size_t lineno_ = 0;
};

std::vector<std::string> split(const std::string& line) {
  std::istringstream ss(line);
  std::vector<std::string> out;
  std::string tok;
  while (ss >> tok) out.push_back(tok);
  return out;
}

template <typename T>
bool parse_number(const std::string& s, T& out) {
  const char* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end;
}

Matrix read_matrix(Reader& r, const std::string& name,
                   const std::string& context) {
  std::string line;
  if (!r.next(line)) r.fail(context + ": missing matrix " + name);
  const auto head = split(line);
  Index rows = 0, cols = 0;
  if (head.size() != 3 || head[0] != name || !parse_number(head[1], rows) ||
      !parse_number(head[2], cols) || rows < 0 || cols < 0) {
    r.fail(context + ": expected '" + name + " <rows> <cols>'");
  }
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    if (!r.next(line)) {
      r.fail(context + ": matrix " + name + " truncated at row " + std::to_string(i));
    }
    const auto vals = split(line);
    if (static_cast<Index>(vals.size()) != cols) {
      r.fail(context + ": matrix " + name + " row " + std::to_string(i) +
             " has " + std::to_string(vals.size()) + " values, expected " +
             std::to_string(cols));
    }
    for (Index j = 0; j < cols; ++j) {
      if (!parse_number(vals[j], m(i, j))) {
        r.fail(context + ": bad number '" + vals[j] + "' in matrix " + name);
      }
    }
  }
  return m;
}

Range parse_range(const std::string& v, const Reader& r) {
  const auto comma = v.find(',');
  Range out;
  if (comma == std::string::npos ||
      !parse_number(v.substr(0, comma), out.low) ||
      !parse_number(v.substr(comma + 1), out.high)) {
    r.fail("bad range '" + v + "'");
  }
  return out;
}

EnsembleSpec parse_spec(const std::vector<std::string>& toks, const Reader& r) {
  EnsembleSpec s;
  for (std::size_t i = 1; i < toks.size(); ++i) {
    const auto eq = toks[i].find('=');
    if (eq == std::string::npos) r.fail("bad spec field '" + toks[i] + "'");
    const std::string key = toks[i].substr(0, eq);
    const std::string val = toks[i].substr(eq + 1);
    bool ok = true;
    if (key == "d") ok = parse_number(val, s.d);
    else if (key == "k") ok = parse_number(val, s.k);
    else if (key == "n") ok = parse_number(val, s.n_systems);
    else if (key == "seed") ok = parse_number(val, s.seed);
    else if (key == "perturb_std") ok = parse_number(val, s.perturb_std);
    else if (key == "spectral_target") ok = parse_number(val, s.spectral_target);
    else if (key == "pd_floor") ok = parse_number(val, s.pd_floor);
    else if (key == "range_A") s.range_A = parse_range(val, r);
    else if (key == "range_B") s.range_B = parse_range(val, r);
    else if (key == "range_Q") s.range_Q = parse_range(val, r);
    else if (key == "range_R") s.range_R = parse_range(val, r);
    else if (key == "range_Psi") s.range_Psi = parse_range(val, r);
    else if (key == "perturb") {
      ok = val.size() == 5 && val.find_first_not_of("01") == std::string::npos;
      if (ok) {
        s.perturb = {val[0] == '1', val[1] == '1', val[2] == '1', val[3] == '1',
                     val[4] == '1'};
      }
    } else {
      r.fail("unknown spec field '" + key + "'");
    }
    if (!ok) r.fail("bad value for spec field '" + key + "'");
  }
  return s;
}

void read_magic(Reader& r, const char* magic) {
  std::string line;
  if (!r.next(line)) throw ParseError("empty file");
  const auto toks = split(line);
  int version = 0;
  if (toks.size() != 2 || toks[0] != magic || !parse_number(toks[1], version)) {
    r.fail(std::string("expected header '") + magic + " <version>'");
  }
  if (version != kFormatVersion) r.fail("unsupported format version");
}

}  // namespace

std::string serialize_body(const Ensemble& e) {
  std::ostringstream os;
  const Index d = e.systems.empty() ? 0 : e.systems.front().state_dim();
  const Index k = e.systems.empty() ? 0 : e.systems.front().input_dim();
  os << kEnsembleMagic << ' ' << kFormatVersion << '\n';
  os << "dims " << d << ' ' << k << '\n';
  os << "count " << e.systems.size() << '\n';
  if (e.spec) os << format_spec(*e.spec) << '\n';
  os << "weights";
  for (double w : e.weights) os << ' ' << format_double(w);
  os << '\n';
  for (std::size_t i = 0; i < e.systems.size(); ++i) {
    const auto& s = e.systems[i];
    os << "system " << i << '\n';
    write_matrix(os, "A", s.A);
    write_matrix(os, "B", s.B);
    write_matrix(os, "Q", s.Q);
    write_matrix(os, "R", s.R);
    write_matrix(os, "Psi", s.Psi);
    write_matrix(os, "Sigma0", s.Sigma0);
  }
  return os.str();
}

void write_ensemble(std::ostream& os, const Ensemble& e) {
  const std::string body = serialize_body(e);
  os << body << "hash " << format_hash(content_hash(body)) << '\n';
}

void save_ensemble(const std::filesystem::path& path, const Ensemble& e) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  write_ensemble(os, e);
  if (!os) throw std::runtime_error("write failed for " + path.string());
}

LoadedEnsemble read_ensemble(std::istream& is) {
  Reader r(is);
  LoadedEnsemble out;
  Ensemble& e = out.ensemble;
  read_magic(r, kEnsembleMagic);

  std::string line;
  Index d = 0, k = 0;
  std::size_t count = 0;
  if (!r.next(line)) r.fail("missing dims line");
  auto toks = split(line);
  if (toks.size() != 3 || toks[0] != "dims" || !parse_number(toks[1], d) ||
      !parse_number(toks[2], k) || d < 1 || k < 1) {
    r.fail("expected 'dims <d> <k>'");
  }
  if (!r.next(line)) r.fail("missing count line");
  toks = split(line);
  if (toks.size() != 2 || toks[0] != "count" || !parse_number(toks[1], count) ||
      count < 1) {
    r.fail("expected 'count <n>'");
  }

  std::optional<std::string> hash_line;
  bool have_weights = false;
  std::size_t next_system = 0;
  while (r.next(line)) {
    toks = split(line);
    if (toks[0] == "spec") {
      e.spec = parse_spec(toks, r);
    } else if (toks[0] == "weights") {
      if (toks.size() != count + 1) r.fail("weights line has wrong length");
      e.weights.resize(count);
      for (std::size_t i = 0; i < count; ++i) {
        if (!parse_number(toks[i + 1], e.weights[i])) r.fail("bad weight");
      }
      have_weights = true;
    } else if (toks[0] == "system") {
      std::size_t idx = 0;
      if (toks.size() != 2 || !parse_number(toks[1], idx) || idx != next_system) {
        r.fail("expected 'system " + std::to_string(next_system) + "'");
      }
      const std::string ctx = "system " + std::to_string(idx);
      LqrSystemd s;
      s.A = read_matrix(r, "A", ctx);
      s.B = read_matrix(r, "B", ctx);
      s.Q = read_matrix(r, "Q", ctx);
      s.R = read_matrix(r, "R", ctx);
      s.Psi = read_matrix(r, "Psi", ctx);
      s.Sigma0 = read_matrix(r, "Sigma0", ctx);
      try {
        check_dimensions(s);
      } catch (const DimensionError& err) {
        r.fail(ctx + ": " + err.what());
      }
      if (s.state_dim() != d || s.input_dim() != k) {
        r.fail(ctx + ": dimensions disagree with header");
      }
      e.systems.push_back(std::move(s));
      ++next_system;
    } else if (toks[0] == "hash") {
      if (toks.size() != 2) r.fail("expected 'hash <hex>'");
      hash_line = toks[1];
      break;
    } else {
      r.fail("unexpected record '" + toks[0] + "'");
    }
  }
  if (e.systems.size() != count) {
    throw ParseError("expected " + std::to_string(count) + " systems, found " +
                     std::to_string(e.systems.size()));
  }
  if (!have_weights) {
    e.weights.assign(count, 1.0 / static_cast<double>(count));
    out.notes.push_back("weights missing; defaulted to uniform");
  }
  const std::uint64_t computed = content_hash(r.raw());
  if (hash_line) {
    if (*hash_line != format_hash(computed)) {
      throw IntegrityError("content hash mismatch: file says " + *hash_line +
                           ", content hashes to " + format_hash(computed));
    }
  } else {
    out.notes.push_back("hash missing; computed from content");
  }
  e.hash = computed;
  return out;
}

LoadedEnsemble load_ensemble(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ParseError("cannot open " + path.string());
  return read_ensemble(is);
}

void write_gain(std::ostream& os, const Matrix& K) {
  os << kGainMagic << ' ' << kFormatVersion << '\n';
  write_matrix(os, "K", K);
}

void save_gain(const std::filesystem::path& path, const Matrix& K) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  write_gain(os, K);
}

Matrix read_gain(std::istream& is) {
  Reader r(is);
  read_magic(r, kGainMagic);
  Matrix K = read_matrix(r, "K", "gain");
  if (!K.allFinite()) r.fail("gain has non-finite entries");
  return K;
}

Matrix load_gain(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ParseError("cannot open " + path.string());
  return read_gain(is);
}

}  // namespace metalqr
