#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "metalqr/bounds.hpp"
#include "metalqr/lqr.hpp"

namespace metalqr {

struct Range {
  double low = -1.0;
  double high = 1.0;
  bool operator==(const Range&) const = default;
};

/// Which matrices receive the entrywise Gaussian perturbation.
struct PerturbMask {
  bool A = true;
  bool B = true;
  bool Q = true;
  bool R = true;
  bool Psi = true;
  bool operator==(const PerturbMask&) const = default;
};

/// Recipe for a collection of similar systems: a base system drawn
/// uniformly in the ranges, the rest drawn Gaussian around it.
struct EnsembleSpec {
  std::size_t d = 2;
  std::size_t k = 2;
  std::size_t n_systems = 5;
  Range range_A;
  Range range_B;
  Range range_Q;
  Range range_R;
  Range range_Psi;
  double perturb_std = 0.25;
  double spectral_target = 0.9;
  double pd_floor = 1e-3;
  PerturbMask perturb;
  std::uint64_t seed = 0;

  bool operator==(const EnsembleSpec&) const = default;

  /// Throws std::invalid_argument on an invalid spec.
  void check() const;
};

struct Ensemble {
  std::vector<LqrSystemd> systems;
  std::vector<double> weights;
  std::optional<EnsembleSpec> spec;
  std::uint64_t hash = 0;

  std::size_t size() const { return systems.size(); }
  bool operator==(const Ensemble&) const = default;
};

/// Deterministic in spec. A is rescaled to spec.spectral_target when its
/// spectral radius reaches it; Q, R, Psi are symmetrized and their
/// eigenvalues floored at pd_floor.
Ensemble generate(const EnsembleSpec& spec);

/// Clips eigenvalues of the symmetric part below floor up to floor.
Matrix floor_eigenvalues(const Matrix& m, double floor);

/// Builds an ensemble from explicit systems, uniform weights unless given,
/// and fills in the content hash.
Ensemble make_ensemble(std::vector<LqrSystemd> systems,
                       std::vector<double> weights = {});

struct SystemCheck {
  double rho_A = 0.0;
  double smin_Q = 0.0;
  double smin_R = 0.0;
  double smin_Psi = 0.0;
  std::vector<std::string> issues;
};

struct ValidationReport {
  std::vector<SystemCheck> systems;
  std::vector<std::string> issues;
  LearnabilityVerdict learnability;

  bool ok() const;
};

ValidationReport validate(const Ensemble& e, std::size_t learnability_trials = 1000);

void print_report(std::ostream& os, const ValidationReport& r);

// ---- text format ----

/// Canonical text without the trailing hash line.
std::string serialize_body(const Ensemble& e);
std::uint64_t content_hash(const std::string& body);
std::string format_hash(std::uint64_t h);

void write_ensemble(std::ostream& os, const Ensemble& e);
void save_ensemble(const std::filesystem::path& path, const Ensemble& e);

struct LoadedEnsemble {
  Ensemble ensemble;
  std::vector<std::string> notes;
};

/// Throws ParseError with line context, IntegrityError on hash mismatch.
LoadedEnsemble read_ensemble(std::istream& is);
LoadedEnsemble load_ensemble(const std::filesystem::path& path);

void write_gain(std::ostream& os, const Matrix& K);
void save_gain(const std::filesystem::path& path, const Matrix& K);
Matrix read_gain(std::istream& is);
Matrix load_gain(const std::filesystem::path& path);

/// Shortest round-trip decimal form.
std::string format_double(double x);

}  // namespace metalqr
