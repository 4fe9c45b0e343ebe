#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "metalqr/meta.hpp"

namespace metalqr {

/// First line of every curve CSV; bumped whenever the column set changes.
inline constexpr const char* kCurveSchema = "# meta-lqr curve v1";

/// Columns: n, grad_norm_est, L_exact, J_0..J_{N-1}, cost_diff_ratio,
/// seconds. The seconds column holds "nan" unless wall_time is set, which
/// keeps repeated runs byte-identical.
void write_curve_csv(std::ostream& os, const LearningCurve& curve,
                     std::size_t n_systems, bool wall_time = false);

struct CurveTable {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;

  std::size_t column(const std::string& name) const;
};

/// Parses a curve CSV. Throws ParseError on an empty file, a missing or
/// unknown schema line, or ragged rows.
CurveTable read_curve_csv(std::istream& is);

struct PlotInput {
  std::string label;
  CurveTable table;
};

/// Long-format merge: run_label,n,ratio.
void write_plot_data(std::ostream& os, const std::vector<PlotInput>& runs);

}  // namespace metalqr
