#include "metalqr/curve_io.hpp"

#include <charconv>
#include <cmath>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

#include "metalqr/ensemble.hpp"

namespace metalqr {

namespace {

std::string cell(double x) {
  if (std::isnan(x)) return "nan";
  return format_double(x);
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

void write_curve_csv(std::ostream& os, const LearningCurve& curve,
                     std::size_t n_systems, bool wall_time) {
  os << kCurveSchema << " systems=" << n_systems << '\n';
  os << "n,grad_norm_est,L_exact";
  for (std::size_t i = 0; i < n_systems; ++i) os << ",J_" << i;
  os << ",cost_diff_ratio,seconds\n";
  for (const auto& rec : curve.records) {
    os << rec.n << ',' << cell(rec.grad_norm) << ',' << cell(rec.loss);
    for (double J : rec.costs) os << ',' << cell(J);
    os << ',' << cell(rec.ratio) << ','
       << (wall_time ? cell(rec.seconds) : std::string("nan")) << '\n';
  }
}

std::size_t CurveTable::column(const std::string& name) const {
  for (std::size_t i = 0; i < columns.size(); ++i) {
    if (columns[i] == name) return i;
  }
  throw ParseError("curve has no column '" + name + "'");
}

CurveTable read_curve_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw ParseError("empty curve file");
  if (line.rfind(kCurveSchema, 0) != 0) {
    throw ParseError("line 1: missing or unknown curve schema line");
  }
  CurveTable t;
  if (!std::getline(is, line)) throw ParseError("line 2: missing column header");
  t.columns = split_csv(line);
  if (t.columns.size() < 5 || t.columns.front() != "n" ||
      t.columns[t.columns.size() - 2] != "cost_diff_ratio") {
    throw ParseError("line 2: column header does not match curve schema");
  }
  std::size_t lineno = 2;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto fields = split_csv(line);
    if (fields.size() != t.columns.size()) {
      throw ParseError("line " + std::to_string(lineno) + ": expected " +
                       std::to_string(t.columns.size()) + " fields");
    }
    std::vector<double> row;
    row.reserve(fields.size());
    for (const auto& f : fields) {
      if (f == "nan") {
        row.push_back(std::numeric_limits<double>::quiet_NaN());
        continue;
      }
      double v = 0.0;
      const char* end = f.data() + f.size();
      auto [ptr, ec] = std::from_chars(f.data(), end, v);
      if (ec != std::errc() || ptr != end) {
        throw ParseError("line " + std::to_string(lineno) + ": bad number '" +
                         f + "'");
      }
      row.push_back(v);
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

void write_plot_data(std::ostream& os, const std::vector<PlotInput>& runs) {
  os << "run_label,n,ratio\n";
  for (const auto& run : runs) {
    const std::size_t n_col = run.table.column("n");
    const std::size_t r_col = run.table.column("cost_diff_ratio");
    for (const auto& row : run.table.rows) {
      os << run.label << ',' << static_cast<long long>(row[n_col]) << ','
         << cell(row[r_col]) << '\n';
    }
  }
}

}  // namespace metalqr
