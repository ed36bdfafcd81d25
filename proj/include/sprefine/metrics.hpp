#ifndef SPREFINE_METRICS_HPP
#define SPREFINE_METRICS_HPP

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "sprefine/geometry.hpp"

namespace sprefine {

struct MetricConfig {
  int resample = 100;  // N
  bool orientation_invariant = true;
};

struct DtwResult {
  double cost = 0.0;
  std::vector<std::pair<int, int>> path;  // (index in A, index in B), from (0, 0)
};

/// Classic DTW with steps (1,0), (0,1), (1,1) and Euclidean point cost.
/// Ties prefer the diagonal, then the step in A.
inline DtwResult dtw(const Polyline& a, const Polyline& b) {
  if (a.empty() || b.empty()) throw InvalidInput("dtw: empty sequence");
  const std::size_t n = a.size(), m = b.size();
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> acc(n * m, inf);
  auto at = [&](std::size_t i, std::size_t j) -> double& { return acc[i * m + j]; };
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      const double d = std::hypot(a[i].x - b[j].x, a[i].y - b[j].y);
      if (i == 0 && j == 0) {
        at(i, j) = d;
        continue;
      }
      double best = inf;
      if (i > 0 && j > 0) best = at(i - 1, j - 1);
      if (i > 0) best = std::min(best, at(i - 1, j));
      if (j > 0) best = std::min(best, at(i, j - 1));
      at(i, j) = best + d;
    }
  DtwResult r;
  r.cost = at(n - 1, m - 1);
  std::size_t i = n - 1, j = m - 1;
  r.path.emplace_back(static_cast<int>(i), static_cast<int>(j));
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0) {
      const double diag = at(i - 1, j - 1), up = at(i - 1, j), left = at(i, j - 1);
      if (diag <= up && diag <= left) {
        --i, --j;
      } else if (up <= left) {
        --i;
      } else {
        --j;
      }
    } else if (i > 0) {
      --i;
    } else {
      --j;
    }
    r.path.emplace_back(static_cast<int>(i), static_cast<int>(j));
  }
  std::reverse(r.path.begin(), r.path.end());
  return r;
}

/// DTW cost per aligned pair after resampling both curves to N points;
/// minimum over both orientations of B when orientation invariant.
inline double avg_dtw(const Polyline& a, const Polyline& b, const MetricConfig& cfg = {}) {
  if (a.size() < 2 || b.size() < 2) throw InvalidInput("avg_dtw: need at least 2 points per curve");
  if (cfg.resample < 2) throw InvalidInput("avg_dtw: N must be >= 2");
  const auto ra = resample_polyline(a, cfg.resample);
  auto rb = resample_polyline(b, cfg.resample);
  auto score = [&](const Polyline& q) {
    const auto r = dtw(ra, q);
    return r.cost / static_cast<double>(r.path.size());
  };
  double best = score(rb);
  if (cfg.orientation_invariant) {
    std::reverse(rb.begin(), rb.end());
    best = std::min(best, score(rb));
  }
  return best;
}

/// Mean of the smallest ceil(p * n) values (at least one).
inline double top_fraction_mean(std::vector<double> values, double p) {
  if (values.empty()) throw InvalidInput("top_fraction_mean: no values");
  if (!(p > 0.0 && p <= 1.0)) throw InvalidInput("top_fraction_mean: p must lie in (0, 1]");
  std::sort(values.begin(), values.end());
  const auto k = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(p * static_cast<double>(values.size()) - 1e-9)));
  double s = 0.0;
  for (std::size_t i = 0; i < k; ++i) s += values[i];
  return s / static_cast<double>(k);
}

inline constexpr double kReportPercentiles[] = {0.05, 0.10, 0.20, 0.50};

struct SummaryRow {
  std::string group;
  std::size_t count = 0;
  double top = 0.0;                  // mean of the best p-fraction
  std::vector<double> percentiles;   // means of the best 5/10/20/50%
};

inline std::vector<SummaryRow> table_report(const std::map<std::string, std::vector<double>>& groups, double p = 0.5) {
  std::vector<SummaryRow> rows;
  for (const auto& [name, values] : groups) {
    if (values.empty()) throw InvalidInput("table_report: empty group '" + name + "'");
    SummaryRow r{name, values.size(), top_fraction_mean(values, p), {}};
    for (double q : kReportPercentiles) r.percentiles.push_back(top_fraction_mean(values, q));
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace sprefine

#endif
