#ifndef SPREFINE_IMAGE_HPP
#define SPREFINE_IMAGE_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "sprefine/error.hpp"

namespace sprefine {

/// Row-major single-channel image of doubles. Pixel (row i, col j) has its
/// center at continuous coordinates (x = j, y = i).
struct Image {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Image() = default;
  Image(int r, int c, double fill = 0.0)
      : rows(r), cols(c), data(static_cast<std::size_t>(r) * static_cast<std::size_t>(c), fill) {
    if (r < 0 || c < 0) throw InvalidInput("Image: negative dimensions");
  }
  Image(int r, int c, std::vector<double> values) : rows(r), cols(c), data(std::move(values)) {
    if (data.size() != static_cast<std::size_t>(r) * static_cast<std::size_t>(c))
      throw InvalidInput("Image: data size does not match dimensions");
  }

  double& operator()(int i, int j) { return data[static_cast<std::size_t>(i) * cols + j]; }
  double operator()(int i, int j) const { return data[static_cast<std::size_t>(i) * cols + j]; }

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  bool same_shape(const Image& o) const { return rows == o.rows && cols == o.cols; }
  std::span<double> span() { return data; }
  std::span<const double> span() const { return data; }

  bool operator==(const Image&) const = default;
};

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

inline double max_abs_diff(const Image& a, const Image& b) {
  if (!a.same_shape(b)) throw InvalidInput("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, std::abs(a.data[k] - b.data[k]));
  return m;
}

/// Linear-interpolated quantile of the pixel values, q in [0,1].
inline double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw InvalidInput("quantile: empty input");
  std::sort(values.begin(), values.end());
  const double pos = std::clamp(q, 0.0, 1.0) * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double t = pos - static_cast<double>(lo);
  return values[lo] * (1.0 - t) + values[hi] * t;
}

}  // namespace sprefine

#endif
