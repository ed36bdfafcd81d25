#ifndef SPREFINE_GEOMETRY_HPP
#define SPREFINE_GEOMETRY_HPP

// Natural cubic splines over knot chains.
//
// A chain of K knots (x_k, y_k, w_k) is interpolated by three independent
// natural cubic splines sharing the uniform knot parameters
// s_k = k / (K - 1). Every spline value is a linear function of the knot
// values, which is what the renderer exploits: sampling a chain is a fixed
// matrix product (see natural_spline_basis).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "sprefine/error.hpp"

namespace sprefine {

struct Point2 {
  double x = 0.0;
  double y = 0.0;
  bool operator==(const Point2&) const = default;
};

struct Point3 {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  bool operator==(const Point3&) const = default;
};

using Polyline = std::vector<Point2>;

struct Knot {
  double x = 0.0;
  double y = 0.0;
  double w = 1.0;
  bool operator==(const Knot&) const = default;
};

/// Ordered knots of one body's centerline and width profile.
struct KnotChain {
  std::vector<Knot> knots;

  std::size_t size() const { return knots.size(); }
  bool operator==(const KnotChain&) const = default;

  Polyline positions() const {
    Polyline p;
    p.reserve(knots.size());
    for (const auto& k : knots) p.push_back({k.x, k.y});
    return p;
  }
};

inline constexpr int kDefaultQuadratureCount = 256;

namespace detail {

/// Solves the natural-spline system for the second derivatives (in the local
/// parameter t, segment length 1) at each knot. Interior rows read
/// m_{k-1} + 4 m_k + m_{k+1} = 6 (y_{k+1} - 2 y_k + y_{k-1}); m_0 = m_{K-1} = 0.
inline std::vector<double> natural_second_derivatives(std::span<const double> y) {
  const std::size_t n = y.size();
  std::vector<double> m(n, 0.0);
  if (n < 3) return m;
  const std::size_t interior = n - 2;
  std::vector<double> diag(interior, 4.0);
  std::vector<double> rhs(interior);
  for (std::size_t i = 0; i < interior; ++i) rhs[i] = 6.0 * (y[i + 2] - 2.0 * y[i + 1] + y[i]);
  // Thomas algorithm; off-diagonals are all 1.
  for (std::size_t i = 1; i < interior; ++i) {
    const double f = 1.0 / diag[i - 1];
    diag[i] -= f;
    rhs[i] -= f * rhs[i - 1];
  }
  m[interior] = rhs[interior - 1] / diag[interior - 1];
  for (std::size_t i = interior - 1; i-- > 0;) m[i + 1] = (rhs[i] - m[i + 2]) / diag[i];
  return m;
}

}  // namespace detail

/// One natural cubic spline over uniform parameters on [0, 1]. Segment k
/// covers [k/(K-1), (k+1)/(K-1)] and is stored as a + b t + c t^2 + d t^3 in
/// its local parameter t in [0, 1].
class NaturalCubic1D {
 public:
  NaturalCubic1D() = default;

  explicit NaturalCubic1D(std::span<const double> values) {
    if (values.size() < 2) throw InvalidInput("natural cubic spline needs at least 2 values");
    const auto m = detail::natural_second_derivatives(values);
    coeffs_.resize(values.size() - 1);
    for (std::size_t k = 0; k + 1 < values.size(); ++k) {
      const double y0 = values[k];
      const double y1 = values[k + 1];
      coeffs_[k] = {y0, (y1 - y0) - (2.0 * m[k] + m[k + 1]) / 6.0, m[k] / 2.0,
                    (m[k + 1] - m[k]) / 6.0};
    }
    last_ = values.back();
  }

  std::size_t knot_count() const { return coeffs_.size() + 1; }

  /// Value (order 0) or derivative (order 1..3) with respect to s.
  double operator()(double s, int order = 0) const {
    s = std::clamp(s, 0.0, 1.0);
    const std::size_t segs = coeffs_.size();
    if (order == 0 && s == 1.0) return last_;
    const double scaled = s * static_cast<double>(segs);
    const auto k = std::min(static_cast<std::size_t>(scaled), segs - 1);
    const double t = scaled - static_cast<double>(k);
    const auto& [a, b, c, d] = coeffs_[k];
    const double n = static_cast<double>(segs);
    switch (order) {
      case 0: return a + t * (b + t * (c + t * d));
      case 1: return (b + t * (2.0 * c + t * 3.0 * d)) * n;
      case 2: return (2.0 * c + 6.0 * d * t) * n * n;
      case 3: return 6.0 * d * n * n * n;
      default: return 0.0;
    }
  }

  const std::vector<std::array<double, 4>>& coefficients() const { return coeffs_; }

 private:
  std::vector<std::array<double, 4>> coeffs_;
  double last_ = 0.0;
};

/// Parametric curve r(s) = (r_x, r_y, r_w) over s in [0, 1].
class SplineCurve {
 public:
  SplineCurve() = default;
  SplineCurve(NaturalCubic1D x, NaturalCubic1D y, NaturalCubic1D w)
      : x_(std::move(x)), y_(std::move(y)), w_(std::move(w)) {}

  std::size_t knot_count() const { return x_.knot_count(); }

  /// Knot parameter s_k.
  double knot_parameter(std::size_t k) const {
    return static_cast<double>(k) / static_cast<double>(knot_count() - 1);
  }

  /// Clamps s to [0, 1].
  Point3 eval(double s) const { return {x_(s), y_(s), w_(s)}; }
  Point3 derivative(double s, int order = 1) const {
    return {x_(s, order), y_(s, order), w_(s, order)};
  }

  const NaturalCubic1D& x() const { return x_; }
  const NaturalCubic1D& y() const { return y_; }
  const NaturalCubic1D& w() const { return w_; }

 private:
  NaturalCubic1D x_, y_, w_;
};

inline SplineCurve fit_natural_cubic(const KnotChain& chain) {
  if (chain.size() < 2) throw InvalidInput("fit_natural_cubic: a chain needs K >= 2 knots");
  std::vector<double> xs, ys, ws;
  xs.reserve(chain.size());
  ys.reserve(chain.size());
  ws.reserve(chain.size());
  for (const auto& k : chain.knots) {
    if (!std::isfinite(k.x) || !std::isfinite(k.y) || !std::isfinite(k.w))
      throw InvalidInput("fit_natural_cubic: non-finite knot");
    xs.push_back(k.x);
    ys.push_back(k.y);
    ws.push_back(k.w);
  }
  return {NaturalCubic1D(xs), NaturalCubic1D(ys), NaturalCubic1D(ws)};
}

inline Point3 eval(const SplineCurve& curve, double s) { return curve.eval(s); }

/// Uniform parameters 0, 1/(M-1), ..., 1. M == 1 yields {0}.
inline std::vector<double> uniform_parameters(int count) {
  if (count < 1) throw InvalidInput("uniform_parameters: count must be positive");
  std::vector<double> s(static_cast<std::size_t>(count), 0.0);
  if (count == 1) return s;
  for (int j = 0; j < count; ++j) s[j] = static_cast<double>(j) / static_cast<double>(count - 1);
  s.back() = 1.0;
  return s;
}

inline std::vector<Point3> sample_uniform(const SplineCurve& curve, int count) {
  if (count < 2) throw InvalidInput("sample_uniform: need M >= 2 samples");
  std::vector<Point3> out;
  out.reserve(static_cast<std::size_t>(count));
  for (double s : uniform_parameters(count)) out.push_back(curve.eval(s));
  return out;
}

/// `count` points at equal arc-length spacing, located on a dense uniform
/// sampling of the curve by linear interpolation.
inline Polyline sample_arc_length(const SplineCurve& curve, int count, int dense = 2048) {
  if (count < 2) throw InvalidInput("sample_arc_length: need N >= 2 samples");
  const auto pts = sample_uniform(curve, std::max(dense, count));
  std::vector<double> cum(pts.size(), 0.0);
  for (std::size_t j = 1; j < pts.size(); ++j)
    cum[j] = cum[j - 1] + std::hypot(pts[j].x - pts[j - 1].x, pts[j].y - pts[j - 1].y);
  Polyline out;
  out.reserve(static_cast<std::size_t>(count));
  std::size_t j = 1;
  for (double u : uniform_parameters(count)) {
    const double target = u * cum.back();
    while (j + 1 < cum.size() && cum[j] < target) ++j;
    const double seg = cum[j] - cum[j - 1];
    const double f = seg > 0.0 ? std::clamp((target - cum[j - 1]) / seg, 0.0, 1.0) : 0.0;
    out.push_back({pts[j - 1].x + f * (pts[j].x - pts[j - 1].x), pts[j - 1].y + f * (pts[j].y - pts[j - 1].y)});
  }
  return out;
}

template <typename P>
double polyline_length(std::span<const P> pts) {
  double len = 0.0;
  for (std::size_t j = 1; j < pts.size(); ++j) len += std::hypot(pts[j].x - pts[j - 1].x, pts[j].y - pts[j - 1].y);
  return len;
}

inline double polyline_length(const Polyline& pts) { return polyline_length(std::span<const Point2>(pts)); }

/// Length of the (x, y) polyline through M_L uniform samples.
inline double arc_length(const SplineCurve& curve, int quadrature = kDefaultQuadratureCount) {
  const auto pts = sample_uniform(curve, quadrature);
  return polyline_length(std::span<const Point3>(pts));
}

/// Mean squared second difference of M_L uniform (x, y) samples.
inline double curvature_energy(const SplineCurve& curve, int quadrature = kDefaultQuadratureCount) {
  if (quadrature < 3) throw InvalidInput("curvature_energy: need at least 3 samples");
  const auto p = sample_uniform(curve, quadrature);
  double c = 0.0;
  for (std::size_t j = 1; j + 1 < p.size(); ++j) {
    const double dx = p[j - 1].x - 2.0 * p[j].x + p[j + 1].x;
    const double dy = p[j - 1].y - 2.0 * p[j].y + p[j + 1].y;
    c += dx * dx + dy * dy;
  }
  return c / static_cast<double>(quadrature - 2);
}

/// Fits a natural cubic spline through the points (uniform parameter) and
/// evaluates it at N uniform parameters.
inline Polyline resample_polyline(const Polyline& points, int count) {
  if (points.size() < 2) throw InvalidInput("resample_polyline: need at least 2 points");
  if (count < 2) throw InvalidInput("resample_polyline: need N >= 2");
  std::vector<double> xs, ys;
  for (const auto& p : points) {
    xs.push_back(p.x);
    ys.push_back(p.y);
  }
  const NaturalCubic1D fx(xs), fy(ys);
  Polyline out;
  out.reserve(static_cast<std::size_t>(count));
  for (double s : uniform_parameters(count)) out.push_back({fx(s), fy(s)});
  return out;
}

/// Chain with `count` knots resampled from an arbitrary one. Positions and
/// widths follow the original chain's splines.
inline KnotChain resample_chain(const KnotChain& chain, int count) {
  const auto curve = fit_natural_cubic(chain);
  KnotChain out;
  for (double s : uniform_parameters(count)) {
    const auto p = curve.eval(s);
    out.knots.push_back({p.x, p.y, p.w});
  }
  return out;
}

inline KnotChain chain_from_polyline(const Polyline& pts, int count, double w = 1.0) {
  KnotChain c;
  for (const auto& p : pts) c.knots.push_back({p.x, p.y, w});
  if (count > 0 && static_cast<std::size_t>(count) != pts.size()) c = resample_chain(c, count);
  return c;
}

/// Dense row-major matrix: rows x cols.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, 0.0) {}
  double& operator()(int i, int j) { return data[static_cast<std::size_t>(i) * cols + j]; }
  double operator()(int i, int j) const { return data[static_cast<std::size_t>(i) * cols + j]; }
};

/// Row j holds the weights b_k(s_j) such that spline(s_j) = sum_k b_k(s_j) v_k
/// for any K knot values v.
inline Matrix natural_spline_basis(int knots, std::span<const double> params) {
  if (knots < 2) throw InvalidInput("natural_spline_basis: need K >= 2");
  Matrix b(static_cast<int>(params.size()), knots);
  std::vector<double> unit(static_cast<std::size_t>(knots), 0.0);
  for (int k = 0; k < knots; ++k) {
    std::fill(unit.begin(), unit.end(), 0.0);
    unit[k] = 1.0;
    const NaturalCubic1D f(unit);
    for (std::size_t j = 0; j < params.size(); ++j) b(static_cast<int>(j), k) = f(params[j]);
  }
  return b;
}

}  // namespace sprefine

#endif
