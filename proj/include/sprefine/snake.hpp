#ifndef SPREFINE_SNAKE_HPP
#define SPREFINE_SNAKE_HPP

// Open active contour with free ends, evolved by the semi-implicit scheme
//   x <- (I + gamma A)^-1 (x + gamma F(x)),   A = alpha D1'D1 + beta D2'D2.
// The external energy combines a line term (-polarity * G_sigma * Y) and the
// classic edge term (-|grad(G_sigma * Y)|^2); forces are scaled so their
// largest magnitude over the frame is 1. With `normal_force` the force is
// projected onto the snake normal so points do not slide along a ridge toward
// its brightest spot.

#include <algorithm>
#include <cmath>
#include <vector>

#include "sprefine/appearance.hpp"
#include "sprefine/geometry.hpp"
#include "sprefine/image.hpp"

namespace sprefine {

struct SnakeParams {
  double alpha = 0.05;  // elasticity
  double beta = 0.5;    // bending
  double gamma = 1.0;   // step size
  double sigma = 2.0;   // blur, pixels
  int iterations = 500;
  double line_weight = 1.0;
  double edge_weight = 0.0;
  double polarity = 0.0;  // +1 bright ridges, -1 dark, 0 estimate from the image
  bool normal_force = true;
};

inline void validate(const SnakeParams& p) {
  if (p.alpha < 0 || p.beta < 0 || p.gamma < 0 || p.sigma < 0 || p.line_weight < 0 || p.edge_weight < 0)
    throw InvalidInput("snake: parameters must be non-negative");
  if (p.iterations < 1) throw InvalidInput("snake: iterations must be >= 1");
}

inline Image gaussian_blur(const Image& img, double sigma) {
  if (sigma <= 0.0) return img;
  const int r = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  double s = 0.0;
  for (int i = -r; i <= r; ++i) s += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= s;
  Image tmp(img.rows, img.cols), out(img.rows, img.cols);
  for (int i = 0; i < img.rows; ++i)
    for (int j = 0; j < img.cols; ++j) {
      double a = 0.0;
      for (int d = -r; d <= r; ++d) a += k[d + r] * img(i, std::clamp(j + d, 0, img.cols - 1));
      tmp(i, j) = a;
    }
  for (int i = 0; i < img.rows; ++i)
    for (int j = 0; j < img.cols; ++j) {
      double a = 0.0;
      for (int d = -r; d <= r; ++d) a += k[d + r] * tmp(std::clamp(i + d, 0, img.rows - 1), j);
      out(i, j) = a;
    }
  return out;
}

struct ImageGradient {
  Image dx, dy;
};

/// Central differences, one-sided at the border.
inline ImageGradient image_gradient(const Image& img) {
  ImageGradient g{Image(img.rows, img.cols), Image(img.rows, img.cols)};
  for (int i = 0; i < img.rows; ++i)
    for (int j = 0; j < img.cols; ++j) {
      const int j0 = std::max(j - 1, 0), j1 = std::min(j + 1, img.cols - 1);
      const int i0 = std::max(i - 1, 0), i1 = std::min(i + 1, img.rows - 1);
      g.dx(i, j) = j1 > j0 ? (img(i, j1) - img(i, j0)) / (j1 - j0) : 0.0;
      g.dy(i, j) = i1 > i0 ? (img(i1, j) - img(i0, j)) / (i1 - i0) : 0.0;
    }
  return g;
}

/// -|grad(G_sigma * Y)|^2.
inline Image external_energy(const Image& y, double sigma) {
  const auto g = image_gradient(gaussian_blur(y, sigma));
  Image e(y.rows, y.cols);
  for (std::size_t i = 0; i < e.size(); ++i) e.data[i] = -(g.dx.data[i] * g.dx.data[i] + g.dy.data[i] * g.dy.data[i]);
  return e;
}

/// Weighted line and edge energy used by snake_refine.
inline Image snake_energy(const Image& y, const SnakeParams& p) {
  double polarity = p.polarity;
  if (polarity == 0.0) polarity = estimate_appearance(y, 0.0).polarity;
  const auto blurred = gaussian_blur(y, p.sigma);
  const auto edge = external_energy(y, p.sigma);
  Image e(y.rows, y.cols);
  for (std::size_t i = 0; i < e.size(); ++i)
    e.data[i] = -p.line_weight * polarity * blurred.data[i] + p.edge_weight * edge.data[i];
  return e;
}

/// Force field -grad(E), scaled to unit peak magnitude.
struct ForceField {
  Image fx, fy;

  explicit ForceField(const Image& energy) {
    auto g = image_gradient(energy);
    double peak = 0.0;
    for (std::size_t i = 0; i < g.dx.size(); ++i) peak = std::max(peak, std::hypot(g.dx.data[i], g.dy.data[i]));
    const double s = peak > 0.0 ? -1.0 / peak : 0.0;
    for (auto& v : g.dx.data) v *= s;
    for (auto& v : g.dy.data) v *= s;
    fx = std::move(g.dx);
    fy = std::move(g.dy);
  }

  /// Bilinear sample at pixel coordinates (x = column, y = row), clamped.
  Point2 at(double x, double y) const {
    const int cols = fx.cols, rows = fx.rows;
    x = std::clamp(x, 0.0, cols - 1.0);
    y = std::clamp(y, 0.0, rows - 1.0);
    const int j = std::min(static_cast<int>(x), cols - 2), i = std::min(static_cast<int>(y), rows - 2);
    const double tx = x - j, ty = y - i;
    auto lerp = [&](const Image& f) {
      return (1 - ty) * ((1 - tx) * f(i, j) + tx * f(i, j + 1)) + ty * ((1 - tx) * f(i + 1, j) + tx * f(i + 1, j + 1));
    };
    return {lerp(fx), lerp(fy)};
  }
};

namespace detail {

/// Cholesky factor of a symmetric positive definite pentadiagonal matrix,
/// stored as its three lower diagonals.
class BandedCholesky {
 public:
  /// d0: diagonal, d1[i] = M(i, i-1), d2[i] = M(i, i-2).
  BandedCholesky(std::vector<double> d0, std::vector<double> d1, std::vector<double> d2)
      : l0_(std::move(d0)), l1_(std::move(d1)), l2_(std::move(d2)) {
    const std::size_t n = l0_.size();
    for (std::size_t i = 0; i < n; ++i) {
      if (i >= 2) l2_[i] /= l0_[i - 2];
      if (i >= 1) l1_[i] = (l1_[i] - (i >= 2 ? l2_[i] * l1_[i - 1] : 0.0)) / l0_[i - 1];
      double d = l0_[i];
      if (i >= 1) d -= l1_[i] * l1_[i];
      if (i >= 2) d -= l2_[i] * l2_[i];
      if (!(d > 0.0) || !std::isfinite(d)) throw InvalidInput("snake: system matrix is not positive definite");
      l0_[i] = std::sqrt(d);
    }
  }

  void solve(std::vector<double>& b) const {
    const std::size_t n = b.size();
    for (std::size_t i = 0; i < n; ++i) {
      if (i >= 1) b[i] -= l1_[i] * b[i - 1];
      if (i >= 2) b[i] -= l2_[i] * b[i - 2];
      b[i] /= l0_[i];
    }
    for (std::size_t i = n; i-- > 0;) {
      if (i + 1 < n) b[i] -= l1_[i + 1] * b[i + 1];
      if (i + 2 < n) b[i] -= l2_[i + 2] * b[i + 2];
      b[i] /= l0_[i];
    }
  }

 private:
  std::vector<double> l0_, l1_, l2_;
};

/// Bands of alpha D1'D1 + beta D2'D2 for n points with free ends.
inline void internal_bands(std::size_t n, double alpha, double beta, std::vector<double>& d0, std::vector<double>& d1,
                           std::vector<double>& d2) {
  d0.assign(n, 0.0), d1.assign(n, 0.0), d2.assign(n, 0.0);
  for (std::size_t r = 0; r + 1 < n; ++r) {  // rows of D1: x[r+1] - x[r]
    d0[r] += alpha, d0[r + 1] += alpha;
    d1[r + 1] -= alpha;
  }
  for (std::size_t r = 0; r + 2 < n; ++r) {  // rows of D2: x[r] - 2x[r+1] + x[r+2]
    const double c[3] = {1.0, -2.0, 1.0};
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b <= a; ++b) {
        const double v = beta * c[a] * c[b];
        if (a == b)
          d0[r + a] += v;
        else if (a - b == 1)
          d1[r + a] += v;
        else
          d2[r + a] += v;
      }
  }
}

}  // namespace detail

/// 0.5 alpha |D1 x|^2 + 0.5 beta |D2 x|^2 over both coordinates.
inline double internal_energy(const Polyline& p, double alpha, double beta) {
  double e = 0.0;
  for (std::size_t i = 0; i + 1 < p.size(); ++i)
    e += 0.5 * alpha * (std::pow(p[i + 1].x - p[i].x, 2) + std::pow(p[i + 1].y - p[i].y, 2));
  for (std::size_t i = 0; i + 2 < p.size(); ++i)
    e += 0.5 * beta *
         (std::pow(p[i].x - 2 * p[i + 1].x + p[i + 2].x, 2) + std::pow(p[i].y - 2 * p[i + 1].y + p[i + 2].y, 2));
  return e;
}

/// Evolves an open snake; `force` may be null for internal-energy-only runs.
inline Polyline snake_evolve(const Polyline& init, const ForceField* force, int rows, int cols, const SnakeParams& p) {
  validate(p);
  if (init.size() < 3) throw InvalidInput("snake: need at least 3 points");
  const std::size_t n = init.size();
  std::vector<double> d0, d1, d2;
  detail::internal_bands(n, p.alpha, p.beta, d0, d1, d2);
  for (std::size_t i = 0; i < n; ++i) {
    d0[i] = 1.0 + p.gamma * d0[i];
    d1[i] *= p.gamma;
    d2[i] *= p.gamma;
  }
  const detail::BandedCholesky chol(d0, d1, d2);
  std::vector<double> xs(n), ys(n);
  for (std::size_t i = 0; i < n; ++i) xs[i] = init[i].x, ys[i] = init[i].y;
  for (int it = 0; it < p.iterations; ++it) {
    if (force) {
      const auto px = xs, py = ys;
      for (std::size_t i = 0; i < n; ++i) {
        auto f = force->at(px[i], py[i]);
        if (p.normal_force) {
          const std::size_t a = i > 0 ? i - 1 : 0, b = std::min(i + 1, n - 1);
          const double tx = px[b] - px[a], ty = py[b] - py[a], tl = std::hypot(tx, ty);
          if (tl > 0.0) {
            const double along = (f.x * tx + f.y * ty) / (tl * tl);
            f = {f.x - along * tx, f.y - along * ty};
          }
        }
        xs[i] += p.gamma * f.x;
        ys[i] += p.gamma * f.y;
      }
    }
    chol.solve(xs);
    chol.solve(ys);
    if (force)
      for (std::size_t i = 0; i < n; ++i) {
        xs[i] = std::clamp(xs[i], 0.0, cols - 1.0);
        ys[i] = std::clamp(ys[i], 0.0, rows - 1.0);
      }
  }
  Polyline out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = {xs[i], ys[i]};
  return out;
}

inline Polyline snake_refine(const Image& y, const Polyline& init, const SnakeParams& p = {}) {
  validate(p);
  if (y.rows < 2 || y.cols < 2) throw InvalidInput("snake: image too small");
  const ForceField f(snake_energy(y, p));
  return snake_evolve(init, &f, y.rows, y.cols, p);
}

}  // namespace sprefine

#endif
