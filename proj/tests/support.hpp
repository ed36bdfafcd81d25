#ifndef SPREFINE_TESTS_SUPPORT_HPP
#define SPREFINE_TESTS_SUPPORT_HPP

// Shared fixtures and independent reference implementations for the suites.

#include <cmath>
#include <filesystem>
#include <limits>
#include <random>
#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "sprefine/autodiff/gradient.hpp"
#include "sprefine/geometry.hpp"
#include "sprefine/image.hpp"
#include "sprefine/renderer.hpp"

namespace testing_support {

using namespace sprefine;

inline KnotChain random_chain(std::mt19937_64& rng, int k, double lo = 0.0, double hi = 64.0) {
  std::uniform_real_distribution<double> pos(lo, hi), w(0.2, 1.0);
  KnotChain c;
  for (int i = 0; i < k; ++i) c.knots.push_back({pos(rng), pos(rng), w(rng)});
  return c;
}

inline Image random_image(std::mt19937_64& rng, int rows, int cols) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image img(rows, cols);
  for (auto& v : img.data) v = u(rng);
  return img;
}

/// Dense Gaussian elimination with partial pivoting; a is n x n row-major.
inline std::vector<double> dense_solve(std::vector<double> a, std::vector<double> b) {
  const std::size_t n = b.size();
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(a[r * n + c]) > std::abs(a[piv * n + c])) piv = r;
    for (std::size_t j = 0; j < n; ++j) std::swap(a[c * n + j], a[piv * n + j]);
    std::swap(b[c], b[piv]);
    for (std::size_t r = c + 1; r < n; ++r) {
      const double f = a[r * n + c] / a[c * n + c];
      for (std::size_t j = c; j < n; ++j) a[r * n + j] -= f * a[c * n + j];
      b[r] -= f * b[c];
    }
  }
  std::vector<double> x(n);
  for (std::size_t i = n; i-- > 0;) {
    double s = b[i];
    for (std::size_t j = i + 1; j < n; ++j) s -= a[i * n + j] * x[j];
    x[i] = s / a[i * n + i];
  }
  return x;
}

/// Natural cubic interpolant at uniform knots via a dense solve of the
/// global C2 system in the global parameter (independent of the library's
/// local-parameter Thomas solver).
inline double reference_natural_cubic(const std::vector<double>& y, double s) {
  const std::size_t n = y.size();
  if (n == 2) return y[0] + (y[1] - y[0]) * s;
  const double h = 1.0 / static_cast<double>(n - 1);
  std::vector<double> a(n * n, 0.0), b(n, 0.0);
  a[0] = 1.0;
  a[n * n - 1] = 1.0;
  for (std::size_t i = 1; i + 1 < n; ++i) {
    a[i * n + i - 1] = h / 6.0;
    a[i * n + i] = 2.0 * h / 3.0;
    a[i * n + i + 1] = h / 6.0;
    b[i] = (y[i + 1] - 2.0 * y[i] + y[i - 1]) / h;
  }
  const auto m = dense_solve(a, b);
  std::size_t k = std::min(static_cast<std::size_t>(s / h), n - 2);
  const double x0 = static_cast<double>(k) * h, x1 = x0 + h;
  const double A = (x1 - s) / h, B = (s - x0) / h;
  return A * y[k] + B * y[k + 1] + ((A * A * A - A) * m[k] + (B * B * B - B) * m[k + 1]) * h * h / 6.0;
}

/// Minimum-cost monotone alignment by exhaustive enumeration of all
/// (1,0)/(0,1)/(1,1) step sequences from (0,0) to (n-1,m-1).
inline double brute_force_dtw(const Polyline& a, const Polyline& b) {
  double best = std::numeric_limits<double>::infinity();
  auto d = [&](std::size_t i, std::size_t j) { return std::hypot(a[i].x - b[j].x, a[i].y - b[j].y); };
  auto rec = [&](auto&& self, std::size_t i, std::size_t j, double acc) -> void {
    acc += d(i, j);
    if (i + 1 == a.size() && j + 1 == b.size()) {
      best = std::min(best, acc);
      return;
    }
    if (i + 1 < a.size()) self(self, i + 1, j, acc);
    if (j + 1 < b.size()) self(self, i, j + 1, acc);
    if (i + 1 < a.size() && j + 1 < b.size()) self(self, i + 1, j + 1, acc);
  };
  rec(rec, 0, 0, 0.0);
  return best;
}

/// Random 32x32 scene with 1-3 chains of K=4 knots plus a random target image.
struct GradientCase {
  Scene scene;
  Image observed;
  Priors priors;
  RegWeights lambda;
};

inline GradientCase random_gradient_case(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto in = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };
  GradientCase g;
  Scene& s = g.scene;
  s.resolution = 32;
  const int chains = 1 + static_cast<int>(rng() % 3);
  for (int c = 0; c < chains; ++c) {
    KnotChain ch;
    for (int k = 0; k < 4; ++k) ch.knots.push_back({in(6, 26), in(6, 26), in(0.3, 0.9)});
    s.chains.push_back(ch);
  }
  s.width = in(1.5, 3.0);
  for (auto& p : s.blob.profile) p += in(-0.2, 0.2);
  s.background = {in(0.0, 0.3), in(-0.2, 0.2), in(-0.2, 0.2)};
  for (auto& w : s.kernel.weights) w += in(-0.1, 0.1);
  s.composite.mix_logit = in(-2, 2);
  g.observed = random_image(rng, 32, 32);
  for (std::size_t c = 0; c < s.chains.size(); ++c) g.priors.bar_lengths.push_back(in(10, 40));
  g.priors.bar_w = in(0.2, 0.6);
  g.priors.bar_W = in(1.5, 3.0);
  g.lambda = {1e-3, 1e-2, 1.0, 1e-2};
  return g;
}

struct GradientCheck {
  std::size_t checked = 0;
  std::size_t skipped = 0;
  double max_rel = 0.0;
  std::string worst;
};

/// Central differences at step h in scene units: knot positions and W in
/// pixels, knot widths w directly, everything else as stored. The analytic
/// gradient over the packed vector is mapped to those units by the chain rule.
/// An entry is a tie, and skipped, when its analytic gradient changes by more
/// than `tie_tol` (relative) between p and p +/- h, i.e. a max/min selection or
/// bilinear cell edge lies inside the difference window, or when its knot
/// width sits within 1e-3 of the chain minimum. Differences below `abs_floor`
/// count as agreement.
inline GradientCheck finite_difference_check(const GradientCase& g, double h = 1e-4, double abs_floor = 1e-9,
                                             double tie_tol = 1e-3) {
  const RenderContext ctx(g.scene);
  const ParamLayout layout(g.scene);
  const auto theta = pack(g.scene);
  const ParamMask all(layout.size(), true);
  const double res = g.scene.resolution;
  auto eval = [&](const std::vector<double>& t) { return evaluate(ctx, layout, t, g.observed, g.priors, g.lambda, all); };
  const auto base = eval(theta);

  auto is_position = [](const ParamSlice& s) { return s.group == ParamGroup::Splines && s.name != "w"; };
  auto is_knot_width = [](const ParamSlice& s) { return s.group == ParamGroup::Splines && s.name == "w"; };
  auto to_scene = [&](const ParamSlice& s, double t) {
    if (is_position(s)) return t * res;
    if (is_knot_width(s)) return ad::sigmoid(t);
    if (s.group == ParamGroup::Width) return ad::softplus(t);
    return t;
  };
  auto to_theta = [&](const ParamSlice& s, double v) {
    if (is_position(s)) return v / res;
    if (is_knot_width(s)) return ad::logit(v);
    if (s.group == ParamGroup::Width) return ad::softplus_inverse(v);
    return v;
  };
  // d(theta)/d(scene value) at stored value t.
  auto dtheta = [&](const ParamSlice& s, double t) {
    if (is_position(s)) return 1.0 / res;
    if (is_knot_width(s)) {
      const double w = ad::sigmoid(t);
      return 1.0 / (w * (1.0 - w));
    }
    if (s.group == ParamGroup::Width) return 1.0 / ad::sigmoid(t);
    return 1.0;
  };

  GradientCheck out;
  for (const auto& s : layout.slices()) {
    bool min_tie = false;
    if (is_knot_width(s)) {
      std::vector<double> w;
      for (std::size_t i = 0; i < s.size; ++i) w.push_back(ad::sigmoid(theta[s.offset + i]));
      std::sort(w.begin(), w.end());
      min_tie = w.size() > 1 && w[1] - w[0] < 1e-3;
    }
    for (std::size_t i = 0; i < s.size; ++i) {
      const std::size_t e = s.offset + i;
      const double v = to_scene(s, theta[e]);
      auto tp = theta, tm = theta;
      tp[e] = to_theta(s, v + h);
      tm[e] = to_theta(s, v - h);
      const auto ep = eval(tp), em = eval(tm);
      const double central = (ep.total - em.total) / (2 * h);
      const double ana = base.grad[e] * dtheta(s, theta[e]);
      const double gp = ep.grad[e] * dtheta(s, tp[e]), gm = em.grad[e] * dtheta(s, tm[e]);
      const double variation = std::max(std::abs(gp - ana), std::abs(gm - ana));
      if (min_tie || variation > tie_tol * std::max(std::abs(ana), 1e-6)) {
        ++out.skipped;
        continue;
      }
      ++out.checked;
      const double err = std::abs(ana - central);
      if (err <= abs_floor) continue;
      const double rel = err / std::max(std::abs(ana), std::abs(central));
      if (rel > out.max_rel) {
        out.max_rel = rel;
        out.worst = "chain " + std::to_string(s.chain) + " " + s.name + "[" + std::to_string(i) + "] analytic " +
                    std::to_string(ana) + " fd " + std::to_string(central);
      }
    }
  }
  return out;
}

/// A fresh, empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("sprefine_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testing_support

#endif
