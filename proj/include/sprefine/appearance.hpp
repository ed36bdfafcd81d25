#ifndef SPREFINE_APPEARANCE_HPP
#define SPREFINE_APPEARANCE_HPP

// Data-driven starting values for the non-geometric scene parameters: a
// robust background plane, body polarity, and the ridge peak and scale fitted
// to the area-above-threshold curve of the background-subtracted image.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "sprefine/image.hpp"
#include "sprefine/renderer.hpp"

namespace sprefine {

/// Cross-section of a straight ridge of unit sample density at unit scale:
/// the rendered ridge peaks at density * scale * peak and is scale * fwhm
/// pixels wide at half maximum.
struct RidgeResponse {
  double peak = 0.0;
  double fwhm = 0.0;
  std::vector<double> distance;  // cross-section at unit scale, peak-normalized
  std::vector<double> profile;

  /// Distance at which the normalized cross-section falls to t.
  double half_width(double t) const {
    for (std::size_t i = 1; i < profile.size(); ++i)
      if (profile[i] < t) {
        const double f = (profile[i - 1] - t) / (profile[i - 1] - profile[i]);
        return distance[i - 1] + f * (distance[i] - distance[i - 1]);
      }
    return distance.empty() ? 0.0 : distance.back();
  }
};

inline RidgeResponse ridge_response(const BlobModel& blob) {
  const auto img = blob_image(blob);
  const int g = img.rows;
  const double c = (g - 1) / 2.0;
  const double h = kBlobRadius / c;
  const double reach = (c + 1.0) * h;
  auto sample = [&](double u, double v) {
    const double gx = u / h + c, gy = v / h + c;
    if (gx <= -1.0 || gy <= -1.0 || gx >= g || gy >= g) return 0.0;
    const int ix = static_cast<int>(std::floor(gx)), iy = static_cast<int>(std::floor(gy));
    const double tx = gx - ix, ty = gy - iy;
    using detail::blob_at;
    return (1 - ty) * ((1 - tx) * blob_at(img.span(), g, ix, iy) + tx * blob_at(img.span(), g, ix + 1, iy)) +
           ty * ((1 - tx) * blob_at(img.span(), g, ix, iy + 1) + tx * blob_at(img.span(), g, ix + 1, iy + 1));
  };
  constexpr double dt = 0.002;
  auto cross = [&](double d) {
    double s = 0.0;
    for (double t = -reach; t <= reach; t += dt) s += sample(d, t);
    return std::abs(s * dt);
  };
  RidgeResponse r;
  r.peak = cross(0.0);
  if (r.peak <= 0.0) return r;
  double lo = 0.0, hi = 0.0;
  for (double d = 0.01; d <= reach; d += 0.01) {
    if (cross(d) < r.peak / 2) {
      hi = d;
      break;
    }
    lo = d;
  }
  if (hi == 0.0) hi = reach;
  for (int it = 0; it < 40; ++it) {
    const double mid = 0.5 * (lo + hi);
    (cross(mid) < r.peak / 2 ? hi : lo) = mid;
  }
  r.fwhm = lo + hi;  // 2 * half width
  for (double d = 0.0; d <= reach; d += 0.01) {
    r.distance.push_back(d);
    r.profile.push_back(cross(d) / r.peak);
  }
  return r;
}

struct AppearanceEstimate {
  BackgroundModel background;       // plane fitted to background pixels
  double polarity = 1.0;            // +1 bright bodies, -1 dark bodies
  double contrast = 0.0;            // ridge peak above background, >= 0
  double fwhm_px = 0.0;             // half-maximum width of the bodies
  double scale = 0.0;               // blob scale matching the ridge, 0 if not fitted
  double noise_sigma = 0.0;         // robust residual scale of the background
  double background_only_loss = 0;  // mean squared residual of a plane fitted to all pixels
};

namespace detail {

inline BackgroundModel fit_plane(const Image& y, const std::vector<bool>& use) {
  const int res = y.rows;
  const double c = (res - 1) / 2.0;
  Eigen::Matrix3d a = Eigen::Matrix3d::Zero();
  Eigen::Vector3d b = Eigen::Vector3d::Zero();
  for (int i = 0; i < y.rows; ++i)
    for (int j = 0; j < y.cols; ++j) {
      if (!use.empty() && !use[static_cast<std::size_t>(i) * y.cols + j]) continue;
      const Eigen::Vector3d f(1.0, (j - c) / res, (i - c) / res);
      a += f * f.transpose();
      b += f * y(i, j);
    }
  const Eigen::Vector3d p = a.ldlt().solve(b);
  if (!p.allFinite()) return {};
  return {p[0], p[1], p[2]};
}

struct RidgeFit {
  double peak = 0.0, scale = 0.0;
};

/// Fits peak P and scale s to pixel counts above thresholds tau_k, modelled
/// as 2 L s d(tau_k / P) with d the inverse of the reference cross-section.
inline RidgeFit fit_ridge(const std::vector<double>& signed_residual, double length, double noise,
                          const RidgeResponse& ridge) {
  RidgeFit best;
  if (length <= 0.0 || ridge.profile.empty()) return best;
  auto sorted = signed_residual;
  std::sort(sorted.begin(), sorted.end());
  const double top = sorted[sorted.size() - 1 - sorted.size() / 1000];
  std::vector<double> tau, area;
  for (int k = 3; k <= 17; ++k) {
    const double t = 0.05 * k * top;
    if (t < 3.0 * noise) continue;
    tau.push_back(t);
    const auto above = sorted.end() - std::upper_bound(sorted.begin(), sorted.end(), t);
    area.push_back(static_cast<double>(above));
  }
  if (tau.size() < 3) return best;
  double best_err = std::numeric_limits<double>::infinity();
  for (double p = 0.7 * top; p <= 2.0 * top; p *= 1.005) {
    double num = 0.0, den = 0.0;
    std::vector<double> m(tau.size());
    for (std::size_t k = 0; k < tau.size(); ++k) {
      m[k] = 2.0 * length * ridge.half_width(tau[k] / p);
      num += m[k] * area[k];
      den += m[k] * m[k];
    }
    if (den <= 0.0) continue;
    const double s = num / den;
    double err = 0.0;
    for (std::size_t k = 0; k < tau.size(); ++k) err += (area[k] - s * m[k]) * (area[k] - s * m[k]);
    if (err < best_err) {
      best_err = err;
      best = {p, s};
    }
  }
  return best;
}

}  // namespace detail

/// `ridge`, when given with a positive total chain length, enables the
/// peak/scale fit; otherwise contrast and width come from the half-maximum band.
inline AppearanceEstimate estimate_appearance(const Image& observed, double total_length,
                                              const RidgeResponse* ridge = nullptr) {
  if (observed.rows != observed.cols || observed.rows < 3) throw InvalidInput("estimate_appearance: need a square image");
  AppearanceEstimate e;
  const std::size_t n = observed.size();
  auto residual = [&](const BackgroundModel& bg) {
    const auto plane = render_background(bg, observed.rows);
    std::vector<double> r(n);
    for (std::size_t i = 0; i < n; ++i) r[i] = observed.data[i] - plane.data[i];
    return r;
  };

  const auto all = detail::fit_plane(observed, {});
  {
    const auto r = residual(all);
    double s = 0.0;
    for (double v : r) s += v * v;
    e.background_only_loss = s / static_cast<double>(n);
  }

  // Trim body pixels from the plane fit.
  BackgroundModel bg = all;
  std::vector<bool> keep(n, true);
  double sigma = 0.0;
  for (int it = 0; it < 4; ++it) {
    const auto r = residual(bg);
    std::vector<double> kept;
    for (std::size_t i = 0; i < n; ++i)
      if (keep[i]) kept.push_back(r[i]);
    const double med = quantile(kept, 0.5);
    std::vector<double> dev;
    for (double v : kept) dev.push_back(std::abs(v - med));
    sigma = std::max(1.4826 * quantile(dev, 0.5), 1e-6);
    for (std::size_t i = 0; i < n; ++i) keep[i] = std::abs(r[i] - med) < 2.5 * sigma;
    bg = detail::fit_plane(observed, keep);
  }
  e.background = bg;
  e.noise_sigma = sigma;

  const auto r = residual(bg);
  const double hi = quantile(r, 0.99), lo = -quantile(r, 0.01);
  e.polarity = hi >= lo ? 1.0 : -1.0;
  std::vector<double> signed_r(n);
  for (std::size_t i = 0; i < n; ++i) signed_r[i] = e.polarity * r[i];
  double contrast = std::max(hi, lo);
  // The median of a smooth ridge over its half-maximum band sits near 0.84 of the peak.
  for (int it = 0; it < 2; ++it) {
    std::vector<double> band;
    for (double v : signed_r)
      if (v > contrast / 2) band.push_back(v);
    if (band.empty()) break;
    contrast = quantile(band, 0.5) / 0.84;
  }
  e.contrast = std::max(contrast, 3.0 * sigma);
  std::size_t area = 0;
  for (double v : signed_r) area += v > e.contrast / 2 ? 1 : 0;
  e.fwhm_px = total_length > 0.0 ? static_cast<double>(area) / total_length : 0.0;
  if (ridge) {
    const auto fit = detail::fit_ridge(signed_r, total_length, sigma, *ridge);
    if (fit.scale > 0.0) {
      e.contrast = fit.peak;
      e.scale = fit.scale;
      e.fwhm_px = fit.scale * ridge->fwhm;
    }
  }
  return e;
}

}  // namespace sprefine

#endif
