#ifndef SPREFINE_SYNTH_HPP
#define SPREFINE_SYNTH_HPP

// Synthetic overlapping slender bodies and label perturbations.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <vector>

#include "sprefine/appearance.hpp"
#include "sprefine/geometry.hpp"
#include "sprefine/random.hpp"
#include "sprefine/renderer.hpp"

namespace sprefine {

struct GenConfig {
  int resolution = 64;
  int n_bodies = 1;
  int label_points = 100;
  double length_min = 52.0;  // px
  double length_max = 66.0;
  double width_min = 1.6;  // W in blob-scale units (pixels per blob unit)
  double width_max = 2.4;
  double amplitude_min = 0.25;  // ridge peak above background at full width
  double amplitude_max = 0.45;
  double background_min = 0.15;
  double background_max = 0.35;
  double gradient_max = 0.1;  // |g_x|, |g_y|
  double noise_sigma = 0.03;
  double mix = 0.3;     // sum/max interpolation of overlapping bodies
  double blur = 0.4;    // weight of the 3x3 box in the blur kernel
  double margin = 3.0;  // px kept free at the frame border
  double curvature_sigma = 0.04;  // stationary std of the curvature process, rad/px
  double curvature_corr = 12.0;   // correlation length, px
  double max_turn = 0.08;         // cap on the turning angle per label step, rad
  int samples = 256;              // splat samples per body
  int attempts = 1000;            // rejection budget per centerline
  std::uint64_t seed = 1;
};

inline void validate(const GenConfig& c) {
  if (c.resolution < kDefaultGridSize) throw InvalidInput("gen: resolution too small");
  if (c.n_bodies < 1) throw InvalidInput("gen: n_bodies must be >= 1");
  if (c.label_points < 2) throw InvalidInput("gen: label_points must be >= 2");
  auto range = [](double lo, double hi, const char* what) {
    if (!(lo <= hi) || !std::isfinite(lo) || !std::isfinite(hi)) throw InvalidInput(std::string("gen: empty range ") + what);
  };
  range(c.length_min, c.length_max, "length");
  range(c.width_min, c.width_max, "width");
  range(c.amplitude_min, c.amplitude_max, "amplitude");
  range(c.background_min, c.background_max, "background");
  if (c.length_min <= 0 || c.width_min <= 0) throw InvalidInput("gen: lengths and widths must be positive");
  if (c.gradient_max < 0 || c.noise_sigma < 0 || c.curvature_sigma < 0 || c.max_turn < 0 || c.margin < 0)
    throw InvalidInput("gen: negative scale parameter");
  if (!(c.mix >= 0 && c.mix <= 1) || !(c.blur >= 0 && c.blur <= 1)) throw InvalidInput("gen: mix and blur lie in [0, 1]");
  if (c.samples < 2 || c.attempts < 1 || c.curvature_corr <= 0) throw InvalidInput("gen: invalid sampling settings");
}

struct LabeledFrame {
  Image image;
  std::vector<Polyline> labels;               // label_points each
  std::vector<double> body_widths;            // W per body
  std::vector<std::vector<double>> widths;    // W * w(s) at each label point
  std::vector<double> amplitudes;
  BackgroundModel background;
  std::uint64_t seed = 0;
  int index = 0;
  int n_bodies = 0;
};

/// Relative width profile along a body.
inline double body_profile(double s) { return 0.5 + 0.5 * std::sin(std::numbers::pi * s); }

/// Gaussian-like generator blob, f(z) = exp(-(ln z)^2 / (2 sigma^2)), with
/// sigma chosen so a ridge has the same half-maximum width per unit scale as
/// the exponential blob used for refinement.
inline BlobModel generator_blob(int knots = 32, int grid = kDefaultGridSize) {
  const double target = ridge_response(BlobModel::exponential(1.0, kDefaultProfileKnots, grid)).fwhm;
  auto make = [&](double sigma) {
    BlobModel b;
    b.grid_size = grid;
    for (double z : uniform_parameters(knots)) {
      const double r = z > 0.0 ? -std::log(z) : 1e9;
      b.profile.push_back(std::exp(-r * r / (2.0 * sigma * sigma)));
    }
    return b;
  };
  double lo = 0.2, hi = 3.0;
  for (int it = 0; it < 40; ++it) {
    const double mid = 0.5 * (lo + hi);
    (ridge_response(make(mid)).fwhm < target ? lo : hi) = mid;
  }
  return make(0.5 * (lo + hi));
}

/// Fixed-speed centerline whose curvature follows a clamped
/// Ornstein-Uhlenbeck process, translated at random into the frame margin.
inline Polyline gen_centerline(RandomStream& rng, const GenConfig& cfg) {
  validate(cfg);
  const int n = cfg.label_points;
  const double lo = cfg.margin, hi = cfg.resolution - 1 - cfg.margin;
  for (int attempt = 0; attempt < cfg.attempts; ++attempt) {
    const double length = rng.uniform(cfg.length_min, cfg.length_max);
    const double ds = length / (n - 1);
    const double keep = std::exp(-ds / cfg.curvature_corr);
    double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
    double kappa = cfg.curvature_sigma * rng.normal();
    Polyline p{{0.0, 0.0}};
    for (int j = 1; j < n; ++j) {
      p.push_back({p.back().x + ds * std::cos(theta), p.back().y + ds * std::sin(theta)});
      kappa = keep * kappa + cfg.curvature_sigma * std::sqrt(1.0 - keep * keep) * rng.normal();
      theta += std::clamp(kappa * ds, -cfg.max_turn, cfg.max_turn);
    }
    double x0 = p[0].x, x1 = x0, y0 = p[0].y, y1 = y0;
    for (const auto& q : p) {
      x0 = std::min(x0, q.x), x1 = std::max(x1, q.x);
      y0 = std::min(y0, q.y), y1 = std::max(y1, q.y);
    }
    if (x1 - x0 > hi - lo || y1 - y0 > hi - lo) continue;
    const double tx = rng.uniform(lo - x0, hi - x1), ty = rng.uniform(lo - y0, hi - y1);
    for (auto& q : p) q = {q.x + tx, q.y + ty};
    return p;
  }
  throw NumericalError("gen_centerline: rejection budget exhausted");
}

inline LabeledFrame gen_frame(const GenConfig& cfg, int index) {
  validate(cfg);
  RandomStream rng(mix_key(mix_key(cfg.seed, static_cast<std::uint64_t>(cfg.n_bodies)), static_cast<std::uint64_t>(index)));
  LabeledFrame f;
  f.seed = cfg.seed;
  f.index = index;
  f.n_bodies = cfg.n_bodies;
  const int res = cfg.resolution;
  static const BlobModel blob = generator_blob();
  static const double peak = ridge_response(blob).peak;

  std::vector<Image> bodies;
  for (int b = 0; b < cfg.n_bodies; ++b) {
    auto label = gen_centerline(rng, cfg);
    const double W = rng.uniform(cfg.width_min, cfg.width_max);
    const double amp = rng.uniform(cfg.amplitude_min, cfg.amplitude_max);
    Scene s;
    s.resolution = res;
    s.samples_per_spline = cfg.samples;
    s.width = W;
    s.blob = blob;
    const double density = cfg.samples / polyline_length(label);
    for (auto& v : s.blob.profile) v *= amp / (density * W * peak);
    KnotChain chain;
    std::vector<double> widths;
    const auto params = uniform_parameters(cfg.label_points);
    for (std::size_t j = 0; j < label.size(); ++j) {
      chain.knots.push_back({label[j].x, label[j].y, body_profile(params[j])});
      widths.push_back(W * body_profile(params[j]));
    }
    s.chains = {chain};
    bodies.push_back(render_spline(fit_natural_cubic(chain), s.blob, W, cfg.samples, res));
    f.labels.push_back(std::move(label));
    f.body_widths.push_back(W);
    f.widths.push_back(std::move(widths));
    f.amplitudes.push_back(amp);
  }
  f.background = {rng.uniform(cfg.background_min, cfg.background_max), rng.uniform(-cfg.gradient_max, cfg.gradient_max),
                  rng.uniform(-cfg.gradient_max, cfg.gradient_max)};
  Image img = composite(bodies, cfg.mix);
  const auto bg = render_background(f.background, res);
  for (std::size_t i = 0; i < img.size(); ++i) img.data[i] += bg.data[i];
  ConvKernel k;
  for (auto& w : k.weights) w = cfg.blur / 9.0;
  k.weights[4] += 1.0 - cfg.blur;
  img = conv3x3(img, k);
  for (auto& v : img.data) v = std::clamp(v + cfg.noise_sigma * rng.normal(), 0.0, 1.0);
  f.image = std::move(img);
  return f;
}

// ---------------------------------------------------------------------------
// Perturbations

enum class PcaRepresentation { TangentAngle, Coordinates };

/// Principal components of label shapes. Tangent-angle profiles use 100
/// angles (labels resampled to 101 points) with the per-label mean angle
/// removed; coordinate profiles use 100 centroid-relative points.
struct PcaBasis {
  PcaRepresentation representation = PcaRepresentation::TangentAngle;
  Eigen::VectorXd mean;
  Eigen::MatrixXd components;  // D x k, orthonormal columns
  Eigen::VectorXd variances;   // k, descending
  int k() const { return static_cast<int>(components.cols()); }
};

inline constexpr int kPcaAngles = 100;

namespace detail {

inline Point2 centroid(const Polyline& p) {
  Point2 c;
  for (const auto& q : p) c = {c.x + q.x, c.y + q.y};
  return {c.x / static_cast<double>(p.size()), c.y / static_cast<double>(p.size())};
}

struct AngleProfile {
  Eigen::VectorXd angles;  // mean removed
  double mean_angle = 0.0;
  double length = 0.0;
};

inline AngleProfile angle_profile(const Polyline& label) {
  const auto p = resample_polyline(label, kPcaAngles + 1);
  AngleProfile a;
  a.angles.resize(kPcaAngles);
  double prev = 0.0;
  for (int j = 0; j < kPcaAngles; ++j) {
    const double dx = p[j + 1].x - p[j].x, dy = p[j + 1].y - p[j].y;
    const double len = std::hypot(dx, dy);
    if (!(len > 1e-12)) throw NumericalError("pca: degenerate label segment");
    a.length += len;
    double t = std::atan2(dy, dx);
    if (j > 0) t = prev + std::remainder(t - prev, 2.0 * std::numbers::pi);
    a.angles[j] = prev = t;
  }
  a.mean_angle = a.angles.mean();
  a.angles.array() -= a.mean_angle;
  return a;
}

inline Eigen::VectorXd coordinate_profile(const Polyline& label) {
  const auto p = resample_polyline(label, kPcaAngles);
  const auto c = centroid(p);
  Eigen::VectorXd v(2 * kPcaAngles);
  for (int j = 0; j < kPcaAngles; ++j) {
    v[2 * j] = p[j].x - c.x;
    v[2 * j + 1] = p[j].y - c.y;
  }
  return v;
}

inline Eigen::VectorXd shape_vector(const Polyline& label, PcaRepresentation rep) {
  return rep == PcaRepresentation::TangentAngle ? angle_profile(label).angles : coordinate_profile(label);
}

}  // namespace detail

inline PcaBasis pca_basis(const std::vector<Polyline>& corpus, int k,
                          PcaRepresentation rep = PcaRepresentation::TangentAngle) {
  if (k < 0) throw InvalidInput("pca_basis: k must be >= 0");
  if (static_cast<int>(corpus.size()) <= k) throw InvalidInput("pca_basis: corpus must be larger than k");
  const int d = rep == PcaRepresentation::TangentAngle ? kPcaAngles : 2 * kPcaAngles;
  if (k > d) throw InvalidInput("pca_basis: k exceeds the profile dimension");
  Eigen::MatrixXd x(d, static_cast<Eigen::Index>(corpus.size()));
  for (std::size_t i = 0; i < corpus.size(); ++i) x.col(static_cast<Eigen::Index>(i)) = detail::shape_vector(corpus[i], rep);
  if (!x.allFinite()) throw NumericalError("pca_basis: non-finite profiles");
  PcaBasis b;
  b.representation = rep;
  b.mean = x.rowwise().mean();
  x.colwise() -= b.mean;
  const Eigen::MatrixXd cov = x * x.transpose() / static_cast<double>(corpus.size());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  if (es.info() != Eigen::Success) throw NumericalError("pca_basis: eigen decomposition failed");
  // Eigenvalues ascend; take the last k columns in reverse.
  b.components.resize(d, k);
  b.variances.resize(k);
  for (int j = 0; j < k; ++j) {
    b.components.col(j) = es.eigenvectors().col(d - 1 - j);
    b.variances[j] = es.eigenvalues()[d - 1 - j];
  }
  return b;
}

/// Projects a label onto the basis and rebuilds it with the label's
/// orientation, length, centroid and point count.
inline Polyline pca_project(const Polyline& label, const PcaBasis& basis) {
  const auto c = detail::centroid(label);
  Polyline out;
  if (basis.representation == PcaRepresentation::TangentAngle) {
    const auto a = detail::angle_profile(label);
    const Eigen::VectorXd coef = basis.components.transpose() * (a.angles - basis.mean);
    const Eigen::VectorXd rec = basis.mean + basis.components * coef;
    const double step = a.length / kPcaAngles;
    out.push_back({0.0, 0.0});
    for (int j = 0; j < kPcaAngles; ++j) {
      const double t = rec[j] + a.mean_angle;
      out.push_back({out.back().x + step * std::cos(t), out.back().y + step * std::sin(t)});
    }
  } else {
    const Eigen::VectorXd v = detail::coordinate_profile(label);
    const Eigen::VectorXd rec = basis.mean + basis.components * (basis.components.transpose() * (v - basis.mean));
    for (int j = 0; j < kPcaAngles; ++j) out.push_back({rec[2 * j], rec[2 * j + 1]});
  }
  out = resample_polyline(out, static_cast<int>(label.size()));
  const auto oc = detail::centroid(out);
  for (auto& q : out) q = {q.x - oc.x + c.x, q.y - oc.y + c.y};
  return out;
}

enum class PerturbKind { Rotation, Translation, Scaling, Pca };

struct Perturbation {
  PerturbKind kind = PerturbKind::Rotation;
  double magnitude = 0.0;  // radians, px, factor, or k
  double direction = 0.0;  // translation heading, radians
};

inline Polyline perturb(const Polyline& label, const Perturbation& p, const PcaBasis* basis = nullptr) {
  if (label.size() < 2) throw InvalidInput("perturb: label needs at least 2 points");
  const auto c = detail::centroid(label);
  Polyline out = label;
  switch (p.kind) {
    case PerturbKind::Rotation: {
      const double cs = std::cos(p.magnitude), sn = std::sin(p.magnitude);
      for (auto& q : out) {
        const double dx = q.x - c.x, dy = q.y - c.y;
        q = {c.x + cs * dx - sn * dy, c.y + sn * dx + cs * dy};
      }
      break;
    }
    case PerturbKind::Translation: {
      const double dx = p.magnitude * std::cos(p.direction), dy = p.magnitude * std::sin(p.direction);
      for (auto& q : out) q = {q.x + dx, q.y + dy};
      break;
    }
    case PerturbKind::Scaling:
      for (auto& q : out) q = {c.x + p.magnitude * (q.x - c.x), c.y + p.magnitude * (q.y - c.y)};
      break;
    case PerturbKind::Pca: {
      if (!basis) throw InvalidInput("perturb: PCA perturbation needs a basis");
      const int k = static_cast<int>(std::lround(p.magnitude));
      if (k < 0 || k > basis->k()) throw InvalidInput("perturb: k larger than the basis");
      PcaBasis truncated = *basis;
      truncated.components = basis->components.leftCols(k);
      truncated.variances = basis->variances.head(k);
      out = pca_project(label, truncated);
      break;
    }
  }
  return out;
}

/// Chord between the label's endpoints.
inline Polyline straight_line(const Polyline& label) { return {label.front(), label.back()}; }

}  // namespace sprefine

#endif
