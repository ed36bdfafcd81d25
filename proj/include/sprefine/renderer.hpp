#ifndef SPREFINE_RENDERER_HPP
#define SPREFINE_RENDERER_HPP

// Differentiable rasterization of knot chains.
//
// Each chain is sampled at M uniform parameters; every sample splats a copy
// of one shared radially symmetric blob, scaled by W * r_w(s). Per-chain
// images are mixed by alpha * sum + (1 - alpha) * max, a planar background is
// added and the result goes through a learned 3x3 filter.
//
// Conventions: pixel (row i, col j) is centred at (x = j, y = i). The blob
// grid is G x G and spans [-3, 3]^2 blob units; one blob unit covers `scale`
// pixels on the canvas. Blob samples outside the grid read as zero, so a
// splat reaches (3 + h) * scale pixels, h being the grid step in blob units.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <vector>

#include "sprefine/autodiff/ops.hpp"
#include "sprefine/autodiff/tape.hpp"
#include "sprefine/geometry.hpp"
#include "sprefine/image.hpp"

namespace sprefine {

inline constexpr double kBlobRadius = 3.0;
inline constexpr double kScaleFloor = 1e-3;
inline constexpr int kDefaultProfileKnots = 8;
inline constexpr int kDefaultGridSize = 15;
inline constexpr int kDefaultSamplesPerSpline = 128;

/// Radial profile f over z = exp(-r), as P natural-spline knots on [0, 1].
struct BlobModel {
  std::vector<double> profile;
  int grid_size = kDefaultGridSize;

  /// f(z) = amplitude * z, i.e. an exp(-r) blob.
  static BlobModel exponential(double amplitude = 1.0, int knots = kDefaultProfileKnots,
                               int grid = kDefaultGridSize) {
    BlobModel b;
    b.grid_size = grid;
    for (double z : uniform_parameters(knots)) b.profile.push_back(amplitude * z);
    return b;
  }
  bool operator==(const BlobModel&) const = default;
};

/// Planar intensity: base + g_x (j - c) / RES + g_y (i - c) / RES with
/// c = (RES - 1) / 2, so the pixel mean equals `base`.
struct BackgroundModel {
  double base = 0.0;
  double grad_x = 0.0;
  double grad_y = 0.0;
  bool operator==(const BackgroundModel&) const = default;
};

struct CompositeParams {
  double mix_logit = 0.0;
  double mix() const { return ad::sigmoid(mix_logit); }
  bool operator==(const CompositeParams&) const = default;
};

/// Row-major 3x3 correlation weights.
struct ConvKernel {
  std::array<double, 9> weights{0, 0, 0, 0, 1, 0, 0, 0, 0};
  static ConvKernel identity() { return {}; }
  bool operator==(const ConvKernel&) const = default;
};

struct Scene {
  std::vector<KnotChain> chains;
  double width = 2.0;  // W, pixels per blob unit at w = 1
  BlobModel blob = BlobModel::exponential();
  BackgroundModel background;
  CompositeParams composite;
  ConvKernel kernel;
  int resolution = 64;
  int samples_per_spline = kDefaultSamplesPerSpline;
  bool operator==(const Scene&) const = default;
};

// ---------------------------------------------------------------------------
// Plain kernels

/// Row-major G^2 x P matrix mapping profile knots to blob pixels.
inline Matrix blob_basis(int profile_knots, int grid) {
  if (grid < 3 || grid % 2 == 0) throw InvalidInput("blob grid size must be odd and >= 3");
  const double c = (grid - 1) / 2.0;
  const double h = kBlobRadius / c;
  std::vector<double> z(static_cast<std::size_t>(grid) * grid);
  for (int i = 0; i < grid; ++i)
    for (int j = 0; j < grid; ++j) {
      // Integer offsets keep the radius bit-identical under the grid symmetries.
      const double di = i - c, dj = j - c;
      z[static_cast<std::size_t>(i) * grid + j] = std::exp(-h * std::sqrt(di * di + dj * dj));
    }
  return natural_spline_basis(profile_knots, z);
}

inline Image blob_image(const BlobModel& blob) {
  if (blob.profile.size() < 2) throw InvalidInput("blob profile needs at least 2 knots");
  const int g = blob.grid_size;
  const auto basis = blob_basis(static_cast<int>(blob.profile.size()), g);
  Image img(g, g);
  for (int r = 0; r < basis.rows; ++r) {
    double s = 0.0;
    for (int k = 0; k < basis.cols; ++k) s += basis(r, k) * blob.profile[k];
    img.data[r] = s;
  }
  return img;
}

namespace detail {

struct SplatFrame {
  double center;  // c = (G - 1) / 2
  double step;    // canvas pixels per blob grid step
  int x0, x1, y0, y1;
  bool empty;
};

inline SplatFrame splat_frame(int grid, double cx, double cy, double scale, int rows, int cols) {
  SplatFrame f{};
  f.center = (grid - 1) / 2.0;
  f.step = scale * kBlobRadius / f.center;
  const double reach = (f.center + 1.0) * f.step;
  const double lx = std::ceil(cx - reach), hx = std::floor(cx + reach);
  const double ly = std::ceil(cy - reach), hy = std::floor(cy + reach);
  f.empty = hx < 0.0 || lx > cols - 1 || hy < 0.0 || ly > rows - 1;
  if (f.empty) return f;
  f.x0 = static_cast<int>(std::max(lx, 0.0));
  f.x1 = static_cast<int>(std::min(hx, cols - 1.0));
  f.y0 = static_cast<int>(std::max(ly, 0.0));
  f.y1 = static_cast<int>(std::min(hy, rows - 1.0));
  return f;
}

inline double blob_at(std::span<const double> blob, int grid, int ix, int iy) {
  return (ix < 0 || iy < 0 || ix >= grid || iy >= grid) ? 0.0
                                                        : blob[static_cast<std::size_t>(iy) * grid + ix];
}

/// canvas += bilinear splat of the blob centred at (cx, cy).
inline void splat_forward(std::span<const double> blob, int grid, double cx, double cy, double scale,
                          std::span<double> canvas, int rows, int cols) {
  if (!std::isfinite(cx) || !std::isfinite(cy) || !std::isfinite(scale) || scale <= 0.0) {
    std::fill(canvas.begin(), canvas.end(), std::numeric_limits<double>::quiet_NaN());
    return;
  }
  const auto f = splat_frame(grid, cx, cy, scale, rows, cols);
  if (f.empty) return;
  const double inv = 1.0 / f.step;
  for (int r = f.y0; r <= f.y1; ++r) {
    const double gy = (r - cy) * inv + f.center;
    if (gy <= -1.0 || gy >= grid) continue;
    const double fly = std::floor(gy);
    const int iy = static_cast<int>(fly);
    const double ty = gy - fly;
    double* row = &canvas[static_cast<std::size_t>(r) * cols];
    for (int q = f.x0; q <= f.x1; ++q) {
      const double gx = (q - cx) * inv + f.center;
      if (gx <= -1.0 || gx >= grid) continue;
      const double flx = std::floor(gx);
      const int ix = static_cast<int>(flx);
      const double tx = gx - flx;
      const double b00 = blob_at(blob, grid, ix, iy), b10 = blob_at(blob, grid, ix + 1, iy);
      const double b01 = blob_at(blob, grid, ix, iy + 1), b11 = blob_at(blob, grid, ix + 1, iy + 1);
      row[q] += (1.0 - ty) * ((1.0 - tx) * b00 + tx * b10) + ty * ((1.0 - tx) * b01 + tx * b11);
    }
  }
}

struct SplatGrad {
  double cx = 0.0, cy = 0.0, scale = 0.0;
};

/// Reverse of splat_forward for upstream canvas gradient `g`. Accumulates the
/// blob gradient into `gblob` when non-empty.
inline SplatGrad splat_backward(std::span<const double> blob, int grid, double cx, double cy, double scale,
                                std::span<const double> g, int rows, int cols, std::span<double> gblob) {
  SplatGrad out;
  const auto f = splat_frame(grid, cx, cy, scale, rows, cols);
  if (f.empty) return out;
  const double inv = 1.0 / f.step;
  for (int r = f.y0; r <= f.y1; ++r) {
    const double gy = (r - cy) * inv + f.center;
    if (gy <= -1.0 || gy >= grid) continue;
    const double fly = std::floor(gy);
    const int iy = static_cast<int>(fly);
    const double ty = gy - fly;
    const double* grow = &g[static_cast<std::size_t>(r) * cols];
    for (int q = f.x0; q <= f.x1; ++q) {
      const double up = grow[q];
      if (up == 0.0) continue;
      const double gx = (q - cx) * inv + f.center;
      if (gx <= -1.0 || gx >= grid) continue;
      const double flx = std::floor(gx);
      const int ix = static_cast<int>(flx);
      const double tx = gx - flx;
      const double b00 = blob_at(blob, grid, ix, iy), b10 = blob_at(blob, grid, ix + 1, iy);
      const double b01 = blob_at(blob, grid, ix, iy + 1), b11 = blob_at(blob, grid, ix + 1, iy + 1);
      const double dtx = (1.0 - ty) * (b10 - b00) + ty * (b11 - b01);
      const double dty = (1.0 - tx) * (b01 - b00) + tx * (b11 - b10);
      out.cx -= up * dtx * inv;
      out.cy -= up * dty * inv;
      out.scale -= up * (dtx * (gx - f.center) + dty * (gy - f.center)) / scale;
      if (!gblob.empty()) {
        auto put = [&](int x, int y, double wgt) {
          if (x >= 0 && y >= 0 && x < grid && y < grid) gblob[static_cast<std::size_t>(y) * grid + x] += up * wgt;
        };
        put(ix, iy, (1.0 - tx) * (1.0 - ty));
        put(ix + 1, iy, tx * (1.0 - ty));
        put(ix, iy + 1, (1.0 - tx) * ty);
        put(ix + 1, iy + 1, tx * ty);
      }
    }
  }
  return out;
}

inline std::size_t clamp_index(int v, int n) { return static_cast<std::size_t>(std::clamp(v, 0, n - 1)); }

inline void conv3x3_forward(std::span<const double> img, int rows, int cols, std::span<const double> k,
                            std::span<double> out) {
  for (int i = 0; i < rows; ++i) {
    const std::size_t rr[3] = {clamp_index(i - 1, rows), clamp_index(i, rows), clamp_index(i + 1, rows)};
    for (int j = 0; j < cols; ++j) {
      const std::size_t cc[3] = {clamp_index(j - 1, cols), clamp_index(j, cols), clamp_index(j + 1, cols)};
      double s = 0.0;
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) s += k[a * 3 + b] * img[rr[a] * cols + cc[b]];
      out[static_cast<std::size_t>(i) * cols + j] = s;
    }
  }
}

}  // namespace detail

/// Adds a scaled, bilinearly resampled copy of the blob image to the canvas.
inline Image splat(const Image& blob_img, Point2 center, double scale, Image canvas) {
  if (blob_img.rows != blob_img.cols) throw InvalidInput("splat: blob image must be square");
  if (!(scale > 0.0)) throw InvalidInput("splat: scale must be positive");
  detail::splat_forward(blob_img.span(), blob_img.rows, center.x, center.y, scale, canvas.span(), canvas.rows,
                        canvas.cols);
  return canvas;
}

inline Image render_spline(const SplineCurve& curve, const BlobModel& blob, double width, int samples,
                           int resolution) {
  const auto bimg = blob_image(blob);
  Image canvas(resolution, resolution);
  for (double s : uniform_parameters(samples)) {
    const auto p = curve.eval(s);
    const double scale = std::max(width * p.w, kScaleFloor);
    detail::splat_forward(bimg.span(), bimg.rows, p.x, p.y, scale, canvas.span(), resolution, resolution);
  }
  return canvas;
}

/// alpha * (pixelwise sum) + (1 - alpha) * (pixelwise max).
inline Image composite(const std::vector<Image>& images, double alpha) {
  if (images.empty()) throw InvalidInput("composite: empty image sequence");
  Image sum = images.front(), mx = images.front();
  for (std::size_t k = 1; k < images.size(); ++k) {
    if (!images[k].same_shape(sum)) throw InvalidInput("composite: shape mismatch");
    for (std::size_t i = 0; i < sum.size(); ++i) {
      sum.data[i] += images[k].data[i];
      mx.data[i] = std::max(mx.data[i], images[k].data[i]);
    }
  }
  for (std::size_t i = 0; i < sum.size(); ++i) sum.data[i] = alpha * sum.data[i] + (1.0 - alpha) * mx.data[i];
  return sum;
}

inline Matrix background_basis(int resolution) {
  Matrix m(resolution * resolution, 3);
  const double c = (resolution - 1) / 2.0;
  for (int i = 0; i < resolution; ++i)
    for (int j = 0; j < resolution; ++j) {
      const int r = i * resolution + j;
      m(r, 0) = 1.0;
      m(r, 1) = (j - c) / resolution;
      m(r, 2) = (i - c) / resolution;
    }
  return m;
}

inline Image render_background(const BackgroundModel& bg, int resolution) {
  Image img(resolution, resolution);
  const double c = (resolution - 1) / 2.0;
  for (int i = 0; i < resolution; ++i)
    for (int j = 0; j < resolution; ++j)
      img(i, j) = 1.0 * bg.base + ((j - c) / resolution) * bg.grad_x + ((i - c) / resolution) * bg.grad_y;
  return img;
}

/// Same-size 3x3 correlation with replicate padding.
inline Image conv3x3(const Image& img, const ConvKernel& kernel) {
  if (img.rows < 3 || img.cols < 3) throw InvalidInput("conv3x3: image must be at least 3x3");
  Image out(img.rows, img.cols);
  detail::conv3x3_forward(img.span(), img.rows, img.cols, kernel.weights, out.span());
  return out;
}

// ---------------------------------------------------------------------------
// Tape primitives

namespace ad {

/// Splats M points (xs, ys, scales) of the blob image onto a rows x cols
/// canvas. Differentiable in every input.
inline Var splat_points(Var xs, Var ys, Var scales, Var blob, int grid, int rows, int cols) {
  const std::size_t m = xs.size();
  if (ys.size() != m || scales.size() != m) throw InvalidInput("splat_points: size mismatch");
  if (blob.size() != static_cast<std::size_t>(grid) * grid) throw InvalidInput("splat_points: bad blob size");
  std::vector<double> canvas(static_cast<std::size_t>(rows) * cols, 0.0);
  {
    const auto vx = xs.value(), vy = ys.value(), vs = scales.value(), vb = blob.value();
    for (std::size_t j = 0; j < m; ++j) sprefine::detail::splat_forward(vb, grid, vx[j], vy[j], vs[j], canvas, rows, cols);
  }
  return xs.tape->record(std::move(canvas), {xs, ys, scales, blob},
                         [=](Tape& t, std::span<const double> g) {
                           const auto vx = t.value(xs), vy = t.value(ys), vs = t.value(scales), vb = t.value(blob);
                           auto gx = t.accumulator(xs), gy = t.accumulator(ys), gs = t.accumulator(scales);
                           auto gb = t.accumulator(blob);
                           const bool pos = !gx.empty() || !gy.empty() || !gs.empty();
                           if (!pos && gb.empty()) return;
                           for (std::size_t j = 0; j < m; ++j) {
                             const auto d = sprefine::detail::splat_backward(vb, grid, vx[j], vy[j], vs[j], g, rows,
                                                                             cols, gb);
                             if (!gx.empty()) gx[j] += d.cx;
                             if (!gy.empty()) gy[j] += d.cy;
                             if (!gs.empty()) gs[j] += d.scale;
                           }
                         });
}

inline Var conv3x3(Var img, Var kernel, int rows, int cols) {
  if (kernel.size() != 9) throw InvalidInput("conv3x3: kernel must have 9 weights");
  std::vector<double> out(img.size());
  sprefine::detail::conv3x3_forward(img.value(), rows, cols, kernel.value(), out);
  return img.tape->record(std::move(out), {img, kernel}, [=](Tape& t, std::span<const double> g) {
    const auto vi = t.value(img), vk = t.value(kernel);
    auto gi = t.accumulator(img);
    auto gk = t.accumulator(kernel);
    using sprefine::detail::clamp_index;
    for (int i = 0; i < rows; ++i) {
      const std::size_t rr[3] = {clamp_index(i - 1, rows), clamp_index(i, rows), clamp_index(i + 1, rows)};
      for (int j = 0; j < cols; ++j) {
        const std::size_t cc[3] = {clamp_index(j - 1, cols), clamp_index(j, cols), clamp_index(j + 1, cols)};
        const double up = g[static_cast<std::size_t>(i) * cols + j];
        for (int a = 0; a < 3; ++a)
          for (int b = 0; b < 3; ++b) {
            const std::size_t src = rr[a] * cols + cc[b];
            if (!gi.empty()) gi[src] += vk[a * 3 + b] * up;
            if (!gk.empty()) gk[a * 3 + b] += vi[src] * up;
          }
      }
    }
  });
}

}  // namespace ad

// ---------------------------------------------------------------------------
// Scene pipeline on a tape

/// Tape handles for every trainable group of a scene, in raw (unconstrained)
/// form: per-knot width logits, softplus-inverse of W, mix logit.
struct ChainVars {
  ad::Var x, y, w_raw;
};

struct SceneVars {
  std::vector<ChainVars> chains;
  ad::Var width_raw, blob, background, kernel, mix_logit;
};

/// Constant linear maps shared by every evaluation of scenes of one shape.
class RenderContext {
 public:
  RenderContext(const Scene& scene, int quadrature = kDefaultQuadratureCount)
      : resolution_(scene.resolution),
        grid_(scene.blob.grid_size),
        samples_(scene.samples_per_spline),
        quadrature_(quadrature) {
    if (resolution_ < grid_) throw InvalidInput("scene resolution must be at least the blob grid size");
    if (samples_ < 1) throw InvalidInput("samples_per_spline must be positive");
    blob_ = std::make_shared<const Matrix>(blob_basis(static_cast<int>(scene.blob.profile.size()), grid_));
    background_ = std::make_shared<const Matrix>(background_basis(resolution_));
    for (const auto& c : scene.chains) {
      const int k = static_cast<int>(c.size());
      if (k < 2) throw InvalidInput("every chain needs K >= 2 knots");
      if (!width_.count(k)) {
        auto b = natural_spline_basis(k, uniform_parameters(samples_));
        width_[k] = std::make_shared<const Matrix>(b);
        for (auto& v : b.data) v *= resolution_;
        position_[k] = std::make_shared<const Matrix>(std::move(b));
        auto l = natural_spline_basis(k, uniform_parameters(quadrature_));
        for (auto& v : l.data) v *= resolution_;
        length_[k] = std::make_shared<const Matrix>(std::move(l));
      }
    }
  }

  int resolution() const { return resolution_; }
  int grid() const { return grid_; }
  int samples() const { return samples_; }
  int quadrature() const { return quadrature_; }
  std::shared_ptr<const Matrix> blob() const { return blob_; }
  std::shared_ptr<const Matrix> background() const { return background_; }
  /// Knot positions (frame units) to M sample positions (pixels).
  std::shared_ptr<const Matrix> position_basis(std::size_t k) const { return lookup(position_, k); }
  /// Knot widths to M sample widths.
  std::shared_ptr<const Matrix> width_basis(std::size_t k) const { return lookup(width_, k); }
  /// Knot positions (frame units) to M_L quadrature positions (pixels).
  std::shared_ptr<const Matrix> length_basis(std::size_t k) const { return lookup(length_, k); }

 private:
  static std::shared_ptr<const Matrix> lookup(const std::map<int, std::shared_ptr<const Matrix>>& m, std::size_t k) {
    const auto it = m.find(static_cast<int>(k));
    if (it == m.end()) throw InvalidInput("RenderContext: chain knot count not prepared");
    return it->second;
  }

  int resolution_, grid_, samples_, quadrature_;
  std::shared_ptr<const Matrix> blob_, background_;
  std::map<int, std::shared_ptr<const Matrix>> position_, width_, length_;
};

struct RenderVars {
  ad::Var image;                       // final reconstruction
  std::vector<ad::Var> spline_images;  // one per chain, before compositing
  ad::Var blob_image;
  ad::Var width;  // W
};

inline RenderVars render_on_tape(const RenderContext& ctx, const SceneVars& sv) {
  using namespace ad;
  if (sv.chains.empty()) throw InvalidInput("render: scene has no chains");
  const int res = ctx.resolution();
  RenderVars out;
  out.blob_image = linear(ctx.blob(), sv.blob);
  out.width = softplus(sv.width_raw);
  for (const auto& c : sv.chains) {
    const auto basis = ctx.position_basis(c.x.size());
    const Var xs = linear(basis, c.x);
    const Var ys = linear(basis, c.y);
    const Var ws = linear(ctx.width_basis(c.x.size()), sigmoid(c.w_raw));
    const Var scales = clamp_min(mul(ws, out.width), kScaleFloor);
    out.spline_images.push_back(splat_points(xs, ys, scales, out.blob_image, ctx.grid(), res, res));
  }
  const Var alpha = sigmoid(sv.mix_logit);
  Var mixed = out.spline_images.front();
  if (out.spline_images.size() > 1) {
    const Var s = add_n(out.spline_images);
    const Var m = elementwise_max(out.spline_images);
    mixed = add(mul(s, alpha), mul(m, affine(alpha, -1.0, 1.0)));
  }
  const Var bg = linear(ctx.background(), sv.background);
  out.image = conv3x3(add(mixed, bg), sv.kernel, res, res);
  return out;
}

}  // namespace sprefine

#endif
