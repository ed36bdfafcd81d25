#ifndef SPREFINE_OBJECTIVE_HPP
#define SPREFINE_OBJECTIVE_HPP

// Reconstruction loss and the four-term regularizer
//   lambda1 sum_i (l_i - lbar_i)^2 + lambda2 sum_i C_i
//   + lambda3 sum_n (min_k w_k - wbar)^2 + lambda4 (W - Wbar)^2.
// Every loss value is produced by the same tape code, so plain evaluations and
// gradient evaluations agree bit for bit.

#include <vector>

#include "sprefine/autodiff/ops.hpp"
#include "sprefine/image.hpp"
#include "sprefine/parameters.hpp"
#include "sprefine/renderer.hpp"

namespace sprefine {

struct Priors {
  std::vector<double> bar_lengths;  // pixels, one per chain
  double bar_w = 0.5;
  double bar_W = 2.0;  // pixels
};

struct RegWeights {
  double length = 1e-4;     // lambda1, per px^2
  double curvature = 1e-2;  // lambda2
  double min_width = 0.1;   // lambda3
  double width = 1e-2;      // lambda4, per px^2

  static RegWeights zero() { return {0.0, 0.0, 0.0, 0.0}; }
};

inline void validate(const Priors& p, std::size_t chains) {
  if (p.bar_lengths.size() != chains) throw InvalidInput("priors must cover every chain");
  for (double l : p.bar_lengths)
    if (!(l >= 0.0) || !std::isfinite(l)) throw InvalidInput("prior lengths must be finite and non-negative");
  if (!(p.bar_W > 0.0)) throw InvalidInput("prior width W-bar must be positive");
  if (!(p.bar_w >= 0.0 && p.bar_w <= 1.0)) throw InvalidInput("prior w-bar must lie in [0, 1]");
}

inline void validate(const RegWeights& w) {
  if (w.length < 0 || w.curvature < 0 || w.min_width < 0 || w.width < 0)
    throw InvalidInput("regularization weights must be non-negative");
}

/// Mean over pixels of (Y - Yhat)^2.
inline double recon_loss(const Image& observed, const Image& rendered) {
  if (!observed.same_shape(rendered)) throw InvalidInput("recon_loss: shape mismatch");
  if (observed.empty()) throw InvalidInput("recon_loss: empty images");
  double s = 0.0;
  for (std::size_t i = 0; i < observed.size(); ++i) {
    const double d = rendered.data[i] - observed.data[i];
    s += d * d;
  }
  return s / static_cast<double>(observed.size());
}

struct LossVars {
  ad::Var total, recon, reg;
  RenderVars render;
};

struct ChainShapeVars {
  ad::Var length, curvature;
};

/// Arc length and curvature energy of a chain from M_L uniform samples.
inline ChainShapeVars chain_shape_on_tape(const RenderContext& ctx, const ChainVars& c) {
  using namespace ad;
  const auto basis = ctx.length_basis(c.x.size());
  const Var px = linear(basis, c.x);
  const Var py = linear(basis, c.y);
  const Var dx = diff(px), dy = diff(py);
  const Var length = sum(sqrt(add(square(dx), square(dy))));
  const Var curvature = mean(add(square(diff(dx)), square(diff(dy))));
  return {length, curvature};
}

inline ad::Var reg_on_tape(const RenderContext& ctx, const SceneVars& sv, const Priors& priors,
                           const RegWeights& lambda) {
  using namespace ad;
  Tape& t = *sv.width_raw.tape;
  std::vector<Var> len_terms, curv_terms, minw_terms;
  for (std::size_t i = 0; i < sv.chains.size(); ++i) {
    const auto& c = sv.chains[i];
    if (lambda.length != 0.0 || lambda.curvature != 0.0) {
      const auto shape = chain_shape_on_tape(ctx, c);
      len_terms.push_back(square(affine(shape.length, 1.0, -priors.bar_lengths[i])));
      curv_terms.push_back(shape.curvature);
    }
    minw_terms.push_back(square(affine(min_element(sigmoid(c.w_raw)), 1.0, -priors.bar_w)));
  }
  Var reg = t.constant({0.0});
  auto weighted = [&](const std::vector<Var>& v, double lam) {
    if (lam == 0.0 || v.empty()) return;
    reg = add(reg, affine(v.size() == 1 ? v.front() : add_n(v), lam));
  };
  weighted(len_terms, lambda.length);
  weighted(curv_terms, lambda.curvature);
  weighted(minw_terms, lambda.min_width);
  if (lambda.width != 0.0)
    reg = add(reg, affine(square(affine(softplus(sv.width_raw), 1.0, -priors.bar_W)), lambda.width));
  return reg;
}

inline LossVars loss_on_tape(const RenderContext& ctx, const SceneVars& sv, const Image& observed,
                             const Priors& priors, const RegWeights& lambda) {
  using namespace ad;
  Tape& t = *sv.width_raw.tape;
  const int res = ctx.resolution();
  if (observed.rows != res || observed.cols != res) throw InvalidInput("observed image does not match scene resolution");
  LossVars out;
  out.render = render_on_tape(ctx, sv);
  const Var target = t.constant(observed.data);
  out.recon = mean(square(sub(out.render.image, target)));
  out.reg = reg_on_tape(ctx, sv, priors, lambda);
  out.total = add(out.recon, out.reg);
  return out;
}

namespace detail {

struct SceneTape {
  ad::Tape tape;
  ParamLayout layout;
  SceneVars vars;
};

inline void prepare_constant(SceneTape& st, const Scene& scene) {
  st.layout = ParamLayout(scene);
  st.vars = make_scene_vars(st.tape, st.layout, pack(scene), {});
}

}  // namespace detail

inline Image render_scene(const Scene& scene) {
  const RenderContext ctx(scene);
  detail::SceneTape st;
  detail::prepare_constant(st, scene);
  const auto rv = render_on_tape(ctx, st.vars);
  return Image(scene.resolution, scene.resolution, std::vector<double>(rv.image.value().begin(), rv.image.value().end()));
}

/// Per-chain bodies, each passed through the scene's 3x3 filter on its own.
inline std::vector<Image> render_bodies(const Scene& scene) {
  const RenderContext ctx(scene);
  detail::SceneTape st;
  detail::prepare_constant(st, scene);
  const auto rv = render_on_tape(ctx, st.vars);
  std::vector<Image> out;
  for (const auto& img : rv.spline_images) {
    const auto v = ad::conv3x3(img, st.vars.kernel, scene.resolution, scene.resolution).value();
    out.emplace_back(scene.resolution, scene.resolution, std::vector<double>(v.begin(), v.end()));
  }
  return out;
}

inline double reg_loss(const Scene& scene, const Priors& priors, const RegWeights& lambda) {
  validate(priors, scene.chains.size());
  validate(lambda);
  const RenderContext ctx(scene);
  detail::SceneTape st;
  detail::prepare_constant(st, scene);
  return reg_on_tape(ctx, st.vars, priors, lambda).scalar();
}

inline double total_loss(const Image& observed, const Scene& scene, const Priors& priors, const RegWeights& lambda) {
  validate(priors, scene.chains.size());
  validate(lambda);
  const RenderContext ctx(scene);
  detail::SceneTape st;
  detail::prepare_constant(st, scene);
  return loss_on_tape(ctx, st.vars, observed, priors, lambda).total.scalar();
}

}  // namespace sprefine

#endif
