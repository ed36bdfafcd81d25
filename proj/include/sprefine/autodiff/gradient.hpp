#ifndef SPREFINE_AUTODIFF_GRADIENT_HPP
#define SPREFINE_AUTODIFF_GRADIENT_HPP

#include <cmath>
#include <string>
#include <vector>

#include "sprefine/objective.hpp"
#include "sprefine/parameters.hpp"

namespace sprefine {

/// d(loss)/d(theta) for every entry of the flat parameter vector.
struct GradientVector {
  ParamLayout layout;
  std::vector<double> values;

  double norm_inf() const {
    double m = 0.0;
    for (double v : values) m = std::max(m, std::abs(v));
    return m;
  }
};

struct Evaluation {
  double total = 0.0;
  double recon = 0.0;
  double reg = 0.0;
  std::vector<double> grad;  // empty unless requested
};

namespace detail {

inline void check_finite_params(const ParamLayout& layout, const std::vector<double>& theta) {
  for (const auto& s : layout.slices())
    for (std::size_t i = 0; i < s.size; ++i)
      if (!std::isfinite(theta[s.offset + i]))
        throw NumericalError("non-finite parameter in group '" + std::string(group_name(s.group)) + "'");
}

}  // namespace detail

/// Forward pass and, when `mask` is non-empty, a single reverse sweep. Masked
/// entries get exactly zero gradient. `seed` scales the loss being
/// differentiated.
inline Evaluation evaluate(const RenderContext& ctx, const ParamLayout& layout, const std::vector<double>& theta,
                           const Image& observed, const Priors& priors, const RegWeights& lambda,
                           const ParamMask& mask = {}, double seed = 1.0) {
  if (theta.size() != layout.size()) throw InvalidInput("evaluate: parameter vector does not match layout");
  detail::check_finite_params(layout, theta);
  ad::Tape tape;
  const auto sv = make_scene_vars(tape, layout, theta, mask);
  const auto lv = loss_on_tape(ctx, sv, observed, priors, lambda);
  Evaluation e{lv.total.scalar(), lv.recon.scalar(), lv.reg.scalar(), {}};
  if (!std::isfinite(e.recon)) throw NumericalError("non-finite reconstruction loss");
  if (!std::isfinite(e.reg)) throw NumericalError("non-finite regularizer");
  if (mask.empty()) return e;
  tape.backward(lv.total, seed);
  e.grad.assign(layout.size(), 0.0);
  // Scene vars were created slice by slice in layout order, so variable i is slice i.
  for (std::size_t k = 0; k < layout.slices().size(); ++k) {
    const auto& s = layout.slices()[k];
    const auto g = tape.grad(ad::Var{&tape, static_cast<std::uint32_t>(k)});
    if (g.empty()) continue;
    for (std::size_t i = 0; i < s.size; ++i) {
      if (!mask[s.offset + i]) continue;
      if (!std::isfinite(g[i]))
        throw NumericalError("non-finite gradient in group '" + std::string(group_name(s.group)) + "'");
      e.grad[s.offset + i] = g[i];
    }
  }
  return e;
}

struct LossAndGrad {
  double loss = 0.0;
  GradientVector grads;
};

inline LossAndGrad value_and_grad(const Image& observed, const Scene& scene, const Priors& priors,
                                  const RegWeights& lambda, const ParamMask& mask = {}, double seed = 1.0) {
  validate(priors, scene.chains.size());
  validate(lambda);
  const RenderContext ctx(scene);
  const ParamLayout layout(scene);
  const ParamMask m = mask.empty() ? ParamMask(layout.size(), true) : mask;
  if (m.size() != layout.size()) throw InvalidInput("value_and_grad: mask does not match layout");
  auto e = evaluate(ctx, layout, pack(scene), observed, priors, lambda, m, seed);
  return {e.total, {layout, std::move(e.grad)}};
}

}  // namespace sprefine

#endif
