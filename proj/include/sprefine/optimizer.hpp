#ifndef SPREFINE_OPTIMIZER_HPP
#define SPREFINE_OPTIMIZER_HPP

// Three-phase refinement:
//   1. background only, Adam(lr1);
//   2. everything except blob and kernel, Adam(lr2) with cosine annealing and
//      decaying gradient noise, run for S seeds from the phase-1 result; the
//      seed with the lowest reconstruction loss wins;
//   3. everything, Adam(lr3), no noise; the lowest-total-loss iterate is kept.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <mutex>
#include <numbers>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "sprefine/appearance.hpp"
#include "sprefine/autodiff/gradient.hpp"
#include "sprefine/random.hpp"

namespace sprefine {

struct AdamState {
  std::vector<double> m, v;
  long step = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  AdamState() = default;
  explicit AdamState(std::size_t n) : m(n, 0.0), v(n, 0.0) {}
};

/// One bias-corrected Adam update. Entries outside `mask` (when given) keep
/// their parameter and moments unchanged.
inline void adam_step(AdamState& st, std::vector<double>& params, std::span<const double> grads, double lr,
                      const ParamMask& mask = {}, const ParamLayout* layout = nullptr) {
  const auto n = params.size();
  if (grads.size() != n || st.m.size() != n || st.v.size() != n || (!mask.empty() && mask.size() != n))
    throw InvalidInput("adam_step: size mismatch");
  for (std::size_t i = 0; i < n; ++i) {
    if ((mask.empty() || mask[i]) && !std::isfinite(grads[i])) {
      std::string where = "index " + std::to_string(i);
      if (layout) {
        const auto groups = layout->entry_groups();
        where = "group '" + std::string(group_name(groups[i])) + "'";
      }
      throw JobError("non-finite gradient in " + where);
    }
  }
  ++st.step;
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask.empty() && !mask[i]) continue;
    st.m[i] = st.beta1 * st.m[i] + (1.0 - st.beta1) * grads[i];
    st.v[i] = st.beta2 * st.v[i] + (1.0 - st.beta2) * grads[i] * grads[i];
    params[i] -= lr * (st.m[i] / c1) / (std::sqrt(st.v[i] / c2) + st.eps);
  }
}

inline double cosine_lr(double lr0, double t, double total) {
  if (total < 1.0) throw InvalidInput("cosine_lr: T must be >= 1");
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * std::clamp(t, 0.0, total) / total));
}

/// grads + N(0, sigma_t^2) with sigma_t = sigma0 exp(-t / tau). `scale`, when
/// non-empty, multiplies sigma_t per entry.
inline std::vector<double> noisy_grad(std::span<const double> grads, double t, double sigma0, double tau,
                                      RandomStream& rng, std::span<const double> scale = {}) {
  if (sigma0 < 0.0) throw InvalidInput("noisy_grad: sigma0 must be non-negative");
  std::vector<double> out(grads.begin(), grads.end());
  if (sigma0 == 0.0) return out;
  const double sigma = tau > 0.0 ? sigma0 * std::exp(-t / tau) : 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += sigma * (scale.empty() ? 1.0 : scale[i]) * rng.normal();
  return out;
}

struct OptimizerConfig {
  int phase1_steps = 100;
  int phase2_steps = 400;
  int phase3_steps = 200;
  double phase1_lr = 1e-2;
  double phase2_lr = 1e-2;
  double phase3_lr = 1e-4;
  int seeds = 4;
  double noise_sigma = 1e-3;  // relative to the per-slice RMS gradient at phase-2 start
  double noise_tau = 0.0;     // 0 selects phase2_steps / 4
  std::uint64_t seed = 0;     // master seed
  int workers = 1;            // threads for phase-2 seeds
};

struct RefineConfig {
  OptimizerConfig optimizer;
  RegWeights lambda;
  double bar_w = 0.5;
  double bar_W = 0.0;  // 0: estimated from the image
  int knots = 12;      // knots per chain after resampling; 0 keeps the input
  double init_w = 0.75;
  double init_mix_logit = 0.0;
  int samples_per_spline = kDefaultSamplesPerSpline;
  int grid_size = kDefaultGridSize;
  int profile_knots = kDefaultProfileKnots;
  int width_samples = 100;  // length of the reported width profiles
};

inline void validate(const RefineConfig& c) {
  const auto& o = c.optimizer;
  if (o.phase1_steps < 0 || o.phase2_steps < 0 || o.phase3_steps < 0) throw InvalidInput("phase steps must be >= 0");
  if (o.seeds < 1) throw InvalidInput("seeds must be >= 1");
  if (o.noise_sigma < 0.0 || o.noise_tau < 0.0) throw InvalidInput("noise parameters must be >= 0");
  if (!(o.phase1_lr >= 0 && o.phase2_lr >= 0 && o.phase3_lr >= 0)) throw InvalidInput("learning rates must be >= 0");
  validate(c.lambda);
  if (!(c.bar_w >= 0.0 && c.bar_w <= 1.0)) throw InvalidInput("bar_w must lie in [0, 1]");
  if (c.bar_W < 0.0) throw InvalidInput("bar_W must be >= 0");
  if (c.knots == 1 || c.knots < 0) throw InvalidInput("knots must be 0 or >= 2");
  if (!(c.init_w > 0.0 && c.init_w < 1.0)) throw InvalidInput("init_w must lie in (0, 1)");
  if (c.samples_per_spline < 1 || c.width_samples < 2) throw InvalidInput("sample counts too small");
  if (c.grid_size < 3 || c.grid_size % 2 == 0) throw InvalidInput("grid_size must be odd and >= 3");
  if (c.profile_knots < 2) throw InvalidInput("profile_knots must be >= 2");
}

/// Per-step callback payload. With several workers, phase-2 calls may come
/// from different threads.
struct StepInfo {
  int phase = 0;
  int seed = -1;  // phase 2 only
  int step = 0;
  int steps = 0;
  double loss = 0.0;
  std::span<const double> theta;
  const ParamLayout* layout = nullptr;
};
using StepObserver = std::function<void(const StepInfo&)>;

struct SeedResult {
  int seed = 0;
  bool diverged = false;
  std::string error;
  double recon = 0.0;
  double total = 0.0;
};

struct WidthProfile {
  std::vector<double> s;
  std::vector<double> width;  // W * r_w(s), pixels
};

struct RefinementReport {
  Scene scene;  // refined scene
  std::vector<KnotChain> chains;
  Priors priors;
  AppearanceEstimate appearance;
  std::vector<double> phase1_loss;
  std::vector<std::vector<double>> phase2_loss;  // per seed
  std::vector<double> phase3_loss;
  std::vector<SeedResult> seeds;
  int best_seed = -1;
  double final_recon = 0.0;
  double final_reg = 0.0;
  double final_total = 0.0;
  double width = 0.0;  // W
  std::vector<WidthProfile> widths;
};

struct InitialScene {
  Scene scene;
  Priors priors;
  AppearanceEstimate appearance;
};

/// Scene and priors at the start of phase 1.
inline InitialScene initial_scene(const Image& observed, const std::vector<KnotChain>& initial, const RefineConfig& cfg) {
  validate(cfg);
  if (initial.empty()) throw InvalidInput("refine: need at least one chain");
  if (observed.rows != observed.cols) throw InvalidInput("refine: image must be square");
  if (observed.rows < cfg.grid_size) throw InvalidInput("refine: image smaller than the blob grid");
  if (!all_finite(observed.span())) throw InvalidInput("refine: image has non-finite pixels");
  InitialScene out;
  Scene& s = out.scene;
  s.resolution = observed.rows;
  s.samples_per_spline = cfg.samples_per_spline;
  for (const auto& c : initial) {
    if (c.size() < 2) throw InvalidInput("refine: every chain needs K >= 2 knots");
    for (const auto& k : c.knots)
      if (!std::isfinite(k.x) || !std::isfinite(k.y)) throw InvalidInput("refine: non-finite knot");
    KnotChain r = cfg.knots > 0 ? resample_chain(c, cfg.knots) : c;
    for (auto& k : r.knots) k.w = cfg.init_w;
    s.chains.push_back(std::move(r));
  }
  double total_length = 0.0;
  for (const auto& c : s.chains) {
    const double l = arc_length(fit_natural_cubic(c));
    out.priors.bar_lengths.push_back(l);
    total_length += l;
  }
  const auto reference = BlobModel::exponential(1.0, cfg.profile_knots, cfg.grid_size);
  const auto ridge = ridge_response(reference);
  out.appearance = estimate_appearance(observed, total_length, &ridge);
  const auto& a = out.appearance;

  double scale = ridge.fwhm > 0.0 ? a.fwhm_px / ridge.fwhm : 1.0;
  scale = std::clamp(scale, 0.5, s.resolution / 8.0);
  const double bar_W = cfg.bar_W > 0.0 ? cfg.bar_W : scale / cfg.init_w;
  s.width = bar_W;

  const double mean_length = std::max(total_length / static_cast<double>(s.chains.size()), 1.0);
  const double density = cfg.samples_per_spline / mean_length;  // samples per pixel
  const double amplitude = a.polarity * a.contrast / (density * scale * std::max(ridge.peak, 1e-12));
  s.blob = BlobModel::exponential(amplitude, cfg.profile_knots, cfg.grid_size);
  s.background = a.background;
  s.composite.mix_logit = cfg.init_mix_logit;
  out.priors.bar_w = cfg.bar_w;
  out.priors.bar_W = bar_W;
  return out;
}

inline WidthProfile width_profile(const Scene& scene, std::size_t chain, int count) {
  const auto curve = fit_natural_cubic(scene.chains.at(chain));
  WidthProfile p;
  for (double s : uniform_parameters(count)) {
    p.s.push_back(s);
    p.width.push_back(scene.width * curve.eval(s).w);
  }
  return p;
}

namespace detail {

struct Problem {
  const Image& observed;
  const RenderContext& ctx;
  const ParamLayout& layout;
  const Priors& priors;
  const RegWeights& lambda;
  const StepObserver& observer;

  Evaluation eval(const std::vector<double>& theta, const ParamMask& mask) const {
    return evaluate(ctx, layout, theta, observed, priors, lambda, mask);
  }
  void notify(int phase, int seed, int step, int steps, double loss, const std::vector<double>& theta) const {
    if (observer) observer({phase, seed, step, steps, loss, theta, &layout});
  }
};

/// Per-entry RMS of `grad` over the active entries of its slice (one
/// coordinate of one chain, or one non-spline group), so knot widths get noise
/// on their own gradient scale rather than that of the positions.
inline std::vector<double> slice_rms(const ParamLayout& layout, const std::vector<double>& grad, const ParamMask& mask) {
  std::vector<double> out(grad.size(), 0.0);
  for (const auto& sl : layout.slices()) {
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = sl.offset; i < sl.offset + sl.size; ++i)
      if (mask[i]) {
        sum += grad[i] * grad[i];
        ++n;
      }
    if (n == 0) continue;
    const double rms = std::sqrt(sum / static_cast<double>(n));
    for (std::size_t i = sl.offset; i < sl.offset + sl.size; ++i)
      if (mask[i]) out[i] = rms;
  }
  return out;
}

struct SeedRun {
  SeedResult result;
  std::vector<double> theta;
  std::vector<double> history;
};

inline SeedRun run_phase2(const Problem& pb, const std::vector<double>& start, const ParamMask& mask,
                          const OptimizerConfig& oc, int seed) {
  SeedRun run;
  run.result.seed = seed;
  run.theta = start;
  const int steps = oc.phase2_steps;
  const double tau = oc.noise_tau > 0.0 ? oc.noise_tau : std::max(steps, 1) / 4.0;
  RandomStream rng(mix_key(oc.seed, static_cast<std::uint64_t>(seed) + 1));
  try {
    AdamState st(start.size());
    std::vector<double> scale;
    for (int t = 0; t < steps; ++t) {
      const auto e = pb.eval(run.theta, mask);
      run.history.push_back(e.total);
      pb.notify(2, seed, t, steps, e.total, run.theta);
      if (scale.empty()) scale = slice_rms(pb.layout, e.grad, mask);
      const auto g = noisy_grad(e.grad, t, oc.noise_sigma, tau, rng, scale);
      adam_step(st, run.theta, g, cosine_lr(oc.phase2_lr, t, steps), mask, &pb.layout);
    }
    const auto e = pb.eval(run.theta, {});
    run.history.push_back(e.total);
    pb.notify(2, seed, steps, steps, e.total, run.theta);
    run.result.recon = e.recon;
    run.result.total = e.total;
  } catch (const std::exception& ex) {
    run.result.diverged = true;
    run.result.error = ex.what();
  }
  return run;
}

}  // namespace detail

/// Refines `initial` chains against `observed`. Throws JobError when every
/// phase-2 seed diverges or phase 1 or 3 fails.
inline RefinementReport refine(const Image& observed, const std::vector<KnotChain>& initial, const RefineConfig& cfg,
                               const StepObserver& observer = {}) {
  auto init = initial_scene(observed, initial, cfg);
  const auto& oc = cfg.optimizer;
  RefinementReport rep;
  rep.priors = init.priors;
  rep.appearance = init.appearance;
  const Scene& shape = init.scene;
  const RenderContext ctx(shape);
  const ParamLayout layout(shape);
  const detail::Problem pb{observed, ctx, layout, rep.priors, cfg.lambda, observer};
  std::vector<double> theta = pack(shape);

  try {
    const auto mask1 = freeze_mask(layout, GroupSet{ParamGroup::Background});
    AdamState st(theta.size());
    for (int t = 0; t < oc.phase1_steps; ++t) {
      const auto e = pb.eval(theta, mask1);
      rep.phase1_loss.push_back(e.total);
      pb.notify(1, -1, t, oc.phase1_steps, e.total, theta);
      adam_step(st, theta, e.grad, oc.phase1_lr, mask1, &layout);
    }
  } catch (const std::exception& ex) {
    throw JobError(std::string("phase 1 failed: ") + ex.what());
  }

  GroupSet g2 = all_groups();
  g2.erase(ParamGroup::Blob);
  g2.erase(ParamGroup::Kernel);
  const auto mask2 = freeze_mask(layout, g2);
  std::vector<detail::SeedRun> runs(static_cast<std::size_t>(oc.seeds));
  const int workers = std::clamp(oc.workers, 1, oc.seeds);
  if (workers == 1) {
    for (int s = 0; s < oc.seeds; ++s) runs[s] = detail::run_phase2(pb, theta, mask2, oc, s);
  } else {
    std::vector<std::thread> pool;
    std::mutex mu;
    int next = 0;
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (;;) {
          int s;
          {
            std::lock_guard lock(mu);
            if (next >= oc.seeds) return;
            s = next++;
          }
          runs[static_cast<std::size_t>(s)] = detail::run_phase2(pb, theta, mask2, oc, s);
        }
      });
    for (auto& t : pool) t.join();
  }
  const detail::SeedRun* best = nullptr;
  for (const auto& r : runs) {
    rep.seeds.push_back(r.result);
    rep.phase2_loss.push_back(r.history);
    if (r.result.diverged) continue;
    if (!best || r.result.recon < best->result.recon) best = &r;  // ties keep the lower seed id
  }
  if (!best) throw JobError("all phase-2 seeds diverged: " + runs.front().result.error);
  rep.best_seed = best->result.seed;
  theta = best->theta;

  try {
    const ParamMask mask3(layout.size(), true);
    AdamState st(theta.size());
    std::vector<double> best_theta = theta;
    double best_total = std::numeric_limits<double>::infinity();
    for (int t = 0; t <= oc.phase3_steps; ++t) {
      const bool last = t == oc.phase3_steps;
      const auto e = pb.eval(theta, last ? ParamMask{} : mask3);
      rep.phase3_loss.push_back(e.total);
      pb.notify(3, -1, t, oc.phase3_steps, e.total, theta);
      if (e.total < best_total) {
        best_total = e.total;
        best_theta = theta;
      }
      if (!last) adam_step(st, theta, e.grad, oc.phase3_lr, mask3, &layout);
    }
    theta = best_theta;
  } catch (const std::exception& ex) {
    throw JobError(std::string("phase 3 failed: ") + ex.what());
  }

  rep.scene = unpack(theta, shape);
  rep.chains = rep.scene.chains;
  // Re-packed so the reported loss is exactly total_loss of the returned scene.
  const auto fin = pb.eval(pack(rep.scene), {});
  rep.final_recon = fin.recon;
  rep.final_reg = fin.reg;
  rep.final_total = fin.total;
  rep.width = rep.scene.width;
  for (std::size_t c = 0; c < rep.scene.chains.size(); ++c)
    rep.widths.push_back(width_profile(rep.scene, c, cfg.width_samples));
  return rep;
}

}  // namespace sprefine

#endif
