#ifndef SPREFINE_PARAMETERS_HPP
#define SPREFINE_PARAMETERS_HPP

// Flat trainable-parameter vector of a Scene.
//
// Knot positions are stored in frame units (pixels / RES) so that one Adam
// step has the same relative reach at every resolution. Constrained
// quantities are stored unconstrained: knot widths as logits
// (w = sigmoid(raw)), the global width as softplus-inverse (W = softplus(raw)).
// Layout: for each chain x[K], y[K], w_raw[K]; then W_raw, blob profile[P],
// background[3], kernel[9], mix_logit.

#include <algorithm>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "sprefine/autodiff/ops.hpp"
#include "sprefine/renderer.hpp"

namespace sprefine {

enum class ParamGroup { Splines, Width, Blob, Background, Kernel, Composite };

inline constexpr ParamGroup kAllGroups[] = {ParamGroup::Splines, ParamGroup::Width,  ParamGroup::Blob,
                                            ParamGroup::Background, ParamGroup::Kernel, ParamGroup::Composite};

inline std::string_view group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::Splines: return "splines";
    case ParamGroup::Width: return "width";
    case ParamGroup::Blob: return "blob";
    case ParamGroup::Background: return "background";
    case ParamGroup::Kernel: return "kernel";
    case ParamGroup::Composite: return "composite";
  }
  return "?";
}

inline ParamGroup parse_group(std::string_view name) {
  for (auto g : kAllGroups)
    if (group_name(g) == name) return g;
  throw InvalidInput("unknown parameter group '" + std::string(name) + "'");
}

using GroupSet = std::set<ParamGroup>;

inline GroupSet all_groups() { return GroupSet(std::begin(kAllGroups), std::end(kAllGroups)); }

struct ParamSlice {
  ParamGroup group;
  int chain = -1;  // chain index for spline slices
  std::string name;
  std::size_t offset = 0;
  std::size_t size = 0;
};

/// Describes where each parameter of a scene lives in the flat vector.
class ParamLayout {
 public:
  ParamLayout() = default;
  explicit ParamLayout(const Scene& scene) {
    for (std::size_t c = 0; c < scene.chains.size(); ++c) {
      const auto k = scene.chains[c].size();
      add(ParamGroup::Splines, static_cast<int>(c), "x", k);
      add(ParamGroup::Splines, static_cast<int>(c), "y", k);
      add(ParamGroup::Splines, static_cast<int>(c), "w", k);
    }
    add(ParamGroup::Width, -1, "W", 1);
    add(ParamGroup::Blob, -1, "profile", scene.blob.profile.size());
    add(ParamGroup::Background, -1, "background", 3);
    add(ParamGroup::Kernel, -1, "kernel", 9);
    add(ParamGroup::Composite, -1, "mix_logit", 1);
  }

  std::size_t size() const { return size_; }
  const std::vector<ParamSlice>& slices() const { return slices_; }
  std::size_t chain_count() const { return chains_; }

  /// Group of each entry of the flat vector.
  std::vector<ParamGroup> entry_groups() const {
    std::vector<ParamGroup> g(size_);
    for (const auto& s : slices_) std::fill_n(g.begin() + static_cast<std::ptrdiff_t>(s.offset), s.size, s.group);
    return g;
  }

 private:
  void add(ParamGroup g, int chain, std::string name, std::size_t n) {
    slices_.push_back({g, chain, std::move(name), size_, n});
    size_ += n;
    if (chain >= 0) chains_ = std::max(chains_, static_cast<std::size_t>(chain) + 1);
  }
  std::vector<ParamSlice> slices_;
  std::size_t size_ = 0;
  std::size_t chains_ = 0;
};

inline constexpr double kWidthClamp = 1e-9;

inline std::vector<double> pack(const Scene& scene) {
  std::vector<double> v;
  const double res = scene.resolution;
  for (const auto& c : scene.chains) {
    for (const auto& k : c.knots) v.push_back(k.x / res);
    for (const auto& k : c.knots) v.push_back(k.y / res);
    for (const auto& k : c.knots) v.push_back(ad::logit(std::clamp(k.w, kWidthClamp, 1.0 - kWidthClamp)));
  }
  if (!(scene.width > 0.0)) throw InvalidInput("scene width W must be positive");
  v.push_back(ad::softplus_inverse(scene.width));
  v.insert(v.end(), scene.blob.profile.begin(), scene.blob.profile.end());
  v.push_back(scene.background.base);
  v.push_back(scene.background.grad_x);
  v.push_back(scene.background.grad_y);
  v.insert(v.end(), scene.kernel.weights.begin(), scene.kernel.weights.end());
  v.push_back(scene.composite.mix_logit);
  return v;
}

/// Inverse of pack; `shape` supplies chain sizes and non-trainable settings.
inline Scene unpack(const std::vector<double>& v, const Scene& shape) {
  Scene s = shape;
  std::size_t o = 0;
  const double res = shape.resolution;
  for (auto& c : s.chains) {
    const auto k = c.size();
    for (std::size_t i = 0; i < k; ++i) {
      c.knots[i].x = v[o + i] * res;
      c.knots[i].y = v[o + k + i] * res;
      c.knots[i].w = ad::sigmoid(v[o + 2 * k + i]);
    }
    o += 3 * k;
  }
  s.width = ad::softplus(v[o++]);
  for (auto& p : s.blob.profile) p = v[o++];
  s.background = {v[o], v[o + 1], v[o + 2]};
  o += 3;
  for (auto& w : s.kernel.weights) w = v[o++];
  s.composite.mix_logit = v[o++];
  if (o != v.size()) throw InvalidInput("unpack: parameter vector does not match scene shape");
  return s;
}

/// Boolean mask over the flat vector; true entries are trainable.
using ParamMask = std::vector<bool>;

inline ParamMask freeze_mask(const ParamLayout& layout, const GroupSet& active) {
  ParamMask m(layout.size(), false);
  for (const auto& s : layout.slices())
    if (active.count(s.group)) std::fill_n(m.begin() + static_cast<std::ptrdiff_t>(s.offset), s.size, true);
  return m;
}

inline ParamMask freeze_mask(const ParamLayout& layout, const std::vector<std::string>& names) {
  GroupSet g;
  for (const auto& n : names) g.insert(parse_group(n));
  return freeze_mask(layout, g);
}

/// Creates tape variables for every slice of `theta`. A slice requires a
/// gradient when any of its entries is active in `mask` (empty mask: none).
inline SceneVars make_scene_vars(ad::Tape& tape, const ParamLayout& layout, const std::vector<double>& theta,
                                 const ParamMask& mask) {
  SceneVars sv;
  sv.chains.resize(layout.chain_count());
  for (const auto& s : layout.slices()) {
    const auto first = theta.begin() + static_cast<std::ptrdiff_t>(s.offset);
    bool active = false;
    if (!mask.empty())
      for (std::size_t i = 0; i < s.size; ++i) active = active || mask[s.offset + i];
    const ad::Var v = tape.variable(std::vector<double>(first, first + static_cast<std::ptrdiff_t>(s.size)), active);
    switch (s.group) {
      case ParamGroup::Splines: {
        auto& c = sv.chains[static_cast<std::size_t>(s.chain)];
        if (s.name == "x")
          c.x = v;
        else if (s.name == "y")
          c.y = v;
        else
          c.w_raw = v;
        break;
      }
      case ParamGroup::Width: sv.width_raw = v; break;
      case ParamGroup::Blob: sv.blob = v; break;
      case ParamGroup::Background: sv.background = v; break;
      case ParamGroup::Kernel: sv.kernel = v; break;
      case ParamGroup::Composite: sv.mix_logit = v; break;
    }
  }
  return sv;
}

}  // namespace sprefine

#endif
