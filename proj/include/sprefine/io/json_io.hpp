#ifndef SPREFINE_IO_JSON_IO_HPP
#define SPREFINE_IO_JSON_IO_HPP

// JSON forms of knot chains, refinement reports and labeled frames.
//
// A chain is {"knots": [[x, y, w], ...]} (w optional, default 1). A spline
// file holds {"splines": [chain, ...]}; a bare chain or a bare array of
// chains is accepted on input.

#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "sprefine/geometry.hpp"
#include "sprefine/optimizer.hpp"
#include "sprefine/synth.hpp"

namespace sprefine::io {

using nlohmann::json;

inline json to_json(const KnotChain& c) {
  json knots = json::array();
  for (const auto& k : c.knots) knots.push_back({k.x, k.y, k.w});
  return {{"knots", knots}};
}

inline KnotChain chain_from_json(const json& j, const std::string& where = "chain") {
  if (!j.is_object() || !j.contains("knots") || !j.at("knots").is_array())
    throw InvalidInput(where + ": expected an object with a \"knots\" array");
  KnotChain c;
  std::size_t i = 0;
  for (const auto& k : j.at("knots")) {
    const std::string at = where + ".knots[" + std::to_string(i++) + "]";
    if (!k.is_array() || k.size() < 2 || k.size() > 3) throw InvalidInput(at + ": expected [x, y] or [x, y, w]");
    for (const auto& v : k)
      if (!v.is_number()) throw InvalidInput(at + ": entries must be numbers");
    Knot kn{k[0].get<double>(), k[1].get<double>(), k.size() == 3 ? k[2].get<double>() : 1.0};
    if (!std::isfinite(kn.x) || !std::isfinite(kn.y) || !std::isfinite(kn.w)) throw InvalidInput(at + ": non-finite value");
    if (kn.w < 0.0 || kn.w > 1.0) throw InvalidInput(at + ": w must lie in [0, 1]");
    c.knots.push_back(kn);
  }
  if (c.size() < 2) throw InvalidInput(where + ": need at least 2 knots");
  return c;
}

inline json splines_to_json(const std::vector<KnotChain>& chains) {
  json arr = json::array();
  for (const auto& c : chains) arr.push_back(to_json(c));
  return {{"splines", arr}};
}

inline std::vector<KnotChain> splines_from_json(const json& j) {
  std::vector<KnotChain> out;
  const json* arr = &j;
  if (j.is_object() && j.contains("knots")) return {chain_from_json(j, "splines[0]")};
  if (j.is_object() && j.contains("splines")) arr = &j.at("splines");
  if (!arr->is_array()) throw InvalidInput("expected {\"splines\": [...]}, a chain, or an array of chains");
  for (std::size_t i = 0; i < arr->size(); ++i) out.push_back(chain_from_json((*arr)[i], "splines[" + std::to_string(i) + "]"));
  if (out.empty()) throw InvalidInput("no splines given");
  return out;
}

/// Parses text, reporting JSON syntax errors with their position.
inline json parse_json(const std::string& text, const std::string& source) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw InvalidInput(source + ": " + e.what());
  }
}

inline std::vector<KnotChain> parse_splines(const std::string& text, const std::string& source = "splines") {
  try {
    return splines_from_json(parse_json(text, source));
  } catch (const json::exception& e) {
    throw InvalidInput(source + ": " + e.what());
  }
}

inline json to_json(const Polyline& p) {
  json arr = json::array();
  for (const auto& q : p) arr.push_back({q.x, q.y});
  return arr;
}

inline Polyline polyline_from_json(const json& j) {
  Polyline p;
  for (const auto& q : j) p.push_back({q.at(0).get<double>(), q.at(1).get<double>()});
  return p;
}

/// Evenly spaced points along the chain's curve.
inline Polyline chain_polyline(const KnotChain& c, int count) { return sample_arc_length(fit_natural_cubic(c), count); }

inline json to_json(const Scene& s) {
  json chains = json::array();
  for (const auto& c : s.chains) chains.push_back(to_json(c));
  return {{"chains", chains},
          {"width", s.width},
          {"blob", {{"profile", s.blob.profile}, {"grid_size", s.blob.grid_size}}},
          {"background", {{"base", s.background.base}, {"grad_x", s.background.grad_x}, {"grad_y", s.background.grad_y}}},
          {"mix", s.composite.mix()},
          {"mix_logit", s.composite.mix_logit},
          {"kernel", s.kernel.weights},
          {"resolution", s.resolution},
          {"samples_per_spline", s.samples_per_spline}};
}

inline Scene scene_from_json(const json& j) {
  Scene s;
  for (std::size_t i = 0; i < j.at("chains").size(); ++i)
    s.chains.push_back(chain_from_json(j.at("chains")[i], "chains[" + std::to_string(i) + "]"));
  s.width = j.at("width").get<double>();
  s.blob.profile = j.at("blob").at("profile").get<std::vector<double>>();
  s.blob.grid_size = j.at("blob").at("grid_size").get<int>();
  const auto& bg = j.at("background");
  s.background = {bg.at("base").get<double>(), bg.at("grad_x").get<double>(), bg.at("grad_y").get<double>()};
  s.composite.mix_logit = j.at("mix_logit").get<double>();
  s.kernel.weights = j.at("kernel").get<std::array<double, 9>>();
  s.resolution = j.at("resolution").get<int>();
  s.samples_per_spline = j.at("samples_per_spline").get<int>();
  return s;
}

inline json to_json(const RefinementReport& r) {
  json seeds = json::array();
  for (const auto& s : r.seeds) {
    json e = {{"seed", s.seed}, {"diverged", s.diverged}};
    if (s.diverged)
      e["error"] = s.error;
    else
      e["recon"] = s.recon, e["total"] = s.total;
    seeds.push_back(e);
  }
  json widths = json::array();
  for (const auto& w : r.widths) widths.push_back({{"s", w.s}, {"width", w.width}});
  return {{"splines", splines_to_json(r.chains).at("splines")},
          {"scene", to_json(r.scene)},
          {"best_seed", r.best_seed},
          {"seeds", seeds},
          {"final_recon", r.final_recon},
          {"final_reg", r.final_reg},
          {"final_total", r.final_total},
          {"background_only_loss", r.appearance.background_only_loss},
          {"W", r.width},
          {"widths", widths},
          {"priors", {{"bar_lengths", r.priors.bar_lengths}, {"bar_w", r.priors.bar_w}, {"bar_W", r.priors.bar_W}}},
          {"loss_history", {{"phase1", r.phase1_loss}, {"phase2", r.phase2_loss}, {"phase3", r.phase3_loss}}}};
}

inline json labels_to_json(const LabeledFrame& f) {
  json labels = json::array();
  for (std::size_t b = 0; b < f.labels.size(); ++b)
    labels.push_back({{"points", to_json(f.labels[b])},
                      {"W", f.body_widths[b]},
                      {"widths", f.widths[b]},
                      {"amplitude", f.amplitudes[b]}});
  return {{"index", f.index},
          {"n_bodies", f.n_bodies},
          {"seed", f.seed},
          {"background", {{"base", f.background.base}, {"grad_x", f.background.grad_x}, {"grad_y", f.background.grad_y}}},
          {"labels", labels}};
}

}  // namespace sprefine::io

#endif
