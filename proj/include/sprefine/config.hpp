#ifndef SPREFINE_CONFIG_HPP
#define SPREFINE_CONFIG_HPP

// Run configuration: every setting has a dotted name "section.key" that can
// be set from a TOML-style file, the SPREFINE_WORKERS environment variable
// (run.workers only) or a command-line flag --section.key, in that order of
// precedence (later wins).
//
// File syntax: [section] headers, key = value lines, # comments. Values are
// numbers, true/false, or double-quoted strings.

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sprefine/metrics.hpp"
#include "sprefine/optimizer.hpp"
#include "sprefine/snake.hpp"
#include "sprefine/synth.hpp"

#ifndef SPREFINE_VERSION
#define SPREFINE_VERSION "unknown"
#endif

namespace sprefine {

inline constexpr const char* kVersion = SPREFINE_VERSION;

struct SweepConfig {
  std::string conditions = "rotation:0,10,20,30";  // kind:levels;kind:levels
  std::string methods = "ours,ac";
  double percentile = 0.5;
  std::string pca_representation = "angle";  // angle | coordinates
  int frames = 0;                            // per body count; 0 = all
};

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string data_root = "sprefine-data";
  int max_dim = 2048;
  long max_bytes = 16L << 20;
  int queue_depth = 8;  // queued plus running jobs, all sessions
  int workers = 1;
  double success_ratio = 0.5;
  std::string cors_origin = "*";
};

struct RunConfig {
  RefineConfig refine;
  GenConfig gen;
  int gen_frames = 256;
  std::string gen_bodies = "1,2,3";
  SnakeParams snake;
  MetricConfig metrics;
  SweepConfig sweep;
  ServiceConfig service;
  int workers = 1;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  return s.substr(a, s.find_last_not_of(" \t\r\n") - a + 1);
}

inline double parse_double(const std::string& v) {
  std::size_t used = 0;
  double d = 0.0;
  try {
    d = std::stod(v, &used);
  } catch (const std::exception&) {
    throw InvalidInput("expected a number, got '" + v + "'");
  }
  if (used != v.size()) throw InvalidInput("expected a number, got '" + v + "'");
  return d;
}

inline long long parse_int(const std::string& v) {
  std::size_t used = 0;
  long long d = 0;
  try {
    d = std::stoll(v, &used);
  } catch (const std::exception&) {
    throw InvalidInput("expected an integer, got '" + v + "'");
  }
  if (used != v.size()) throw InvalidInput("expected an integer, got '" + v + "'");
  return d;
}

inline bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw InvalidInput("expected true or false, got '" + v + "'");
}

inline std::string unquote(const std::string& v) {
  if (v.size() >= 2 && v.front() == '"' && v.back() == '"') return v.substr(1, v.size() - 2);
  return v;
}

}  // namespace detail

struct ConfigKey {
  std::string name;
  std::string help;
  std::function<void(const std::string&)> set;
  std::function<nlohmann::json()> get;
};

/// All settings of `cfg` by dotted name; setters write through to `cfg`.
inline std::vector<ConfigKey> config_keys(RunConfig& cfg) {
  std::vector<ConfigKey> keys;
  auto num = [&](std::string name, double& ref, std::string help = {}) {
    keys.push_back({std::move(name), std::move(help), [&ref](const std::string& v) { ref = detail::parse_double(v); },
                    [&ref] { return nlohmann::json(ref); }});
  };
  auto integer = [&](std::string name, auto& ref, std::string help = {}) {
    using T = std::remove_reference_t<decltype(ref)>;
    keys.push_back({std::move(name), std::move(help),
                    [&ref](const std::string& v) { ref = static_cast<T>(detail::parse_int(v)); },
                    [&ref] { return nlohmann::json(ref); }});
  };
  auto boolean = [&](std::string name, bool& ref, std::string help = {}) {
    keys.push_back({std::move(name), std::move(help), [&ref](const std::string& v) { ref = detail::parse_bool(v); },
                    [&ref] { return nlohmann::json(ref); }});
  };
  auto text = [&](std::string name, std::string& ref, std::string help = {}) {
    keys.push_back({std::move(name), std::move(help), [&ref](const std::string& v) { ref = detail::unquote(v); },
                    [&ref] { return nlohmann::json(ref); }});
  };

  auto& o = cfg.refine.optimizer;
  integer("optimizer.phase1_steps", o.phase1_steps, "T1");
  integer("optimizer.phase2_steps", o.phase2_steps, "T2");
  integer("optimizer.phase3_steps", o.phase3_steps, "T3");
  num("optimizer.phase1_lr", o.phase1_lr);
  num("optimizer.phase2_lr", o.phase2_lr, "initial lr of the cosine schedule");
  num("optimizer.phase3_lr", o.phase3_lr);
  integer("optimizer.seeds", o.seeds, "phase-2 seeds S");
  num("optimizer.noise_sigma", o.noise_sigma, "sigma0, relative to the per-slice RMS gradient");
  num("optimizer.noise_tau", o.noise_tau, "noise decay; 0 = T2/4");
  integer("optimizer.seed", o.seed, "master seed");
  integer("optimizer.workers", o.workers, "threads for phase-2 seeds");

  auto& l = cfg.refine.lambda;
  num("objective.lambda_length", l.length);
  num("objective.lambda_curvature", l.curvature);
  num("objective.lambda_min_width", l.min_width);
  num("objective.lambda_width", l.width);
  num("objective.bar_w", cfg.refine.bar_w);
  num("objective.bar_W", cfg.refine.bar_W, "0 = estimate from the image");

  auto& r = cfg.refine;
  integer("renderer.samples", r.samples_per_spline, "M");
  integer("renderer.grid", r.grid_size, "G");
  integer("renderer.profile_knots", r.profile_knots, "P");
  integer("renderer.knots", r.knots, "knots per chain; 0 keeps the input");
  num("renderer.init_w", r.init_w);
  num("renderer.init_mix_logit", r.init_mix_logit);
  integer("renderer.width_samples", r.width_samples);

  integer("metrics.resample", cfg.metrics.resample, "N");
  boolean("metrics.orientation_invariant", cfg.metrics.orientation_invariant);

  auto& g = cfg.gen;
  integer("gen.resolution", g.resolution, "RES");
  integer("gen.frames", cfg.gen_frames, "frames per body count");
  text("gen.bodies", cfg.gen_bodies, "comma-separated body counts");
  integer("gen.label_points", g.label_points);
  num("gen.length_min", g.length_min);
  num("gen.length_max", g.length_max);
  num("gen.width_min", g.width_min);
  num("gen.width_max", g.width_max);
  num("gen.amplitude_min", g.amplitude_min);
  num("gen.amplitude_max", g.amplitude_max);
  num("gen.background_min", g.background_min);
  num("gen.background_max", g.background_max);
  num("gen.gradient_max", g.gradient_max);
  num("gen.noise_sigma", g.noise_sigma);
  num("gen.mix", g.mix);
  num("gen.blur", g.blur);
  num("gen.margin", g.margin);
  num("gen.curvature_sigma", g.curvature_sigma);
  num("gen.curvature_corr", g.curvature_corr);
  num("gen.max_turn", g.max_turn);
  integer("gen.samples", g.samples);
  integer("gen.attempts", g.attempts);
  integer("gen.seed", g.seed);

  auto& s = cfg.snake;
  num("baseline.alpha", s.alpha);
  num("baseline.beta", s.beta);
  num("baseline.gamma", s.gamma);
  num("baseline.sigma", s.sigma);
  integer("baseline.iterations", s.iterations);
  num("baseline.line_weight", s.line_weight);
  num("baseline.edge_weight", s.edge_weight);
  num("baseline.polarity", s.polarity, "0 = estimate");
  boolean("baseline.normal_force", s.normal_force);

  text("sweep.conditions", cfg.sweep.conditions, "e.g. rotation:0,20;translation:2;straight");
  text("sweep.methods", cfg.sweep.methods, "subset of ours,ac,none");
  num("sweep.percentile", cfg.sweep.percentile);
  text("sweep.pca_representation", cfg.sweep.pca_representation, "angle or coordinates");
  integer("sweep.frames", cfg.sweep.frames, "0 = all");

  auto& sv = cfg.service;
  text("service.host", sv.host);
  integer("service.port", sv.port);
  text("service.data_root", sv.data_root);
  integer("service.max_dim", sv.max_dim);
  integer("service.max_bytes", sv.max_bytes);
  integer("service.queue_depth", sv.queue_depth);
  integer("service.workers", sv.workers);
  num("service.success_ratio", sv.success_ratio);
  text("service.cors_origin", sv.cors_origin);

  integer("run.workers", cfg.workers, "worker threads (env SPREFINE_WORKERS)");
  return keys;
}

inline void set_config_value(RunConfig& cfg, const std::string& name, const std::string& value) {
  for (auto& k : config_keys(cfg))
    if (k.name == name) {
      k.set(value);
      return;
    }
  throw InvalidInput("unknown config key '" + name + "'");
}

/// Applies a TOML-style document. Errors carry `source:line`.
inline void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& source = "config") {
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string where = source + ":" + std::to_string(lineno);
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"') quoted = !quoted;
      if (line[i] == '#' && !quoted) {
        line.resize(i);
        break;
      }
    }
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw InvalidInput(where + ": malformed section header");
      section = detail::trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw InvalidInput(where + ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    const std::string name = section.empty() ? key : section + "." + key;
    try {
      set_config_value(cfg, name, value);
    } catch (const InvalidInput& e) {
      throw InvalidInput(where + ": " + e.what());
    }
  }
}

inline void apply_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  apply_config_text(cfg, ss.str(), path);
}

inline void apply_environment(RunConfig& cfg) {
  if (const char* w = std::getenv("SPREFINE_WORKERS"); w && *w) {
    try {
      cfg.workers = static_cast<int>(detail::parse_int(w));
    } catch (const InvalidInput& e) {
      throw InvalidInput(std::string("SPREFINE_WORKERS: ") + e.what());
    }
  }
}

inline void validate(const RunConfig& cfg) {
  validate(cfg.refine);
  validate(cfg.gen);
  validate(cfg.snake);
  if (cfg.metrics.resample < 2) throw InvalidInput("metrics.resample must be >= 2");
  if (cfg.workers < 1) throw InvalidInput("run.workers must be >= 1");
  if (cfg.gen_frames < 0) throw InvalidInput("gen.frames must be >= 0");
  if (!(cfg.sweep.percentile > 0 && cfg.sweep.percentile <= 1)) throw InvalidInput("sweep.percentile must lie in (0, 1]");
  if (cfg.service.queue_depth < 1 || cfg.service.workers < 1) throw InvalidInput("service queue and workers must be >= 1");
}

/// Resolved configuration, nested by section.
inline nlohmann::json to_json(const RunConfig& cfg) {
  RunConfig copy = cfg;
  nlohmann::json j = nlohmann::json::object();
  for (auto& k : config_keys(copy)) {
    const auto dot = k.name.find('.');
    j[k.name.substr(0, dot)][k.name.substr(dot + 1)] = k.get();
  }
  return j;
}

inline std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!detail::trim(item).empty()) out.push_back(static_cast<int>(detail::parse_int(detail::trim(item))));
  return out;
}

}  // namespace sprefine

#endif
