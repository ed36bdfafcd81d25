#ifndef SPREFINE_HARNESS_HPP
#define SPREFINE_HARNESS_HPP

// Experiment harness behind the command-line tool: dataset generation,
// single-frame refinement and perturbation sweeps with long-form CSV output.

#include <atomic>
#include <cstdio>
#include <filesystem>
#include <map>
#include <mutex>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "sprefine/config.hpp"
#include "sprefine/io/image_io.hpp"
#include "sprefine/io/json_io.hpp"
#include "sprefine/metrics.hpp"
#include "sprefine/objective.hpp"
#include "sprefine/optimizer.hpp"
#include "sprefine/snake.hpp"
#include "sprefine/synth.hpp"

namespace sprefine {

namespace fs = std::filesystem;

/// Runs fn(0..count-1) on up to `workers` threads; results keep index order.
template <typename T, typename F>
std::vector<T> parallel_map(std::size_t count, int workers, F fn) {
  std::vector<T> out(count);
  workers = std::max(1, std::min<int>(workers, static_cast<int>(count)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) out[i] = fn(i);
    return out;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  std::exception_ptr error;
  std::mutex mu;
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next++) < count;) {
        try {
          out[i] = fn(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!error) error = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
  return out;
}

// ---------------------------------------------------------------------------
// Conditions

struct Condition {
  std::string label;  // e.g. "rotation=20", "straight"
  bool straight = false;
  Perturbation perturbation;
};

/// Parses "rotation:0,20;translation:2;scaling:0.8;pca:2;straight".
/// Rotation levels are in degrees.
inline std::vector<Condition> parse_conditions(const std::string& text) {
  std::vector<Condition> out;
  std::stringstream ss(text);
  std::string group;
  while (std::getline(ss, group, ';')) {
    group = detail::trim(group);
    if (group.empty()) continue;
    if (group == "straight") {
      out.push_back({"straight", true, {}});
      continue;
    }
    const auto colon = group.find(':');
    if (colon == std::string::npos) throw InvalidInput("condition '" + group + "' needs kind:levels");
    const std::string kind = detail::trim(group.substr(0, colon));
    PerturbKind k;
    if (kind == "rotation")
      k = PerturbKind::Rotation;
    else if (kind == "translation")
      k = PerturbKind::Translation;
    else if (kind == "scaling")
      k = PerturbKind::Scaling;
    else if (kind == "pca")
      k = PerturbKind::Pca;
    else
      throw InvalidInput("unknown perturbation kind '" + kind + "'");
    std::stringstream ls(group.substr(colon + 1));
    std::string level;
    while (std::getline(ls, level, ',')) {
      level = detail::trim(level);
      if (level.empty()) continue;
      const double v = detail::parse_double(level);
      Condition c;
      c.label = kind + "=" + level;
      c.perturbation = {k, k == PerturbKind::Rotation ? v * std::numbers::pi / 180.0 : v, 0.0};
      out.push_back(c);
    }
  }
  if (out.empty()) throw InvalidInput("no sweep conditions given");
  return out;
}

struct Methods {
  bool ours = false, ac = false, none = false;
};

inline Methods parse_methods(const std::string& text) {
  Methods m;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = detail::trim(item);
    if (item == "ours")
      m.ours = true;
    else if (item == "ac")
      m.ac = true;
    else if (item == "none")
      m.none = true;
    else if (!item.empty())
      throw InvalidInput("unknown method '" + item + "'");
  }
  if (!m.ours && !m.ac && !m.none) throw InvalidInput("no sweep methods given");
  return m;
}

// ---------------------------------------------------------------------------
// Sweep rows

struct SweepRow {
  int frame = 0;
  int body = 0;
  int n_bodies = 0;
  std::string condition;
  double initial = std::nan("");
  double refined = std::nan("");
  double baseline = std::nan("");
  std::string status = "ok";
};

inline const char* kCsvHeader = "frame,body_index,n_bodies,condition,initial_dtw,refined_dtw,baseline_dtw,status";

inline std::string format_number(double v) {
  if (std::isnan(v)) return "";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline std::string csv_line(const SweepRow& r) {
  std::string status = r.status;
  for (auto& c : status)
    if (c == ',' || c == '\n' || c == '"') c = ' ';
  return std::to_string(r.frame) + "," + std::to_string(r.body) + "," + std::to_string(r.n_bodies) + "," + r.condition +
         "," + format_number(r.initial) + "," + format_number(r.refined) + "," + format_number(r.baseline) + "," + status;
}

inline std::vector<SweepRow> parse_csv(const std::string& text) {
  std::stringstream ss(text);
  std::string line;
  std::vector<SweepRow> rows;
  if (!std::getline(ss, line) || detail::trim(line) != kCsvHeader) throw InvalidInput("csv: unexpected header");
  int lineno = 1;
  while (std::getline(ss, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() == 7) f.emplace_back();
    if (f.size() != 8) throw InvalidInput("csv:" + std::to_string(lineno) + ": expected 8 columns");
    auto num = [](const std::string& s) { return s.empty() ? std::nan("") : detail::parse_double(s); };
    rows.push_back({static_cast<int>(detail::parse_int(f[0])), static_cast<int>(detail::parse_int(f[1])),
                    static_cast<int>(detail::parse_int(f[2])), f[3], num(f[4]), num(f[5]), num(f[6]), f[7]});
  }
  return rows;
}

/// Evaluates every condition on one labeled frame.
inline std::vector<SweepRow> sweep_frame(const Image& image, const std::vector<Polyline>& labels, int frame_index,
                                         const std::vector<Condition>& conditions, const Methods& methods,
                                         const RunConfig& cfg, const PcaBasis* basis) {
  std::vector<SweepRow> rows;
  const int n = static_cast<int>(labels.size());
  RandomStream dir_rng(mix_key(cfg.gen.seed ^ 0x7472616e736c6174ULL, static_cast<std::uint64_t>(frame_index)));
  const double direction = dir_rng.uniform(0.0, 2.0 * std::numbers::pi);
  RefineConfig rc = cfg.refine;
  rc.optimizer.workers = 1;
  for (const auto& cond : conditions) {
    std::vector<Polyline> initial;
    std::vector<SweepRow> block;
    std::string failure;
    try {
      for (const auto& l : labels) {
        if (cond.straight) {
          initial.push_back(straight_line(l));
        } else {
          Perturbation p = cond.perturbation;
          p.direction = direction;
          initial.push_back(perturb(l, p, basis));
        }
      }
    } catch (const std::exception& e) {
      failure = std::string("failed: ") + e.what();
    }
    for (int b = 0; b < n; ++b) {
      SweepRow r{frame_index, b, n, cond.label};
      if (failure.empty())
        r.initial = avg_dtw(labels[b], initial[b], cfg.metrics);
      else
        r.status = failure;
      block.push_back(r);
    }
    if (!failure.empty()) {
      rows.insert(rows.end(), block.begin(), block.end());
      continue;
    }
    if (methods.ours) {
      try {
        std::vector<KnotChain> chains;
        for (const auto& p : initial) chains.push_back(chain_from_polyline(p, 0));
        const auto rep = refine(image, chains, rc);
        for (int b = 0; b < n; ++b)
          block[b].refined = avg_dtw(labels[b], io::chain_polyline(rep.chains[b], cfg.metrics.resample), cfg.metrics);
      } catch (const std::exception& e) {
        for (auto& r : block) r.status = std::string("failed: ") + e.what();
      }
    } else if (methods.none) {
      for (auto& r : block) r.refined = r.initial;
    }
    if (methods.ac) {
      for (int b = 0; b < n; ++b) {
        try {
          const auto snake = snake_refine(image, resample_polyline(initial[b], cfg.metrics.resample), cfg.snake);
          block[b].baseline = avg_dtw(labels[b], snake, cfg.metrics);
        } catch (const std::exception& e) {
          block[b].status = std::string("failed: ") + e.what();
        }
      }
    }
    rows.insert(rows.end(), block.begin(), block.end());
  }
  return rows;
}

struct SweepSummary {
  std::string group;  // "n=<bodies> <condition>"
  std::vector<SummaryRow> columns;  // initial, refined, baseline (those present)
};

inline std::vector<SweepSummary> summarize(const std::vector<SweepRow>& rows, double p) {
  std::map<std::string, std::map<std::string, std::vector<double>>> groups;
  std::vector<std::string> order;
  for (const auto& r : rows) {
    if (r.status != "ok") continue;
    const std::string g = "n=" + std::to_string(r.n_bodies) + " " + r.condition;
    if (!groups.count(g)) order.push_back(g);
    auto& cols = groups[g];
    if (!std::isnan(r.initial)) cols["initial"].push_back(r.initial);
    if (!std::isnan(r.refined)) cols["refined"].push_back(r.refined);
    if (!std::isnan(r.baseline)) cols["baseline"].push_back(r.baseline);
  }
  std::vector<SweepSummary> out;
  for (const auto& g : order) {
    SweepSummary s{g, {}};
    for (const auto& row : table_report(groups[g], p)) s.columns.push_back(row);
    out.push_back(std::move(s));
  }
  return out;
}

inline nlohmann::json to_json(const std::vector<SweepSummary>& summary, double p) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& s : summary) {
    nlohmann::json cols = nlohmann::json::object();
    for (const auto& c : s.columns) {
      nlohmann::json pct = nlohmann::json::object();
      for (std::size_t i = 0; i < c.percentiles.size(); ++i)
        pct[std::to_string(static_cast<int>(std::lround(kReportPercentiles[i] * 100)))] = c.percentiles[i];
      cols[c.group] = {{"count", c.count}, {"top_mean", c.top}, {"percentiles", pct}};
    }
    j.push_back({{"group", s.group}, {"top_fraction", p}, {"columns", cols}});
  }
  return j;
}

/// Markdown tables: top-fraction means, then percentile means.
inline std::string summary_text(const std::vector<SweepSummary>& summary, double p) {
  std::ostringstream o;
  char buf[256];
  o << "| group | initial | ours | ac |\n|---|---|---|---|\n";
  auto cell = [](const SweepSummary& s, const std::string& c, int pct) {
    for (const auto& col : s.columns)
      if (col.group == c) {
        char b[32];
        std::snprintf(b, sizeof b, "%.3f", pct < 0 ? col.top : col.percentiles[static_cast<std::size_t>(pct)]);
        return std::string(b);
      }
    return std::string("-");
  };
  for (const auto& s : summary)
    o << "| " << s.group << " | " << cell(s, "initial", -1) << " | " << cell(s, "refined", -1) << " | "
      << cell(s, "baseline", -1) << " |\n";
  std::snprintf(buf, sizeof buf, "\nTop %.0f%% means. Percentile means (5/10/20/50%%):\n\n", p * 100);
  o << buf << "| group | column | 5% | 10% | 20% | 50% |\n|---|---|---|---|---|---|\n";
  for (const auto& s : summary)
    for (const char* c : {"initial", "refined", "baseline"}) {
      if (cell(s, c, 0) == "-") continue;
      o << "| " << s.group << " | " << c;
      for (int k = 0; k < 4; ++k) o << " | " << cell(s, c, k);
      o << " |\n";
    }
  return o.str();
}

// ---------------------------------------------------------------------------
// Datasets on disk

struct DatasetFrame {
  int n_bodies = 0;
  int index = 0;
  std::string image_path;
  std::string labels_path;
  Image image;
  std::vector<Polyline> labels;
};

inline std::string frame_stem(int n, int index) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "n%d/frame_%04d", n, index);
  return buf;
}

inline nlohmann::json artifact_header(const RunConfig& cfg) {
  return {{"version", kVersion}, {"config", to_json(cfg)}};
}

/// Writes frames, labels and manifest.json under `dir`. Returns frame count.
inline std::size_t cmd_gen(const RunConfig& cfg, const std::string& dir) {
  validate(cfg);
  const auto bodies = parse_int_list(cfg.gen_bodies);
  if (bodies.empty()) throw InvalidInput("gen.bodies is empty");
  struct Job {
    int n, index;
  };
  std::vector<Job> jobs;
  for (int n : bodies)
    for (int i = 0; i < cfg.gen_frames; ++i) jobs.push_back({n, i});
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir + "': " + ec.message());
  for (int n : bodies) fs::create_directories(fs::path(dir) / ("n" + std::to_string(n)));
  auto entries = parallel_map<nlohmann::json>(jobs.size(), cfg.workers, [&](std::size_t k) {
    GenConfig g = cfg.gen;
    g.n_bodies = jobs[k].n;
    const auto f = gen_frame(g, jobs[k].index);
    const std::string stem = frame_stem(jobs[k].n, jobs[k].index);
    io::write_file((fs::path(dir) / (stem + ".png")).string(), io::encode_png(f.image, 16));
    io::write_file((fs::path(dir) / (stem + ".json")).string(), io::labels_to_json(f).dump(1) + "\n");
    return nlohmann::json{{"n_bodies", jobs[k].n}, {"index", jobs[k].index}, {"image", stem + ".png"}, {"labels", stem + ".json"}};
  });
  auto manifest = artifact_header(cfg);
  manifest["frames"] = entries;
  io::write_file((fs::path(dir) / "manifest.json").string(), manifest.dump(1) + "\n");
  return jobs.size();
}

inline std::vector<DatasetFrame> load_dataset(const std::string& dir, bool load_images = true) {
  const auto mpath = (fs::path(dir) / "manifest.json").string();
  const auto bytes = io::read_file(mpath);
  const auto manifest = io::parse_json(std::string(bytes.begin(), bytes.end()), mpath);
  std::vector<DatasetFrame> out;
  try {
    for (const auto& e : manifest.at("frames")) {
      DatasetFrame f;
      f.n_bodies = e.at("n_bodies").get<int>();
      f.index = e.at("index").get<int>();
      f.image_path = (fs::path(dir) / e.at("image").get<std::string>()).string();
      f.labels_path = (fs::path(dir) / e.at("labels").get<std::string>()).string();
      const auto lb = io::read_file(f.labels_path);
      const auto lj = io::parse_json(std::string(lb.begin(), lb.end()), f.labels_path);
      for (const auto& l : lj.at("labels")) f.labels.push_back(io::polyline_from_json(l.at("points")));
      if (load_images) f.image = io::read_image(f.image_path);
      out.push_back(std::move(f));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(mpath + ": " + e.what());
  }
  return out;
}

struct SweepResult {
  std::vector<SweepRow> rows;
  std::vector<SweepSummary> summary;
  std::size_t failures = 0;
};

/// Sweeps the given frames. A PCA basis, when needed, is fitted on all labels.
inline SweepResult run_sweep(const std::vector<DatasetFrame>& frames, const RunConfig& cfg) {
  validate(cfg);
  const auto conditions = parse_conditions(cfg.sweep.conditions);
  const auto methods = parse_methods(cfg.sweep.methods);
  std::optional<PcaBasis> basis;
  int kmax = -1;
  for (const auto& c : conditions)
    if (!c.straight && c.perturbation.kind == PerturbKind::Pca)
      kmax = std::max(kmax, static_cast<int>(std::lround(c.perturbation.magnitude)));
  if (kmax >= 0) {
    std::vector<Polyline> corpus;
    for (const auto& f : frames) corpus.insert(corpus.end(), f.labels.begin(), f.labels.end());
    const auto rep = cfg.sweep.pca_representation == "coordinates" ? PcaRepresentation::Coordinates
                                                                    : PcaRepresentation::TangentAngle;
    basis = pca_basis(corpus, kmax, rep);
  }
  std::vector<const DatasetFrame*> selected;
  std::map<int, int> per_n;
  for (const auto& f : frames)
    if (cfg.sweep.frames == 0 || per_n[f.n_bodies]++ < cfg.sweep.frames) selected.push_back(&f);
  auto blocks = parallel_map<std::vector<SweepRow>>(selected.size(), cfg.workers, [&](std::size_t i) {
    const auto& f = *selected[i];
    return sweep_frame(f.image, f.labels, f.index, conditions, methods, cfg, basis ? &*basis : nullptr);
  });
  SweepResult res;
  for (auto& b : blocks)
    for (auto& r : b) {
      if (r.status != "ok") ++res.failures;
      res.rows.push_back(std::move(r));
    }
  res.summary = summarize(res.rows, cfg.sweep.percentile);
  return res;
}

inline void write_sweep(const SweepResult& res, const RunConfig& cfg, const std::string& out_dir) {
  fs::create_directories(out_dir);
  std::string csv = std::string(kCsvHeader) + "\n";
  for (const auto& r : res.rows) csv += csv_line(r) + "\n";
  io::write_file((fs::path(out_dir) / "results.csv").string(), csv);
  auto j = artifact_header(cfg);
  j["summary"] = to_json(res.summary, cfg.sweep.percentile);
  j["failures"] = res.failures;
  io::write_file((fs::path(out_dir) / "summary.json").string(), j.dump(1) + "\n");
  io::write_file((fs::path(out_dir) / "summary.md").string(), summary_text(res.summary, cfg.sweep.percentile));
}

/// Curves from a spline file or a label file, chains sampled at `count` points.
inline std::vector<Polyline> load_curves(const std::string& path, int count) {
  const auto b = io::read_file(path);
  const std::string text(b.begin(), b.end());
  const auto j = io::parse_json(text, path);
  std::vector<Polyline> out;
  if (j.is_object() && j.contains("labels")) {
    try {
      for (const auto& l : j.at("labels")) out.push_back(io::polyline_from_json(l.at("points")));
    } catch (const nlohmann::json::exception& e) {
      throw InvalidInput(path + ": " + e.what());
    }
    return out;
  }
  for (const auto& c : io::parse_splines(text, path)) out.push_back(io::chain_polyline(c, count));
  return out;
}

// ---------------------------------------------------------------------------
// Single-frame refinement

struct RefineOutputs {
  RefinementReport report;
  Image reconstruction;
};

inline RefineOutputs cmd_refine(const std::string& image_path, const std::string& splines_path, const RunConfig& cfg,
                                const std::string& out_dir, bool images = true) {
  validate(cfg);
  const auto image = io::read_image(image_path);
  const auto sb = io::read_file(splines_path);
  const auto chains = io::parse_splines(std::string(sb.begin(), sb.end()), splines_path);
  RefineConfig rc = cfg.refine;
  rc.optimizer.workers = std::max(rc.optimizer.workers, 1);
  RefineOutputs out{refine(image, chains, rc), {}};
  out.reconstruction = render_scene(out.report.scene);
  fs::create_directories(out_dir);
  auto splines = io::splines_to_json(out.report.chains);
  splines["version"] = kVersion;
  splines["config"] = to_json(cfg);
  io::write_file((fs::path(out_dir) / "refined.json").string(), splines.dump(1) + "\n");
  auto report = artifact_header(cfg);
  report["report"] = io::to_json(out.report);
  report["image"] = image_path;
  report["splines"] = splines_path;
  io::write_file((fs::path(out_dir) / "report.json").string(), report.dump(1) + "\n");
  if (images) {
    io::write_file((fs::path(out_dir) / "reconstruction.png").string(), io::encode_png(out.reconstruction, 16));
    std::vector<std::pair<Polyline, io::Rgb>> lines;
    for (const auto& c : chains) lines.push_back({io::chain_polyline(c, 100), {255, 210, 0}});
    for (const auto& c : out.report.chains) lines.push_back({io::chain_polyline(c, 100), {230, 30, 30}});
    io::write_file((fs::path(out_dir) / "overlay.png").string(), io::encode_png(io::overlay(image, lines)));
  }
  return out;
}

}  // namespace sprefine

#endif
