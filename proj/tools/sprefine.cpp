// sprefine command-line tool: gen, refine, sweep, serve, eval.
//
// Exit codes: 0 success, 1 partial failure (some frames or the refinement
// job failed), 2 usage or I/O error.

#include <csignal>
#include <cstdio>
#include <iostream>
#include <map>
#include <string>

#include <CLI11.hpp>

#include "sprefine/config.hpp"
#include "sprefine/harness.hpp"
#include "sprefine/service.hpp"

namespace {

using namespace sprefine;

constexpr int kOk = 0;
constexpr int kPartial = 1;
constexpr int kUsage = 2;

volatile std::sig_atomic_t g_interrupted = 0;
httplib::Server* g_server = nullptr;

void on_signal(int) {
  g_interrupted = 1;
  if (g_server) g_server->stop();
}

int run_eval(const RunConfig& cfg, const std::string& csv, const std::string& reference, const std::string& candidate) {
  if (!csv.empty()) {
    const auto bytes = io::read_file(csv);
    const auto rows = parse_csv(std::string(bytes.begin(), bytes.end()));
    const auto summary = summarize(rows, cfg.sweep.percentile);
    std::cout << summary_text(summary, cfg.sweep.percentile);
    return kOk;
  }
  if (reference.empty() || candidate.empty()) throw CLI::ValidationError("eval", "give --csv, or both --reference and --candidate");
  const auto a = load_curves(reference, cfg.metrics.resample);
  const auto b = load_curves(candidate, cfg.metrics.resample);
  if (a.size() != b.size()) throw InvalidInput("curve files hold different counts");
  nlohmann::json out = nlohmann::json::array();
  for (std::size_t i = 0; i < a.size(); ++i) out.push_back({{"index", i}, {"avg_dtw", avg_dtw(a[i], b[i], cfg.metrics)}});
  std::cout << out.dump(1) << "\n";
  return kOk;
}

int run_serve(const RunConfig& cfg) {
  service::Service svc(cfg);
  httplib::Server server;
  svc.install(server);
  g_server = &server;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::cerr << "sprefine " << kVersion << " listening on " << cfg.service.host << ":" << cfg.service.port << "\n";
  const bool ok = server.listen(cfg.service.host, cfg.service.port);
  g_server = nullptr;
  svc.stop();
  if (!ok && !g_interrupted) throw IoError("cannot listen on " + cfg.service.host + ":" + std::to_string(cfg.service.port));
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Differentiable spline refinement of slender-body centerlines"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  bool print_config = false;
  app.add_option("--config", config_path, "TOML-style config file")->check(CLI::ExistingFile);
  app.add_flag("--print-config", print_config, "print the resolved config as JSON to stderr");

  // Every config key is a flag of the same dotted name. Values are applied
  // after the config file and the environment.
  RunConfig defaults;
  std::map<std::string, std::string> overrides;
  for (const auto& key : config_keys(defaults)) {
    const std::string name = key.name;
    app.add_option_function<std::string>(
           "--" + name, [&overrides, name](const std::string& v) { overrides[name] = v; },
           key.help.empty() ? "default " + key.get().dump() : key.help + " (default " + key.get().dump() + ")")
        ->group("Config");
  }

  auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  std::string gen_out;
  gen->add_option("--out,-o", gen_out, "output directory")->required();

  auto* ref = app.add_subcommand("refine", "refine splines on one image");
  std::string image_path, splines_path, refine_out;
  bool no_images = false;
  ref->add_option("--image,-i", image_path, "grayscale PNG or PGM")->required();
  ref->add_option("--splines,-s", splines_path, "initial splines JSON")->required();
  ref->add_option("--out,-o", refine_out, "output directory")->required();
  ref->add_flag("--no-images", no_images, "skip overlay and reconstruction PNGs");

  auto* sweep = app.add_subcommand("sweep", "perturbation sweep over a dataset");
  std::string dataset, sweep_out;
  sweep->add_option("--dataset,-d", dataset, "directory written by gen")->required();
  sweep->add_option("--out,-o", sweep_out, "output directory")->required();

  app.add_subcommand("serve", "run the labeling HTTP service");

  auto* eval = app.add_subcommand("eval", "summarize a sweep CSV or compare two spline files");
  std::string csv, reference, candidate;
  eval->add_option("--csv", csv, "results.csv written by sweep");
  eval->add_option("--reference", reference, "reference splines JSON");
  eval->add_option("--candidate", candidate, "candidate splines JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    RunConfig cfg;
    if (!config_path.empty()) apply_config_file(cfg, config_path);
    apply_environment(cfg);
    for (const auto& [name, value] : overrides) {
      try {
        set_config_value(cfg, name, value);
      } catch (const InvalidInput& e) {
        throw InvalidInput("--" + name + ": " + e.what());
      }
    }
    validate(cfg);
    if (print_config) std::cerr << to_json(cfg).dump(1) << "\n";

    if (gen->parsed()) {
      const auto n = cmd_gen(cfg, gen_out);
      std::cerr << "wrote " << n << " frames to " << gen_out << "\n";
      return kOk;
    }
    if (ref->parsed()) {
      try {
        const auto out = cmd_refine(image_path, splines_path, cfg, refine_out, !no_images);
        std::cerr << "final recon " << out.report.final_recon << ", background-only "
                  << out.report.appearance.background_only_loss << "\n";
      } catch (const JobError& e) {
        std::cerr << "refinement failed: " << e.what() << "\n";
        return kPartial;
      } catch (const NumericalError& e) {
        std::cerr << "refinement failed: " << e.what() << "\n";
        return kPartial;
      }
      return kOk;
    }
    if (sweep->parsed()) {
      const auto frames = load_dataset(dataset);
      const auto res = run_sweep(frames, cfg);
      write_sweep(res, cfg, sweep_out);
      std::cout << summary_text(res.summary, cfg.sweep.percentile);
      if (res.failures) {
        std::cerr << res.failures << " rows failed; see the status column\n";
        return kPartial;
      }
      return kOk;
    }
    if (app.got_subcommand("serve")) return run_serve(cfg);
    if (eval->parsed()) return run_eval(cfg, csv, reference, candidate);
  } catch (const CLI::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
