#ifndef SPREFINE_SERVICE_HPP
#define SPREFINE_SERVICE_HPP

// Assisted-labeling HTTP service.
//
// Store layout under data_root:
//   sessions/<id>/image.png      decoded input, 16-bit grayscale
//   sessions/<id>/session.json   initial splines, accepted flags, job ids
//   jobs/<id>.json               job state and, when done, the result
//
// Handlers are plain member functions returning Response so they can be
// exercised without a socket; install() wires them into an httplib::Server.

#include <condition_variable>
#include <deque>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "sprefine/config.hpp"
#include "sprefine/io/image_io.hpp"
#include "sprefine/io/json_io.hpp"
#include "sprefine/objective.hpp"
#include "sprefine/optimizer.hpp"

// Last: <resolv.h>, pulled in by httplib, defines a `_res` macro that breaks
// Eigen headers included after it.
#include <httplib.h>

namespace sprefine::service {

using nlohmann::json;
namespace fs = std::filesystem;

struct Response {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
};

inline Response json_response(int status, const json& j) { return {status, "application/json", j.dump()}; }

inline Response error_response(int status, const std::string& code, const std::string& message) {
  return json_response(status, {{"code", code}, {"message", message}});
}

enum class JobState { Queued, Running, Done, Failed };

inline const char* to_string(JobState s) {
  switch (s) {
    case JobState::Queued: return "queued";
    case JobState::Running: return "running";
    case JobState::Done: return "done";
    case JobState::Failed: return "failed";
  }
  return "failed";
}

inline JobState job_state_from(const std::string& s) {
  if (s == "queued") return JobState::Queued;
  if (s == "running") return JobState::Running;
  if (s == "done") return JobState::Done;
  return JobState::Failed;
}

struct Job {
  std::string id;
  std::string session;
  JobState state = JobState::Queued;
  int phase = 0;
  int step = 0;
  int steps = 0;
  std::string error;
  json result;  // set when done
  RunConfig config;
};

struct Session {
  std::string id;
  Image image;
  std::vector<KnotChain> splines;
  std::vector<bool> accepted;
  std::vector<std::string> jobs;
  std::mutex mu;
};

class Service {
 public:
  explicit Service(RunConfig cfg) : cfg_(std::move(cfg)) {
    validate(cfg_);
    root_ = cfg_.service.data_root;
    fs::create_directories(root_ / "sessions");
    fs::create_directories(root_ / "jobs");
    load();
    for (int i = 0; i < cfg_.service.workers; ++i) workers_.emplace_back([this] { work(); });
  }

  ~Service() { stop(); }

  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  /// Interrupts running jobs and joins the workers.
  void stop() {
    {
      std::lock_guard lock(queue_mu_);
      if (stopping_) return;
      stopping_ = true;
    }
    queue_cv_.notify_all();
    for (auto& t : workers_) t.join();
  }

  /// Blocks until no job is queued or running.
  void wait_idle() {
    std::unique_lock lock(queue_mu_);
    idle_cv_.wait(lock, [this] { return pending_ == 0; });
  }

  const RunConfig& config() const { return cfg_; }

  // -------------------------------------------------------------------------
  // Handlers

  Response create_session(const std::string& bytes) {
    if (bytes.size() > static_cast<std::size_t>(cfg_.service.max_bytes))
      return error_response(413, "payload_too_large", "image exceeds " + std::to_string(cfg_.service.max_bytes) + " bytes");
    Image img;
    try {
      img = io::decode_image(io::Bytes(bytes.begin(), bytes.end()), static_cast<std::uint32_t>(cfg_.service.max_dim));
    } catch (const io::OversizeImage& e) {
      return error_response(413, "image_too_large", e.what());
    } catch (const std::exception& e) {
      return error_response(400, "bad_image", e.what());
    }
    if (img.rows != img.cols) return error_response(400, "bad_image", "image must be square");
    auto s = std::make_shared<Session>();
    {
      std::lock_guard lock(store_mu_);
      s->id = next_id("s", ++session_counter_);
      sessions_[s->id] = s;
    }
    s->image = std::move(img);
    fs::create_directories(session_dir(s->id));
    io::write_file((session_dir(s->id) / "image.png").string(), io::encode_png(s->image, 16));
    std::lock_guard lock(s->mu);
    persist(*s);
    return json_response(201, session_json(*s));
  }

  Response get_session(const std::string& id) {
    auto s = find_session(id);
    if (!s) return not_found("session", id);
    std::lock_guard lock(s->mu);
    return json_response(200, session_json(*s));
  }

  Response submit_splines(const std::string& id, const std::string& body) {
    auto s = find_session(id);
    if (!s) return not_found("session", id);
    std::vector<KnotChain> chains;
    try {
      chains = io::parse_splines(body, "splines");
    } catch (const std::exception& e) {
      return error_response(422, "invalid_splines", e.what());
    }
    std::lock_guard lock(s->mu);
    s->splines = std::move(chains);
    s->accepted.assign(s->splines.size(), false);
    persist(*s);
    return json_response(200, io::splines_to_json(s->splines));
  }

  /// Body: {"accepted": [bool, ...]} with one flag per submitted chain.
  Response accept(const std::string& id, const std::string& body) {
    auto s = find_session(id);
    if (!s) return not_found("session", id);
    json j;
    try {
      j = json::parse(body);
    } catch (const std::exception& e) {
      return error_response(400, "bad_json", e.what());
    }
    std::lock_guard lock(s->mu);
    if (!j.is_object() || !j.contains("accepted") || !j["accepted"].is_array() || j["accepted"].size() != s->splines.size())
      return error_response(422, "invalid_accept", "expected {\"accepted\": [...]} with one flag per chain");
    for (std::size_t i = 0; i < s->splines.size(); ++i) {
      if (!j["accepted"][i].is_boolean()) return error_response(422, "invalid_accept", "flags must be booleans");
      s->accepted[i] = j["accepted"][i].get<bool>();
    }
    persist(*s);
    return json_response(200, session_json(*s));
  }

  /// Body: optional object of dotted config overrides, e.g.
  /// {"optimizer.phase2_steps": 200}.
  Response start_refine(const std::string& id, const std::string& body) {
    auto s = find_session(id);
    if (!s) return not_found("session", id);
    RunConfig rc = cfg_;
    if (!body.empty()) {
      json j;
      try {
        j = json::parse(body);
      } catch (const std::exception& e) {
        return error_response(400, "bad_json", e.what());
      }
      if (!j.is_null() && !j.is_object()) return error_response(400, "bad_json", "overrides must be an object");
      try {
        for (auto it = j.begin(); !j.is_null() && it != j.end(); ++it)
          set_config_value(rc, it.key(), it.value().is_string() ? it.value().get<std::string>() : it.value().dump());
        validate(rc);
      } catch (const std::exception& e) {
        return error_response(422, "invalid_config", e.what());
      }
    }
    rc.refine.optimizer.workers = 1;
    std::lock_guard slock(s->mu);
    if (s->splines.empty()) return error_response(409, "no_splines", "submit splines before refining");
    for (const auto& jid : s->jobs) {
      auto job = find_job(jid);
      std::lock_guard jl(job_mu_);
      if (job && (job->state == JobState::Queued || job->state == JobState::Running))
        return error_response(409, "job_running", "session " + id + " already has job " + jid);
    }
    auto job = std::make_shared<Job>();
    {
      std::lock_guard lock(queue_mu_);
      if (stopping_) return error_response(503, "stopping", "service is shutting down");
      if (pending_ >= cfg_.service.queue_depth)
        return error_response(429, "queue_full", "job queue is full (" + std::to_string(cfg_.service.queue_depth) + ")");
      ++pending_;
      std::lock_guard store(store_mu_);
      job->id = next_id("j", ++job_counter_);
      job->session = id;
      job->config = std::move(rc);
      jobs_[job->id] = job;
    }
    s->jobs.push_back(job->id);
    persist(*s);
    persist(*job);
    {
      std::lock_guard lock(queue_mu_);
      queue_.push_back(job);
    }
    queue_cv_.notify_one();
    std::lock_guard jl(job_mu_);
    return json_response(202, job_json(*job));
  }

  Response poll_job(const std::string& id) {
    auto job = find_job(id);
    if (!job) return not_found("job", id);
    std::lock_guard lock(job_mu_);
    return json_response(200, job_json(*job));
  }

  /// kind = reconstruction | overlay | per_body. per_body without `body`
  /// returns {"count": n}; with body=i it returns that chain's rendering.
  Response overlay(const std::string& id, const std::string& kind, const std::string& body_index) {
    auto s = find_session(id);
    if (!s) return not_found("session", id);
    if (kind != "reconstruction" && kind != "overlay" && kind != "per_body")
      return error_response(400, "bad_kind", "kind must be reconstruction, overlay or per_body");
    std::lock_guard lock(s->mu);
    auto done = last_done(*s);
    if (!done) return error_response(409, "no_result", "session has no completed job");
    Scene scene;
    std::vector<KnotChain> refined;
    try {
      std::lock_guard jl(job_mu_);
      scene = io::scene_from_json(done->result.at("report").at("scene"));
      refined = io::splines_from_json(done->result.at("report").at("splines"));
    } catch (const std::exception& e) {
      return error_response(500, "corrupt_result", e.what());
    }
    if (kind == "reconstruction") return png(io::encode_png(render_scene(scene), 16));
    if (kind == "overlay") {
      std::vector<std::pair<Polyline, io::Rgb>> lines;
      for (const auto& c : s->splines) lines.push_back({io::chain_polyline(c, 100), {255, 210, 0}});
      for (const auto& c : refined) lines.push_back({io::chain_polyline(c, 100), {230, 30, 30}});
      return png(io::encode_png(io::overlay(s->image, lines)));
    }
    const auto n = static_cast<int>(scene.chains.size());
    if (body_index.empty()) return json_response(200, {{"count", n}});
    int b = -1;
    try {
      std::size_t used = 0;
      b = std::stoi(body_index, &used);
      if (used != body_index.size()) b = -1;
    } catch (const std::exception&) {
    }
    if (b < 0 || b >= n) return error_response(404, "not_found", "no body " + body_index);
    auto img = render_bodies(scene)[static_cast<std::size_t>(b)];
    for (auto& v : img.data) v = std::abs(v);
    return png(io::encode_png(img, 16));
  }

  /// Refined splines resampled to 100 points with widths, plus metadata.
  /// Parses as a spline file.
  Response export_labels(const std::string& id) {
    auto s = find_session(id);
    if (!s) return not_found("session", id);
    std::lock_guard lock(s->mu);
    auto done = last_done(*s);
    if (!done) return error_response(409, "no_result", "session has no completed job");
    std::lock_guard jl(job_mu_);
    const auto& rep = done->result.at("report");
    const auto refined = io::splines_from_json(rep.at("splines"));
    Scene scene = io::scene_from_json(rep.at("scene"));
    json splines = json::array();
    for (std::size_t i = 0; i < refined.size(); ++i) {
      auto entry = io::to_json(refined[i]);
      entry["accepted"] = i < s->accepted.size() && s->accepted[i];
      entry["points"] = io::to_json(io::chain_polyline(refined[i], 100));
      entry["widths"] = width_profile(scene, i, 100).width;
      entry["initial"] = io::to_json(s->splines[i]).at("knots");
      splines.push_back(entry);
    }
    return json_response(200, {{"session", s->id},
                                {"job", done->id},
                                {"version", kVersion},
                                {"image", {{"rows", s->image.rows}, {"cols", s->image.cols}}},
                                {"W", rep.at("W")},
                                {"loss", done->result.at("loss")},
                                {"success", done->result.at("success")},
                                {"splines", splines}});
  }

  /// Registers routes, CORS headers and the payload limit on `server`.
  void install(httplib::Server& server) {
    using httplib::Request;
    using Res = httplib::Response;
    const std::string origin = cfg_.service.cors_origin;
    server.set_payload_max_length(static_cast<std::size_t>(cfg_.service.max_bytes) + 1);
    server.set_default_headers({{"Access-Control-Allow-Origin", origin},
                                {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                                {"Access-Control-Allow-Headers", "Content-Type"}});
    auto send = [](Res& res, const Response& r) {
      res.status = r.status;
      res.set_content(r.body, r.content_type);
    };
    server.Options(".*", [](const Request&, Res& res) { res.status = 204; });
    server.Post("/sessions", [this, send](const Request& req, Res& res) {
      if (req.is_multipart_form_data()) {
        if (!req.has_file("image")) return send(res, error_response(400, "bad_image", "multipart field 'image' missing"));
        return send(res, create_session(req.get_file_value("image").content));
      }
      send(res, create_session(req.body));
    });
    server.Get(R"(/sessions/([A-Za-z0-9]+))", [this, send](const Request& req, Res& res) {
      send(res, get_session(req.matches[1]));
    });
    server.Post(R"(/sessions/([A-Za-z0-9]+)/splines)", [this, send](const Request& req, Res& res) {
      send(res, submit_splines(req.matches[1], req.body));
    });
    server.Post(R"(/sessions/([A-Za-z0-9]+)/accept)", [this, send](const Request& req, Res& res) {
      send(res, accept(req.matches[1], req.body));
    });
    server.Post(R"(/sessions/([A-Za-z0-9]+)/refine)", [this, send](const Request& req, Res& res) {
      send(res, start_refine(req.matches[1], req.body));
    });
    server.Get(R"(/jobs/([A-Za-z0-9]+))", [this, send](const Request& req, Res& res) {
      send(res, poll_job(req.matches[1]));
    });
    server.Get(R"(/sessions/([A-Za-z0-9]+)/overlay)", [this, send](const Request& req, Res& res) {
      send(res, overlay(req.matches[1], req.get_param_value("kind"), req.get_param_value("body")));
    });
    server.Get(R"(/sessions/([A-Za-z0-9]+)/export)", [this, send](const Request& req, Res& res) {
      send(res, export_labels(req.matches[1]));
    });
    server.set_error_handler([send](const Request&, Res& res) {
      if (!res.body.empty()) return;
      if (res.status == 413) return send(res, error_response(413, "payload_too_large", "request body too large"));
      send(res, error_response(res.status, res.status == 404 ? "not_found" : "error", httplib::status_message(res.status)));
    });
    server.set_exception_handler([send](const Request&, Res& res, std::exception_ptr ep) {
      std::string msg = "internal error";
      try {
        std::rethrow_exception(ep);
      } catch (const std::exception& e) {
        msg = e.what();
      } catch (...) {
      }
      send(res, error_response(500, "internal", msg));
    });
  }

 private:
  static std::string next_id(const char* prefix, long n) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s%06ld", prefix, n);
    return buf;
  }

  static Response png(const io::Bytes& b) { return {200, "image/png", std::string(b.begin(), b.end())}; }

  static Response not_found(const std::string& what, const std::string& id) {
    return error_response(404, "not_found", "unknown " + what + " '" + id + "'");
  }

  fs::path session_dir(const std::string& id) const { return root_ / "sessions" / id; }

  std::shared_ptr<Session> find_session(const std::string& id) {
    std::lock_guard lock(store_mu_);
    auto it = sessions_.find(id);
    return it == sessions_.end() ? nullptr : it->second;
  }

  std::shared_ptr<Job> find_job(const std::string& id) {
    std::lock_guard lock(store_mu_);
    auto it = jobs_.find(id);
    return it == jobs_.end() ? nullptr : it->second;
  }

  // Caller holds s.mu.
  std::shared_ptr<Job> last_done(const Session& s) {
    for (auto it = s.jobs.rbegin(); it != s.jobs.rend(); ++it) {
      auto job = find_job(*it);
      std::lock_guard jl(job_mu_);
      if (job && job->state == JobState::Done) return job;
    }
    return nullptr;
  }

  static json session_json(const Session& s) {
    json accepted = json::array();
    for (bool a : s.accepted) accepted.push_back(a);
    return {{"id", s.id},
            {"image", {{"rows", s.image.rows}, {"cols", s.image.cols}}},
            {"splines", io::splines_to_json(s.splines).at("splines")},
            {"accepted", accepted},
            {"jobs", s.jobs}};
  }

  // Caller holds job_mu_.
  static json job_json(const Job& j) {
    json out = {{"id", j.id},
                {"session", j.session},
                {"state", to_string(j.state)},
                {"progress", {{"phase", j.phase}, {"step", j.step}, {"steps", j.steps}}}};
    if (j.state == JobState::Failed) out["error"] = j.error;
    if (j.state == JobState::Done) out["result"] = j.result;
    return out;
  }

  void persist(const Session& s) {
    io::write_file((session_dir(s.id) / "session.json").string(), session_json(s).dump(1) + "\n");
  }

  void persist(const Job& j) {
    json doc;
    {
      std::lock_guard lock(job_mu_);
      doc = job_json(j);
    }
    doc["config"] = to_json(j.config);
    io::write_file((root_ / "jobs" / (j.id + ".json")).string(), doc.dump(1) + "\n");
  }

  static long id_number(const std::string& id) {
    try {
      return std::stol(id.substr(1));
    } catch (const std::exception&) {
      return 0;
    }
  }

  void load() {
    for (const auto& e : fs::directory_iterator(root_ / "jobs")) {
      if (e.path().extension() != ".json") continue;
      try {
        const auto b = io::read_file(e.path().string());
        const auto doc = json::parse(b.begin(), b.end());
        auto job = std::make_shared<Job>();
        job->id = doc.at("id").get<std::string>();
        job->session = doc.at("session").get<std::string>();
        job->state = job_state_from(doc.at("state").get<std::string>());
        job->phase = doc.at("progress").at("phase").get<int>();
        job->step = doc.at("progress").at("step").get<int>();
        job->steps = doc.at("progress").at("steps").get<int>();
        if (doc.contains("error")) job->error = doc.at("error").get<std::string>();
        if (doc.contains("result")) job->result = doc.at("result");
        job->config = cfg_;
        if (job->state == JobState::Queued || job->state == JobState::Running) {
          job->state = JobState::Failed;
          job->error = "interrupted by service restart";
          persist(*job);
        }
        job_counter_ = std::max(job_counter_, id_number(job->id));
        jobs_[job->id] = job;
      } catch (const std::exception&) {
        // Unreadable job documents are skipped.
      }
    }
    for (const auto& e : fs::directory_iterator(root_ / "sessions")) {
      if (!e.is_directory()) continue;
      try {
        const auto b = io::read_file((e.path() / "session.json").string());
        const auto doc = json::parse(b.begin(), b.end());
        auto s = std::make_shared<Session>();
        s->id = doc.at("id").get<std::string>();
        s->image = io::read_image((e.path() / "image.png").string());
        if (!doc.at("splines").empty()) s->splines = io::splines_from_json(doc.at("splines"));
        for (const auto& a : doc.at("accepted")) s->accepted.push_back(a.get<bool>());
        s->jobs = doc.at("jobs").get<std::vector<std::string>>();
        session_counter_ = std::max(session_counter_, id_number(s->id));
        sessions_[s->id] = s;
      } catch (const std::exception&) {
      }
    }
  }

  void work() {
    for (;;) {
      std::shared_ptr<Job> job;
      {
        std::unique_lock lock(queue_mu_);
        queue_cv_.wait(lock, [this] { return stopping_ || !queue_.empty(); });
        if (stopping_) {
          for (auto& q : queue_) fail(*q, "service stopped");
          pending_ -= static_cast<int>(queue_.size());
          queue_.clear();
          idle_cv_.notify_all();
          return;
        }
        job = queue_.front();
        queue_.pop_front();
      }
      run(*job);
      {
        std::lock_guard lock(queue_mu_);
        --pending_;
      }
      idle_cv_.notify_all();
    }
  }

  void fail(Job& job, const std::string& message) {
    {
      std::lock_guard lock(job_mu_);
      job.state = JobState::Failed;
      job.error = message;
    }
    persist(job);
  }

  void run(Job& job) {
    auto s = find_session(job.session);
    Image image;
    std::vector<KnotChain> chains;
    {
      std::lock_guard lock(s->mu);
      image = s->image;
      chains = s->splines;
    }
    {
      std::lock_guard lock(job_mu_);
      job.state = JobState::Running;
    }
    persist(job);
    const StepObserver observer = [&](const StepInfo& info) {
      {
        std::lock_guard lock(queue_mu_);
        if (stopping_) throw JobError("service stopped");
      }
      std::lock_guard lock(job_mu_);
      job.phase = info.phase;
      job.step = info.step;
      job.steps = info.steps;
    };
    try {
      const auto rep = refine(image, chains, job.config.refine, observer);
      const double ratio = job.config.service.success_ratio;
      json result = {{"loss", rep.final_recon},
                     {"background_only_loss", rep.appearance.background_only_loss},
                     {"success", rep.final_recon < ratio * rep.appearance.background_only_loss},
                     {"success_ratio", ratio},
                     {"splines", io::splines_to_json(rep.chains).at("splines")},
                     {"report", io::to_json(rep)}};
      {
        std::lock_guard lock(job_mu_);
        job.result = std::move(result);
        job.state = JobState::Done;
      }
      persist(job);
    } catch (const std::exception& e) {
      fail(job, e.what());
    }
  }

  RunConfig cfg_;
  fs::path root_;

  std::mutex store_mu_;  // maps and counters
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::map<std::string, std::shared_ptr<Job>> jobs_;
  long session_counter_ = 0;
  long job_counter_ = 0;

  std::mutex job_mu_;  // job state fields; held only briefly

  std::mutex queue_mu_;
  std::condition_variable queue_cv_;
  std::condition_variable idle_cv_;
  std::deque<std::shared_ptr<Job>> queue_;
  int pending_ = 0;
  bool stopping_ = false;
  std::vector<std::thread> workers_;
};

}  // namespace sprefine::service

#endif
