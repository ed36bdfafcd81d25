#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <memory>
#include <string>
#include <thread>

#include "sprefine/io/image_io.hpp"
#include "sprefine/io/json_io.hpp"
#include "sprefine/synth.hpp"
#include "sprefine/service.hpp"

using namespace sprefine;
using service::Service;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const char* kFast = R"({"optimizer.phase1_steps": 20, "optimizer.phase2_steps": 80,
                        "optimizer.phase3_steps": 20, "optimizer.seeds": 1})";
const char* kSlow = R"({"optimizer.phase1_steps": 100000, "optimizer.seeds": 1})";

// Service bound to an ephemeral port with a client pointed at it.
class Server {
 public:
  explicit Server(const RunConfig& cfg) : svc_(std::make_unique<Service>(cfg)) {
    svc_->install(http_);
    port_ = http_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { http_.listen_after_bind(); });
    http_.wait_until_ready();
    client_ = std::make_unique<httplib::Client>("127.0.0.1", port_);
    client_->set_read_timeout(60, 0);
  }

  ~Server() {
    http_.stop();
    thread_.join();
    svc_.reset();
  }

  httplib::Client& client() { return *client_; }
  Service& service() { return *svc_; }

 private:
  std::unique_ptr<Service> svc_;
  httplib::Server http_;
  int port_ = 0;
  std::thread thread_;
  std::unique_ptr<httplib::Client> client_;
};

struct Reply {
  int status = 0;
  std::string body;
  std::string content_type;
  json doc;
};

Reply reply(const httplib::Result& r) {
  Reply out;
  if (!r) return out;
  out.status = r->status;
  out.body = r->body;
  out.content_type = r->get_header_value("Content-Type");
  if (out.content_type.rfind("application/json", 0) == 0) out.doc = json::parse(out.body);
  return out;
}

class ServiceTest : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::temp_directory_path() /
            ("sprefine_service_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(root_);
    cfg_.service.data_root = root_.string();
    frame_ = [] {
      GenConfig g;
      g.seed = 11;
      return gen_frame(g, 0);
    }();
  }

  void TearDown() override { fs::remove_all(root_); }

  std::string png() const {
    const auto b = io::encode_png(frame_.image, 16);
    return std::string(b.begin(), b.end());
  }

  // Straight line between the label's endpoints.
  std::string straight_guess() const {
    const auto& p = frame_.labels[0];
    KnotChain c{{{p.front().x, p.front().y, 1.0}, {p.back().x, p.back().y, 1.0}}};
    return io::splines_to_json({c}).dump();
  }

  static std::string create(httplib::Client& c, const std::string& bytes) {
    const auto r = reply(c.Post("/sessions", bytes, "image/png"));
    EXPECT_EQ(r.status, 201) << r.body;
    return r.doc.value("id", "");
  }

  static Reply wait_job(httplib::Client& c, const std::string& job) {
    for (int i = 0; i < 6000; ++i) {
      auto r = reply(c.Get("/jobs/" + job));
      const auto state = r.doc.value("state", "");
      if (state == "done" || state == "failed") return r;
      std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }
    ADD_FAILURE() << "job " << job << " did not finish";
    return {};
  }

  // Session with the straight guess refined to completion.
  std::pair<std::string, std::string> refined_session(httplib::Client& c) {
    const auto id = create(c, png());
    EXPECT_EQ(reply(c.Post("/sessions/" + id + "/splines", straight_guess(), "application/json")).status, 200);
    const auto start = reply(c.Post("/sessions/" + id + "/refine", kFast, "application/json"));
    EXPECT_EQ(start.status, 202) << start.body;
    const auto job = start.doc.value("id", "");
    const auto done = wait_job(c, job);
    EXPECT_EQ(done.doc.value("state", ""), "done") << done.body;
    return {id, job};
  }

  static void expect_error(const Reply& r, int status, const std::string& code) {
    EXPECT_EQ(r.status, status) << r.body;
    ASSERT_TRUE(r.doc.is_object()) << r.body;
    EXPECT_EQ(r.doc.value("code", ""), code);
    EXPECT_FALSE(r.doc.value("message", "").empty());
  }

  fs::path root_;
  RunConfig cfg_;
  LabeledFrame frame_;
};

}  // namespace

TEST_F(ServiceTest, CreateSessionAssignsDistinctIds) {
  Server s(cfg_);
  const auto a = create(s.client(), png());
  const auto b = create(s.client(), png());
  EXPECT_FALSE(a.empty());
  EXPECT_NE(a, b);
  const auto got = reply(s.client().Get("/sessions/" + a));
  EXPECT_EQ(got.status, 200);
  EXPECT_EQ(got.doc["image"]["rows"], 64);
  EXPECT_TRUE(fs::exists(root_ / "sessions" / a / "image.png"));
  EXPECT_TRUE(fs::exists(root_ / "sessions" / a / "session.json"));
}

TEST_F(ServiceTest, MultipartUploadIsAccepted) {
  Server s(cfg_);
  httplib::MultipartFormDataItems items = {{"image", png(), "frame.png", "image/png"}};
  EXPECT_EQ(reply(s.client().Post("/sessions", items)).status, 201);
  httplib::MultipartFormDataItems wrong = {{"file", png(), "frame.png", "image/png"}};
  expect_error(reply(s.client().Post("/sessions", wrong)), 400, "bad_image");
}

TEST_F(ServiceTest, BadUploadsAreRejected) {
  cfg_.service.max_dim = 32;
  Server s(cfg_);
  expect_error(reply(s.client().Post("/sessions", "not an image", "image/png")), 400, "bad_image");
  expect_error(reply(s.client().Post("/sessions", png(), "image/png")), 413, "image_too_large");
  const auto b = io::encode_png(Image(16, 24), 8);
  expect_error(reply(s.client().Post("/sessions", std::string(b.begin(), b.end()), "image/png")), 400, "bad_image");
}

TEST_F(ServiceTest, OversizeBodyIsRejected) {
  cfg_.service.max_bytes = 1000;
  Server s(cfg_);
  const auto r = reply(s.client().Post("/sessions", png(), "image/png"));
  EXPECT_EQ(r.status, 413);
  // The handler may be bypassed when the transport rejects the body first.
  if (!r.body.empty()) {
    EXPECT_EQ(r.doc.value("code", ""), "payload_too_large");
  }
}

TEST_F(ServiceTest, SubmitSplines) {
  Server s(cfg_);
  auto& c = s.client();
  expect_error(reply(c.Post("/sessions/s999999/splines", straight_guess(), "application/json")), 404, "not_found");
  const auto id = create(c, png());
  const auto path = "/sessions/" + id + "/splines";

  auto r = reply(c.Post(path, straight_guess(), "application/json"));
  EXPECT_EQ(r.status, 200);
  EXPECT_EQ(r.doc["splines"][0]["knots"].size(), 2u);

  expect_error(reply(c.Post(path, R"({"splines": []})", "application/json")), 422, "invalid_splines");
  expect_error(reply(c.Post(path, "{", "application/json")), 422, "invalid_splines");
  expect_error(reply(c.Post(path, R"({"splines": [{"knots": [[1, 2]]}]})", "application/json")), 422, "invalid_splines");

  // Six knots without widths come back with w = 1.
  json curved = json::array();
  for (int k = 0; k < 6; ++k) curved.push_back({10.0 + 8 * k, 30.0 + 5 * std::sin(k)});
  r = reply(c.Post(path, json{{"knots", curved}}.dump(), "application/json"));
  ASSERT_EQ(r.status, 200) << r.body;
  const auto& knots = r.doc["splines"][0]["knots"];
  ASSERT_EQ(knots.size(), 6u);
  for (std::size_t k = 0; k < 6; ++k) {
    EXPECT_EQ(knots[k].size(), 3u);
    EXPECT_DOUBLE_EQ(knots[k][2].get<double>(), 1.0);
    EXPECT_DOUBLE_EQ(knots[k][0].get<double>(), curved[k][0].get<double>());
  }
  const auto got = reply(c.Get("/sessions/" + id));
  EXPECT_EQ(got.doc["splines"], r.doc["splines"]);
  EXPECT_EQ(got.doc["accepted"], json::array({false}));
}

TEST_F(ServiceTest, AcceptFlagsMatchChains) {
  Server s(cfg_);
  auto& c = s.client();
  const auto id = create(c, png());
  const auto path = "/sessions/" + id + "/accept";
  c.Post("/sessions/" + id + "/splines", straight_guess(), "application/json");
  expect_error(reply(c.Post(path, R"({"accepted": [true, false]})", "application/json")), 422, "invalid_accept");
  expect_error(reply(c.Post(path, R"({"accepted": [1]})", "application/json")), 422, "invalid_accept");
  expect_error(reply(c.Post(path, "nope", "application/json")), 400, "bad_json");
  const auto r = reply(c.Post(path, R"({"accepted": [true]})", "application/json"));
  EXPECT_EQ(r.status, 200);
  EXPECT_EQ(r.doc["accepted"], json::array({true}));
}

TEST_F(ServiceTest, RefineRequiresSplinesAndValidOverrides) {
  Server s(cfg_);
  auto& c = s.client();
  const auto id = create(c, png());
  const auto path = "/sessions/" + id + "/refine";
  expect_error(reply(c.Post(path, "", "application/json")), 409, "no_splines");
  c.Post("/sessions/" + id + "/splines", straight_guess(), "application/json");
  expect_error(reply(c.Post(path, R"({"optimizer.nope": 1})", "application/json")), 422, "invalid_config");
  expect_error(reply(c.Post(path, R"({"optimizer.seeds": 0})", "application/json")), 422, "invalid_config");
  expect_error(reply(c.Post(path, "[1]", "application/json")), 400, "bad_json");
  expect_error(reply(c.Get("/jobs/j424242")), 404, "not_found");
  expect_error(reply(c.Post("/sessions/s424242/refine", "", "application/json")), 404, "not_found");
}

TEST_F(ServiceTest, SecondRefineWhileRunningConflicts) {
  Server s(cfg_);
  auto& c = s.client();
  const auto id = create(c, png());
  c.Post("/sessions/" + id + "/splines", straight_guess(), "application/json");
  const auto first = reply(c.Post("/sessions/" + id + "/refine", kSlow, "application/json"));
  ASSERT_EQ(first.status, 202) << first.body;
  EXPECT_EQ(first.doc["session"], id);
  expect_error(reply(c.Post("/sessions/" + id + "/refine", kFast, "application/json")), 409, "job_running");
}

TEST_F(ServiceTest, GlobalQueueDepthReturns429) {
  cfg_.service.queue_depth = 1;
  Server s(cfg_);
  auto& c = s.client();
  const auto a = create(c, png());
  const auto b = create(c, png());
  for (const auto& id : {a, b}) c.Post("/sessions/" + id + "/splines", straight_guess(), "application/json");
  EXPECT_EQ(reply(c.Post("/sessions/" + a + "/refine", kSlow, "application/json")).status, 202);
  expect_error(reply(c.Post("/sessions/" + b + "/refine", kFast, "application/json")), 429, "queue_full");
}

TEST_F(ServiceTest, PollingDuringAJobSeesMonotoneProgress) {
  Server s(cfg_);
  auto& c = s.client();
  const auto id = create(c, png());
  c.Post("/sessions/" + id + "/splines", straight_guess(), "application/json");
  const auto job = reply(c.Post("/sessions/" + id + "/refine", kFast, "application/json")).doc.value("id", "");
  auto rank = [](const std::string& st) { return st == "queued" ? 0 : st == "running" ? 1 : 2; };
  int last_rank = 0, last_phase = 0, polls = 0;
  std::string state;
  while (state != "done" && state != "failed" && polls < 100000) {
    const auto r = reply(c.Get("/jobs/" + job));
    ASSERT_EQ(r.status, 200);
    state = r.doc.value("state", "");
    EXPECT_GE(rank(state), last_rank);
    EXPECT_GE(r.doc["progress"]["phase"].get<int>(), last_phase);
    last_rank = rank(state);
    last_phase = r.doc["progress"]["phase"].get<int>();
    ++polls;
  }
  EXPECT_EQ(state, "done");
  EXPECT_EQ(last_phase, 3);
}

TEST_F(ServiceTest, EndToEndRefineOverlayAndExport) {
  Server s(cfg_);
  auto& c = s.client();
  const auto id = create(c, png());
  expect_error(reply(c.Get("/sessions/" + id + "/overlay?kind=overlay")), 409, "no_result");
  expect_error(reply(c.Get("/sessions/" + id + "/export")), 409, "no_result");

  c.Post("/sessions/" + id + "/splines", straight_guess(), "application/json");
  c.Post("/sessions/" + id + "/accept", R"({"accepted": [true]})", "application/json");
  const auto job = reply(c.Post("/sessions/" + id + "/refine", kFast, "application/json")).doc.value("id", "");
  const auto done = wait_job(c, job);
  ASSERT_EQ(done.doc.value("state", ""), "done") << done.body;
  const auto& result = done.doc["result"];
  EXPECT_GT(result["loss"].get<double>(), 0.0);
  EXPECT_EQ(result["success"].get<bool>(),
            result["loss"].get<double>() < 0.5 * result["background_only_loss"].get<double>());
  EXPECT_TRUE(result["success"].get<bool>());
  EXPECT_EQ(io::splines_from_json(result["splines"]).front().size(), 12u);

  // Reconstruction matches a local render of the reported scene.
  const auto scene = io::scene_from_json(result["report"]["scene"]);
  const auto rec = reply(c.Get("/sessions/" + id + "/overlay?kind=reconstruction"));
  ASSERT_EQ(rec.status, 200);
  EXPECT_EQ(rec.content_type, "image/png");
  const auto img = io::decode_png(io::Bytes(rec.body.begin(), rec.body.end()));
  const auto ref = render_scene(scene);
  ASSERT_EQ(img.data.size(), ref.data.size());
  for (std::size_t i = 0; i < ref.data.size(); ++i)
    EXPECT_NEAR(img.data[i], std::clamp(ref.data[i], 0.0, 1.0), 1.0 / 255) << i;

  const auto ov = reply(c.Get("/sessions/" + id + "/overlay?kind=overlay"));
  EXPECT_EQ(ov.status, 200);
  EXPECT_GT(io::decode_png(io::Bytes(ov.body.begin(), ov.body.end())).rows, 64);

  const auto count = reply(c.Get("/sessions/" + id + "/overlay?kind=per_body"));
  EXPECT_EQ(count.doc["count"], scene.chains.size());
  EXPECT_EQ(reply(c.Get("/sessions/" + id + "/overlay?kind=per_body&body=0")).status, 200);
  expect_error(reply(c.Get("/sessions/" + id + "/overlay?kind=per_body&body=1")), 404, "not_found");
  expect_error(reply(c.Get("/sessions/" + id + "/overlay?kind=per_body&body=0x")), 404, "not_found");
  expect_error(reply(c.Get("/sessions/" + id + "/overlay?kind=heatmap")), 400, "bad_kind");

  const auto ex = reply(c.Get("/sessions/" + id + "/export"));
  ASSERT_EQ(ex.status, 200);
  EXPECT_EQ(ex.doc["job"], job);
  const auto chains = io::splines_from_json(ex.doc);
  ASSERT_EQ(chains.size(), 1u);
  const auto& entry = ex.doc["splines"][0];
  EXPECT_TRUE(entry["accepted"].get<bool>());
  ASSERT_EQ(entry["points"].size(), 100u);
  ASSERT_EQ(entry["widths"].size(), 100u);
  const auto points = io::polyline_from_json(entry["points"]);
  const auto resampled = io::chain_polyline(chains[0], 100);
  for (std::size_t i = 0; i < 100; ++i) {
    EXPECT_NEAR(points[i].x, resampled[i].x, 1e-9);
    EXPECT_NEAR(points[i].y, resampled[i].y, 1e-9);
    EXPECT_GE(entry["widths"][i].get<double>(), 0.0);
  }
  // Refinement moves the straight guess toward the curved label.
  const double chord = std::hypot(frame_.labels[0].back().x - frame_.labels[0].front().x,
                                  frame_.labels[0].back().y - frame_.labels[0].front().y);
  EXPECT_GT(arc_length(fit_natural_cubic(chains[0])), 0.5 * chord);
}

TEST_F(ServiceTest, RestartReproducesGetResponses) {
  std::string id, job;
  std::vector<std::string> paths;
  std::vector<Reply> before;
  {
    Server s(cfg_);
    std::tie(id, job) = refined_session(s.client());
    paths = {"/sessions/" + id, "/jobs/" + job, "/sessions/" + id + "/export",
             "/sessions/" + id + "/overlay?kind=reconstruction", "/sessions/" + id + "/overlay?kind=overlay",
             "/sessions/" + id + "/overlay?kind=per_body&body=0"};
    for (const auto& p : paths) before.push_back(reply(s.client().Get(p)));
  }
  Server s(cfg_);
  for (std::size_t i = 0; i < paths.size(); ++i) {
    const auto r = reply(s.client().Get(paths[i]));
    EXPECT_EQ(r.status, before[i].status) << paths[i];
    EXPECT_EQ(r.body, before[i].body) << paths[i];
  }
  // New ids continue after the restored ones.
  EXPECT_GT(create(s.client(), png()), id);
}

TEST_F(ServiceTest, RestartFailsInterruptedJobs) {
  std::string job;
  {
    Server s(cfg_);
    auto& c = s.client();
    const auto id = create(c, png());
    c.Post("/sessions/" + id + "/splines", straight_guess(), "application/json");
    job = reply(c.Post("/sessions/" + id + "/refine", kSlow, "application/json")).doc.value("id", "");
    ASSERT_FALSE(job.empty());
  }
  // Simulate a crash mid-run: rewrite the persisted state as running.
  const auto path = root_ / "jobs" / (job + ".json");
  const auto b = io::read_file(path.string());
  auto doc = json::parse(b.begin(), b.end());
  doc["state"] = "running";
  io::write_file(path.string(), doc.dump());
  Server s(cfg_);
  const auto r = reply(s.client().Get("/jobs/" + job));
  EXPECT_EQ(r.doc["state"], "failed");
  EXPECT_FALSE(r.doc.value("error", "").empty());
}

TEST_F(ServiceTest, CorsAndJsonErrors) {
  cfg_.service.cors_origin = "http://localhost:5173";
  Server s(cfg_);
  auto& c = s.client();
  const auto pre = c.Options("/sessions");
  ASSERT_TRUE(pre);
  EXPECT_EQ(pre->status, 204);
  EXPECT_EQ(pre->get_header_value("Access-Control-Allow-Origin"), "http://localhost:5173");
  const auto miss = c.Get("/nowhere");
  ASSERT_TRUE(miss);
  EXPECT_EQ(miss->get_header_value("Access-Control-Allow-Origin"), "http://localhost:5173");
  expect_error(reply(miss), 404, "not_found");
  expect_error(reply(c.Get("/sessions/s000777")), 404, "not_found");
}

TEST_F(ServiceTest, HandlersWorkWithoutASocket) {
  Service svc(cfg_);
  const auto created = svc.create_session(png());
  ASSERT_EQ(created.status, 201);
  const auto id = json::parse(created.body).at("id").get<std::string>();
  EXPECT_EQ(svc.submit_splines(id, straight_guess()).status, 200);
  const auto start = svc.start_refine(id, kFast);
  ASSERT_EQ(start.status, 202);
  svc.wait_idle();
  const auto job = svc.poll_job(json::parse(start.body).at("id").get<std::string>());
  EXPECT_EQ(json::parse(job.body).at("state"), "done");
  EXPECT_EQ(svc.export_labels(id).status, 200);
}
