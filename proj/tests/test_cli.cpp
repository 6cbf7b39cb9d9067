// End-to-end: the websocket server driven by a real client, and the pie binary.

#include "pie/scene.hpp"
#include "pie/session.hpp"
#include "pie/ws_server.hpp"

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <condition_variable>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <sstream>

namespace pie {
namespace {

namespace fs = std::filesystem;
namespace net = boost::asio;
namespace beast = boost::beast;
using tcp = net::ip::tcp;
using namespace std::chrono_literals;

const char* kScene = R"({
  "field": {"type": "analytic",
            "primitives": [{"shape": "sphere", "center": [0, 0, 0], "radius": 0.3, "density": 1, "color": [0.8, 0.4, 0.3]}]},
  "sampling": {"r_bar": 0.08, "kappa": 4, "seed": 11, "n_kernels": 8, "m_extra_ips": 8, "K_covariance": 16},
  "material": {"model": "neo_hookean", "E": 50000, "nu": 0.3, "rho": 100},
  "dynamics": {"dt": 0.02, "gravity": [0, -9.81, 0], "ground_plane": null},
  "camera": {"position": [0, 0, 1.5], "look_at": [0, 0, 0], "up": [0, 1, 0], "fov_deg": 60,
             "width": 40, "height": 30, "near": 0.1, "far": 10},
  "render": {"density_scale": 20.0, "background": [1, 1, 1]}
})";

// --- websocket client -----------------------------------------------------------------

/// Async client on its own thread; received messages queue up for the test.
class WsClient {
 public:
  explicit WsClient(unsigned short port) {
    beast::get_lowest_layer(ws_).connect(tcp::endpoint(net::ip::make_address("127.0.0.1"), port));
    ws_.handshake("127.0.0.1", "/");
    ws_.text(true);
    read_next();
    thread_ = std::thread([this] { ioc_.run(); });
  }

  ~WsClient() {
    net::post(ioc_, [this] {
      beast::error_code ec;
      beast::get_lowest_layer(ws_).socket().shutdown(tcp::socket::shutdown_both, ec);
      beast::get_lowest_layer(ws_).close();
    });
    thread_.join();
  }

  void send_text(const std::string& text) {
    std::promise<beast::error_code> done;
    auto buf = std::make_shared<std::string>(text);
    net::post(ioc_, [&, buf] {
      ws_.async_write(net::buffer(*buf), [&, buf](beast::error_code ec, std::size_t) { done.set_value(ec); });
    });
    EXPECT_FALSE(done.get_future().get());
  }
  void send(const Json& m) { send_text(m.dump()); }

  /// Next message satisfying `pred`; earlier messages are discarded.
  std::optional<Json> wait_for(const std::function<bool(const Json&)>& pred, std::chrono::milliseconds timeout = 20s) {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    std::unique_lock lock(mutex_);
    while (true) {
      while (!inbox_.empty()) {
        Json m = std::move(inbox_.front());
        inbox_.pop_front();
        if (pred(m)) return m;
      }
      if (closed_) return std::nullopt;
      if (cv_.wait_until(lock, deadline) == std::cv_status::timeout && inbox_.empty()) return std::nullopt;
    }
  }
  std::optional<Json> wait_type(const std::string& type, std::chrono::milliseconds timeout = 20s) {
    return wait_for([&](const Json& m) { return m["type"] == type; }, timeout);
  }

  /// Everything received so far, without waiting.
  std::vector<Json> drain() {
    std::lock_guard lock(mutex_);
    std::vector<Json> out(inbox_.begin(), inbox_.end());
    inbox_.clear();
    return out;
  }

  bool closed() {
    std::lock_guard lock(mutex_);
    return closed_;
  }

  /// Every message ever received validated against the schema, and frame seq increased strictly.
  std::vector<std::string> violations() {
    std::lock_guard lock(mutex_);
    return violations_;
  }

 private:
  net::io_context ioc_;
  beast::websocket::stream<beast::tcp_stream> ws_{ioc_};
  beast::flat_buffer buffer_;
  std::thread thread_;
  std::mutex mutex_;
  std::condition_variable cv_;
  std::deque<Json> inbox_;
  bool closed_ = false;
  long last_frame_seq_ = -1;
  std::vector<std::string> violations_;

  void read_next() {
    ws_.async_read(buffer_, [this](beast::error_code ec, std::size_t) {
      std::lock_guard lock(mutex_);
      if (ec) {
        closed_ = true;
        cv_.notify_all();
        return;
      }
      Json m = Json::parse(beast::buffers_to_string(buffer_.data()));
      buffer_.consume(buffer_.size());
      if (auto e = SchemaValidator::protocol().check(m, "server_message")) violations_.push_back(*e + " in " + m.dump().substr(0, 200));
      if (m["type"] == "frame") {
        if (m["seq"].get<long>() <= last_frame_seq_) violations_.push_back("frame seq did not increase");
        last_frame_seq_ = m["seq"].get<long>();
      }
      inbox_.push_back(std::move(m));
      cv_.notify_all();
      read_next();
    });
  }
};

Image frame_image(const Json& f) { return decode_png(base64_decode(f["png_base64"].get<std::string>())); }

class LiveTest : public ::testing::Test {
 protected:
  SceneConfig cfg = parse_scene(kScene);
  Session session{cfg, build_model(cfg, cfg.make_field())};
  std::unique_ptr<LiveServer> server;

  void start(bool paused) {
    ServerOptions opt;
    opt.start_paused = paused;
    server = std::make_unique<LiveServer>(session, opt);
    server->start();
  }
  void TearDown() override {
    if (server) server->stop();
  }
};

TEST_F(LiveTest, HandshakeAndFirstFrame) {
  start(true);
  WsClient c(server->port());
  c.send({{"type", "hello"}, {"proto", 1}});
  const auto hello = c.wait_type("hello");
  ASSERT_TRUE(hello);
  EXPECT_EQ((*hello)["proto"], 1);
  const auto frame = c.wait_type("frame");
  ASSERT_TRUE(frame);
  EXPECT_EQ((*frame)["step"], 0);
  EXPECT_EQ((*frame)["width"], 40);
  const Image img = frame_image(*frame);
  EXPECT_EQ(img.width, 40);
  EXPECT_EQ(img.height, 30);
  const auto stats = c.wait_type("stats");
  ASSERT_TRUE(stats);
  EXPECT_TRUE((*stats)["paused"].get<bool>());
  EXPECT_TRUE(c.violations().empty()) << c.violations().front();
}

TEST_F(LiveTest, ProtoMismatchAndMalformedMessagesKeepTheSessionAlive) {
  start(true);
  WsClient c(server->port());
  c.send({{"type", "hello"}, {"proto", 2}});
  auto e = c.wait_type("error");
  ASSERT_TRUE(e);
  EXPECT_EQ((*e)["code"], "proto_mismatch");
  c.send_text("{\"type\": \"pause\",");
  e = c.wait_type("error");
  ASSERT_TRUE(e);
  EXPECT_EQ((*e)["code"], "bad_message");
  c.send({{"type", "set_dt"}, {"dt", -1}});
  e = c.wait_type("error");
  ASSERT_TRUE(e);
  EXPECT_EQ((*e)["code"], "bad_message");
  c.send({{"type", "hello"}, {"proto", 1}});
  EXPECT_TRUE(c.wait_type("hello"));
  EXPECT_FALSE(c.closed());
  EXPECT_TRUE(c.violations().empty()) << c.violations().front();
}

TEST_F(LiveTest, PauseStallsAndResumeAdvances) {
  start(false);
  WsClient c(server->port());
  ASSERT_TRUE(c.wait_for([](const Json& m) { return m["type"] == "frame" && m["step"].get<long>() >= 2; }));
  c.send({{"type", "pause"}});
  const auto paused = c.wait_for([](const Json& m) { return m["type"] == "stats" && m["paused"].get<bool>(); });
  ASSERT_TRUE(paused);
  const long step = (*paused)["step"];
  std::this_thread::sleep_for(300ms);  // let in-flight frames land
  c.drain();
  std::this_thread::sleep_for(500ms);
  for (const Json& m : c.drain()) {
    EXPECT_NE(m["type"], "frame") << "frame while paused";
    if (m["type"] == "stats") EXPECT_EQ(m["step"], step);
  }
  c.send({{"type", "resume"}});
  EXPECT_TRUE(c.wait_for([&](const Json& m) { return m["type"] == "frame" && m["step"].get<long>() > step; }));
  EXPECT_TRUE(c.violations().empty()) << c.violations().front();
}

TEST_F(LiveTest, BackgroundPixelIsNoPick) {
  start(true);
  WsClient c(server->port());
  c.send({{"type", "apply_force"}, {"pixel", {0, 0}}, {"vector", {0.1, 0, 0}}});
  const auto e = c.wait_type("error");
  ASSERT_TRUE(e);
  EXPECT_EQ((*e)["code"], "no_pick");
  EXPECT_EQ((*e)["message"], "no pick");
}

TEST_F(LiveTest, ResetFrameMatchesFrameZero) {
  start(true);
  WsClient c(server->port());
  const auto first = c.wait_for([](const Json& m) { return m["type"] == "frame"; });
  ASSERT_TRUE(first);
  ASSERT_EQ((*first)["step"], 0);
  const Image rest = frame_image(*first);

  c.send({{"type", "resume"}});
  const auto moved = c.wait_for([](const Json& m) { return m["type"] == "frame" && m["step"].get<long>() >= 5; });
  ASSERT_TRUE(moved);
  EXPECT_NE(frame_image(*moved), rest);

  c.send({{"type", "pause"}});
  c.send({{"type", "reset"}});
  const auto again = c.wait_for([](const Json& m) { return m["type"] == "frame" && m["step"].get<long>() == 0; });
  ASSERT_TRUE(again);
  EXPECT_GT((*again)["seq"].get<long>(), (*moved)["seq"].get<long>());
  EXPECT_EQ(frame_image(*again), rest);
  EXPECT_TRUE(c.violations().empty()) << c.violations().front();
}

TEST_F(LiveTest, OverlayOnRequest) {
  start(true);
  WsClient c(server->port());
  c.send({{"type", "request_overlay"}});
  const auto o = c.wait_type("overlay");
  ASSERT_TRUE(o);
  EXPECT_EQ((*o)["kernels"].size(), cfg.n_kernels);
  EXPECT_TRUE(c.violations().empty()) << c.violations().front();
}

TEST_F(LiveTest, SecondClientIsTurnedAway) {
  start(true);
  WsClient a(server->port());
  ASSERT_TRUE(a.wait_type("frame"));
  WsClient b(server->port());
  const auto e = b.wait_type("error");
  ASSERT_TRUE(e);
  EXPECT_EQ((*e)["code"], "not_ready");
  EXPECT_TRUE(b.wait_for([](const Json&) { return false; }, 5s) == std::nullopt);
  EXPECT_TRUE(b.closed());
  // The first session is unaffected.
  a.send({{"type", "hello"}, {"proto", 1}});
  EXPECT_TRUE(a.wait_type("hello"));
}

TEST_F(LiveTest, ReconnectAfterDisconnect) {
  start(true);
  { WsClient a(server->port()); ASSERT_TRUE(a.wait_type("frame")); }
  std::this_thread::sleep_for(200ms);
  WsClient b(server->port());
  EXPECT_TRUE(b.wait_type("frame"));
}

// --- command line -----------------------------------------------------------------------

struct CliRun {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

CliRun pie(const std::string& args) {
  const fs::path tmp = fs::temp_directory_path();
  const fs::path out = tmp / "pie_cli_stdout.txt", err = tmp / "pie_cli_stderr.txt";
  const std::string cmd = std::string(PIE_CLI_PATH) + " " + args + " >" + out.string() + " 2>" + err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("pie_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

fs::path write_scene(const fs::path& dir, const Json& j) {
  const fs::path p = dir / "scene.json";
  std::ofstream(p) << j.dump(2);
  return p;
}

TEST(Cli, BuildWritesSidecarAndSummary) {
  const fs::path dir = scratch("build");
  const fs::path scene = std::string(PIE_SOURCE_DIR) + "/scenes/sphere.json";
  const CliRun r = pie("build --scene " + scene.string() + " --sidecar " + (dir / "a.piesamp").string());
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("kernels 16\n"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("ips 32\n"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("particles "), std::string::npos);
  EXPECT_NE(r.out.find("precompute_ms "), std::string::npos);
  ASSERT_EQ(pie("build --scene " + scene.string() + " --sidecar " + (dir / "b.piesamp").string()).code, 0);
  EXPECT_EQ(slurp(dir / "a.piesamp"), slurp(dir / "b.piesamp"));
  ASSERT_EQ(pie("build --seed 99 --scene " + scene.string() + " --sidecar " + (dir / "c.piesamp").string()).code, 0);
  EXPECT_NE(slurp(dir / "a.piesamp"), slurp(dir / "c.piesamp"));
}

TEST(Cli, ConfigErrorsExitWithTwo) {
  const fs::path dir = scratch("config");
  Json j = Json::parse(kScene);
  j["sampling"]["n_kernels"] = 100000;
  CliRun r = pie("build --scene " + write_scene(dir, j).string() + " --sidecar " + (dir / "x").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("sampling.n_kernels"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(dir / "x"));

  j = Json::parse(kScene);
  j["render"]["gamma"] = 2.2;
  r = pie("run --scene " + write_scene(dir, j).string() + " --out " + (dir / "o").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("render.gamma"), std::string::npos) << r.err;

  std::ofstream(dir / "broken.json") << "{\n\"field\": }\n";
  r = pie("build --scene " + (dir / "broken.json").string() + " --sidecar " + (dir / "x").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("line 2"), std::string::npos) << r.err;

  EXPECT_EQ(pie("build --scene " + (dir / "missing.json").string() + " --sidecar x").code, 2);
  EXPECT_EQ(pie("frobnicate").code, 2);
}

TEST(Cli, RuntimeFailureExitsWithThree) {
  const fs::path dir = scratch("runtime");
  const fs::path scene = write_scene(dir, Json::parse(kScene));
  std::ofstream(dir / "junk.piesamp") << "PIESAMP1\nversion 1\n";
  EXPECT_EQ(pie("run --scene " + scene.string() + " --sidecar " + (dir / "junk.piesamp").string() + " --out " +
                (dir / "o").string()).code,
            3);
}

TEST(Cli, ZeroFramesWritesOnlyTheRestFrame) {
  const fs::path dir = scratch("zero");
  const CliRun r = pie("run --scene " + write_scene(dir, Json::parse(kScene)).string() + " --frames 0 --out " +
                    (dir / "o").string());
  ASSERT_EQ(r.code, 0) << r.err;
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(dir / "o")) names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());
  EXPECT_EQ(names, (std::vector<std::string>{"000000.png", "stats.csv"}));
  std::istringstream csv(slurp(dir / "o" / "stats.csv"));
  std::string header, extra;
  std::getline(csv, header);
  EXPECT_EQ(header.rfind("step,status,newton_iters,E,kinetic,volume_ratio", 0), 0u);
  EXPECT_FALSE(std::getline(csv, extra));
}

/// Columns of stats.csv that do not depend on wall-clock time.
std::string without_timings(const std::string& csv) {
  std::istringstream in(csv);
  std::ostringstream out;
  for (std::string line; std::getline(in, line);) {
    std::istringstream cells(line);
    std::string cell;
    for (int i = 0; i < 6 && std::getline(cells, cell, ','); ++i) out << cell << ',';
    out << '\n';
  }
  return out.str();
}

TEST(Cli, RunIsDeterministic) {
  const fs::path dir = scratch("determinism");
  const fs::path scene = write_scene(dir, Json::parse(kScene));
  for (const char* o : {"a", "b"}) ASSERT_EQ(pie("run --no-timings --frames 4 --scene " + scene.string() + " --out " + (dir / o).string()).code, 0);
  ASSERT_EQ(pie("build --scene " + scene.string() + " --sidecar " + (dir / "s.piesamp").string()).code, 0);
  ASSERT_EQ(pie("run --frames 4 --scene " + scene.string() + " --sidecar " + (dir / "s.piesamp").string() + " --out " +
                (dir / "c").string()).code,
            0);
  const std::string a = slurp(dir / "a" / "stats.csv");
  EXPECT_EQ(a, slurp(dir / "b" / "stats.csv"));
  EXPECT_EQ(without_timings(a), without_timings(slurp(dir / "c" / "stats.csv")));
  for (int i = 0; i <= 4; ++i) {
    const std::string name = frame_name(i);
    const std::string pa = slurp(dir / "a" / name);
    EXPECT_FALSE(pa.empty());
    EXPECT_EQ(pa, slurp(dir / "b" / name)) << name;
    EXPECT_EQ(pa, slurp(dir / "c" / name)) << name;
  }
}

TEST(Cli, CantileverKineticEnergyDecays) {
  const fs::path dir = scratch("cantilever");
  const CliRun r = pie("run --frames 120 --scene " + std::string(PIE_SOURCE_DIR) + "/scenes/cantilever.json --out " +
                    (dir / "o").string());
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream csv(slurp(dir / "o" / "stats.csv"));
  std::string line;
  std::getline(csv, line);
  std::vector<double> kinetic;
  while (std::getline(csv, line)) {
    std::istringstream cells(line);
    std::string cell;
    for (int i = 0; i < 5; ++i) std::getline(cells, cell, ',');
    kinetic.push_back(std::stod(cell));
    EXPECT_NE(line.find(",ok,"), std::string::npos) << line;
  }
  ASSERT_EQ(kinetic.size(), 120u);
  // Peak kinetic energy over successive windows decreases, ending near rest.
  std::vector<double> peaks;
  for (std::size_t w = 0; w < kinetic.size(); w += 20)
    peaks.push_back(*std::max_element(kinetic.begin() + static_cast<long>(w), kinetic.begin() + static_cast<long>(w + 20)));
  // Below 1e-8 of the first peak the residual motion is at the Newton tolerance.
  const double floor = 1e-8 * peaks.front();
  for (std::size_t i = 1; i < peaks.size(); ++i)
    if (peaks[i - 1] > floor) EXPECT_LT(peaks[i], peaks[i - 1]) << "window " << i;
  EXPECT_LT(kinetic.back(), 1e-4 * peaks.front());
}

}  // namespace
}  // namespace pie
