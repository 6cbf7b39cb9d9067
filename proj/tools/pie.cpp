// pie: build | run | serve
//
//   pie build --scene scenes/sphere.json --sidecar sphere.piesamp
//   pie run   --scene scenes/cantilever.json --out frames --frames 120
//   pie serve --scene scenes/jelly.json --port 8765
//
// Exit codes: 0 ok, 2 configuration error, 3 runtime failure.

#include "pie/scene.hpp"
#include "pie/session.hpp"
#include "pie/sidecar.hpp"
#include "pie/ws_server.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <csignal>
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

std::atomic<bool> g_interrupted{false};

struct Common {
  std::string scene;
  std::string sidecar;
  std::optional<std::uint64_t> seed;
};

pie::SceneConfig load(const Common& c) {
  pie::SceneConfig cfg = pie::load_scene(c.scene);
  if (c.seed) cfg.seed = *c.seed;
  return cfg;
}

/// Model from the sidecar when given, otherwise discretised from the scene.
pie::Model model_for(const pie::SceneConfig& cfg, const Common& c) {
  if (!c.sidecar.empty()) {
    pie::Model m = pie::load_sidecar(c.sidecar);
    if (m.order != cfg.order) throw pie::ConfigError("interpolation", "does not match the sidecar's order");
    return m;
  }
  return pie::build_model(cfg, cfg.make_field());
}

int cmd_build(const Common& c) {
  const auto t0 = std::chrono::steady_clock::now();
  const pie::SceneConfig cfg = load(c);
  const pie::Model m = pie::build_model(cfg, cfg.make_field());
  const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  pie::save_sidecar(m, c.sidecar);
  std::printf("particles %zu\nkernels %zu\nips %zu\nprecompute_ms %.1f\n", m.cloud.size(), m.kernels.size(),
              m.ips.size(), ms);
  for (const auto& w : m.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
  return 0;
}

int cmd_run(const Common& c, int frames, const std::string& out, bool timings) {
  const pie::SceneConfig cfg = load(c);
  pie::Model m = model_for(cfg, c);
  pie::BatchOptions opt;
  opt.frames = frames;
  opt.out_dir = out;
  opt.timings = timings;
  const pie::BatchSummary s = pie::run_batch(cfg, std::move(m), opt);
  for (const auto& w : s.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
  std::printf("frames %d\nfailed_steps %d\n", frames, s.failed_steps);
  return 0;
}

int cmd_serve(const Common& c, unsigned short port, const std::string& address, bool paused) {
  const pie::SceneConfig cfg = load(c);
  pie::Session session(cfg, model_for(cfg, c));
  pie::ServerOptions opt;
  opt.port = port;
  opt.address = address;
  opt.start_paused = paused;
  pie::LiveServer server(session, opt);
  server.start();
  std::printf("listening on ws://%s:%u\n", address.c_str(), static_cast<unsigned>(server.port()));
  std::fflush(stdout);
  std::signal(SIGINT, [](int) { g_interrupted = true; });
  std::signal(SIGTERM, [](int) { g_interrupted = true; });
  while (!g_interrupted) std::this_thread::sleep_for(std::chrono::milliseconds(100));
  server.stop();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Meshless elastodynamics on density fields"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--scene", common.scene, "Scene configuration (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", common.seed, "Override the scene's sampling seed");
  };

  auto* build = app.add_subcommand("build", "Sample, place kernels and IPs, write a PIESAMP1 sidecar");
  add_common(build);
  build->add_option("--sidecar", common.sidecar, "Output sidecar path")->required();

  int frames = 0;
  std::string out = "out";
  bool no_timings = false;
  auto* run = app.add_subcommand("run", "Headless simulation: PNG frames and stats.csv");
  add_common(run);
  run->add_option("--sidecar", common.sidecar, "Precomputed sidecar (skips sampling)")->check(CLI::ExistingFile);
  run->add_option("--frames", frames, "Number of steps")->check(CLI::NonNegativeNumber);
  run->add_option("--out", out, "Output directory");
  run->add_flag("--no-timings", no_timings, "Omit wall-clock columns from stats.csv");

  unsigned short port = 8765;
  std::string address = "127.0.0.1";
  bool paused = false;
  auto* serve = app.add_subcommand("serve", "Live websocket session");
  add_common(serve);
  serve->add_option("--sidecar", common.sidecar, "Precomputed sidecar (skips sampling)")->check(CLI::ExistingFile);
  serve->add_option("--port", port, "TCP port (0 picks one)");
  serve->add_option("--address", address, "Bind address");
  serve->add_flag("--paused", paused, "Start with stepping paused");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*build) return cmd_build(common);
    if (*run) return cmd_run(common, frames, out, !no_timings);
    if (*serve) return cmd_serve(common, port, address, paused);
  } catch (const pie::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return 0;
}
