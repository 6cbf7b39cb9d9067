#pragma once

// Interactive session state: the simulation owner, its ordered command queue,
// immutable render snapshots, and the headless batch runner.

#include "pie/dynamics.hpp"
#include "pie/protocol.hpp"
#include "pie/render.hpp"
#include "pie/scene.hpp"

#include <chrono>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <mutex>
#include <sstream>
#include <string>
#include <vector>

namespace pie {

/// Everything the renderer needs, frozen after a step.
struct Snapshot {
  std::shared_ptr<const Model> model;
  std::shared_ptr<const std::vector<BasisEvaluation>> center_bases;  // bases at the kernel centres
  VecX q;
  long step = 0;
  long epoch = 0;  // bumped by reset
};

struct RenderedFrame {
  Image image;
  double ms = 0.0;
};

inline RenderedFrame render_snapshot(const Snapshot& s, const DensityField& field, const Camera& cam,
                                     const RenderParams& p) {
  const auto t0 = std::chrono::steady_clock::now();
  RenderedFrame f;
  f.image = render(cam, field, make_warp_frame(*s.model, s.q), p);
  f.ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return f;
}

inline std::vector<OverlayPoint> snapshot_overlay(const Snapshot& s, const Camera& cam) {
  std::vector<Vec3> ips;
  for (std::size_t k = 0; k < s.model->ips.size(); ++k)
    ips.push_back(s.model->ips.positions[k] +
                  (s.model->ip_bases[k].empty() ? Vec3(Vec3::Zero()) : Vec3(s.model->ip_bases[k].displacement(s.q))));
  return render_points(cam, deformed_points(s.model->kernels.centers, *s.center_bases, s.q), ips);
}

/// Pull force on a rest-space point toward a deformed-space target.
struct Drag {
  Vec3 rest_point = Vec3::Zero();
  Vec3 target = Vec3::Zero();
};

/// Owns the simulator. Commands are queued by `submit` and applied, in
/// arrival order, by `tick` before the next step; nothing runs mid-step.
class Session {
 public:
  Session(SceneConfig cfg, Model model)
      : cfg_(std::move(cfg)), field_(cfg_.make_field()), base_model_(std::move(model)) {
    render_params_ = cfg_.render_params(field_);
    reset_state();
  }

  const SceneConfig& config() const { return cfg_; }
  const DensityField& field() const { return field_; }
  const RenderParams& render_params() const { return render_params_; }
  const Simulator& simulator() const { return *sim_; }
  const SimState& state() const { return state_; }
  bool paused() const { return paused_; }
  const std::optional<Drag>& drag() const { return drag_; }

  /// Validates `m` and queues it. Returns an immediate reply for malformed
  /// messages and handshakes, or nothing when the command was queued.
  std::optional<Json> submit(const Json& m) {
    if (auto e = SchemaValidator::protocol().check(m, "client_message")) return msg::error("bad_message", *e);
    const std::string type = m["type"];
    if (type == "hello") {
      if (m["proto"] != kProtocolVersion)
        return msg::error("proto_mismatch", "server speaks proto " + std::to_string(kProtocolVersion));
      return msg::hello();
    }
    std::lock_guard lock(queue_mutex_);
    queue_.push_back(m);
    return std::nullopt;
  }

  struct TickResult {
    std::vector<Json> replies;
    bool stepped = false;
    bool reset = false;
    bool overlay_requested = false;
    StepReport report;
  };

  /// Applies queued commands, then advances one step unless paused.
  TickResult tick() {
    TickResult out;
    std::deque<Json> pending;
    {
      std::lock_guard lock(queue_mutex_);
      pending.swap(queue_);
    }
    for (const auto& m : pending) apply(m, out);
    if (paused_) return out;
    update_drag_force();
    try {
      out.report = sim_->step(state_);
      out.stepped = true;
      last_report_ = out.report;
    } catch (const Error& e) {
      out.replies.push_back(msg::error("step_failed", e.what()));
    }
    return out;
  }

  Snapshot snapshot() const {
    Snapshot s;
    s.model = model_;
    s.center_bases = center_bases_;
    s.q = state_.q;
    s.step = state_.step;
    s.epoch = epoch_;
    return s;
  }

  const StepReport& last_report() const { return last_report_; }
  long epoch() const { return epoch_; }

 private:
  SceneConfig cfg_;
  DensityField field_;
  RenderParams render_params_;
  Model base_model_;
  std::unique_ptr<Simulator> sim_;
  std::shared_ptr<const Model> model_;
  std::shared_ptr<const std::vector<BasisEvaluation>> center_bases_;
  SimState state_;
  StepReport last_report_;
  std::optional<Drag> drag_;
  bool paused_ = false;
  long epoch_ = 0;
  std::mutex queue_mutex_;
  std::deque<Json> queue_;

  void publish_model() {
    model_ = std::make_shared<const Model>(sim_->model());
    auto bases = std::make_shared<std::vector<BasisEvaluation>>();
    for (const auto& c : model_->kernels.centers) {
      auto b = try_evaluate_basis(model_->kernels, c, model_->order);
      bases->push_back(b ? std::move(*b) : BasisEvaluation{});
    }
    center_bases_ = std::move(bases);
  }

  void reset_state() {
    sim_ = std::make_unique<Simulator>(base_model_, cfg_.material, cfg_.dynamics);
    state_ = initial_state(*sim_, cfg_);
    drag_.reset();
    last_report_ = {};
    ++epoch_;
    publish_model();
  }

  /// Deformed position of the picked point; the force is k_drag (target - x).
  void update_drag_force() {
    state_.forces.clear();
    if (!drag_) return;
    if (!sim_->apply_point_force(state_, drag_->rest_point, Vec3::Zero(), 0)) {
      drag_.reset();
      return;
    }
    auto& pf = state_.forces.back();
    const Vec3 x = drag_->rest_point + pf.basis.displacement(state_.q);
    pf.force = cfg_.k_drag * (drag_->target - x);
  }

  static Vec3 vec3(const Json& j) { return Vec3(j[0].get<double>(), j[1].get<double>(), j[2].get<double>()); }

  /// Nearest deformed IP to the picking ray (or point). A hit needs the ray to
  /// pass within that IP's cuboid half-diagonal.
  std::optional<Vec3> pick(const WarpFrame& frame, const Json& m) const {
    auto reach = [&](std::size_t k) { return 0.5 * model_->ips.cuboids[frame.ip[k]].lengths.norm(); };
    std::optional<Vec3> best;
    double best_d = std::numeric_limits<double>::infinity();
    if (m.contains("world")) {
      const Vec3 p = vec3(m["world"]);
      for (std::size_t k = 0; k < frame.deformed.size(); ++k) {
        const double d = (frame.deformed[k] - p).norm();
        if (d <= reach(k) && d < best_d) {
          best_d = d;
          best = p;
        }
      }
      return best;
    }
    const Camera& cam = cfg_.camera;
    const Vec3 dir = cam.ray_at(m["pixel"][0].get<double>(), m["pixel"][1].get<double>());
    for (std::size_t k = 0; k < frame.deformed.size(); ++k) {
      const Vec3& x = frame.deformed[k];
      const double t = (x - cam.position).dot(dir);
      if (t <= cam.near_plane) continue;
      const double d = (x - cam.position - t * dir).norm();
      if (d <= reach(k) && d < best_d) {
        best_d = d;
        best = x;
      }
    }
    return best;
  }

  void apply(const Json& m, TickResult& out) {
    const std::string type = m["type"];
    auto fail = [&](const std::string& code, const std::string& text) { out.replies.push_back(msg::error(code, text)); };
    if (type == "pause") {
      paused_ = true;
    } else if (type == "resume") {
      paused_ = false;
    } else if (type == "reset") {
      reset_state();
      out.reset = true;
    } else if (type == "request_overlay") {
      out.overlay_requested = true;
    } else if (type == "set_dt") {
      DynamicsParams d = sim_->dynamics();
      d.dt = m["dt"].get<double>();
      sim_->set_dynamics(d);
    } else if (type == "set_material") {
      MaterialParams p = sim_->material();
      if (m.contains("model")) p.model = m["model"] == "arap" ? MaterialModel::arap : MaterialModel::neo_hookean;
      if (m.contains("E")) p.young = m["E"].get<double>();
      if (m.contains("nu")) p.poisson = m["nu"].get<double>();
      if (m.contains("beta")) p.beta = m["beta"].get<double>();
      if (m.contains("rho")) p.density = m["rho"].get<double>();
      try {
        sim_->set_material(p);
      } catch (const Error& e) {
        fail("invalid_value", e.what());
      }
    } else if (type == "pin") {
      Region r;
      const Json& g = m["region"];
      if (g.contains("aabb")) {
        r.kind = Region::aabb;
        r.min = vec3(g["aabb"]["min"]);
        r.max = vec3(g["aabb"]["max"]);
      } else {
        r.kind = Region::sphere;
        r.center = vec3(g["sphere"]["center"]);
        r.radius = g["sphere"]["radius"].get<double>();
      }
      if (sim_->pin_region(state_, [&](const Vec3& x) { return r.contains(x); }).empty())
        fail("empty_region", "no kernel centre lies in the pin region");
    } else if (type == "unpin") {
      Simulator::unpin(state_);
    } else if (type == "cut") {
      Quad q;
      q.center = vec3(m["quad"]["center"]);
      q.half_u = vec3(m["quad"]["half_u"]);
      q.half_v = vec3(m["quad"]["half_v"]);
      if (!q.valid()) return fail("invalid_value", "cut quad needs orthogonal nonzero edges");
      sim_->cut(q);
      publish_model();
      if (drag_) drag_.reset();
    } else if (type == "apply_force") {
      if (m.contains("release")) {
        drag_.reset();
        state_.forces.clear();
        return;
      }
      const WarpFrame frame = make_warp_frame(*model_, state_.q);
      const auto picked = pick(frame, m);
      if (!picked) return fail("no_pick", "no pick");
      const WarpResult w = warp_point(*picked, frame);
      if (!w.converged || !w.in_body) return fail("no_pick", "no pick");
      drag_ = Drag{w.x, *picked + vec3(m["vector"])};
    }
  }
};

// --- headless batch ---------------------------------------------------------------------

struct BatchOptions {
  int frames = 0;
  std::string out_dir;
  bool timings = true;  // per-phase wall-clock columns in stats.csv
};

struct BatchSummary {
  int failed_steps = 0;
  std::vector<std::string> warnings;
};

inline std::string frame_name(long i) {
  std::ostringstream os;
  os << std::setw(6) << std::setfill('0') << i << ".png";
  return os.str();
}

/// Writes 000000.png (rest) .. frames.png and stats.csv. A failed step is
/// recorded in its row and the run continues from the last good state.
inline BatchSummary run_batch(const SceneConfig& cfg, Model model, const BatchOptions& opt) {
  namespace fs = std::filesystem;
  fs::create_directories(opt.out_dir);
  const DensityField field = cfg.make_field();
  const RenderParams rp = cfg.render_params(field);
  const Simulator sim(std::move(model), cfg.material, cfg.dynamics);
  SimState s = initial_state(sim, cfg);
  BatchSummary summary;

  auto render_to = [&](long i, double* ms) {
    const auto t0 = std::chrono::steady_clock::now();
    const Image img = render(cfg.camera, field, make_warp_frame(sim.model(), s.q), rp);
    *ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    write_png(img, (fs::path(opt.out_dir) / frame_name(i)).string());
  };

  std::ofstream csv(fs::path(opt.out_dir) / "stats.csv");
  if (!csv) throw Error("cannot write stats.csv in '" + opt.out_dir + "'");
  csv << "step,status,newton_iters,E,kinetic,volume_ratio";
  if (opt.timings) csv << ",assembly_ms,solve_ms,warp_ms";
  csv << '\n';
  csv << std::setprecision(17);

  double warp_ms = 0.0;
  render_to(0, &warp_ms);
  for (int i = 1; i <= opt.frames; ++i) {
    StepReport rep;
    bool ok = true;
    try {
      rep = sim.step(s);
    } catch (const Error& e) {
      ok = false;
      ++summary.failed_steps;
      summary.warnings.push_back("step " + std::to_string(i) + " failed: " + e.what());
    }
    render_to(i, &warp_ms);
    csv << i << ',' << (ok ? "ok" : "failed") << ',' << rep.newton_iterations << ',' << sim.potential(s.q) << ','
        << sim.kinetic_energy(s) << ',' << sim.volume_ratio(s.q);
    if (opt.timings) csv << ',' << rep.assembly_ms << ',' << rep.solve_ms << ',' << warp_ms;
    csv << '\n' << std::flush;
  }
  if (!csv) throw Error("failed writing stats.csv");
  return summary;
}

}  // namespace pie
