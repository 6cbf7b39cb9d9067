#pragma once

// Strict JSON scene configuration. Unknown keys and out-of-range values are
// rejected with the dotted path of the offending field.

#include "pie/dynamics.hpp"
#include "pie/field.hpp"
#include "pie/model.hpp"
#include "pie/render.hpp"

#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <initializer_list>
#include <limits>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace pie {

using Json = nlohmann::json;

/// Configuration problem; `path` is the dotted field name ("" for syntax errors).
class ConfigError : public Error {
 public:
  ConfigError(std::string path, const std::string& message)
      : Error(path.empty() ? message : path + ": " + message), path_(std::move(path)) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

/// Axis-aligned box or sphere in rest space.
struct Region {
  enum Kind { aabb, sphere } kind = aabb;
  Vec3 min = Vec3::Zero(), max = Vec3::Zero();
  Vec3 center = Vec3::Zero();
  double radius = 0.0;

  bool contains(const Vec3& x) const {
    if (kind == sphere) return (x - center).norm() <= radius;
    return (x.array() >= min.array()).all() && (x.array() <= max.array()).all();
  }
};

struct SceneConfig {
  // field
  bool grid_field = false;
  std::string grid_path;  // resolved against the scene file's directory
  std::vector<Primitive> primitives;
  double falloff = DensityField::kDefaultFalloff;

  // sampling
  double r_bar = 0.1;
  double kappa = 1.0;
  std::uint64_t seed = 1;
  std::size_t n_kernels = 16;
  std::size_t m_extra_ips = 32;
  int k_covariance = 16;
  InterpolationOrder order = InterpolationOrder::quadratic;

  MaterialParams material{};
  DynamicsParams dynamics{};
  Camera camera{};
  double step_scale = 1.0;
  double density_scale = 1.0;
  Vec3 background = Vec3::Zero();
  std::vector<Region> pins;
  double k_drag = 100.0;

  DensityField make_field() const {
    if (grid_field) return load_grid(grid_path);
    return DensityField::analytic(primitives, falloff);
  }

  DiscretizationParams discretization() const {
    DiscretizationParams dp;
    dp.poisson.r_bar = r_bar;
    dp.poisson.kappa = kappa;
    dp.kernels = n_kernels;
    dp.extra_ips = m_extra_ips;
    dp.order = order;
    dp.integrator.cuboid.neighbors = k_covariance;
    return dp;
  }

  RenderParams render_params(const DensityField& field) const {
    RenderParams p;
    p.r_bar = r_bar;
    p.density_scale = density_scale;
    p.background = background;
    p.step = step_scale * march_step(field, p);
    return p;
  }
};

namespace detail {

/// Tracks the dotted path while walking a JSON object and rejects keys that
/// were never read.
class Reader {
 public:
  Reader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_, "expected an object");
  }
  ~Reader() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [key, value] : j_.items())
      if (!seen_.count(key)) throw ConfigError(join(key), "unknown key");
  }
  Reader(const Reader&) = delete;
  Reader& operator=(const Reader&) = delete;

  bool has(const std::string& key) const { return j_.contains(key); }
  std::string join(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const Json& raw(const std::string& key) {
    seen_.insert(key);
    if (!j_.contains(key)) throw ConfigError(join(key), "required field is missing");
    return j_.at(key);
  }

  double number(const std::string& key, double lo, double hi, bool lo_open = false) {
    const Json& v = raw(key);
    if (!v.is_number()) throw ConfigError(join(key), "expected a number");
    const double x = v.get<double>();
    if (!std::isfinite(x) || x > hi || x < lo || (lo_open && x == lo)) {
      std::ostringstream os;
      os << "value " << x << " outside " << (lo_open ? "(" : "[") << lo << ", " << hi << "]";
      throw ConfigError(join(key), os.str());
    }
    return x;
  }
  void number(const std::string& key, double& out, double lo, double hi, bool lo_open = false) {
    if (has(key)) out = number(key, lo, hi, lo_open);
  }

  long long integer(const std::string& key, long long lo, long long hi) {
    const Json& v = raw(key);
    if (!v.is_number_integer()) throw ConfigError(join(key), "expected an integer");
    const long long x = v.get<long long>();
    if (x < lo || x > hi)
      throw ConfigError(join(key), "value " + std::to_string(x) + " outside [" + std::to_string(lo) + ", " +
                                       std::to_string(hi) + "]");
    return x;
  }

  std::string text(const std::string& key, std::initializer_list<const char*> allowed = {}) {
    const Json& v = raw(key);
    if (!v.is_string()) throw ConfigError(join(key), "expected a string");
    const std::string s = v.get<std::string>();
    if (allowed.size() == 0) return s;
    std::string list;
    for (const char* a : allowed) {
      if (s == a) return s;
      list += std::string(list.empty() ? "" : ", ") + a;
    }
    throw ConfigError(join(key), "'" + s + "' is not one of " + list);
  }

  Vec3 vec3(const std::string& key) {
    const Json& v = raw(key);
    if (!v.is_array() || v.size() != 3) throw ConfigError(join(key), "expected an array of 3 numbers");
    Vec3 out;
    for (int i = 0; i < 3; ++i) {
      if (!v[static_cast<std::size_t>(i)].is_number()) throw ConfigError(join(key), "expected an array of 3 numbers");
      out[i] = v[static_cast<std::size_t>(i)].get<double>();
      if (!std::isfinite(out[i])) throw ConfigError(join(key), "entries must be finite");
    }
    return out;
  }

  Reader child(const std::string& key) { return Reader(raw(key), join(key)); }

 private:
  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline Vec3 color3(Reader& r, const std::string& key) {
  const Vec3 c = r.vec3(key);
  if ((c.array() < 0.0).any() || (c.array() > 1.0).any()) throw ConfigError(r.join(key), "color channels must lie in [0, 1]");
  return c;
}

inline Region parse_region(Reader& r) {
  Region g;
  if (r.has("aabb") == r.has("sphere")) throw ConfigError(r.join("aabb"), "region needs exactly one of 'aabb' or 'sphere'");
  if (r.has("aabb")) {
    Reader b = r.child("aabb");
    g.kind = Region::aabb;
    g.min = b.vec3("min");
    g.max = b.vec3("max");
    if ((g.min.array() > g.max.array()).any()) throw ConfigError(b.join("max"), "max must not be below min");
  } else {
    Reader s = r.child("sphere");
    g.kind = Region::sphere;
    g.center = s.vec3("center");
    g.radius = s.number("radius", 0.0, 1e9, true);
  }
  return g;
}

inline void parse_field(Reader r, SceneConfig& c, const std::filesystem::path& base) {
  const std::string type = r.text("type", {"analytic", "grid"});
  if (type == "grid") {
    c.grid_field = true;
    std::filesystem::path p = r.text("path");
    c.grid_path = (p.is_relative() ? base / p : p).string();
    return;
  }
  r.number("falloff", c.falloff, 0.0, 1e9, true);
  const Json& list = r.raw("primitives");
  if (!list.is_array() || list.empty()) throw ConfigError(r.join("primitives"), "expected a non-empty array");
  for (std::size_t i = 0; i < list.size(); ++i) {
    Reader p(list[i], r.join("primitives[" + std::to_string(i) + "]"));
    const std::string shape = p.text("shape", {"sphere", "box", "rounded_box"});
    Primitive prim;
    prim.center = p.vec3("center");
    if (shape == "sphere") {
      prim.shape = PrimitiveShape::sphere;
      prim.radius = p.number("radius", 0.0, 1e9, true);
    } else {
      prim.shape = shape == "box" ? PrimitiveShape::box : PrimitiveShape::rounded_box;
      prim.half_extents = p.vec3("half_extents");
      if ((prim.half_extents.array() <= 0.0).any()) throw ConfigError(p.join("half_extents"), "must be positive");
      prim.radius = 0.0;
      if (shape == "rounded_box") {
        prim.radius = p.number("corner_radius", 0.0, prim.half_extents.minCoeff());
      }
    }
    p.number("density", prim.density, 0.0, 1e9);
    if (p.has("color")) prim.color = color3(p, "color");
    c.primitives.push_back(prim);
  }
}

}  // namespace detail

/// Parses a scene from JSON text. `base` resolves relative grid paths.
inline SceneConfig parse_scene(const std::string& text, const std::filesystem::path& base = ".") {
  Json root;
  try {
    root = Json::parse(text);
  } catch (const Json::parse_error& e) {
    const std::size_t upto = std::min<std::size_t>(e.byte, text.size());
    const long line = 1 + std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(upto), '\n');
    throw ConfigError("", "syntax error at line " + std::to_string(line) + ": " + e.what());
  }
  SceneConfig c;
  detail::Reader r(root, "");
  detail::parse_field(r.child("field"), c, base);
  {
    detail::Reader s = r.child("sampling");
    c.r_bar = s.number("r_bar", 0.0, 1e6, true);
    s.number("kappa", c.kappa, 0.0, 1e6, true);
    if (s.has("seed")) c.seed = static_cast<std::uint64_t>(s.integer("seed", 0, std::numeric_limits<long long>::max()));
    c.n_kernels = static_cast<std::size_t>(s.integer("n_kernels", 1, 100000));
    if (s.has("m_extra_ips")) c.m_extra_ips = static_cast<std::size_t>(s.integer("m_extra_ips", 0, 1000000));
    if (s.has("K_covariance")) c.k_covariance = static_cast<int>(s.integer("K_covariance", 3, 10000));
  }
  if (r.has("interpolation"))
    c.order = r.text("interpolation", {"quadratic", "linear"}) == "linear" ? InterpolationOrder::linear
                                                                         : InterpolationOrder::quadratic;
  if (r.has("material")) {
    detail::Reader m = r.child("material");
    if (m.has("model"))
      c.material.model = m.text("model", {"neo_hookean", "arap"}) == "arap" ? MaterialModel::arap : MaterialModel::neo_hookean;
    m.number("E", c.material.young, 0.0, 1e15, true);
    m.number("nu", c.material.poisson, -0.999, 0.499);
    m.number("beta", c.material.beta, 0.0, 1e15, true);
    m.number("rho", c.material.density, 0.0, 1e9, true);
    if (m.has("quadrature")) c.material.quadrature = static_cast<int>(m.integer("quadrature", 1, 8));
  }
  if (r.has("dynamics")) {
    detail::Reader d = r.child("dynamics");
    d.number("dt", c.dynamics.dt, 0.0, 10.0, true);
    if (d.has("gravity")) c.dynamics.gravity = d.vec3("gravity");
    d.number("damping", c.dynamics.damping, 0.0, 1e6);
    if (d.has("max_newton")) c.dynamics.max_newton = static_cast<int>(d.integer("max_newton", 1, 100));
    d.number("tolerance", c.dynamics.tolerance, 0.0, 1.0, true);
    if (d.has("ground_plane") && !d.raw("ground_plane").is_null()) {  // null disables the plane
      detail::Reader g = d.child("ground_plane");
      c.dynamics.ground.enabled = true;
      if (g.has("normal")) {
        const Vec3 n = g.vec3("normal");
        if (n.norm() == 0.0) throw ConfigError(g.join("normal"), "must be nonzero");
        c.dynamics.ground.normal = n.normalized();
      }
      g.number("offset", c.dynamics.ground.offset, -1e9, 1e9);
      g.number("stiffness", c.dynamics.ground.stiffness, 0.0, 1e15, true);
    }
  }
  if (r.has("camera")) {
    detail::Reader k = r.child("camera");
    Camera& cam = c.camera;
    if (k.has("position")) cam.position = k.vec3("position");
    if (k.has("look_at")) cam.look_at = k.vec3("look_at");
    if (k.has("up")) cam.up = k.vec3("up");
    k.number("fov_deg", cam.fov_deg, 0.0, 180.0, true);
    if (cam.fov_deg >= 180.0) throw ConfigError(k.join("fov_deg"), "must be below 180");
    if (k.has("width")) cam.width = static_cast<int>(k.integer("width", 1, 8192));
    if (k.has("height")) cam.height = static_cast<int>(k.integer("height", 1, 8192));
    k.number("near", cam.near_plane, 0.0, 1e9);
    k.number("far", cam.far_plane, 0.0, 1e9, true);
    try {
      cam.validate();
    } catch (const Error& e) {
      throw ConfigError("camera", e.what());
    }
  }
  if (r.has("render")) {
    detail::Reader p = r.child("render");
    p.number("step_scale", c.step_scale, 0.0, 100.0, true);
    p.number("density_scale", c.density_scale, 0.0, 1e9);
    if (p.has("background")) c.background = detail::color3(p, "background");
  }
  if (r.has("constraints")) {
    const Json& list = r.raw("constraints");
    if (!list.is_array()) throw ConfigError("constraints", "expected an array");
    for (std::size_t i = 0; i < list.size(); ++i) {
      detail::Reader item(list[i], "constraints[" + std::to_string(i) + "]");
      detail::Reader pin = item.child("pin");
      c.pins.push_back(detail::parse_region(pin));
    }
  }
  if (r.has("interaction")) {
    detail::Reader i = r.child("interaction");
    i.number("k_drag", c.k_drag, 0.0, 1e15, true);
  }
  return c;
}

inline SceneConfig load_scene(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("", "cannot open scene file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_scene(ss.str(), std::filesystem::path(path).parent_path());
}

/// Discretises the scene, mapping sampling failures to the config field at fault.
inline Model build_model(const SceneConfig& c, const DensityField& field) {
  const DiscretizationParams dp = c.discretization();
  PoissonParams pp = dp.poisson;
  pp.seed = c.seed;
  ParticleCloud cloud = poisson_disk_sample(field, pp);
  if (cloud.size() == 0) throw ConfigError("field", "density field produced no particles");
  if (c.n_kernels > cloud.size())
    throw ConfigError("sampling.n_kernels", "value " + std::to_string(c.n_kernels) + " exceeds the particle count " +
                                                std::to_string(cloud.size()));
  if (static_cast<std::size_t>(c.k_covariance) > cloud.size())
    throw ConfigError("sampling.K_covariance", "exceeds the particle count " + std::to_string(cloud.size()));
  if (c.n_kernels + c.m_extra_ips > cloud.size())
    throw ConfigError("sampling.m_extra_ips", "kernel plus extra IPs exceed the particle count " +
                                                  std::to_string(cloud.size()));
  KernelSet kernels = select_kernels(cloud, dp.kernels, c.seed, dp.kernel);
  IntegratorPoints ips = place_integrator_points(cloud, kernels, dp.extra_ips, dp.integrator);
  return assemble_model(std::move(cloud), std::move(kernels), std::move(ips), dp.order);
}

/// Initial state: rest pose with every kernel inside a configured pin region held.
inline SimState initial_state(const Simulator& sim, const SceneConfig& c) {
  SimState s = sim.rest_state();
  for (const auto& region : c.pins) sim.pin_region(s, [&](const Vec3& x) { return region.contains(x); });
  return s;
}

}  // namespace pie
