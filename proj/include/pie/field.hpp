#pragma once

// Rest-pose density/colour field: analytic primitives with a smooth edge
// falloff, or a trilinearly interpolated grid stored in the PIEGRID1 format.

#include "pie/common.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

namespace pie {

enum class PrimitiveShape { sphere, box, rounded_box };

struct Primitive {
  PrimitiveShape shape = PrimitiveShape::sphere;
  Vec3 center = Vec3::Zero();
  Vec3 half_extents = Vec3::Ones();  // box, rounded_box
  double radius = 1.0;               // sphere radius, or corner radius of rounded_box
  double density = 1.0;
  Vec3 color = Vec3::Ones();

  static Primitive sphere(const Vec3& c, double r, double level = 1.0, const Vec3& rgb = Vec3::Ones()) {
    Primitive p;
    p.shape = PrimitiveShape::sphere;
    p.center = c;
    p.radius = r;
    p.density = level;
    p.color = rgb;
    return p;
  }
  static Primitive box(const Vec3& c, const Vec3& half, double level = 1.0, const Vec3& rgb = Vec3::Ones()) {
    Primitive p;
    p.shape = PrimitiveShape::box;
    p.center = c;
    p.half_extents = half;
    p.radius = 0.0;
    p.density = level;
    p.color = rgb;
    return p;
  }
  static Primitive rounded_box(const Vec3& c, const Vec3& half, double corner, double level = 1.0,
                               const Vec3& rgb = Vec3::Ones()) {
    Primitive p = box(c, half, level, rgb);
    p.shape = PrimitiveShape::rounded_box;
    p.radius = corner;
    return p;
  }

  /// Signed distance to the surface and its gradient.
  double signed_distance(const Vec3& x, Vec3* grad) const {
    const Vec3 d = x - center;
    if (shape == PrimitiveShape::sphere) {
      const double n = d.norm();
      if (grad) *grad = n > 0.0 ? Vec3(d / n) : Vec3::UnitX();
      return n - radius;
    }
    const double corner = shape == PrimitiveShape::rounded_box ? radius : 0.0;
    const Vec3 inner = (half_extents.array() - corner).cwiseMax(0.0).matrix();
    const Vec3 sgn = d.unaryExpr([](double v) { return v < 0.0 ? -1.0 : 1.0; });
    const Vec3 q = d.cwiseAbs() - inner;
    const Vec3 outside = q.cwiseMax(0.0);
    const double out_norm = outside.norm();
    if (out_norm > 0.0) {
      if (grad) *grad = sgn.cwiseProduct(outside) / out_norm;
      return out_norm - corner;
    }
    Eigen::Index axis = 0;
    const double inside = q.maxCoeff(&axis);
    if (grad) {
      grad->setZero();
      (*grad)[axis] = sgn[axis];
    }
    return inside - corner;
  }

  Box3 bounds() const {
    const Vec3 ext = shape == PrimitiveShape::sphere ? Vec3::Constant(radius) : half_extents;
    return Box3(center - ext, center + ext);
  }
};

/// PIEGRID1 payload: x-fastest node samples, channel interleaved.
struct Grid {
  std::array<int, 3> dims{0, 0, 0};
  Vec3 origin = Vec3::Zero();
  Vec3 spacing = Vec3::Ones();
  int channels = 1;
  std::vector<float> data;

  std::size_t node_count() const {
    return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  }
  std::size_t index(int i, int j, int k) const {
    return (static_cast<std::size_t>(k) * dims[1] + j) * dims[0] + i;
  }
  float& at(int i, int j, int k, int c) { return data[index(i, j, k) * channels + c]; }
  float at(int i, int j, int k, int c) const { return data[index(i, j, k) * channels + c]; }
};

struct FieldSample {
  double density = 0.0;
  Vec3 color = Vec3::Zero();
};

namespace detail {
// Quintic smoothstep on [0,1]; C2 so gradients of the falloff are smooth.
inline double smootherstep(double t) {
  t = std::clamp(t, 0.0, 1.0);
  return t * t * t * (t * (6.0 * t - 15.0) + 10.0);
}
inline double smootherstep_deriv(double t) {
  if (t <= 0.0 || t >= 1.0) return 0.0;
  return 30.0 * t * t * (t - 1.0) * (t - 1.0);
}
}  // namespace detail

class DensityField {
 public:
  static constexpr double kDefaultFalloff = 0.05;

  DensityField() = default;

  static DensityField analytic(std::vector<Primitive> primitives, double falloff = kDefaultFalloff) {
    if (!(falloff > 0.0)) throw Error("falloff width must be positive");
    DensityField f;
    f.source_ = Analytic{std::move(primitives), falloff};
    return f;
  }

  static DensityField from_grid(Grid grid) {
    validate(grid);
    DensityField f;
    f.source_ = std::move(grid);
    return f;
  }

  bool is_grid() const { return std::holds_alternative<Grid>(source_); }
  const Grid& grid() const { return std::get<Grid>(source_); }
  const std::vector<Primitive>& primitives() const { return std::get<Analytic>(source_).primitives; }
  double falloff() const { return std::get<Analytic>(source_).falloff; }

  double density(const Vec3& p) const { return sample(p).density; }
  Vec3 color(const Vec3& p) const { return sample(p).color; }

  FieldSample sample(const Vec3& p) const {
    if (const auto* g = std::get_if<Grid>(&source_)) return sample_grid(*g, p);
    return sample_analytic(std::get<Analytic>(source_), p, nullptr);
  }

  Vec3 gradient(const Vec3& p) const {
    if (const auto* g = std::get_if<Grid>(&source_)) {
      Vec3 out;
      for (int a = 0; a < 3; ++a) {
        Vec3 step = Vec3::Zero();
        step[a] = g->spacing[a];
        out[a] = (sample_grid(*g, p + step).density - sample_grid(*g, p - step).density) / (2.0 * g->spacing[a]);
      }
      return out;
    }
    Vec3 grad;
    sample_analytic(std::get<Analytic>(source_), p, &grad);
    return grad;
  }

  /// Region outside of which the density is zero.
  Box3 bounds() const {
    if (const auto* g = std::get_if<Grid>(&source_)) {
      Vec3 extent;
      for (int a = 0; a < 3; ++a) extent[a] = (g->dims[a] - 1) * g->spacing[a];
      return Box3(g->origin, g->origin + extent);
    }
    const auto& a = std::get<Analytic>(source_);
    Box3 box;
    box.setEmpty();
    for (const auto& prim : a.primitives) box.extend(prim.bounds());
    if (!box.isEmpty()) {
      box.min().array() -= 0.5 * a.falloff;
      box.max().array() += 0.5 * a.falloff;
    }
    return box;
  }

 private:
  struct Analytic {
    std::vector<Primitive> primitives;
    double falloff = kDefaultFalloff;
  };

  static void validate(const Grid& g) {
    for (int d : g.dims)
      if (d <= 0) throw Error("grid dims must be positive");
    if (g.channels != 1 && g.channels != 4) throw Error("grid channel count must be 1 or 4");
    if (g.data.size() != g.node_count() * g.channels) throw Error("grid payload size mismatch");
    for (int a = 0; a < 3; ++a)
      if (!(g.spacing[a] > 0.0)) throw Error("grid spacing must be positive");
  }

  static FieldSample sample_analytic(const Analytic& a, const Vec3& p, Vec3* grad) {
    FieldSample out;
    if (grad) grad->setZero();
    const double w = a.falloff;
    for (const auto& prim : a.primitives) {
      Vec3 sd_grad;
      const double sd = prim.signed_distance(p, grad ? &sd_grad : nullptr);
      const double t = (0.5 * w - sd) / w;
      const double sigma = prim.density * detail::smootherstep(t);
      if (sigma > out.density) {
        out.density = sigma;
        out.color = prim.color.cwiseMax(0.0).cwiseMin(1.0);
        if (grad) *grad = -prim.density * detail::smootherstep_deriv(t) / w * sd_grad;
      }
    }
    return out;
  }

  static FieldSample sample_grid(const Grid& g, const Vec3& p) {
    std::array<int, 3> i0{};
    std::array<int, 3> i1{};
    std::array<double, 3> t{};
    for (int a = 0; a < 3; ++a) {
      const double f = (p[a] - g.origin[a]) / g.spacing[a];
      if (!(f >= 0.0) || f > g.dims[a] - 1) return {};
      if (g.dims[a] == 1) {
        i0[a] = i1[a] = 0;
        t[a] = 0.0;
        continue;
      }
      int base = static_cast<int>(std::floor(f));
      base = std::min(base, g.dims[a] - 2);
      i0[a] = base;
      i1[a] = base + 1;
      t[a] = f - base;
    }
    std::array<double, 4> acc{0.0, 0.0, 0.0, 0.0};
    for (int corner = 0; corner < 8; ++corner) {
      const int ix = (corner & 1) ? i1[0] : i0[0];
      const int iy = (corner & 2) ? i1[1] : i0[1];
      const int iz = (corner & 4) ? i1[2] : i0[2];
      const double wgt = ((corner & 1) ? t[0] : 1.0 - t[0]) * ((corner & 2) ? t[1] : 1.0 - t[1]) *
                         ((corner & 4) ? t[2] : 1.0 - t[2]);
      if (wgt == 0.0) continue;
      for (int c = 0; c < g.channels; ++c) acc[c] += wgt * g.at(ix, iy, iz, c);
    }
    FieldSample out;
    out.density = std::max(0.0, acc[0]);
    if (g.channels == 4)
      out.color = Vec3(acc[1], acc[2], acc[3]).cwiseMax(0.0).cwiseMin(1.0);
    else
      out.color = Vec3::Ones();
    return out;
  }

  std::variant<Analytic, Grid> source_{Analytic{}};
};

/// Samples any field on a regular 4-channel node grid spanning its bounds.
inline Grid bake_grid(const DensityField& f, const std::array<int, 3>& dims) {
  for (int d : dims)
    if (d < 2) throw Error("bake dims must be at least 2");
  const Box3 box = f.bounds();
  Grid g;
  g.dims = dims;
  g.origin = box.min();
  for (int a = 0; a < 3; ++a) g.spacing[a] = box.sizes()[a] / (dims[a] - 1);
  g.channels = 4;
  g.data.resize(g.node_count() * 4);
  for (int k = 0; k < dims[2]; ++k)
    for (int j = 0; j < dims[1]; ++j)
      for (int i = 0; i < dims[0]; ++i) {
        const FieldSample s = f.sample(g.origin + g.spacing.cwiseProduct(Vec3(i, j, k)));
        g.at(i, j, k, 0) = static_cast<float>(s.density);
        for (int c = 0; c < 3; ++c) g.at(i, j, k, 1 + c) = static_cast<float>(s.color[c]);
      }
  return g;
}

// --- PIEGRID1 ---------------------------------------------------------------

inline constexpr const char* kGridMagic = "PIEGRID1";

namespace detail {
inline std::string format_exact(double v) {
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
  return os.str();
}

inline std::string read_header_line(std::istream& in, const std::string& what) {
  std::string line;
  if (!std::getline(in, line)) throw Error("truncated header: missing " + what);
  return line;
}

inline std::uint32_t to_little_endian(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) return __builtin_bswap32(v);
  return v;
}
}  // namespace detail

inline void write_grid(std::ostream& out, const Grid& g) {
  out << kGridMagic << '\n';
  out << "dims " << g.dims[0] << ' ' << g.dims[1] << ' ' << g.dims[2] << '\n';
  out << "origin " << detail::format_exact(g.origin.x()) << ' ' << detail::format_exact(g.origin.y()) << ' '
      << detail::format_exact(g.origin.z()) << '\n';
  out << "spacing " << detail::format_exact(g.spacing.x()) << ' ' << detail::format_exact(g.spacing.y()) << ' '
      << detail::format_exact(g.spacing.z()) << '\n';
  out << "channels " << g.channels << '\n';
  for (float v : g.data) {
    const std::uint32_t bits = detail::to_little_endian(std::bit_cast<std::uint32_t>(v));
    out.write(reinterpret_cast<const char*>(&bits), sizeof(bits));
  }
}

inline Grid read_grid(std::istream& in) {
  if (detail::read_header_line(in, "magic") != kGridMagic) throw Error("bad magic");
  Grid g;
  auto parse = [&](const std::string& key, auto&... values) {
    std::istringstream ls(detail::read_header_line(in, key));
    std::string tag;
    ls >> tag;
    if (tag != key) throw Error("malformed header: expected '" + key + "'");
    ((ls >> values), ...);
    if (ls.fail()) throw Error("malformed header line '" + key + "'");
  };
  long long nx = 0, ny = 0, nz = 0;
  parse("dims", nx, ny, nz);
  if (nx <= 0 || ny <= 0 || nz <= 0) throw Error("dims must be positive");
  g.dims = {static_cast<int>(nx), static_cast<int>(ny), static_cast<int>(nz)};
  parse("origin", g.origin.x(), g.origin.y(), g.origin.z());
  parse("spacing", g.spacing.x(), g.spacing.y(), g.spacing.z());
  long long channels = 0;
  parse("channels", channels);
  if (channels != 1 && channels != 4) throw Error("unsupported channel count " + std::to_string(channels));
  g.channels = static_cast<int>(channels);
  const std::size_t count = g.node_count() * g.channels;
  g.data.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t bits = 0;
    if (!in.read(reinterpret_cast<char*>(&bits), sizeof(bits))) throw Error("truncated payload");
    g.data[i] = std::bit_cast<float>(detail::to_little_endian(bits));
  }
  return g;
}

inline void save_grid(const Grid& g, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  write_grid(out, g);
  if (!out) throw Error("write failed for '" + path + "'");
}

inline void save_grid(const DensityField& f, const std::string& path) {
  if (!f.is_grid()) throw Error("only grid fields can be saved");
  save_grid(f.grid(), path);
}

inline DensityField load_grid(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open grid file '" + path + "'");
  return DensityField::from_grid(read_grid(in));
}

}  // namespace pie
