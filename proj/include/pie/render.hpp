#pragma once

// Inverse-warp raymarching of the deformed body against the rest field.

#include "pie/field.hpp"
#include "pie/model.hpp"
#include "pie/spatial.hpp"

#include <png.h>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace pie {

struct Camera {
  Vec3 position{0.0, 0.0, 3.0};
  Vec3 look_at = Vec3::Zero();
  Vec3 up = Vec3::UnitY();
  double fov_deg = 45.0;  // vertical
  int width = 256;
  int height = 256;
  double near_plane = 0.01;
  double far_plane = 100.0;

  void validate() const {
    if (!(fov_deg > 0.0 && fov_deg < 180.0)) throw Error("camera fov must lie in (0, 180) degrees");
    if (width < 1 || height < 1) throw Error("camera resolution must be at least 1x1");
    if (!(far_plane > near_plane && near_plane >= 0.0)) throw Error("camera near/far planes are invalid");
    if ((look_at - position).norm() == 0.0) throw Error("camera position equals look_at");
    if (forward().cross(up).norm() < 1e-12) throw Error("camera up is parallel to the view direction");
  }

  Vec3 forward() const { return (look_at - position).normalized(); }
  Vec3 right() const { return forward().cross(up).normalized(); }
  Vec3 true_up() const { return right().cross(forward()); }
  double tan_half() const { return std::tan(0.5 * fov_deg * 3.14159265358979323846 / 180.0); }
  double aspect() const { return static_cast<double>(width) / height; }

  /// Unit direction through continuous pixel coordinates (x, y), origin at
  /// the top-left image corner.
  Vec3 ray_at(double x, double y) const {
    const double t = tan_half();
    const double sx = (2.0 * x / width - 1.0) * t * aspect();
    const double sy = (1.0 - 2.0 * y / height) * t;
    return (forward() + sx * right() + sy * true_up()).normalized();
  }

  /// Unit direction through the centre of pixel (px, py); row 0 is the top.
  Vec3 ray(int px, int py) const { return ray_at(px + 0.5, py + 0.5); }

  struct Projection {
    double px, py, depth;
  };

  /// Pixel coordinates (continuous, origin at the top-left corner) or
  /// nothing when the point is not in front of the near plane.
  std::optional<Projection> project(const Vec3& x) const {
    const Vec3 v = x - position;
    const double z = v.dot(forward());
    if (!(z > near_plane)) return std::nullopt;
    const double t = tan_half();
    const double nx = v.dot(right()) / (z * t * aspect());
    const double ny = v.dot(true_up()) / (z * t);
    return Projection{0.5 * width * (1.0 + nx), 0.5 * height * (1.0 - ny), z};
  }
};

struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgba;

  Image() = default;
  Image(int w, int h) : width(w), height(h), rgba(static_cast<std::size_t>(w) * h * 4, 0) {}

  std::uint8_t* pixel(int x, int y) { return &rgba[(static_cast<std::size_t>(y) * width + x) * 4]; }
  const std::uint8_t* pixel(int x, int y) const { return &rgba[(static_cast<std::size_t>(y) * width + x) * 4]; }

  bool operator==(const Image& o) const { return width == o.width && height == o.height && rgba == o.rgba; }
};

/// Binary PPM (P6); alpha is dropped.
inline void write_ppm(const Image& img, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path + " for writing");
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  for (std::size_t i = 0; i < img.rgba.size(); i += 4) out.write(reinterpret_cast<const char*>(&img.rgba[i]), 3);
  if (!out) throw Error("failed writing " + path);
}

inline Image read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  std::string magic;
  int w = 0, h = 0, maxv = 0;
  in >> magic >> w >> h >> maxv;
  if (magic != "P6" || w < 1 || h < 1 || maxv != 255) throw Error("unsupported PPM file " + path);
  in.get();
  Image img(w, h);
  for (std::size_t i = 0; i < img.rgba.size(); i += 4) {
    in.read(reinterpret_cast<char*>(&img.rgba[i]), 3);
    img.rgba[i + 3] = 255;
  }
  if (!in) throw Error("truncated PPM file " + path);
  return img;
}

/// 8-bit RGBA PNG via libpng.
inline void write_png(const Image& img, const std::string& path) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!fp) throw Error("cannot open " + path + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw Error("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("failed writing " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               PNG_COLOR_TYPE_RGBA, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < img.height; ++y) png_write_row(png, const_cast<png_bytep>(img.pixel(0, y)));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline Image read_png(const std::string& path) {
  png_image pi{};
  pi.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&pi, path.c_str())) throw Error("cannot read PNG " + path);
  pi.format = PNG_FORMAT_RGBA;
  Image img(static_cast<int>(pi.width), static_cast<int>(pi.height));
  if (!png_image_finish_read(&pi, nullptr, img.rgba.data(), 0, nullptr)) {
    png_image_free(&pi);
    throw Error("cannot decode PNG " + path);
  }
  return img;
}

// --- warping ---------------------------------------------------------------------

/// Per-frame Taylor data at the IPs. Build once per published state.
struct WarpFrame {
  InterpolationOrder order = InterpolationOrder::quadratic;
  std::vector<Vec3> rest;      // x_k
  std::vector<Vec3> deformed;  // x_k + u(x_k)
  std::vector<std::size_t> ip;  // model IP index of each entry
  std::vector<Vec3> disp;      // u(x_k)
  std::vector<Mat3> grad_u;    // F(x_k) - I
  std::vector<GradF> grad_f;
  KdTree tree;                 // over `deformed`
  double cutoff = 0.0;         // 2 x max cuboid diagonal
  double max_displacement = 0.0;
  double max_diagonal = 0.0;
};

inline WarpFrame make_warp_frame(const Model& model, const VecX& q) {
  if (static_cast<std::size_t>(q.size()) != model.ndof()) throw Error("state size does not match the model");
  WarpFrame f;
  f.order = model.order;
  for (std::size_t k = 0; k < model.ips.size(); ++k) {
    const auto& b = model.ip_bases[k];
    if (b.empty()) continue;
    const Vec3 u = b.displacement(q);
    f.ip.push_back(k);
    f.rest.push_back(model.ips.positions[k]);
    f.disp.push_back(u);
    f.deformed.push_back(model.ips.positions[k] + u);
    f.grad_u.push_back(b.displacement_gradient(q));
    f.grad_f.push_back(model.order == InterpolationOrder::quadratic ? b.grad_deformation(q) : zero_grad_f());
    f.max_displacement = std::max(f.max_displacement, u.norm());
    f.max_diagonal = std::max(f.max_diagonal, model.ips.cuboids[k].diagonal());
  }
  f.cutoff = 2.0 * f.max_diagonal;
  f.tree = KdTree(f.deformed);
  return f;
}

struct WarpOptions {
  int neighbors = 3;
  int max_iterations = 50;
  double tolerance = 1e-10;  // residual, world units
  double blend_delta = 1e-8;
  bool first_order = false;  // drop the quadratic Taylor term
};

struct WarpResult {
  Vec3 x = Vec3::Zero();
  bool converged = false;
  int iterations = 0;
  double residual = 0.0;
  bool in_body = false;
  double spread = 0.0;  // largest disagreement between blended solutions
};

namespace detail {

struct IpWarp {
  Vec3 e;  // rest-space displacement at the solution, x = x_tilde - e
  bool converged;
  int iterations;
  double residual;
};

/// Solves e = u_k + grad_u d + 1/2 (gradF . d) d with d = x_tilde - x_k - e by
/// Newton from x = x_k. The Jacobian is F at x, one 3x3 solve per iteration.
inline IpWarp warp_one(const WarpFrame& f, std::size_t k, const Vec3& xt, const WarpOptions& opt) {
  const Vec3 d0 = xt - f.rest[k];
  const bool quad = f.order == InterpolationOrder::quadratic && !opt.first_order;
  const GradF& t = f.grad_f[k];
  auto residual = [&](const Vec3& e, Mat3* jac) {
    const Vec3 d = d0 - e;
    Vec3 r = e - f.disp[k] - f.grad_u[k] * d;
    Mat3 j = Mat3::Identity() + f.grad_u[k];
    if (quad) {
      const Mat3 c = contract(t, d);
      r -= 0.5 * c * d;
      for (int m = 0; m < 3; ++m) j.col(m) += 0.5 * (c.col(m) + t[m] * d);
    }
    if (jac) *jac = j;
    return r;
  };
  IpWarp out{d0, false, 0, 0.0};
  Mat3 j;
  Vec3 r = residual(out.e, &j);
  out.residual = r.norm();
  out.converged = out.residual <= opt.tolerance;
  for (int it = 0; it < opt.max_iterations && !out.converged; ++it) {
    Eigen::PartialPivLU<Mat3> lu(j);
    if (!(std::abs(lu.determinant()) > 0.0)) break;
    out.e -= lu.solve(r);
    ++out.iterations;
    r = residual(out.e, &j);
    out.residual = r.norm();
    out.converged = out.residual <= opt.tolerance;
  }
  return out;
}

}  // namespace detail

/// Maps a deformed-space point to the rest pose by blending per-IP Newton
/// solutions of the nearest deformed IPs with weights 1 / (d + delta).
inline WarpResult warp_point(const Vec3& xt, const WarpFrame& f, const WarpOptions& opt = {}) {
  WarpResult res;
  res.x = xt;
  const auto nn = f.tree.knn(xt, static_cast<std::size_t>(std::max(1, opt.neighbors)));
  if (nn.empty()) return res;
  res.in_body = std::sqrt(nn.front().dist2) <= f.cutoff;
  std::vector<detail::IpWarp> sols;
  std::vector<double> w;
  res.converged = true;
  for (const auto& n : nn) {
    sols.push_back(detail::warp_one(f, static_cast<std::size_t>(n.index), xt, opt));
    w.push_back(1.0 / (std::sqrt(n.dist2) + opt.blend_delta));
    res.converged = res.converged && sols.back().converged;
    res.iterations = std::max(res.iterations, sols.back().iterations);
    res.residual = std::max(res.residual, sols.back().residual);
  }
  bool same = true;
  for (const auto& s : sols) same = same && s.e == sols.front().e;
  Vec3 e = sols.front().e;
  if (!same) {
    double wsum = 0.0;
    e.setZero();
    for (std::size_t i = 0; i < sols.size(); ++i) {
      e += w[i] * sols[i].e;
      wsum += w[i];
    }
    e /= wsum;
    for (std::size_t i = 0; i < sols.size(); ++i)
      for (std::size_t j = i + 1; j < sols.size(); ++j) res.spread = std::max(res.spread, (sols[i].e - sols[j].e).norm());
  }
  res.x = xt - e;
  return res;
}

// --- raymarching -------------------------------------------------------------------

struct RenderParams {
  double step = 0.0;           // 0 selects the field default (see march_step)
  double r_bar = 0.05;         // analytic fields march at r_bar / 2
  double density_scale = 1.0;  // s_sigma
  double min_transmittance = 1e-3;
  Vec3 background = Vec3::Zero();
  WarpOptions warp{};
};

inline double march_step(const DensityField& field, const RenderParams& p) {
  if (p.step > 0.0) return p.step;
  if (field.is_grid()) return field.grid().spacing.minCoeff();
  return 0.5 * p.r_bar;
}

struct RenderStats {
  std::size_t samples = 0;
  std::size_t unconverged = 0;
  double max_spread = 0.0;
};

namespace detail {

inline bool clip_ray(const Vec3& o, const Vec3& d, const Box3& box, double& t0, double& t1) {
  for (int a = 0; a < 3; ++a) {
    if (d[a] == 0.0) {
      if (o[a] < box.min()[a] || o[a] > box.max()[a]) return false;
      continue;
    }
    double ta = (box.min()[a] - o[a]) / d[a], tb = (box.max()[a] - o[a]) / d[a];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  return t0 <= t1;
}

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// Emission-absorption march. Samples sit at t_i = near + (i + 1/2) ds for
/// integer i, so two renders over different bounds see identical positions.
/// `query(x, row)` maps a sample to (density, color).
template <class Query>
Image march(const Camera& cam, const Box3& bounds, const RenderParams& p, double ds, Query&& query) {
  cam.validate();
  Image img(cam.width, cam.height);
  parallel_for(0, static_cast<std::size_t>(cam.height), [&](std::size_t row) {
    const int py = static_cast<int>(row);
    for (int px = 0; px < cam.width; ++px) {
      const Vec3 dir = cam.ray(px, py);
      double t0 = cam.near_plane, t1 = cam.far_plane;
      double trans = 1.0;
      Vec3 rgb = Vec3::Zero();
      if (!bounds.isEmpty() && clip_ray(cam.position, dir, bounds, t0, t1)) {
        const auto first = static_cast<long>(std::ceil((t0 - cam.near_plane) / ds - 0.5));
        for (long i = std::max(0L, first);; ++i) {
          const double t = cam.near_plane + (static_cast<double>(i) + 0.5) * ds;
          if (t > t1) break;
          const FieldSample s = query(cam.position + t * dir, row);
          const double sigma = p.density_scale * s.density;
          if (sigma > 0.0) {
            const double a = std::exp(-sigma * ds);
            rgb += trans * (1.0 - a) * s.color;
            trans *= a;
            if (trans < p.min_transmittance) break;
          }
        }
      }
      rgb += trans * p.background;
      std::uint8_t* out = img.pixel(px, py);
      for (int c = 0; c < 3; ++c) out[c] = to_byte(rgb[c]);
      out[3] = to_byte(1.0 - trans);
    }
  });
  return img;
}

}  // namespace detail

/// Deformed-space bounds: rest bounds dilated by max |u_k| + max cuboid diagonal.
inline Box3 deformed_bounds(const DensityField& field, const WarpFrame& f) {
  Box3 b = field.bounds();
  if (b.isEmpty()) return b;
  const double pad = f.max_displacement + f.max_diagonal;
  b.min().array() -= pad;
  b.max().array() += pad;
  return b;
}

/// Renders the deformed body by warping every ray sample to the rest pose.
inline Image render(const Camera& cam, const DensityField& field, const WarpFrame& frame, const RenderParams& p = {},
                    RenderStats* stats = nullptr) {
  std::vector<RenderStats> rows(static_cast<std::size_t>(std::max(cam.height, 1)));
  Image img = detail::march(cam, deformed_bounds(field, frame), p, march_step(field, p),
                            [&](const Vec3& xt, std::size_t row) {
                              const WarpResult w = warp_point(xt, frame, p.warp);
                              auto& st = rows[row];
                              ++st.samples;
                              if (!w.converged) ++st.unconverged;
                              st.max_spread = std::max(st.max_spread, w.spread);
                              if (!w.in_body || !w.converged) return FieldSample{};
                              return field.sample(w.x);
                            });
  if (stats) {
    *stats = {};
    for (const auto& r : rows) {
      stats->samples += r.samples;
      stats->unconverged += r.unconverged;
      stats->max_spread = std::max(stats->max_spread, r.max_spread);
    }
  }
  return img;
}

/// Reference raymarch of the rest field translated by `shift`.
inline Image render_direct(const Camera& cam, const DensityField& field, const RenderParams& p = {},
                           const Vec3& shift = Vec3::Zero()) {
  Box3 b = field.bounds();
  if (!b.isEmpty()) b.translate(shift);
  return detail::march(cam, b, p, march_step(field, p), [&](const Vec3& xt, std::size_t) { return field.sample(xt - shift); });
}

// --- overlay ------------------------------------------------------------------------

struct OverlayPoint {
  enum Kind { kernel, ip } kind = kernel;
  int index = 0;
  double px = 0.0, py = 0.0, depth = 0.0;
};

/// Projects deformed kernel centres and IPs for the UI overlay; points
/// behind the camera are culled.
inline std::vector<OverlayPoint> render_points(const Camera& cam, const std::vector<Vec3>& kernels,
                                               const std::vector<Vec3>& ips) {
  std::vector<OverlayPoint> out;
  auto add = [&](const std::vector<Vec3>& pts, OverlayPoint::Kind kind) {
    for (std::size_t i = 0; i < pts.size(); ++i)
      if (auto p = cam.project(pts[i])) out.push_back({kind, static_cast<int>(i), p->px, p->py, p->depth});
  };
  add(kernels, OverlayPoint::kernel);
  add(ips, OverlayPoint::ip);
  return out;
}

/// Deformed kernel centres x_i + u(x_i) given bases evaluated at the centres.
inline std::vector<Vec3> deformed_points(const std::vector<Vec3>& rest, const std::vector<BasisEvaluation>& bases,
                                         const VecX& q) {
  std::vector<Vec3> out(rest.size());
  for (std::size_t i = 0; i < rest.size(); ++i) out[i] = rest[i] + (bases[i].empty() ? Vec3::Zero() : Vec3(bases[i].displacement(q)));
  return out;
}

}  // namespace pie
