#include "pie/render.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>

using namespace pie;

namespace {

DensityField sphere_field(double level = 20.0) {
  return DensityField::analytic({Primitive::sphere(Vec3::Zero(), 0.5, level, Vec3(0.8, 0.5, 0.2))});
}

const Model& sphere_model() {
  static const Model m = [] {
    DiscretizationParams dp;
    dp.poisson.r_bar = 0.08;
    dp.poisson.kappa = 4.0;
    dp.kernels = 16;
    dp.extra_ips = 32;
    return discretize(sphere_field(1.0), dp, 11);
  }();
  return m;
}

Camera front_camera(int w, int h) {
  Camera c;
  c.position = Vec3(0.4, 0.3, 3.0);
  c.look_at = Vec3::Zero();
  c.fov_deg = 35.0;
  c.width = w;
  c.height = h;
  return c;
}

/// Warp frame with one IP carrying the exact Taylor data of `f` at `xk`.
WarpFrame single_ip_frame(const PolynomialField& f, const Vec3& xk, double diag, bool quadratic = true) {
  WarpFrame w;
  w.order = quadratic ? InterpolationOrder::quadratic : InterpolationOrder::linear;
  w.rest = {xk};
  w.disp = {f.value(xk)};
  w.deformed = {xk + f.value(xk)};
  w.grad_u = {f.gradient(xk)};
  w.grad_f = {quadratic ? f.grad_deformation() : zero_grad_f()};
  w.max_diagonal = diag;
  w.cutoff = 2.0 * diag;
  w.max_displacement = w.disp[0].norm();
  w.tree = KdTree(w.deformed);
  return w;
}

/// Random quadratic field with |grad u| <= 0.5 over a ball of radius `reach`.
PolynomialField bounded_field(std::mt19937_64& rng, double reach) {
  PolynomialField f = test::random_polynomial(rng, 1.0);
  f.A *= 0.25 / f.A.norm();
  double qn = 0.0;
  for (const auto& m : f.Q) qn += m.squaredNorm();
  const double s = 0.25 / (2.0 * reach * std::sqrt(qn));
  for (auto& m : f.Q) m *= s;
  return f;
}

int silhouette_columns(const Image& img) {
  int count = 0;
  for (int x = 0; x < img.width; ++x) {
    bool hit = false;
    for (int y = 0; y < img.height && !hit; ++y) hit = img.pixel(x, y)[3] >= 128;
    count += hit;
  }
  return count;
}

}  // namespace

TEST(Camera, ValidationRejectsBadParameters) {
  Camera c;
  EXPECT_NO_THROW(c.validate());
  c.fov_deg = 180.0;
  EXPECT_THROW(c.validate(), Error);
  c = Camera{};
  c.width = 0;
  EXPECT_THROW(c.validate(), Error);
  c = Camera{};
  c.up = Vec3::UnitZ();
  EXPECT_THROW(c.validate(), Error);
}

TEST(Camera, LookAtProjectsToImageCentre) {
  const Camera c = front_camera(320, 200);
  const auto p = c.project(c.look_at);
  ASSERT_TRUE(p);
  EXPECT_NEAR(p->px, 160.0, 1e-9);
  EXPECT_NEAR(p->py, 100.0, 1e-9);
  EXPECT_NEAR(p->depth, (c.look_at - c.position).norm(), 1e-12);
}

TEST(Camera, PointBehindIsCulled) {
  const Camera c = front_camera(64, 64);
  EXPECT_FALSE(c.project(c.position - c.forward()));
  const auto pts = render_points(c, {c.look_at, c.position - 2.0 * c.forward()}, {c.look_at});
  ASSERT_EQ(pts.size(), 2u);
  EXPECT_EQ(pts[0].kind, OverlayPoint::kernel);
  EXPECT_EQ(pts[0].index, 0);
  EXPECT_EQ(pts[1].kind, OverlayPoint::ip);
}

TEST(Camera, SquareSideFollowsPinholeArithmetic) {
  Camera c;
  c.position = Vec3(0, 0, 5);
  c.look_at = Vec3::Zero();
  c.fov_deg = 50.0;
  c.width = 400;
  c.height = 300;
  const double side = 0.7, d = 5.0;
  const std::vector<Vec3> sq{{-side / 2, -side / 2, 0}, {side / 2, -side / 2, 0}, {side / 2, side / 2, 0}, {-side / 2, side / 2, 0}};
  const auto pts = render_points(c, sq, {});
  ASSERT_EQ(pts.size(), 4u);
  const double expect = (c.height / 2.0) / std::tan(25.0 * M_PI / 180.0) * (side / d);
  EXPECT_NEAR(pts[1].px - pts[0].px, expect, 1e-9);
  EXPECT_NEAR(pts[0].py - pts[3].py, expect, 1e-9);
}

TEST(Camera, CentreRayMatchesProjection) {
  const Camera c = front_camera(7, 5);
  for (int y = 0; y < c.height; ++y)
    for (int x = 0; x < c.width; ++x) {
      const auto p = c.project(c.position + 2.0 * c.ray(x, y));
      ASSERT_TRUE(p);
      EXPECT_NEAR(p->px, x + 0.5, 1e-9);
      EXPECT_NEAR(p->py, y + 0.5, 1e-9);
    }
}

TEST(Warp, IdentityIsExactInOneIteration) {
  const Model& m = sphere_model();
  const WarpFrame f = make_warp_frame(m, VecX::Zero(static_cast<Eigen::Index>(m.ndof())));
  std::mt19937_64 rng(1);
  for (int i = 0; i < 100; ++i) {
    const Vec3 xt = test::random_point_in(rng, Box3(Vec3::Constant(-0.5), Vec3::Constant(0.5)));
    const WarpResult w = warp_point(xt, f);
    EXPECT_TRUE(w.converged);
    EXPECT_EQ(w.iterations, 1);
    EXPECT_EQ(w.x, xt);
    EXPECT_EQ(w.residual, 0.0);
  }
}

TEST(Warp, TranslationSubtracts) {
  const Model& m = sphere_model();
  PolynomialField t;
  t.b = Vec3(0.3, -0.2, 0.1);
  const WarpFrame f = make_warp_frame(m, encode_field(m.kernels, m.order, t));
  for (const Vec3& x : m.ips.positions) {
    const Vec3 xt = x + t.b + Vec3(0.01, 0.02, -0.01);
    const WarpResult w = warp_point(xt, f);
    EXPECT_TRUE(w.converged);
    EXPECT_LE((w.x - (xt - t.b)).norm(), 1e-9);
  }
}

TEST(Warp, SingleIpRoundTrip) {
  std::mt19937_64 rng(5);
  const double scale = 1.0, half = 0.1 * scale;
  double worst = 0.0;
  int max_iter = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const Vec3 xk = test::random_point_in(rng, Box3(Vec3::Constant(-0.5), Vec3::Constant(0.5)));
    const PolynomialField f = bounded_field(rng, 2.0);
    const WarpFrame frame = single_ip_frame(f, xk, 2.0 * std::sqrt(3.0) * half);
    const Vec3 x = test::random_point_in(rng, Box3(xk.array() - half, xk.array() + half));
    const WarpResult w = warp_point(x + f.value(x), frame);
    ASSERT_TRUE(w.converged);
    EXPECT_TRUE(w.in_body);
    worst = std::max(worst, (w.x - x).norm());
    max_iter = std::max(max_iter, w.iterations);
  }
  EXPECT_LE(worst, 1e-5 * scale);
  EXPECT_LE(max_iter, 50);
}

TEST(Warp, BlendedRoundTripOnModel) {
  const Model& m = sphere_model();
  std::mt19937_64 rng(9);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const PolynomialField f = bounded_field(rng, 1.0);
    const VecX q = encode_field(m.kernels, m.order, f);
    const WarpFrame frame = make_warp_frame(m, q);
    for (int i = 0; i < 50; ++i) {
      const std::size_t k = rng() % m.ips.size();
      const Vec3 half = 0.5 * m.ips.cuboids[k].lengths;
      const Vec3 x = test::random_point_in(rng, Box3(m.ips.positions[k] - half, m.ips.positions[k] + half));
      const WarpResult w = warp_point(x + evaluate_basis(m.kernels, x, m.order).displacement(q), frame);
      if (!w.converged) continue;
      worst = std::max(worst, (w.x - x).norm());
    }
  }
  EXPECT_LE(worst, 1e-2 * 1.0);
}

TEST(Warp, QuadraticBeatsLinearAtLargeDisplacement) {
  // Unit scene scale; keep samples whose displacement relative to the IP is
  // about 0.3 while |grad u| <= 0.5 holds on the whole ball.
  std::mt19937_64 rng(21);
  std::normal_distribution<double> n;
  double quad_err = 0.0, lin_err = 0.0;
  int used = 0;
  while (used < 200) {
    const PolynomialField f = bounded_field(rng, 1.2);
    const Vec3 x = Vec3(n(rng), n(rng), n(rng)).normalized();
    const double mag = (f.value(x) - f.value(Vec3::Zero())).norm();
    if (std::abs(mag - 0.3) > 0.05) continue;
    const Vec3 xt = x + f.value(x);
    const WarpFrame frame = single_ip_frame(f, Vec3::Zero(), 1.0);
    WarpOptions lin;
    lin.first_order = true;
    const WarpResult wq = warp_point(xt, frame);
    const WarpResult wl = warp_point(xt, frame, lin);
    ASSERT_TRUE(wq.converged);
    ASSERT_TRUE(wl.converged);
    quad_err = std::max(quad_err, (wq.x - x).norm());
    lin_err += (wl.x - x).norm() / 200.0;
    ++used;
  }
  EXPECT_LE(quad_err, 1e-9);
  EXPECT_GE(lin_err, 10.0 * quad_err);
  EXPECT_GT(lin_err, 1e-3);
}

TEST(Warp, FarPointIsOutsideBody) {
  const Model& m = sphere_model();
  const WarpFrame f = make_warp_frame(m, VecX::Zero(static_cast<Eigen::Index>(m.ndof())));
  EXPECT_FALSE(warp_point(Vec3(50, 0, 0), f).in_body);
  EXPECT_TRUE(warp_point(m.ips.positions[0], f).in_body);
}

TEST(Render, RestStateMatchesDirectBitForBit) {
  const Model& m = sphere_model();
  const DensityField field = sphere_field();
  const Camera cam = front_camera(64, 48);
  RenderParams p;
  p.r_bar = 0.08;
  const Image warped = render(cam, field, make_warp_frame(m, VecX::Zero(static_cast<Eigen::Index>(m.ndof()))), p);
  const Image direct = render_direct(cam, field, p);
  EXPECT_TRUE(warped == direct);
  EXPECT_GT(silhouette_columns(direct), 10);
}

TEST(Render, TranslationMatchesShiftedReference) {
  const Model& m = sphere_model();
  const DensityField field = sphere_field();
  const Camera cam = front_camera(96, 72);
  RenderParams p;
  p.r_bar = 0.08;
  PolynomialField t;
  t.b = Vec3(0.15, -0.1, 0.05);
  const Image warped = render(cam, field, make_warp_frame(m, encode_field(m.kernels, m.order, t)), p);
  const Image direct = render_direct(cam, field, p, t.b);
  std::size_t bad = 0;
  for (std::size_t i = 0; i < warped.rgba.size(); i += 4) {
    bool ok = true;
    for (int c = 0; c < 4; ++c) ok = ok && std::abs(int(warped.rgba[i + c]) - int(direct.rgba[i + c])) <= 1;
    bad += !ok;
  }
  const double total = static_cast<double>(warped.rgba.size() / 4);
  EXPECT_LE(bad / total, 1e-3);
}

TEST(Render, StretchScalesSilhouette) {
  const Model& m = sphere_model();
  const DensityField field = sphere_field();
  Camera cam;
  cam.position = Vec3(0, 0, 20);
  cam.fov_deg = 5.0;
  cam.width = 240;
  cam.height = 120;
  RenderParams p;
  p.r_bar = 0.08;
  PolynomialField stretch;
  stretch.A(0, 0) = 0.2;
  const Image rest = render_direct(cam, field, p);
  const Image stretched = render(cam, field, make_warp_frame(m, encode_field(m.kernels, m.order, stretch)), p);
  const double ratio = static_cast<double>(silhouette_columns(stretched)) / silhouette_columns(rest);
  EXPECT_NEAR(ratio, 1.2, 0.02 * 1.2);
}

TEST(Render, TransmittanceNeverIncreasesAlongRay) {
  const DensityField field = sphere_field();
  const Camera cam = front_camera(9, 9);
  // Alpha is 1 - T, so it must grow with the march length.
  RenderParams p;
  p.r_bar = 0.08;
  Camera shorter = cam;
  std::vector<int> prev(81, 0);
  for (double far : {2.6, 2.9, 3.2, 3.5, 3.8, 5.0}) {
    shorter.far_plane = far;
    const Image img = render_direct(shorter, field, p);
    for (int i = 0; i < 81; ++i) {
      EXPECT_GE(img.rgba[4 * i + 3], prev[i]);
      prev[i] = img.rgba[4 * i + 3];
    }
  }
}

TEST(Render, EmptyFieldGivesBackground) {
  const DensityField field = DensityField::analytic({});
  RenderParams p;
  p.background = Vec3(0.0, 0.0, 1.0);
  const Image img = render_direct(front_camera(4, 4), field, p);
  for (std::size_t i = 0; i < img.rgba.size(); i += 4) {
    EXPECT_EQ(img.rgba[i + 2], 255);
    EXPECT_EQ(img.rgba[i + 3], 0);
  }
}

TEST(Render, StatsCountSamples) {
  const Model& m = sphere_model();
  RenderParams p;
  p.r_bar = 0.08;
  RenderStats st;
  render(front_camera(16, 16), sphere_field(), make_warp_frame(m, VecX::Zero(static_cast<Eigen::Index>(m.ndof()))), p,
         &st);
  EXPECT_GT(st.samples, 0u);
  EXPECT_EQ(st.unconverged, 0u);
  EXPECT_EQ(st.max_spread, 0.0);
}

TEST(ImageIo, PngAndPpmRoundTrip) {
  Image img(5, 3);
  for (std::size_t i = 0; i < img.rgba.size(); ++i) img.rgba[i] = static_cast<std::uint8_t>(i * 7);
  for (std::size_t i = 3; i < img.rgba.size(); i += 4) img.rgba[i] = 255;
  const auto dir = std::filesystem::temp_directory_path();
  const std::string png = (dir / "pie_render_test.png").string();
  const std::string ppm = (dir / "pie_render_test.ppm").string();
  write_png(img, png);
  write_ppm(img, ppm);
  EXPECT_TRUE(read_png(png) == img);
  EXPECT_TRUE(read_ppm(ppm) == img);
  std::filesystem::remove(png);
  std::filesystem::remove(ppm);
  EXPECT_THROW(write_png(img, "/nonexistent-dir/x.png"), Error);
}
