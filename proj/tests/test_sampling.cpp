#include "pie/sampling.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

using namespace pie;

namespace {

ParticleCloud sample(const DensityField& f, double r_bar, std::uint64_t seed, double kappa = 1.0) {
  PoissonParams p;
  p.r_bar = r_bar;
  p.kappa = kappa;
  p.seed = seed;
  return poisson_disk_sample(f, p);
}

void expect_blue_noise(const ParticleCloud& c) {
  for (std::size_t p = 0; p < c.size(); ++p)
    for (std::size_t q = p + 1; q < c.size(); ++q)
      ASSERT_GE((c.positions[p] - c.positions[q]).norm(), std::min(c.radii[p], c.radii[q])) << p << " " << q;
}

}  // namespace

TEST(Sampling, AdaptiveRadiusFormula) {
  EXPECT_DOUBLE_EQ(adaptive_radius(1.0, 1.0, 0.0), 1.0);
  EXPECT_NEAR(adaptive_radius(1.0, 1.0, 3.0), 1.0 / std::sqrt(3.001), 1e-15);
  EXPECT_NEAR(adaptive_radius(0.2, 1.0, 3.0) / 0.2, 0.5773, 1e-4);
}

TEST(Sampling, ConstantDensityGivesUniformRadii) {
  Grid g;
  g.dims = {2, 2, 2};
  g.channels = 1;
  g.data.assign(8, 1.0f);
  const auto f = DensityField::from_grid(g);
  const auto c = sample(f, 0.1, 4);
  ASSERT_GT(c.size(), 100u);
  for (double r : c.radii) EXPECT_EQ(r, 0.1);
  expect_blue_noise(c);
}

TEST(Sampling, BlueNoiseAndDensityFloorOnAdaptiveSphere) {
  const auto f = DensityField::analytic({Primitive::sphere(Vec3::Zero(), 0.4)}, 0.2);
  const auto c = sample(f, 0.1, 1, 2.0);
  ASSERT_GT(c.size(), 100u);
  ASSERT_LE(c.size(), 5000u);
  expect_blue_noise(c);
  for (std::size_t p = 0; p < c.size(); ++p) {
    EXPECT_GE(c.densities[p], 1e-2);
    EXPECT_GE(f.density(c.positions[p]), 1e-2);
    EXPECT_NEAR(c.volumes[p], 4.0 / 3.0 * std::numbers::pi * std::pow(c.radii[p], 3), 1e-15);
  }
}

TEST(Sampling, LowDensityRegionsAreNeverSampled) {
  const auto f = DensityField::analytic({Primitive::box(Vec3::Zero(), Vec3(0.3, 0.3, 0.3), 1.0),
                                         Primitive::box(Vec3(1.0, 0, 0), Vec3(0.3, 0.3, 0.3), 0.005)});
  const auto c = sample(f, 0.08, 3, 4.0);
  ASSERT_GT(c.size(), 10u);
  for (const auto& x : c.positions) EXPECT_LT(x.x(), 0.5);
}

TEST(Sampling, EmptyFieldHasNoSeed) {
  Grid g;
  g.dims = {2, 2, 2};
  g.channels = 1;
  g.data.assign(8, 0.0f);
  PoissonParams p;
  p.r_bar = 0.1;
  p.max_seed_probes = 1000;
  EXPECT_THROW(
      {
        try {
          poisson_disk_sample(DensityField::from_grid(g), p);
        } catch (const Error& e) {
          EXPECT_STREQ(e.what(), "no seed particle found");
          throw;
        }
      },
      Error);
}

TEST(Sampling, DeterministicPerSeed) {
  const auto f = DensityField::analytic({Primitive::sphere(Vec3::Zero(), 0.5)});
  const auto a = sample(f, 0.07, 42, 4.0);
  const auto b = sample(f, 0.07, 42, 4.0);
  const auto c = sample(f, 0.07, 43, 4.0);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.positions[i], b.positions[i]);
    EXPECT_EQ(a.radii[i], b.radii[i]);
  }
  EXPECT_TRUE(a.size() != c.size() || a.positions[1] != c.positions[1]);
}

TEST(Sampling, BoundaryBandIsRefined) {
  const double falloff = 0.1;
  const auto f = DensityField::analytic({Primitive::sphere(Vec3::Zero(), 0.6)}, falloff);
  const auto c = sample(f, 0.08, 5, 1.0);
  double band = 0.0, interior = 0.0;
  int nb = 0, ni = 0;
  for (std::size_t p = 0; p < c.size(); ++p) {
    const double r = c.positions[p].norm();
    if (std::abs(r - 0.6) < 0.5 * falloff) {
      band += c.radii[p];
      ++nb;
    } else if (r < 0.6 - falloff) {
      interior += c.radii[p];
      ++ni;
    }
  }
  ASSERT_GT(nb, 0);
  ASSERT_GT(ni, 0);
  EXPECT_LT(band / nb, interior / ni);
}

TEST(Sampling, KernelSelectionSingleCentroid) {
  ParticleCloud c;
  for (int s : {-1, 1}) {
    c.push_back(Vec3(s * 0.5, 0.0, 0.0), 0.1, 1.0);
    c.push_back(Vec3(0.0, s * 0.25, 0.0), 0.2, 1.0);
    c.push_back(Vec3(0.0, 0.0, s * 0.75), 0.05, 1.0);
  }
  const auto k = select_kernels(c, 1, 1);
  ASSERT_EQ(k.size(), 1u);
  Vec3 expect = Vec3::Zero();
  double v = 0.0;
  for (std::size_t p = 0; p < c.size(); ++p) {
    expect += c.volumes[p] * c.positions[p];
    v += c.volumes[p];
  }
  EXPECT_LE((k.centers[0] - expect / v).norm(), 1e-15);
  for (const auto& x : c.positions) EXPECT_GE(k.coverage(x), 1);
}

TEST(Sampling, KernelsEqualParticlesWhenCountsMatch) {
  const auto f = DensityField::analytic({Primitive::sphere(Vec3::Zero(), 0.3)});
  const auto c = sample(f, 0.1, 2, 4.0);
  const auto k = select_kernels(c, c.size(), 3);
  std::vector<Vec3> a = k.centers, b = c.positions;
  auto lex = [](const Vec3& x, const Vec3& y) { return std::lexicographical_compare(x.data(), x.data() + 3, y.data(), y.data() + 3); };
  std::sort(a.begin(), a.end(), lex);
  std::sort(b.begin(), b.end(), lex);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
  EXPECT_THROW(select_kernels(c, c.size() + 1, 3), Error);
}

TEST(Sampling, BranchedShapeCoverage) {
  const auto f = DensityField::analytic({Primitive::box(Vec3(0, -0.3, 0), Vec3(0.05, 0.5, 0.05)),
                                         Primitive::box(Vec3(0.25, 0.1, 0), Vec3(0.3, 0.05, 0.05)),
                                         Primitive::box(Vec3(-0.2, 0.0, 0), Vec3(0.25, 0.04, 0.05)),
                                         Primitive::sphere(Vec3(0, 0.35, 0), 0.18)},
                                        0.03);
  const auto c = sample(f, 0.035, 8, 8.0);
  const auto k = select_kernels(c, 78, 8);
  ASSERT_EQ(k.size(), 78u);
  for (const auto& x : c.positions) EXPECT_GE(k.coverage(x), 4);
  for (const auto& x : k.centers) EXPECT_GE(f.density(x), 1e-2);
}

TEST(Sampling, IntegratorPointsWithoutExtras) {
  const auto f = test::block_field(Vec3(0.4, 0.2, 0.2));
  const auto c = sample(f, 0.06, 2, 4.0);
  const auto k = select_kernels(c, 10, 2);
  const auto ips = place_integrator_points(c, k, 0);
  ASSERT_EQ(ips.size(), 10u);
  for (std::size_t i = 0; i < 10; ++i) {
    EXPECT_EQ(ips.positions[i], k.centers[i]);
    EXPECT_TRUE(ips.kernel_ip[i]);
  }
}

TEST(Sampling, ExtraIpsKeepKernelIpsFixed) {
  const auto f = test::block_field(Vec3(0.4, 0.2, 0.2));
  const auto c = sample(f, 0.06, 2, 4.0);
  const auto k = select_kernels(c, 40, 2);
  const auto ips = place_integrator_points(c, k, 40);
  ASSERT_EQ(ips.size(), 80u);
  for (std::size_t i = 0; i < 40; ++i) EXPECT_EQ(ips.positions[i], k.centers[i]);
  for (std::size_t i = 40; i < 80; ++i) EXPECT_FALSE(ips.kernel_ip[i]);
  for (const auto& cub : ips.cuboids) {
    EXPECT_LE((cub.axes.transpose() * cub.axes - Mat3::Identity()).norm(), 1e-12);
    EXPECT_GT(cub.axes.determinant(), 0.0);
  }
}

TEST(Sampling, FarthestExtraIpLandsInFarLobe) {
  const auto f = DensityField::analytic({Primitive::sphere(Vec3(-1, 0, 0), 0.3), Primitive::sphere(Vec3(1, 0, 0), 0.3),
                                         Primitive::box(Vec3::Zero(), Vec3(1.0, 0.05, 0.05))});
  const auto c = sample(f, 0.08, 6, 4.0);
  KernelSet k;
  k.centers = {Vec3(-1, 0, 0)};
  k.support_radii = {3.0};
  std::size_t best = 0;
  for (std::size_t p = 0; p < c.size(); ++p)
    if ((c.positions[p] - k.centers[0]).norm() > (c.positions[best] - k.centers[0]).norm()) best = p;
  IntegratorParams ip;
  ip.lloyd_iterations = 0;
  const auto ips = place_integrator_points(c, k, 1, ip);
  EXPECT_EQ(ips.positions[1], c.positions[best]);
  EXPECT_GT(ips.positions[1].x(), 0.5);
}

TEST(Sampling, CuboidIsotropicCorners) {
  std::vector<Vec3> pos;
  std::vector<double> vol;
  for (int i = 0; i < 8; ++i) {
    pos.emplace_back((i & 1) ? 1.0 : -1.0, (i & 2) ? 1.0 : -1.0, (i & 4) ? 1.0 : -1.0);
    vol.push_back(0.125);
  }
  CuboidParams cp;
  cp.neighbors = 8;
  const auto c = fit_cuboid_from(pos, vol, Vec3::Zero(), cp);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(c.lengths[i], 1.0, 1e-12);
  EXPECT_NEAR(c.volume, 1.0, 1e-12);
}

TEST(Sampling, CuboidCoplanarNeighbours) {
  std::vector<Vec3> pos;
  std::vector<double> vol;
  for (int i = 0; i < 16; ++i) {
    pos.emplace_back(0.1 * (i % 4) - 0.15, 0.05 * (i / 4) - 0.075, 0.0);
    vol.push_back(0.01);
  }
  const auto c = fit_cuboid_from(pos, vol, Vec3::Zero());
  // Eigenvalue oracle: covariance of the planar lattice is diagonal.
  double lx = 0, ly = 0;
  for (const auto& p : pos) {
    lx += 0.01 * p.x() * p.x();
    ly += 0.01 * p.y() * p.y();
  }
  EXPECT_NEAR(c.lengths[0] / c.lengths[1], std::sqrt(lx / ly), 1e-12);
  EXPECT_NEAR(c.lengths[2], 1e-2 * c.lengths[0], 1e-15);
  EXPECT_NEAR(std::abs(c.axes.col(2).z()), 1.0, 1e-12);
  EXPECT_NEAR(c.volume, 0.16, 1e-12);
}

TEST(Sampling, CuboidSlabOrdering) {
  std::vector<Vec3> pos;
  std::vector<double> vol;
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int i = 0; i < 16; ++i) {
    pos.emplace_back(0.5 * u(rng), 0.2 * u(rng), i % 2 ? 0.02 : -0.02);
    vol.push_back(0.001 * (1 + i % 3));
  }
  const auto c = fit_cuboid_from(pos, vol, Vec3::Zero());
  Mat3 cov = Mat3::Zero();
  for (int i = 0; i < 16; ++i) cov += vol[i] * pos[i] * pos[i].transpose();
  Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);
  const Vec3 ev = eig.eigenvalues().reverse();
  EXPECT_GE(c.lengths[0], c.lengths[1]);
  EXPECT_GE(c.lengths[1], c.lengths[2]);
  EXPECT_NEAR(c.lengths[0] / c.lengths[2], std::sqrt(ev[0] / ev[2]), 1e-9);
  double total = 0;
  for (double v : vol) total += v;
  EXPECT_NEAR(c.volume, total, 1e-15);
}

TEST(Sampling, CuboidNeedsEnoughParticles) {
  EXPECT_THROW(fit_cuboid_from({Vec3::Zero()}, {1.0}, Vec3::Zero()), Error);
}

TEST(Sampling, ParticleVolumeApproximatesUnitSphere) {
  const auto f = DensityField::analytic({Primitive::sphere(Vec3::Zero(), 1.0)});
  const auto c = sample(f, 0.1, 1);
  const double body = 4.0 / 3.0 * std::numbers::pi;
  const double ratio = c.total_volume() / body;
  RecordProperty("volume_ratio", std::to_string(ratio));
  EXPECT_NEAR(ratio, 1.0, 0.35) << "sum of particle volumes / body volume";
}
