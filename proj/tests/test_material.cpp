#include "pie/material.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace pie;
using pie::test::rel_err;

namespace {

MaterialParams neo(double young = 10.0, double nu = 0.3) {
  MaterialParams p;
  p.model = MaterialModel::neo_hookean;
  p.young = young;
  p.poisson = nu;
  return p;
}

MaterialParams arap(double beta = 2.0) {
  MaterialParams p;
  p.model = MaterialModel::arap;
  p.beta = beta;
  return p;
}

Mat3 random_f(std::mt19937_64& rng, double spread = 0.3) {
  std::uniform_real_distribution<double> u(-spread, spread);
  for (;;) {
    Mat3 f = Mat3::Identity();
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) f(i, j) += u(rng);
    const Eigen::JacobiSVD<Mat3> svd(f);
    if (f.determinant() > 0.2 && svd.singularValues().minCoeff() > 0.3) return f;
  }
}

GradF random_grad_f(std::mt19937_64& rng, double scale) {
  std::uniform_real_distribution<double> u(-scale, scale);
  GradF g = zero_grad_f();
  for (auto& m : g)
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) m(i, j) = u(rng);
  return g;
}

Cuboid random_cuboid(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.05, 0.2);
  Cuboid c;
  c.axes = test::random_rotation(rng);
  c.lengths = Vec3(u(rng), u(rng), u(rng));
  c.volume = c.lengths.prod();
  return c;
}

std::pair<Mat3, GradF> unpack(const Vec36& z) {
  Mat3 f0;
  GradF g = zero_grad_f();
  for (int c = 0; c < 3; ++c) {
    for (int e = 0; e < 3; ++e) f0(c, e) = z[12 * c + e];
    for (int j = 0; j < 3; ++j)
      for (int l = 0; l < 3; ++l) g[l](c, j) = z[12 * c + 3 + 3 * j + l];
  }
  return {f0, g};
}

}  // namespace

TEST(Material, LameConversion) {
  auto a = lame_from_young_poisson(1.0, 0.0);
  EXPECT_DOUBLE_EQ(a.mu, 0.5);
  EXPECT_DOUBLE_EQ(a.lambda, 0.0);
  auto b = lame_from_young_poisson(1.0, 0.25);
  EXPECT_NEAR(b.mu, 0.4, 1e-15);
  EXPECT_NEAR(b.lambda, 0.4, 1e-15);
  try {
    lame_from_young_poisson(1.0, 0.5);
    FAIL();
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "incompressible limit unsupported");
  }
}

TEST(Material, NeoHookeanHandValue) {
  MaterialParams p = neo();
  // mu = lambda = 1: E = 2.5, nu = 0.25
  p.young = 2.5;
  p.poisson = 0.25;
  ASSERT_NEAR(p.lame().mu, 1.0, 1e-15);
  ASSERT_NEAR(p.lame().lambda, 1.0, 1e-15);
  const double l8 = std::log(8.0);
  EXPECT_NEAR(energy_density(p, 2.0 * Mat3::Identity()), 4.5 - l8 + 0.5 * l8 * l8, 1e-14);
  EXPECT_NEAR(energy_density(p, 2.0 * Mat3::Identity()), 4.58260, 1e-5);
}

TEST(Material, RestAndRotationStatesAreStressFree) {
  std::mt19937_64 rng(1);
  for (const auto& p : {neo(), arap()}) {
    EXPECT_NEAR(energy_density(p, Mat3::Identity()), 0.0, 1e-15);
    EXPECT_LE(pk1(p, Mat3::Identity()).norm(), 1e-14);
    const Mat3 r = test::random_rotation(rng);
    EXPECT_NEAR(energy_density(p, r), 0.0, 1e-12);
    EXPECT_LE(pk1(p, r).norm(), 1e-12);
  }
}

TEST(Material, ArapIsNonNegative) {
  std::mt19937_64 rng(2);
  for (int n = 0; n < 100; ++n) EXPECT_GE(energy_density(arap(), random_f(rng, 0.8)), 0.0);
}

TEST(Material, FrameInvariance) {
  std::mt19937_64 rng(3);
  for (const auto& p : {neo(), arap()})
    for (int n = 0; n < 50; ++n) {
      const Mat3 f = random_f(rng);
      const Mat3 r = test::random_rotation(rng);
      const double a = energy_density(p, f), b = energy_density(p, r * f);
      EXPECT_NEAR(a, b, 1e-10 * std::max(1.0, std::abs(a)));
    }
}

TEST(Material, StressMatchesFiniteDifferences) {
  std::mt19937_64 rng(4);
  const double h = 1e-6;
  for (const auto& p : {neo(), arap()})
    for (int n = 0; n < 100; ++n) {
      const Mat3 f = random_f(rng);
      Mat3 fd;
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
          Mat3 e = Mat3::Zero();
          e(i, j) = h;
          fd(i, j) = (energy_density(p, f + e) - energy_density(p, f - e)) / (2 * h);
        }
      EXPECT_LE(rel_err(pk1(p, f), fd), 1e-4);
    }
}

TEST(Material, StressHessianMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  const double h = 1e-6;
  for (const auto& p : {neo(), arap()})
    for (int n = 0; n < 100; ++n) {
      const Mat3 f = random_f(rng);
      const Mat9 hess = pk1_hessian(p, f);
      Mat9 fd;
      for (int k = 0; k < 3; ++k)
        for (int l = 0; l < 3; ++l) {
          Mat3 e = Mat3::Zero();
          e(k, l) = h;
          fd.col(3 * k + l) = flatten((pk1(p, f + e) - pk1(p, f - e)) / (2 * h));
        }
      EXPECT_LE(rel_err(hess, fd), 1e-4);
      EXPECT_LE((hess - hess.transpose()).norm(), 1e-10 * hess.norm());
    }
}

TEST(Material, InversionHandling) {
  const Mat3 f = Vec3(1.0, 1.0, -0.5).asDiagonal();
  EXPECT_TRUE(std::isinf(energy_density(neo(), f)));
  EXPECT_THROW(pk1(neo(), f), InversionError);
  EXPECT_THROW(pk1_hessian(neo(), f), InversionError);
  EXPECT_STREQ(InversionError(7).what(), "inverted element at IP 7");
  EXPECT_TRUE(std::isfinite(energy_density(arap(), f)));
}

TEST(Material, PolarRotationHandlesReflections) {
  std::mt19937_64 rng(6);
  for (int n = 0; n < 50; ++n) {
    Mat3 f = random_f(rng, 0.5);
    if (n % 2) f.col(0) *= -1.0;
    const Mat3 r = polar_rotation(f);
    EXPECT_NEAR(r.determinant(), 1.0, 1e-12);
    EXPECT_LE((r.transpose() * r - Mat3::Identity()).norm(), 1e-12);
    const Mat3 s = r.transpose() * f;
    EXPECT_LE((s - s.transpose()).norm(), 1e-12);
  }
}

TEST(Material, GaussRulesIntegratePolynomials) {
  for (int n = 1; n <= 8; ++n) {
    const auto& g = gauss_legendre(n);
    ASSERT_EQ(static_cast<int>(g.nodes.size()), n);
    for (int deg = 0; deg < 2 * n; ++deg) {
      double s = 0;
      for (int i = 0; i < n; ++i) s += g.weights[i] * std::pow(g.nodes[i], deg);
      const double exact = deg % 2 ? 0.0 : std::pow(0.5, deg) / (deg + 1);
      EXPECT_NEAR(s, exact, 1e-15) << n << " " << deg;
    }
  }
}

TEST(Material, ConstantDeformationIntegratesExactly) {
  std::mt19937_64 rng(7);
  for (const auto& p : {neo(), arap()})
    for (int n = 0; n < 20; ++n) {
      const Mat3 f = random_f(rng);
      const Cuboid c = random_cuboid(rng);
      const auto r = integrate_cuboid(p, f, zero_grad_f(), c, Derivatives::energy, CuboidMethod::quadrature);
      EXPECT_NEAR(r.energy, c.volume * energy_density(p, f), 1e-15 * std::max(1.0, r.energy) + 1e-18);
      const auto a = integrate_cuboid(p, f, zero_grad_f(), c);
      EXPECT_NEAR(a.energy, c.volume * energy_density(p, f), 1e-14 * std::max(1.0, a.energy));
    }
}

TEST(Material, ArapClosedFormMatchesQuadrature) {
  std::mt19937_64 rng(8);
  const MaterialParams p = arap(3.0);
  for (int n = 0; n < 50; ++n) {
    const Mat3 f = random_f(rng);
    const GradF g = random_grad_f(rng, 0.5);
    const Cuboid c = random_cuboid(rng);
    const auto a = integrate_cuboid(p, f, g, c, Derivatives::hessian, CuboidMethod::automatic);
    const auto b = integrate_cuboid(p, f, g, c, Derivatives::hessian, CuboidMethod::quadrature);
    EXPECT_LE(std::abs(a.energy - b.energy), 1e-12 * std::abs(b.energy));
    EXPECT_LE((a.gradient - b.gradient).norm(), 1e-12 * b.gradient.norm());
    EXPECT_LE((a.hessian - b.hessian).norm(), 1e-12 * b.hessian.norm());
  }
}

TEST(Material, NeoHookeanQuadratureConverges) {
  std::mt19937_64 rng(9);
  MaterialParams p3 = neo(), p5 = neo();
  p5.quadrature = 5;
  for (int n = 0; n < 50; ++n) {
    const Mat3 f = random_f(rng, 0.2);
    const GradF g = random_grad_f(rng, 0.05);
    const Cuboid c = random_cuboid(rng);
    const double a = integrate_cuboid(p3, f, g, c, Derivatives::energy).energy;
    const double b = integrate_cuboid(p5, f, g, c, Derivatives::energy).energy;
    EXPECT_LE(std::abs(a - b), 1e-8 * std::abs(b));
  }
}

TEST(Material, CuboidDerivativesMatchFiniteDifferences) {
  std::mt19937_64 rng(10);
  const double h = 1e-6;
  for (const auto& p : {neo(), arap()})
    for (int n = 0; n < 10; ++n) {
      const Mat3 f = random_f(rng, 0.2);
      const GradF g = random_grad_f(rng, 0.5);
      const Cuboid c = random_cuboid(rng);
      const Vec36 z = pack_deformation(f, g);
      const auto r = integrate_cuboid(p, f, g, c);
      Vec36 fd_g;
      Mat36 fd_h;
      for (int i = 0; i < 36; ++i) {
        Vec36 e = Vec36::Zero();
        e[i] = h;
        const auto [fp, gp] = unpack(z + e);
        const auto [fm, gm] = unpack(z - e);
        const auto rp = integrate_cuboid(p, fp, gp, c, Derivatives::gradient);
        const auto rm = integrate_cuboid(p, fm, gm, c, Derivatives::gradient);
        fd_g[i] = (rp.energy - rm.energy) / (2 * h);
        fd_h.col(i) = (rp.gradient - rm.gradient) / (2 * h);
      }
      EXPECT_LE(rel_err(r.gradient, fd_g), 1e-4);
      EXPECT_LE(rel_err(r.hessian, fd_h), 1e-4);
      EXPECT_LE((r.d_f0() - unpack(r.gradient).first).norm(), 0.0);
    }
}

TEST(Material, PsdProjectionBoundsSpectrum) {
  std::mt19937_64 rng(11);
  for (int n = 0; n < 20; ++n) {
    const Mat3 f = random_f(rng, 0.6);
    const Cuboid c = random_cuboid(rng);
    const Mat36 h = integrate_cuboid(arap(), f, random_grad_f(rng, 0.5), c).hessian;
    const Mat36 p = project_psd(h);
    Eigen::SelfAdjointEigenSolver<Mat36> a(h), b(p);
    EXPECT_GE(b.eigenvalues().minCoeff(), -1e-12 * a.eigenvalues().cwiseAbs().maxCoeff());
    EXPECT_LE(b.eigenvalues().cwiseAbs().maxCoeff(), a.eigenvalues().cwiseAbs().maxCoeff() * (1 + 1e-12));
  }
}
