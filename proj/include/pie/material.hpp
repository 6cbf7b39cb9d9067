#pragma once

// Hyperelastic energy densities and their integration over IP cuboids.

#include "pie/common.hpp"
#include "pie/sampling.hpp"

#include <boost/math/quadrature/gauss.hpp>

#include <cmath>
#include <limits>
#include <string>

namespace pie {

enum class MaterialModel { neo_hookean, arap };

inline std::string to_string(MaterialModel m) { return m == MaterialModel::neo_hookean ? "neo_hookean" : "arap"; }

struct Lame {
  double mu = 0.0;
  double lambda = 0.0;
};

inline Lame lame_from_young_poisson(double young, double poisson) {
  if (!(young > 0.0)) throw Error("Young's modulus must be positive");
  if (poisson >= 0.5) throw Error("incompressible limit unsupported");
  if (!(poisson >= 0.0)) throw Error("Poisson ratio must lie in [0, 0.5)");
  return {young / (2.0 * (1.0 + poisson)), young * poisson / ((1.0 + poisson) * (1.0 - 2.0 * poisson))};
}

struct MaterialParams {
  MaterialModel model = MaterialModel::neo_hookean;
  double young = 1e4;
  double poisson = 0.3;
  double beta = 1e3;      // ARAP stiffness
  double density = 1e3;   // rho
  int quadrature = 3;     // Gauss nodes per cuboid axis

  Lame lame() const { return lame_from_young_poisson(young, poisson); }

  void validate() const {
    if (model == MaterialModel::neo_hookean) (void)lame();
    if (model == MaterialModel::arap && !(beta > 0.0)) throw Error("ARAP stiffness must be positive");
    if (!(density > 0.0)) throw Error("mass density must be positive");
    if (quadrature < 1 || quadrature > 8) throw Error("quadrature order must lie in [1, 8]");
  }
};

using Mat9 = Eigen::Matrix<double, 9, 9>;
using Vec9 = Eigen::Matrix<double, 9, 1>;

/// Row-major flattening: (i, J) -> 3 i + J.
inline Vec9 flatten(const Mat3& m) {
  Vec9 v;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) v[3 * i + j] = m(i, j);
  return v;
}

inline Mat3 unflatten(const Vec9& v) {
  Mat3 m;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) m(i, j) = v[3 * i + j];
  return m;
}

// --- polar decomposition --------------------------------------------------------

/// F = U diag(sigma) V^T with U, V proper rotations; the smallest singular
/// value carries the sign of det F.
struct SignedSvd {
  Mat3 u;
  Vec3 sigma;
  Mat3 v;
};

inline SignedSvd signed_svd(const Mat3& f) {
  Eigen::JacobiSVD<Mat3> svd(f, Eigen::ComputeFullU | Eigen::ComputeFullV);
  SignedSvd out{svd.matrixU(), svd.singularValues(), svd.matrixV()};
  if (out.u.determinant() < 0.0) {
    out.u.col(2) *= -1.0;
    out.sigma[2] *= -1.0;
  }
  if (out.v.determinant() < 0.0) {
    out.v.col(2) *= -1.0;
    out.sigma[2] *= -1.0;
  }
  return out;
}

inline Mat3 polar_rotation(const Mat3& f) {
  const auto s = signed_svd(f);
  return s.u * s.v.transpose();
}

/// dvec(R)/dvec(F) for R the rotation factor of F.
inline Mat9 rotation_derivative(const SignedSvd& s) {
  Mat9 d = Mat9::Zero();
  const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  struct Twist {
    int a, b;
  };
  for (const Twist t : {Twist{0, 1}, Twist{1, 2}, Twist{0, 2}}) {
    const double denom = s.sigma[t.a] + s.sigma[t.b];
    if (std::abs(denom) < 1e-12) continue;
    Mat3 k = Mat3::Zero();
    k(t.a, t.b) = -inv_sqrt2;
    k(t.b, t.a) = inv_sqrt2;
    const Vec9 m = flatten(s.u * k * s.v.transpose());
    d.noalias() += (2.0 / denom) * m * m.transpose();
  }
  return d;
}

// --- energy densities ---------------------------------------------------------------

/// Psi(F). Neo-Hookean returns +inf when det F <= 0.
inline double energy_density(const MaterialParams& p, const Mat3& f) {
  if (p.model == MaterialModel::neo_hookean) {
    const double j = f.determinant();
    if (!(j > 0.0)) return std::numeric_limits<double>::infinity();
    const Lame l = p.lame();
    const double lj = std::log(j);
    return 0.5 * l.mu * (f.squaredNorm() - 3.0) - l.mu * lj + 0.5 * l.lambda * lj * lj;
  }
  const auto s = signed_svd(f);
  return p.beta * (s.sigma - Vec3::Ones()).squaredNorm();
}

inline Mat3 pk1(const MaterialParams& p, const Mat3& f) {
  if (p.model == MaterialModel::neo_hookean) {
    const double j = f.determinant();
    if (!(j > 0.0)) throw InversionError();
    const Lame l = p.lame();
    const Mat3 fit = f.inverse().transpose();
    return l.mu * (f - fit) + l.lambda * std::log(j) * fit;
  }
  return 2.0 * p.beta * (f - polar_rotation(f));
}

/// d^2 Psi / dF_iJ dF_kL at (3i + J, 3k + L).
inline Mat9 pk1_hessian(const MaterialParams& p, const Mat3& f) {
  Mat9 h;
  if (p.model == MaterialModel::neo_hookean) {
    const double j = f.determinant();
    if (!(j > 0.0)) throw InversionError();
    const Lame l = p.lame();
    const Mat3 fi = f.inverse();
    const double a = l.mu - l.lambda * std::log(j);
    for (int i = 0; i < 3; ++i)
      for (int J = 0; J < 3; ++J)
        for (int k = 0; k < 3; ++k)
          for (int L = 0; L < 3; ++L)
            h(3 * i + J, 3 * k + L) = (i == k && J == L ? l.mu : 0.0) + a * fi(J, k) * fi(L, i) +
                                      l.lambda * fi(J, i) * fi(L, k);
    return h;
  }
  h = 2.0 * p.beta * (Mat9::Identity() - rotation_derivative(signed_svd(f)));
  return h;
}

// --- cuboid integration -------------------------------------------------------------

struct GaussRule {
  std::vector<double> nodes;    // on [-1/2, 1/2]
  std::vector<double> weights;  // sum to 1
};

namespace detail {
template <int N>
GaussRule gauss_rule() {
  using G = boost::math::quadrature::gauss<double, N>;
  const auto& x = G::abscissa();
  const auto& w = G::weights();
  GaussRule r;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] == 0.0) {
      r.nodes.push_back(0.0);
      r.weights.push_back(0.5 * w[i]);
    } else {
      r.nodes.push_back(0.5 * x[i]);
      r.weights.push_back(0.5 * w[i]);
      r.nodes.push_back(-0.5 * x[i]);
      r.weights.push_back(0.5 * w[i]);
    }
  }
  return r;
}
}  // namespace detail

/// Gauss-Legendre rule with n nodes mapped to [-1/2, 1/2].
inline const GaussRule& gauss_legendre(int n) {
  static const std::array<GaussRule, 8> rules = [] {
    std::array<GaussRule, 8> r;
    r[0] = GaussRule{{0.0}, {1.0}};
    r[1] = detail::gauss_rule<2>();
    r[2] = detail::gauss_rule<3>();
    r[3] = detail::gauss_rule<4>();
    r[4] = detail::gauss_rule<5>();
    r[5] = detail::gauss_rule<6>();
    r[6] = detail::gauss_rule<7>();
    r[7] = detail::gauss_rule<8>();
    return r;
  }();
  if (n < 1 || n > 8) throw Error("quadrature order must lie in [1, 8]");
  return rules[n - 1];
}

/// Local deformation variables of one IP, z[12 c + e]:
///   e < 3:           F0(c, e)
///   e = 3 + 3 j + l: gradF[l](c, j)
using Vec36 = Eigen::Matrix<double, 36, 1>;
using Mat36 = Eigen::Matrix<double, 36, 36>;

inline Vec36 pack_deformation(const Mat3& f0, const GradF& grad_f) {
  Vec36 z;
  for (int c = 0; c < 3; ++c) {
    for (int e = 0; e < 3; ++e) z[12 * c + e] = f0(c, e);
    for (int j = 0; j < 3; ++j)
      for (int l = 0; l < 3; ++l) z[12 * c + 3 + 3 * j + l] = grad_f[l](c, j);
  }
  return z;
}

enum class Derivatives { energy, gradient, hessian };
enum class CuboidMethod { automatic, quadrature };

struct CuboidIntegral {
  double energy = 0.0;
  Vec36 gradient = Vec36::Zero();  // dU/dz
  Mat36 hessian = Mat36::Zero();   // d2U/dz2

  Mat3 d_f0() const {
    Mat3 m;
    for (int c = 0; c < 3; ++c)
      for (int e = 0; e < 3; ++e) m(c, e) = gradient[12 * c + e];
    return m;
  }
  GradF d_grad_f() const {
    GradF g = zero_grad_f();
    for (int c = 0; c < 3; ++c)
      for (int j = 0; j < 3; ++j)
        for (int l = 0; l < 3; ++l) g[l](c, j) = gradient[12 * c + 3 + 3 * j + l];
    return g;
  }
};

/// U = integral of Psi(F0 + gradF . h) over the cuboid, h = offset(s),
/// s in [-1/2, 1/2]^3. Neo-Hookean energy is +inf if any node inverts;
/// derivatives then throw InversionError.
///
/// ARAP uses R = R(F0) for the whole cuboid, which makes the integrand
/// quadratic in h:
///   U = V beta |F0 - R|^2 + beta sum_{c,j} t_cj^T C t_cj,  t_cj[l] = gradF[l](c, j)
/// with C the cuboid second moment. The automatic method uses this closed
/// form; the quadrature method evaluates the same integrand node by node.
/// Both return the exact Hessian of U, including the rotation derivative.
inline CuboidIntegral integrate_cuboid(const MaterialParams& p, const Mat3& f0, const GradF& grad_f,
                                       const Cuboid& cuboid, Derivatives want = Derivatives::hessian,
                                       CuboidMethod method = CuboidMethod::automatic) {
  CuboidIntegral out;
  if (p.model == MaterialModel::arap) {
    const auto svd = signed_svd(f0);
    const Mat3 r = svd.u * svd.v.transpose();
    if (method == CuboidMethod::automatic) {
      const Mat3 c = cuboid.second_moment();
      const Mat3 d = f0 - r;
      out.energy = cuboid.volume * p.beta * d.squaredNorm();
      for (int a = 0; a < 3; ++a)
        for (int j = 0; j < 3; ++j) {
          const Vec3 t(grad_f[0](a, j), grad_f[1](a, j), grad_f[2](a, j));
          out.energy += p.beta * t.dot(c * t);
          if (want != Derivatives::energy) out.gradient.segment<3>(12 * a + 3 + 3 * j) = 2.0 * p.beta * c * t;
          if (want == Derivatives::hessian) out.hessian.block<3, 3>(12 * a + 3 + 3 * j, 12 * a + 3 + 3 * j) = 2.0 * p.beta * c;
        }
      if (want != Derivatives::energy)
        for (int a = 0; a < 3; ++a) out.gradient.segment<3>(12 * a) = 2.0 * p.beta * cuboid.volume * d.row(a).transpose();
    } else {
      const GaussRule& g = gauss_legendre(p.quadrature);
      const int n = static_cast<int>(g.nodes.size());
      for (int i0 = 0; i0 < n; ++i0)
        for (int i1 = 0; i1 < n; ++i1)
          for (int i2 = 0; i2 < n; ++i2) {
            const Vec3 h = cuboid.offset(Vec3(g.nodes[i0], g.nodes[i1], g.nodes[i2]));
            const double w = cuboid.volume * g.weights[i0] * g.weights[i1] * g.weights[i2];
            const Mat3 d = f0 + contract(grad_f, h) - r;
            out.energy += w * p.beta * d.squaredNorm();
            if (want == Derivatives::energy) continue;
            Eigen::Matrix<double, 9, 36> phi = Eigen::Matrix<double, 9, 36>::Zero();
            for (int c = 0; c < 3; ++c)
              for (int j = 0; j < 3; ++j) {
                phi(3 * c + j, 12 * c + j) = 1.0;
                for (int l = 0; l < 3; ++l) phi(3 * c + j, 12 * c + 3 + 3 * j + l) = h[l];
              }
            out.gradient.noalias() += w * 2.0 * p.beta * phi.transpose() * flatten(d);
            if (want == Derivatives::hessian) out.hessian.noalias() += w * 2.0 * p.beta * phi.transpose() * phi;
          }
      if (want == Derivatives::hessian) {
        // Drop the frozen-rotation F0 block and use the exact one.
        for (int c = 0; c < 3; ++c)
          for (int d = 0; d < 3; ++d) out.hessian.block<3, 3>(12 * c, 12 * d).setZero();
      }
    }
    if (want == Derivatives::hessian) {
      const Mat9 hf = cuboid.volume * 2.0 * p.beta * (Mat9::Identity() - rotation_derivative(svd));
      for (int c = 0; c < 3; ++c)
        for (int d = 0; d < 3; ++d) out.hessian.block<3, 3>(12 * c, 12 * d) = hf.block<3, 3>(3 * c, 3 * d);
    }
    return out;
  }

  const GaussRule& g = gauss_legendre(p.quadrature);
  const int n = static_cast<int>(g.nodes.size());
  for (int i0 = 0; i0 < n; ++i0)
    for (int i1 = 0; i1 < n; ++i1)
      for (int i2 = 0; i2 < n; ++i2) {
        const Vec3 h = cuboid.offset(Vec3(g.nodes[i0], g.nodes[i1], g.nodes[i2]));
        const double w = cuboid.volume * g.weights[i0] * g.weights[i1] * g.weights[i2];
        const Mat3 f = f0 + contract(grad_f, h);
        const double psi = energy_density(p, f);
        if (!std::isfinite(psi)) {
          if (want != Derivatives::energy) throw InversionError();
          out.energy = std::numeric_limits<double>::infinity();
          return out;
        }
        out.energy += w * psi;
        if (want == Derivatives::energy) continue;
        // Local basis of z: phi(3c + j, 12c + e) with e = j or e = 3 + 3j + l.
        const Mat3 pf = pk1(p, f);
        Eigen::Matrix<double, 4, 1> ext(1.0, h[0], h[1], h[2]);
        for (int c = 0; c < 3; ++c)
          for (int j = 0; j < 3; ++j) {
            out.gradient[12 * c + j] += w * pf(c, j);
            for (int l = 0; l < 3; ++l) out.gradient[12 * c + 3 + 3 * j + l] += w * pf(c, j) * h[l];
          }
        if (want != Derivatives::hessian) continue;
        const Mat9 hp = pk1_hessian(p, f);
        for (int c = 0; c < 3; ++c)
          for (int j = 0; j < 3; ++j)
            for (int d = 0; d < 3; ++d)
              for (int k = 0; k < 3; ++k) {
                const double v = w * hp(3 * c + j, 3 * d + k);
                if (v == 0.0) continue;
                // rows: z(c, j) weighted by ext[0], z(c, 3+3j+l) by ext[1+l]
                for (int a = 0; a < 4; ++a) {
                  const int row = 12 * c + (a == 0 ? j : 3 + 3 * j + (a - 1));
                  for (int b = 0; b < 4; ++b) {
                    const int col = 12 * d + (b == 0 ? k : 3 + 3 * k + (b - 1));
                    out.hessian(row, col) += v * ext[a] * ext[b];
                  }
                }
              }
      }
  return out;
}

}  // namespace pie
