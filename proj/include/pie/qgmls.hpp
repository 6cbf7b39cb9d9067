#pragma once

// Generalized moving least squares interpolation (affine and quadratic).
//
// Every kernel i carries the jet of the displacement at its centre: value,
// first derivatives and (quadratic order) the six distinct second
// derivatives. The jet is laid out in slots; slot s of kernel i occupies the
// three entries q[3 (S i + s) + c], c = x, y, z, where S is 4 (linear) or 10
// (quadratic). Quadratic slot order:
//   0: u   1: u_,1  2: u_,2  3: u_,3
//   4: u_,11  5: u_,22  6: u_,33  7: u_,12  8: u_,13  9: u_,23
// so J(x) = [N_0 I, N_1 I, ...] with one scalar shape function per slot.

#include "pie/common.hpp"
#include "pie/sampling.hpp"

#include <cmath>
#include <limits>
#include <optional>
#include <sstream>
#include <vector>

namespace pie {

enum class InterpolationOrder { linear, quadratic };

constexpr int slots_per_kernel(InterpolationOrder order) { return order == InterpolationOrder::linear ? 4 : 10; }
constexpr int dofs_per_kernel(InterpolationOrder order) { return 3 * slots_per_kernel(order); }

inline std::size_t dof_count(InterpolationOrder order, std::size_t kernels) {
  return static_cast<std::size_t>(dofs_per_kernel(order)) * kernels;
}

/// (j, k) index pairs of second-derivative slots 4..9.
inline constexpr std::array<std::array<int, 2>, 6> kSecondPairs{{{0, 0}, {1, 1}, {2, 2}, {0, 1}, {0, 2}, {1, 2}}};

using BasisVec = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, 10, 1>;
using BasisMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0, 10, 10>;

/// (1 - |d/R|^2)^3 inside the support, 0 outside.
inline double weight(const Vec3& x, const Vec3& xi, double radius) {
  const double r2 = (x - xi).squaredNorm() / (radius * radius);
  if (r2 >= 1.0) return 0.0;
  const double t = 1.0 - r2;
  return t * t * t;
}

struct WeightJet {
  double value = 0.0;
  Vec3 grad = Vec3::Zero();
  Mat3 hess = Mat3::Zero();
};

inline WeightJet weight_jet(const Vec3& x, const Vec3& xi, double radius) {
  WeightJet w;
  const Vec3 d = x - xi;
  const double inv_r2 = 1.0 / (radius * radius);
  const double r2 = d.squaredNorm() * inv_r2;
  if (r2 >= 1.0) return w;
  const double t = 1.0 - r2;
  w.value = t * t * t;
  w.grad = -6.0 * t * t * inv_r2 * d;
  w.hess = 24.0 * t * inv_r2 * inv_r2 * d * d.transpose() - 6.0 * t * t * inv_r2 * Mat3::Identity();
  return w;
}

/// Monomial vector p(d) = [1, x, y, z, x^2, y^2, z^2, xy, xz, yz] (first four
/// for linear order) and its derivative vectors, one per jet slot.
inline BasisVec basis_slot_vector(const Vec3& d, int slot, InterpolationOrder order) {
  const int size = slots_per_kernel(order);
  BasisVec v = BasisVec::Zero(size);
  const bool quad = order == InterpolationOrder::quadratic;
  if (slot == 0) {
    v[0] = 1.0;
    v.segment<3>(1) = d;
    if (quad) {
      v[4] = d.x() * d.x();
      v[5] = d.y() * d.y();
      v[6] = d.z() * d.z();
      v[7] = d.x() * d.y();
      v[8] = d.x() * d.z();
      v[9] = d.y() * d.z();
    }
    return v;
  }
  if (slot <= 3) {
    const int j = slot - 1;
    v[1 + j] = 1.0;
    if (quad) {
      v[4 + j] = 2.0 * d[j];
      if (j == 0) { v[7] = d.y(); v[8] = d.z(); }
      if (j == 1) { v[7] = d.x(); v[9] = d.z(); }
      if (j == 2) { v[8] = d.x(); v[9] = d.y(); }
    }
    return v;
  }
  if (slot < 4 || slot > 9 || !quad) throw Error("invalid basis slot " + std::to_string(slot));
  // Second-derivative slots share the ordering of the quadratic monomials.
  const auto [j, k] = kSecondPairs[slot - 4];
  v[slot] = j == k ? 2.0 : 1.0;
  return v;
}

/// Columns are the slot vectors of the jet basis at offset d.
inline BasisMat jet_matrix(const Vec3& d, InterpolationOrder order) {
  const int size = slots_per_kernel(order);
  BasisMat m(size, size);
  for (int s = 0; s < size; ++s) m.col(s) = basis_slot_vector(d, s, order);
  return m;
}

/// Moment matrix G(x) in coordinates centred at x, without regularisation.
inline BasisMat moment_matrix(const KernelSet& kernels, const Vec3& x, InterpolationOrder order,
                              double weight_scale = 1.0) {
  const int size = slots_per_kernel(order);
  BasisMat g = BasisMat::Zero(size, size);
  bool any = false;
  for (std::size_t i = 0; i < kernels.size(); ++i) {
    if (!kernels.influences(i, x)) continue;
    const double w = weight_scale * weight(x, kernels.centers[i], kernels.support_radii[i]);
    if (w <= 0.0) continue;
    const BasisMat v = jet_matrix(kernels.centers[i] - x, order);
    g.noalias() += w * v * v.transpose();
    any = true;
  }
  if (!any) throw Error("point outside all kernel supports");
  return g;
}

/// One scalar shape function N_a (a = S * kernel + slot) with its spatial
/// gradient and Hessian at the evaluation point.
struct ShapeEntry {
  int index = 0;
  double value = 0.0;
  Vec3 grad = Vec3::Zero();
  Mat3 hess = Mat3::Zero();
};

/// Shape functions at one rest-space point. Entries are sorted by index and
/// cover exactly the kernels with positive masked weight.
struct BasisEvaluation {
  Vec3 point = Vec3::Zero();
  InterpolationOrder order = InterpolationOrder::quadratic;
  std::vector<ShapeEntry> entries;
  double rcond = 1.0;
  bool regularized = false;

  bool empty() const { return entries.empty(); }

  Vec3 displacement(const VecX& q) const {
    Vec3 u = Vec3::Zero();
    for (const auto& e : entries) u += e.value * q.segment<3>(3 * e.index);
    return u;
  }

  Mat3 displacement_gradient(const VecX& q) const {
    Mat3 g = Mat3::Zero();
    for (const auto& e : entries) g.noalias() += q.segment<3>(3 * e.index) * e.grad.transpose();
    return g;
  }

  Mat3 deformation_gradient(const VecX& q) const { return Mat3::Identity() + displacement_gradient(q); }

  GradF grad_deformation(const VecX& q) const {
    GradF out = zero_grad_f();
    for (const auto& e : entries) {
      const Vec3 qa = q.segment<3>(3 * e.index);
      for (int l = 0; l < 3; ++l) out[l].noalias() += qa * e.hess.col(l).transpose();
    }
    return out;
  }

  /// J(x): u = J q.
  MatX jacobian(std::size_t ndof) const {
    MatX j = MatX::Zero(3, static_cast<Eigen::Index>(ndof));
    for (const auto& e : entries)
      for (int c = 0; c < 3; ++c) j(c, 3 * e.index + c) = e.value;
    return j;
  }

  /// dF_cj/dq in row 3c + j.
  MatX grad_jacobian(std::size_t ndof) const {
    MatX j = MatX::Zero(9, static_cast<Eigen::Index>(ndof));
    for (const auto& e : entries)
      for (int c = 0; c < 3; ++c)
        for (int k = 0; k < 3; ++k) j(3 * c + k, 3 * e.index + c) = e.grad[k];
    return j;
  }

  /// d(dF_cj/dx_l)/dq in row 9l + 3c + j.
  MatX hess_jacobian(std::size_t ndof) const {
    MatX j = MatX::Zero(27, static_cast<Eigen::Index>(ndof));
    for (const auto& e : entries)
      for (int l = 0; l < 3; ++l)
        for (int c = 0; c < 3; ++c)
          for (int k = 0; k < 3; ++k) j(9 * l + 3 * c + k, 3 * e.index + c) = e.hess(k, l);
    return j;
  }
};

struct BasisOptions {
  /// Relative Tikhonov floor mu = reg * trace(G) / S, applied only when the
  /// plain moment matrix fails to factor or its reciprocal condition number
  /// is below min_rcond.
  double regularization = 1e-8;
  double min_rcond = 1e-13;
  /// Global factor on every weight; shape functions do not depend on it.
  double weight_scale = 1.0;
};

namespace detail {

struct ActiveKernel {
  int kernel;
  WeightJet w;
  BasisMat jet;
};

inline std::vector<ActiveKernel> active_kernels(const KernelSet& kernels, const Vec3& x, InterpolationOrder order,
                                                double scale) {
  std::vector<ActiveKernel> out;
  for (std::size_t i = 0; i < kernels.size(); ++i) {
    if (!kernels.influences(i, x)) continue;
    WeightJet w = weight_jet(x, kernels.centers[i], kernels.support_radii[i]);
    if (w.value <= 0.0) continue;
    w.value *= scale;
    w.grad *= scale;
    w.hess *= scale;
    out.push_back({static_cast<int>(i), w, jet_matrix(kernels.centers[i] - x, order)});
  }
  return out;
}

}  // namespace detail

/// Shape functions N, grad N and Hessian N at x. Derivatives follow from
/// differentiating p^T G^{-1} v w by the product rule with the basis centre
/// held fixed at x: with G a = p, G a_j = p_j - G_j a and
/// G a_jk = p_jk - G_j a_k - G_k a_j - G_jk a.
inline std::optional<BasisEvaluation> try_evaluate_basis(const KernelSet& kernels, const Vec3& x,
                                                         InterpolationOrder order, const BasisOptions& opt = {}) {
  const int size = slots_per_kernel(order);
  const auto active = detail::active_kernels(kernels, x, order, opt.weight_scale);
  if (active.empty()) return std::nullopt;

  BasisMat g = BasisMat::Zero(size, size);
  std::array<BasisMat, 3> gj;
  std::array<BasisMat, 6> gjk;
  for (auto& m : gj) m = BasisMat::Zero(size, size);
  for (auto& m : gjk) m = BasisMat::Zero(size, size);
  for (const auto& ak : active) {
    const BasisMat b = ak.jet * ak.jet.transpose();
    g.noalias() += ak.w.value * b;
    for (int j = 0; j < 3; ++j) gj[j].noalias() += ak.w.grad[j] * b;
    for (int p = 0; p < 6; ++p) gjk[p].noalias() += ak.w.hess(kSecondPairs[p][0], kSecondPairs[p][1]) * b;
  }

  BasisEvaluation out;
  out.point = x;
  out.order = order;
  Eigen::LLT<BasisMat> llt(g);
  out.rcond = llt.info() == Eigen::Success ? llt.rcond() : 0.0;
  if (out.rcond < opt.min_rcond) {
    const double scale = opt.regularization / size;
    g.diagonal().array() += scale * g.trace();
    for (auto& m : gj) m.diagonal().array() += scale * m.trace();
    for (auto& m : gjk) m.diagonal().array() += scale * m.trace();
    llt.compute(g);
    out.regularized = true;
    out.rcond = llt.info() == Eigen::Success ? llt.rcond() : 0.0;
    if (out.rcond < std::numeric_limits<double>::epsilon()) {
      std::ostringstream os;
      os << "degenerate kernel configuration (rcond " << out.rcond << ")";
      throw Error(os.str());
    }
  }

  // p(x - x) and its derivatives at the centre.
  const BasisMat at_center = jet_matrix(Vec3::Zero(), order);
  const BasisVec a = llt.solve(BasisVec(at_center.col(0)));
  std::array<BasisVec, 3> aj;
  for (int j = 0; j < 3; ++j) aj[j] = llt.solve(BasisVec(at_center.col(1 + j) - gj[j] * a));
  auto pair_index = [](int j, int k) {
    if (j > k) std::swap(j, k);
    for (int p = 0; p < 6; ++p)
      if (kSecondPairs[p][0] == j && kSecondPairs[p][1] == k) return p;
    return -1;
  };
  std::array<BasisVec, 6> ajk;
  for (int p = 0; p < 6; ++p) {
    const int j = kSecondPairs[p][0], k = kSecondPairs[p][1];
    BasisVec rhs = -gj[j] * aj[k] - gj[k] * aj[j] - gjk[p] * a;
    if (order == InterpolationOrder::quadratic) rhs += at_center.col(4 + p);
    ajk[p] = llt.solve(rhs);
  }

  out.entries.reserve(active.size() * size);
  for (const auto& ak : active) {
    for (int s = 0; s < size; ++s) {
      const auto v = ak.jet.col(s);
      const double alpha = a.dot(v);
      Vec3 alpha_j;
      for (int j = 0; j < 3; ++j) alpha_j[j] = aj[j].dot(v);
      ShapeEntry e;
      e.index = ak.kernel * size + s;
      e.value = alpha * ak.w.value;
      e.grad = alpha_j * ak.w.value + alpha * ak.w.grad;
      for (int j = 0; j < 3; ++j)
        for (int k = j; k < 3; ++k) {
          const double h = ajk[pair_index(j, k)].dot(v) * ak.w.value + alpha_j[j] * ak.w.grad[k] +
                           alpha_j[k] * ak.w.grad[j] + alpha * ak.w.hess(j, k);
          e.hess(j, k) = h;
          e.hess(k, j) = h;
        }
      out.entries.push_back(e);
    }
  }
  return out;
}

inline BasisEvaluation evaluate_basis(const KernelSet& kernels, const Vec3& x, InterpolationOrder order,
                                      const BasisOptions& opt = {}) {
  auto b = try_evaluate_basis(kernels, x, order, opt);
  if (!b) throw Error("point outside all kernel supports");
  return std::move(*b);
}

/// Shape values only, as (index, N) pairs: N_i, N_i^j, N_i^jk.
inline std::vector<std::pair<int, double>> shape_functions(const KernelSet& kernels, const Vec3& x,
                                                           InterpolationOrder order) {
  std::vector<std::pair<int, double>> out;
  for (const auto& e : evaluate_basis(kernels, x, order).entries) out.emplace_back(e.index, e.value);
  return out;
}

inline Vec3 displacement(const KernelSet& kernels, InterpolationOrder order, const VecX& q, const Vec3& x) {
  return evaluate_basis(kernels, x, order).displacement(q);
}

/// Bases for every point, evaluated in parallel. Points outside all
/// supports get an empty evaluation.
inline std::vector<BasisEvaluation> evaluate_bases(const KernelSet& kernels, const std::vector<Vec3>& points,
                                                   InterpolationOrder order) {
  std::vector<BasisEvaluation> out(points.size());
  parallel_for(0, points.size(), [&](std::size_t k) {
    auto b = try_evaluate_basis(kernels, points[k], order);
    if (b) {
      out[k] = std::move(*b);
    } else {
      out[k].point = points[k];
      out[k].order = order;
    }
  });
  return out;
}

// --- generalized coordinates ----------------------------------------------------

/// Global displacement of total degree <= 2:
///   u_c(x) = b_c + A(c, :) x + x^T Q[c] x,  Q[c] symmetric.
struct PolynomialField {
  Vec3 b = Vec3::Zero();
  Mat3 A = Mat3::Zero();
  std::array<Mat3, 3> Q{Mat3::Zero(), Mat3::Zero(), Mat3::Zero()};

  Vec3 value(const Vec3& x) const {
    Vec3 u = b + A * x;
    for (int c = 0; c < 3; ++c) u[c] += x.dot(Q[c] * x);
    return u;
  }
  /// du_c/dx_j
  Mat3 gradient(const Vec3& x) const {
    Mat3 g = A;
    for (int c = 0; c < 3; ++c) g.row(c) += 2.0 * (Q[c] * x).transpose();
    return g;
  }
  /// d2u_c/dx_j dx_k
  Mat3 hessian(int c) const { return 2.0 * Q[c]; }
  GradF grad_deformation() const {
    GradF out = zero_grad_f();
    for (int l = 0; l < 3; ++l)
      for (int c = 0; c < 3; ++c) out[l].row(c) = hessian(c).col(l).transpose();
    return out;
  }
};

/// Writes the jet of `field` at every kernel centre into q. Linear order
/// keeps only value and first-derivative slots.
inline VecX encode_field(const KernelSet& kernels, InterpolationOrder order, const PolynomialField& field) {
  const int size = slots_per_kernel(order);
  VecX q = VecX::Zero(static_cast<Eigen::Index>(dof_count(order, kernels.size())));
  for (std::size_t i = 0; i < kernels.size(); ++i) {
    const Vec3& x = kernels.centers[i];
    const auto base = static_cast<Eigen::Index>(3 * size * i);
    q.segment<3>(base) = field.value(x);
    const Mat3 g = field.gradient(x);
    for (int j = 0; j < 3; ++j) q.segment<3>(base + 3 * (1 + j)) = g.col(j);
    if (order == InterpolationOrder::quadratic) {
      for (int p = 0; p < 6; ++p)
        for (int c = 0; c < 3; ++c) q[base + 3 * (4 + p) + c] = field.hessian(c)(kSecondPairs[p][0], kSecondPairs[p][1]);
    }
  }
  return q;
}

inline VecX translation_coordinate(const KernelSet& kernels, InterpolationOrder order, const Vec3& t) {
  PolynomialField f;
  f.b = t;
  return encode_field(kernels, order, f);
}

}  // namespace pie
