#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace pie {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;
using Box3 = Eigen::AlignedBox3d;

/// Spatial gradient of the deformation gradient: grad_f[l](c, j) = dF_cj / dx_l.
using GradF = std::array<Mat3, 3>;

inline GradF zero_grad_f() { return {Mat3::Zero(), Mat3::Zero(), Mat3::Zero()}; }

/// F(h) = F0 + sum_l grad_f[l] * h_l
inline Mat3 contract(const GradF& grad_f, const Vec3& h) {
  return grad_f[0] * h.x() + grad_f[1] * h.y() + grad_f[2] * h.z();
}

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Neo-Hookean energy evaluated at det F <= 0.
class InversionError : public Error {
 public:
  explicit InversionError(int ip = -1)
      : Error(ip < 0 ? std::string("inverted element")
                     : "inverted element at IP " + std::to_string(ip)),
        ip_(ip) {}
  int ip() const { return ip_; }

 private:
  int ip_;
};

namespace detail {
inline int& worker_setting() {
  static int workers = 0;
  return workers;
}
}  // namespace detail

/// 0 selects std::thread::hardware_concurrency().
inline void set_worker_count(int workers) { detail::worker_setting() = std::max(0, workers); }

inline int worker_count() {
  int w = detail::worker_setting();
  if (w == 0) w = static_cast<int>(std::thread::hardware_concurrency());
  return std::max(1, w);
}

/// Runs fn(i) for i in [begin, end) over contiguous chunks. fn must only write
/// to slots owned by i; callers merge results in index order.
template <class Fn>
void parallel_for(std::size_t begin, std::size_t end, Fn&& fn, int workers = 0) {
  if (end <= begin) return;
  const std::size_t count = end - begin;
  std::size_t w = static_cast<std::size_t>(workers > 0 ? workers : worker_count());
  w = std::min(w, count);
  if (w <= 1) {
    for (std::size_t i = begin; i < end; ++i) fn(i);
    return;
  }
  std::vector<std::jthread> threads;
  threads.reserve(w);
  const std::size_t chunk = (count + w - 1) / w;
  for (std::size_t t = 0; t < w; ++t) {
    const std::size_t lo = begin + t * chunk;
    const std::size_t hi = std::min(end, lo + chunk);
    if (lo >= hi) break;
    threads.emplace_back([lo, hi, &fn] {
      for (std::size_t i = lo; i < hi; ++i) fn(i);
    });
  }
}

/// Eigenvalue clamp to >= 0. Returns the projected matrix.
template <class Derived>
typename Derived::PlainObject project_psd(const Eigen::MatrixBase<Derived>& m) {
  using Plain = typename Derived::PlainObject;
  const Plain sym = 0.5 * (m + m.transpose());
  if (Eigen::LLT<Plain>(sym).info() == Eigen::Success) return sym;  // already definite
  Eigen::SelfAdjointEigenSolver<Plain> eig(sym);
  auto values = eig.eigenvalues();
  if (values.minCoeff() >= 0.0) return sym;
  values = values.cwiseMax(0.0);
  return eig.eigenvectors() * values.asDiagonal() * eig.eigenvectors().transpose();
}

}  // namespace pie
