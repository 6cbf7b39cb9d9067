#pragma once

// Meshless shape proxy: adaptive Poisson-disk particles, Q-GMLS kernel
// centres from volume-weighted Lloyd clustering, integrator points and their
// fitted cuboids.

#include "pie/common.hpp"
#include "pie/field.hpp"
#include "pie/geometry.hpp"
#include "pie/spatial.hpp"

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <vector>

namespace pie {

struct ParticleCloud {
  std::vector<Vec3> positions;
  std::vector<double> radii;
  std::vector<double> volumes;
  std::vector<double> densities;

  std::size_t size() const { return positions.size(); }

  void push_back(const Vec3& x, double r, double sigma) {
    positions.push_back(x);
    radii.push_back(r);
    volumes.push_back(4.0 / 3.0 * std::numbers::pi * r * r * r);
    densities.push_back(sigma);
  }

  double total_volume() const {
    double v = 0.0;
    for (double x : volumes) v += x;
    return v;
  }

  Box3 bounds() const {
    Box3 b;
    b.setEmpty();
    for (const auto& p : positions) b.extend(p);
    return b;
  }
};

struct PoissonParams {
  double r_bar = 0.1;
  double kappa = 1.0;
  std::uint64_t seed = 1;
  int candidates = 30;
  double min_density = 1e-2;     // epsilon: particles below this are discarded
  double alpha = 1e-3;           // keeps the radius finite where grad sigma = 0
  int max_seed_probes = 100000;
};

/// r = min{ r_bar, kappa * r_bar / sqrt(|grad sigma| + alpha) }
inline double adaptive_radius(double r_bar, double kappa, double grad_norm, double alpha = 1e-3) {
  return std::min(r_bar, kappa * r_bar / std::sqrt(grad_norm + alpha));
}

/// Bridson-style ring fill over the field bounds with a per-sample radius.
/// Samples in empty space keep the front moving and are dropped at the end.
inline ParticleCloud poisson_disk_sample(const DensityField& field, const PoissonParams& params) {
  if (!(params.r_bar > 0.0)) throw Error("r_bar must be positive");
  if (!(params.kappa > 0.0)) throw Error("kappa must be positive");
  const Box3 box = field.bounds();
  if (box.isEmpty()) throw Error("no seed particle found");

  std::mt19937_64 rng(params.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  auto random_in_box = [&] {
    Vec3 p;
    for (int a = 0; a < 3; ++a) p[a] = box.min()[a] + unit(rng) * (box.max()[a] - box.min()[a]);
    return p;
  };
  auto radius_at = [&](const Vec3& p) {
    return adaptive_radius(params.r_bar, params.kappa, field.gradient(p).norm(), params.alpha);
  };

  std::vector<Vec3> points;
  std::vector<double> radii;
  std::vector<double> sigmas;
  HashGrid grid(params.r_bar);

  auto conflicts = [&](const Vec3& p, double r) {
    bool hit = false;
    grid.for_each_near(p, params.r_bar, [&](int j) {
      if (!hit && (points[j] - p).norm() < std::min(r, radii[j])) hit = true;
    });
    return hit;
  };
  auto add = [&](const Vec3& p, double r, double sigma) {
    const int idx = static_cast<int>(points.size());
    points.push_back(p);
    radii.push_back(r);
    sigmas.push_back(sigma);
    grid.insert(p, idx);
    return idx;
  };

  bool seeded = false;
  for (int probe = 0; probe < params.max_seed_probes; ++probe) {
    const Vec3 p = random_in_box();
    const double sigma = field.density(p);
    if (sigma >= params.min_density) {
      add(p, radius_at(p), sigma);
      seeded = true;
      break;
    }
  }
  if (!seeded) throw Error("no seed particle found");

  std::vector<int> active{0};
  while (!active.empty()) {
    const std::size_t slot = std::min(active.size() - 1, static_cast<std::size_t>(unit(rng) * active.size()));
    const int src = active[slot];
    const double r = radii[src];
    bool placed = false;
    for (int c = 0; c < params.candidates; ++c) {
      Vec3 dir(normal(rng), normal(rng), normal(rng));
      const double len = dir.norm();
      if (len == 0.0) continue;
      const Vec3 cand = points[src] + dir / len * (r * (1.0 + unit(rng)));
      if (!box.contains(cand)) continue;
      const double rc = radius_at(cand);
      if (conflicts(cand, rc)) continue;
      active.push_back(add(cand, rc, field.density(cand)));
      placed = true;
      break;
    }
    if (!placed) {
      active[slot] = active.back();
      active.pop_back();
    }
  }

  ParticleCloud cloud;
  for (std::size_t i = 0; i < points.size(); ++i)
    if (sigmas[i] >= params.min_density) cloud.push_back(points[i], radii[i], sigmas[i]);
  return cloud;
}

// --- kernels ----------------------------------------------------------------

struct KernelSet {
  std::vector<Vec3> centers;
  std::vector<double> support_radii;
  std::vector<Quad> cuts;

  std::size_t size() const { return centers.size(); }

  bool cut_between(const Vec3& x, std::size_t i) const {
    for (const auto& q : cuts)
      if (q.intersects_segment(x, centers[i])) return true;
    return false;
  }

  /// Kernel i has positive (masked) weight at x.
  bool influences(std::size_t i, const Vec3& x) const {
    return (x - centers[i]).norm() < support_radii[i] && !cut_between(x, i);
  }

  int coverage(const Vec3& x) const {
    int count = 0;
    for (std::size_t i = 0; i < size(); ++i) count += influences(i, x) ? 1 : 0;
    return count;
  }
};

struct KernelParams {
  double support_scale = 1.5;  // gamma
  int min_coverage = 4;        // c_min
  int max_lloyd_iterations = 100;
};

/// Grows support radii until every point sees min(c_min, n) kernels.
inline void ensure_coverage(KernelSet& kernels, const std::vector<Vec3>& points, const KernelParams& kp = {}) {
  const std::size_t n = kernels.size();
  const int want = std::min<int>(kp.min_coverage, static_cast<int>(n));
  std::vector<std::pair<double, std::size_t>> order(n);
  for (const auto& p : points) {
    if (kernels.coverage(p) >= want) continue;
    for (std::size_t i = 0; i < n; ++i) order[i] = {(p - kernels.centers[i]).norm(), i};
    std::sort(order.begin(), order.end());
    int have = 0;
    for (std::size_t r = 0; r < n && have < want; ++r) {
      const auto [dist, i] = order[r];
      if (kernels.cut_between(p, i)) continue;
      if (!(dist < kernels.support_radii[i])) kernels.support_radii[i] = std::max(kp.support_scale * dist, 1e-12);
      ++have;
    }
  }
}

namespace detail {
inline std::vector<int> assign_nearest(const std::vector<Vec3>& points, const std::vector<Vec3>& sites) {
  KdTree tree(sites);
  std::vector<int> label(points.size());
  for (std::size_t p = 0; p < points.size(); ++p) label[p] = tree.knn(points[p], 1).front().index;
  return label;
}
}  // namespace detail

/// Volume-weighted k-means (k-means++ seeding, Lloyd iterations). The final
/// clusters are the Voronoi cells of the returned centres.
inline KernelSet select_kernels(const ParticleCloud& cloud, std::size_t n, std::uint64_t seed,
                                const KernelParams& kp = {}) {
  const std::size_t count = cloud.size();
  if (n < 1) throw Error("n_kernels must be at least 1");
  if (n > count)
    throw Error("n_kernels (" + std::to_string(n) + ") exceeds particle count (" + std::to_string(count) + ")");

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto draw = [&](const std::vector<double>& weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    double target = unit(rng) * total;
    std::size_t last_positive = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      if (weights[i] <= 0.0) continue;
      last_positive = i;
      if (target < weights[i]) return i;
      target -= weights[i];
    }
    return last_positive;
  };

  std::vector<Vec3> centers;
  centers.reserve(n);
  centers.push_back(cloud.positions[draw(cloud.volumes)]);
  std::vector<double> d2(count, std::numeric_limits<double>::infinity());
  std::vector<double> weights(count);
  while (centers.size() < n) {
    for (std::size_t p = 0; p < count; ++p) {
      d2[p] = std::min(d2[p], (cloud.positions[p] - centers.back()).squaredNorm());
      weights[p] = cloud.volumes[p] * d2[p];
    }
    centers.push_back(cloud.positions[draw(weights)]);
  }

  std::vector<int> label;
  for (int it = 0; it < kp.max_lloyd_iterations; ++it) {
    std::vector<int> next = detail::assign_nearest(cloud.positions, centers);
    if (next == label) break;
    label = std::move(next);
    // Offsets from the first member keep singleton cells exact.
    std::vector<Vec3> sum(n, Vec3::Zero());
    std::vector<Vec3> anchor(n, Vec3::Zero());
    std::vector<double> mass(n, 0.0);
    std::vector<char> seen(n, 0);
    for (std::size_t p = 0; p < count; ++p) {
      const int c = label[p];
      if (!seen[c]) {
        seen[c] = 1;
        anchor[c] = cloud.positions[p];
      }
      sum[c] += cloud.volumes[p] * (cloud.positions[p] - anchor[c]);
      mass[c] += cloud.volumes[p];
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (mass[i] > 0.0) {
        centers[i] = anchor[i] + sum[i] / mass[i];
        continue;
      }
      // Empty cell: move to the particle worst served by its current centre.
      std::size_t worst = 0;
      double worst_cost = -1.0;
      for (std::size_t p = 0; p < count; ++p) {
        const double cost = cloud.volumes[p] * (cloud.positions[p] - centers[label[p]]).squaredNorm();
        if (cost > worst_cost) {
          worst_cost = cost;
          worst = p;
        }
      }
      centers[i] = cloud.positions[worst];
      label[worst] = static_cast<int>(i);
    }
  }

  KernelSet kernels;
  kernels.centers = std::move(centers);
  kernels.support_radii.assign(n, 0.0);
  const std::size_t rank = static_cast<std::size_t>(kp.min_coverage);
  if (n > rank) {
    KdTree tree(kernels.centers);
    for (std::size_t i = 0; i < n; ++i) {
      const auto nb = tree.knn(kernels.centers[i], rank + 1);  // includes itself
      kernels.support_radii[i] = kp.support_scale * std::sqrt(nb.back().dist2);
    }
  }
  ensure_coverage(kernels, cloud.positions, kp);
  return kernels;
}

// --- integrator points --------------------------------------------------------

struct Cuboid {
  Mat3 axes = Mat3::Identity();     // columns c_1, c_2, c_3 (orthonormal, right handed)
  Vec3 lengths = Vec3::Ones();      // h_1, h_2, h_3
  double volume = 1.0;              // h_1 h_2 h_3

  double diagonal() const { return lengths.norm(); }

  /// Rest-space offset of local coordinates s in [-1/2, 1/2]^3.
  Vec3 offset(const Vec3& s) const { return axes * lengths.cwiseProduct(s); }

  /// Integral of h h^T over the cuboid: sum_i (h_i^2 / 12) V c_i c_i^T.
  Mat3 second_moment() const {
    Mat3 m = Mat3::Zero();
    for (int i = 0; i < 3; ++i) m += lengths[i] * lengths[i] / 12.0 * volume * axes.col(i) * axes.col(i).transpose();
    return m;
  }
};

struct CuboidParams {
  int neighbors = 16;                 // K
  double degenerate_ratio = 1e-12;    // lambda_i < ratio * lambda_max marks a collapsed axis
  double degenerate_scale = 1e-2;     // delta_h
};

/// Fits the IP cuboid from a pre-sorted neighbour list (nearest first).
inline Cuboid fit_cuboid_from(const std::vector<Vec3>& positions, const std::vector<double>& volumes,
                              const Vec3& center, const CuboidParams& cp = {}) {
  if (positions.size() < static_cast<std::size_t>(cp.neighbors))
    throw Error("cuboid fit needs " + std::to_string(cp.neighbors) + " particles, have " +
                std::to_string(positions.size()));
  Mat3 cov = Mat3::Zero();
  double total = 0.0;
  for (int j = 0; j < cp.neighbors; ++j) {
    const Vec3 d = positions[j] - center;
    cov += volumes[j] * d * d.transpose();
    total += volumes[j];
  }
  Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);
  // Descending eigenvalue order.
  Vec3 lambda(eig.eigenvalues()[2], eig.eigenvalues()[1], eig.eigenvalues()[0]);
  Mat3 axes;
  axes << eig.eigenvectors().col(2), eig.eigenvectors().col(1), eig.eigenvectors().col(0);
  if (axes.determinant() < 0.0) axes.col(2) = -axes.col(2);

  Cuboid c;
  c.axes = axes;
  const double lmax = lambda[0];
  if (!(lmax > 0.0)) {
    c.lengths = Vec3::Constant(std::cbrt(total));
    c.volume = total;
    return c;
  }
  Vec3 s = Vec3::Zero();
  std::array<bool, 3> degenerate{};
  int good = 0;
  double smax = 0.0;
  double prod = 1.0;
  for (int i = 0; i < 3; ++i) {
    degenerate[i] = lambda[i] < cp.degenerate_ratio * lmax;
    if (degenerate[i]) continue;
    s[i] = std::sqrt(lambda[i]);
    smax = std::max(smax, s[i]);
    prod *= s[i];
    ++good;
  }
  // h_i = a s_i on good axes, h = delta a s_max on collapsed axes, prod h = total.
  const double collapsed = std::pow(cp.degenerate_scale * smax, 3 - good);
  const double a = std::cbrt(total / (prod * collapsed));
  for (int i = 0; i < 3; ++i) c.lengths[i] = degenerate[i] ? cp.degenerate_scale * a * smax : a * s[i];
  c.volume = c.lengths.prod();
  return c;
}

inline Cuboid fit_cuboid(const ParticleCloud& cloud, const KdTree& tree, const Vec3& center,
                         const CuboidParams& cp = {}) {
  if (cloud.size() < static_cast<std::size_t>(cp.neighbors))
    throw Error("cuboid fit needs " + std::to_string(cp.neighbors) + " particles, have " +
                std::to_string(cloud.size()));
  const auto nb = tree.knn(center, static_cast<std::size_t>(cp.neighbors));
  std::vector<Vec3> pos;
  std::vector<double> vol;
  for (const auto& n : nb) {
    pos.push_back(cloud.positions[n.index]);
    vol.push_back(cloud.volumes[n.index]);
  }
  return fit_cuboid_from(pos, vol, center, cp);
}

inline Cuboid fit_cuboid(const ParticleCloud& cloud, const Vec3& center, const CuboidParams& cp = {}) {
  return fit_cuboid(cloud, KdTree(cloud.positions), center, cp);
}

struct IntegratorPoints {
  std::vector<Vec3> positions;
  std::vector<Cuboid> cuboids;
  std::vector<char> kernel_ip;

  std::size_t size() const { return positions.size(); }

  double total_volume() const {
    double v = 0.0;
    for (const auto& c : cuboids) v += c.volume;
    return v;
  }
  double max_diagonal() const {
    double d = 0.0;
    for (const auto& c : cuboids) d = std::max(d, c.diagonal());
    return d;
  }
};

/// Greedy farthest-point picks over particle positions (Euclidean). Returns
/// particle indices; ties resolve to the lowest index.
inline std::vector<std::size_t> farthest_point_picks(const ParticleCloud& cloud, const std::vector<Vec3>& existing,
                                                     std::size_t count) {
  std::vector<double> d2(cloud.size(), std::numeric_limits<double>::infinity());
  for (const auto& e : existing)
    for (std::size_t p = 0; p < cloud.size(); ++p) d2[p] = std::min(d2[p], (cloud.positions[p] - e).squaredNorm());
  std::vector<std::size_t> picks;
  for (std::size_t k = 0; k < count && !cloud.positions.empty(); ++k) {
    std::size_t best = 0;
    for (std::size_t p = 1; p < cloud.size(); ++p)
      if (d2[p] > d2[best]) best = p;
    picks.push_back(best);
    const Vec3 x = cloud.positions[best];
    for (std::size_t p = 0; p < cloud.size(); ++p) d2[p] = std::min(d2[p], (cloud.positions[p] - x).squaredNorm());
  }
  return picks;
}

struct IntegratorParams {
  int lloyd_iterations = 5;
  CuboidParams cuboid{};
};

/// Kernel IPs first (fixed), then farthest-point extra IPs relaxed by Lloyd
/// iterations, then one cuboid per IP.
inline IntegratorPoints place_integrator_points(const ParticleCloud& cloud, const KernelSet& kernels,
                                                std::size_t m_extra, const IntegratorParams& ip = {}) {
  IntegratorPoints ips;
  ips.positions = kernels.centers;
  ips.kernel_ip.assign(kernels.size(), 1);
  for (std::size_t p : farthest_point_picks(cloud, kernels.centers, m_extra)) {
    ips.positions.push_back(cloud.positions[p]);
    ips.kernel_ip.push_back(0);
  }
  if (m_extra > 0) {
    for (int it = 0; it < ip.lloyd_iterations; ++it) {
      const auto label = detail::assign_nearest(cloud.positions, ips.positions);
      std::vector<Vec3> sum(ips.size(), Vec3::Zero());
      std::vector<double> mass(ips.size(), 0.0);
      for (std::size_t p = 0; p < cloud.size(); ++p) {
        sum[label[p]] += cloud.volumes[p] * cloud.positions[p];
        mass[label[p]] += cloud.volumes[p];
      }
      for (std::size_t k = kernels.size(); k < ips.size(); ++k)
        if (mass[k] > 0.0) ips.positions[k] = sum[k] / mass[k];
    }
  }
  const KdTree tree(cloud.positions);
  ips.cuboids.reserve(ips.size());
  for (const auto& x : ips.positions) ips.cuboids.push_back(fit_cuboid(cloud, tree, x, ip.cuboid));
  return ips;
}

/// Refits cuboids using only particles not separated from the IP by a cut.
inline void refit_cuboids(IntegratorPoints& ips, const ParticleCloud& cloud, const std::vector<Quad>& cuts,
                          const CuboidParams& cp = {}) {
  for (std::size_t k = 0; k < ips.size(); ++k) {
    const Vec3& x = ips.positions[k];
    std::vector<std::pair<double, std::size_t>> order;
    for (std::size_t p = 0; p < cloud.size(); ++p) {
      bool blocked = false;
      for (const auto& q : cuts) blocked = blocked || q.intersects_segment(x, cloud.positions[p]);
      if (!blocked) order.emplace_back((cloud.positions[p] - x).squaredNorm(), p);
    }
    if (order.size() < static_cast<std::size_t>(cp.neighbors)) continue;  // keep the uncut fit
    std::partial_sort(order.begin(), order.begin() + cp.neighbors, order.end());
    std::vector<Vec3> pos;
    std::vector<double> vol;
    for (int j = 0; j < cp.neighbors; ++j) {
      pos.push_back(cloud.positions[order[j].second]);
      vol.push_back(cloud.volumes[order[j].second]);
    }
    ips.cuboids[k] = fit_cuboid_from(pos, vol, x, cp);
  }
}

}  // namespace pie
