#pragma once

// A discretised body: particles, kernels, integrator points and the shape
// functions precomputed at every IP.

#include "pie/field.hpp"
#include "pie/qgmls.hpp"
#include "pie/sampling.hpp"

#include <string>
#include <vector>

namespace pie {

struct DiscretizationParams {
  PoissonParams poisson{};
  std::size_t kernels = 20;
  std::size_t extra_ips = 40;
  InterpolationOrder order = InterpolationOrder::quadratic;
  KernelParams kernel{};
  IntegratorParams integrator{};
};

struct Model {
  InterpolationOrder order = InterpolationOrder::quadratic;
  ParticleCloud cloud;
  KernelSet kernels;
  IntegratorPoints ips;
  std::vector<BasisEvaluation> ip_bases;
  std::vector<std::string> warnings;

  int slots() const { return slots_per_kernel(order); }
  std::size_t ndof() const { return dof_count(order, kernels.size()); }

  /// Recomputes IP shape functions. IPs outside every support get an empty
  /// basis and a warning.
  void refresh_bases() {
    ip_bases = evaluate_bases(kernels, ips.positions, order);
    for (std::size_t k = 0; k < ip_bases.size(); ++k)
      if (ip_bases[k].empty()) warnings.push_back("IP " + std::to_string(k) + " outside all kernel supports");
  }

  /// Rest-space centre of mass weights use IP volumes.
  double total_volume() const {
    double v = 0.0;
    for (std::size_t k = 0; k < ips.size(); ++k)
      if (!ip_bases[k].empty()) v += ips.cuboids[k].volume;
    return v;
  }

  /// Registers a cut, refits cuboids and recomputes bases. Reports kernels
  /// that no longer reach any particle.
  void add_cut(const Quad& quad, const CuboidParams& cp = {}) {
    if (!quad.valid()) throw Error("cut quad must be finite with orthogonal nonzero edges");
    kernels.cuts.push_back(quad);
    refit_cuboids(ips, cloud, kernels.cuts, cp);
    for (std::size_t i = 0; i < kernels.size(); ++i) {
      bool reaches = false;
      for (std::size_t p = 0; p < cloud.size() && !reaches; ++p) reaches = kernels.influences(i, cloud.positions[p]);
      if (!reaches) warnings.push_back("isolated kernel " + std::to_string(i));
    }
    refresh_bases();
  }
};

inline Model assemble_model(ParticleCloud cloud, KernelSet kernels, IntegratorPoints ips, InterpolationOrder order) {
  Model m;
  m.order = order;
  m.cloud = std::move(cloud);
  m.kernels = std::move(kernels);
  m.ips = std::move(ips);
  m.refresh_bases();
  return m;
}

/// Sampling, kernel selection and IP placement in one call.
inline Model discretize(const DensityField& field, const DiscretizationParams& dp, std::uint64_t seed) {
  PoissonParams pp = dp.poisson;
  pp.seed = seed;
  ParticleCloud cloud = poisson_disk_sample(field, pp);
  KernelSet kernels = select_kernels(cloud, dp.kernels, seed, dp.kernel);
  IntegratorPoints ips = place_integrator_points(cloud, kernels, dp.extra_ips, dp.integrator);
  return assemble_model(std::move(cloud), std::move(kernels), std::move(ips), dp.order);
}

}  // namespace pie
