#pragma once

// Reduced implicit-Euler dynamics on the kernel jets.

#include "pie/material.hpp"
#include "pie/model.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

namespace pie {

struct GroundPlane {
  bool enabled = false;
  Vec3 normal = Vec3::UnitY();
  double offset = 0.0;       // plane: normal . x = offset
  double stiffness = 1e5;    // penalty per unit volume
};

struct DynamicsParams {
  double dt = 1.0 / 60.0;
  Vec3 gravity = Vec3::Zero();
  double damping = 0.0;      // mass-proportional coefficient
  int max_newton = 10;
  double tolerance = 1e-6;
  double armijo = 1e-4;
  int max_backtracks = 20;
  bool project_hessian = true;
  GroundPlane ground{};

  void validate() const {
    if (!(dt > 0.0)) throw Error("dt must be positive");
    if (!(damping >= 0.0)) throw Error("damping must be non-negative");
    if (max_newton < 1) throw Error("max_newton must be at least 1");
  }
};

struct PointForce {
  int id = 0;
  Vec3 rest_point = Vec3::Zero();
  Vec3 force = Vec3::Zero();
  BasisEvaluation basis;
};

struct SimState {
  VecX q;
  VecX qdot;
  double t = 0.0;
  long step = 0;
  std::map<int, VecX> pins;  // kernel -> target block (3 S entries)
  std::vector<PointForce> forces;
};

struct StepReport {
  int newton_iterations = 0;
  double energy = 0.0;
  double gradient_norm = 0.0;
  bool converged = false;
  bool line_search_failed = false;
  double assembly_ms = 0.0;
  double solve_ms = 0.0;
  std::vector<std::string> warnings;
};

/// Per-IP derivative operator: rows are the IP's shape entries, columns the
/// 12 local deformation variables of one displacement component
/// (dN, then d2N/dx_j dx_l at 3 + 3 j + l).
struct IpOperator {
  std::vector<int> index;  // shape index a; q block at 3 a
  Eigen::Matrix<double, Eigen::Dynamic, 12> g;
  VecX values;
  std::vector<std::pair<int, int>> kernel_rows;  // (kernel, first row); S rows each, kernels ascending
};

inline IpOperator make_ip_operator(const BasisEvaluation& b, int slots) {
  IpOperator op;
  std::vector<std::size_t> order(b.entries.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return b.entries[x].index < b.entries[y].index; });
  const auto m = static_cast<Eigen::Index>(order.size());
  op.g.resize(m, 12);
  op.values.resize(m);
  for (Eigen::Index r = 0; r < m; ++r) {
    const auto& e = b.entries[order[static_cast<std::size_t>(r)]];
    op.index.push_back(e.index);
    op.values[r] = e.value;
    for (int j = 0; j < 3; ++j) op.g(r, j) = e.grad[j];
    for (int j = 0; j < 3; ++j)
      for (int l = 0; l < 3; ++l) op.g(r, 3 + 3 * j + l) = e.hess(j, l);
    if (e.index % slots == 0) op.kernel_rows.emplace_back(e.index / slots, static_cast<int>(r));
  }
  return op;
}

class Simulator {
 public:
  Simulator(Model model, MaterialParams material, DynamicsParams dynamics = {})
      : model_(std::move(model)), material_(material), dynamics_(dynamics) {
    material_.validate();
    dynamics_.validate();
    rebuild();
  }

  const Model& model() const { return model_; }
  const MaterialParams& material() const { return material_; }
  const DynamicsParams& dynamics() const { return dynamics_; }
  std::size_t ndof() const { return model_.ndof(); }
  int slots() const { return model_.slots(); }
  /// Full mass matrix M = M_s (x) I_3 in q ordering.
  MatX mass_matrix() const {
    const auto n = static_cast<Eigen::Index>(ndof());
    MatX m = MatX::Zero(n, n);
    for (Eigen::Index j = 0; j < scalar_mass_.cols(); ++j)
      for (Eigen::Index i = 0; i < scalar_mass_.rows(); ++i)
        for (int c = 0; c < 3; ++c) m(3 * i + c, 3 * j + c) = scalar_mass_(i, j);
    return m;
  }
  /// Scalar mass M_s = sum rho V_k N_k N_k^T over the shape slots.
  const MatX& scalar_mass() const { return scalar_mass_; }

  VecX mass_times(const VecX& v) const {
    const auto n = scalar_mass_.rows();
    VecX out(v.size());
    Eigen::Map<Eigen::Matrix<double, 3, Eigen::Dynamic>>(out.data(), 3, n).noalias() =
        Eigen::Map<const Eigen::Matrix<double, 3, Eigen::Dynamic>>(v.data(), 3, n) * scalar_mass_;
    return out;
  }

  void set_material(const MaterialParams& m) {
    m.validate();
    const bool density_changed = m.density != material_.density;
    material_ = m;
    if (density_changed) assemble_mass();
  }
  void set_dynamics(const DynamicsParams& d) {
    d.validate();
    dynamics_ = d;
  }

  SimState rest_state() const {
    SimState s;
    s.q = VecX::Zero(static_cast<Eigen::Index>(ndof()));
    s.qdot = VecX::Zero(static_cast<Eigen::Index>(ndof()));
    return s;
  }

  // --- energies and forces ------------------------------------------------------

  /// Elastic potential U(q); +inf if a Neo-Hookean node inverts.
  double potential(const VecX& q) const {
    std::vector<double> e(ops_.size(), 0.0);
    parallel_for(0, ops_.size(), [&](std::size_t k) {
      if (ops_[k].index.empty()) return;
      const Vec36 z = local_deformation(k, q);
      e[k] = integrate_cuboid(material_, f0_of(z), grad_f_of(z), model_.ips.cuboids[k], Derivatives::energy).energy;
    });
    double u = 0.0;
    for (double v : e) u += v;  // fixed IP order
    return u;
  }

  /// -dU/dq. Throws InversionError naming the first inverted IP.
  VecX internal_force(const VecX& q) const {
    double u = 0.0;
    VecX g = potential_gradient(q, &u);
    if (!std::isfinite(u)) throw InversionError(first_inverted_ip(q));
    return -g;
  }

  /// d2U/dq2, optionally with each IP's local Hessian projected to PSD.
  MatX tangent_stiffness(const VecX& q, bool project = false) const {
    const auto n = static_cast<Eigen::Index>(ndof());
    const Layout layout = make_layout({});
    MatX ks = MatX::Zero(n, n);
    add_stiffness_lower(q, project, 1.0, layout, ks);
    mirror_lower(ks);
    MatX k(n, n);
    for (Eigen::Index c = 0; c < n; ++c)
      for (Eigen::Index r = 0; r < n; ++r) k(r, c) = ks(solver_index(layout, r), solver_index(layout, c));
    return k;
  }

  /// F and gradF at every IP.
  Mat3 deformation_gradient(std::size_t ip, const VecX& q) const { return f0_of(local_deformation(ip, q)); }
  GradF grad_deformation(std::size_t ip, const VecX& q) const { return grad_f_of(local_deformation(ip, q)); }

  /// sum V_k det F_k / sum V_k
  double volume_ratio(const VecX& q) const {
    double num = 0.0, den = 0.0;
    for (std::size_t k = 0; k < ops_.size(); ++k) {
      if (ops_[k].index.empty()) continue;
      const double v = model_.ips.cuboids[k].volume;
      num += v * deformation_gradient(k, q).determinant();
      den += v;
    }
    return den > 0.0 ? num / den : 1.0;
  }

  double kinetic_energy(const SimState& s) const { return 0.5 * s.qdot.dot(mass_times(s.qdot)); }

  Vec3 ip_displacement(std::size_t ip, const VecX& q) const {
    Vec3 u = Vec3::Zero();
    const auto& op = ops_[ip];
    for (std::size_t r = 0; r < op.index.size(); ++r) u += op.values[static_cast<Eigen::Index>(r)] * q.segment<3>(3 * op.index[r]);
    return u;
  }

  /// Mass-weighted mean of deformed IP positions.
  Vec3 center_of_mass(const VecX& q) const {
    Vec3 c = Vec3::Zero();
    double w = 0.0;
    for (std::size_t k = 0; k < ops_.size(); ++k) {
      if (ops_[k].index.empty()) continue;
      const double v = model_.ips.cuboids[k].volume;
      c += v * (model_.ips.positions[k] + ip_displacement(k, q));
      w += v;
    }
    return w > 0.0 ? Vec3(c / w) : Vec3(Vec3::Zero());
  }

  /// Centre of mass over the IPs selected by `keep`.
  Vec3 center_of_mass(const VecX& q, const std::function<bool(std::size_t)>& keep) const {
    Vec3 c = Vec3::Zero();
    double w = 0.0;
    for (std::size_t k = 0; k < ops_.size(); ++k) {
      if (ops_[k].index.empty() || !keep(k)) continue;
      const double v = model_.ips.cuboids[k].volume;
      c += v * (model_.ips.positions[k] + ip_displacement(k, q));
      w += v;
    }
    return w > 0.0 ? Vec3(c / w) : Vec3(Vec3::Zero());
  }

  /// Gravity plus point forces: sum rho V_k J_k^T g + sum J(x)^T f.
  VecX external_force(const SimState& s) const {
    VecX f = VecX::Zero(static_cast<Eigen::Index>(ndof()));
    if (dynamics_.gravity != Vec3::Zero()) {
      for (std::size_t k = 0; k < ops_.size(); ++k) {
        const double m = material_.density * model_.ips.cuboids[k].volume;
        const auto& op = ops_[k];
        for (std::size_t r = 0; r < op.index.size(); ++r)
          f.segment<3>(3 * op.index[r]) += m * op.values[static_cast<Eigen::Index>(r)] * dynamics_.gravity;
      }
    }
    for (const auto& pf : s.forces)
      for (const auto& e : pf.basis.entries) f.segment<3>(3 * e.index) += e.value * pf.force;
    return f;
  }

  // --- constraints and loads --------------------------------------------------------

  /// Adds a force at a rest-space point. Returns false (and leaves the state
  /// unchanged) when the point lies outside every kernel support.
  bool apply_point_force(SimState& s, const Vec3& rest_point, const Vec3& force, int id = -1) const {
    auto b = try_evaluate_basis(model_.kernels, rest_point, model_.order);
    if (!b) return false;
    PointForce pf;
    pf.id = id >= 0 ? id : static_cast<int>(s.forces.size());
    pf.rest_point = rest_point;
    pf.force = force;
    pf.basis = std::move(*b);
    s.forces.push_back(std::move(pf));
    return true;
  }

  static void clear_forces(SimState& s) { s.forces.clear(); }

  /// Pins every kernel whose rest centre satisfies `pred` to target(kernel);
  /// without a target the current block is held.
  std::vector<int> pin_region(SimState& s, const std::function<bool(const Vec3&)>& pred,
                              const std::function<VecX(int)>& target = {}) const {
    std::vector<int> pinned;
    const int block = 3 * slots();
    for (std::size_t i = 0; i < model_.kernels.size(); ++i) {
      if (!pred(model_.kernels.centers[i])) continue;
      const int k = static_cast<int>(i);
      VecX t = target ? target(k) : VecX(s.q.segment(block * k, block));
      if (t.size() != block) throw Error("pin target must have " + std::to_string(block) + " entries");
      s.q.segment(block * k, block) = t;
      s.qdot.segment(block * k, block).setZero();
      s.pins[k] = std::move(t);
      pinned.push_back(k);
    }
    return pinned;
  }

  static void unpin(SimState& s) { s.pins.clear(); }

  /// Registers a cut on the model and rebuilds IP operators and mass.
  std::vector<std::string> cut(const Quad& quad) {
    const std::size_t before = model_.warnings.size();
    model_.add_cut(quad);
    rebuild();
    return {model_.warnings.begin() + static_cast<std::ptrdiff_t>(before), model_.warnings.end()};
  }

  // --- time stepping ------------------------------------------------------------------

  /// E(q) = 1/2 |q - q*|_M^2 + c h / 2 |q - q_n|_M^2 + h^2 (U(q) + U_ground(q) - q^T f)
  double objective(const VecX& q, const VecX& q_star, const VecX& q_n, const VecX& f_ext) const {
    const double h = dynamics_.dt;
    const double u = potential(q);
    if (!std::isfinite(u)) return std::numeric_limits<double>::infinity();
    const VecX a = q - q_star, b = q - q_n;
    return 0.5 * a.dot(mass_times(a)) + 0.5 * dynamics_.damping * h * b.dot(mass_times(b)) +
           h * h * (u + ground_energy(q, nullptr) - q.dot(f_ext));
  }

  VecX objective_gradient(const VecX& q, const VecX& q_star, const VecX& q_n, const VecX& f_ext) const {
    double e = 0.0;
    return objective_gradient(q, q_star, q_n, f_ext, &e);
  }

  StepReport step(SimState& s) const {
    using clock = std::chrono::steady_clock;
    auto ms = [](clock::time_point a, clock::time_point b) {
      return std::chrono::duration<double, std::milli>(b - a).count();
    };
    StepReport rep;
    const double h = dynamics_.dt;
    const VecX q_n = s.q;
    const VecX f_ext = external_force(s);
    const VecX q_star = q_n + h * s.qdot;

    const int block = 3 * slots();
    std::vector<char> fixed(ndof(), 0);
    for (const auto& [k, target] : s.pins)
      for (int r = 0; r < block; ++r) fixed[static_cast<std::size_t>(block * k + r)] = 1;
    const Layout layout = make_layout(s.pins);
    auto apply_pins = [&](VecX& q) {
      for (const auto& [k, target] : s.pins) q.segment(block * k, block) = target;
    };
    auto masked = [&](VecX g) {
      for (std::size_t i = 0; i < ndof(); ++i)
        if (fixed[i]) g[static_cast<Eigen::Index>(i)] = 0.0;
      return g;
    };

    VecX q = q_star;
    apply_pins(q);
    double e = 0.0;
    auto t0 = clock::now();
    VecX g = masked(objective_gradient(q, q_star, q_n, f_ext, &e));
    if (!std::isfinite(e)) {
      q = q_n;
      apply_pins(q);
      g = masked(objective_gradient(q, q_star, q_n, f_ext, &e));
    }
    rep.assembly_ms += ms(t0, clock::now());
    if (!std::isfinite(e)) throw Error("step start state is inverted");

    const double g0 = g.norm();
    const double tol = dynamics_.tolerance * std::max(1.0, g0);
    for (int it = 0; it < dynamics_.max_newton; ++it) {
      if (g.norm() <= tol) {
        rep.converged = true;
        break;
      }
      VecX d = VecX::Zero(q.size());
      if (layout.free > 0) d = newton_direction(q, g, layout, rep);
      ++rep.newton_iterations;

      t0 = clock::now();
      const double slope = g.dot(d);
      double alpha = 1.0;
      bool accepted = false;
      VecX best_q = q, best_g = g;
      double best_e = e;
      for (int bt = 0; bt <= dynamics_.max_backtracks; ++bt, alpha *= 0.5) {
        VecX trial = q + alpha * d;
        double et = 0.0;
        VecX gt = objective_gradient(trial, q_star, q_n, f_ext, &et);
        if (!std::isfinite(et)) continue;
        if (et < best_e) {
          best_e = et;
          best_q = trial;
          best_g = masked(std::move(gt));
          if (et <= e + dynamics_.armijo * alpha * slope) {
            accepted = true;
            break;
          }
        }
      }
      rep.assembly_ms += ms(t0, clock::now());
      if (!accepted) {
        rep.line_search_failed = true;
        rep.warnings.push_back("line search failed; keeping best iterate");
        q = best_q;
        g = best_g;
        e = best_e;
        break;
      }
      q = best_q;
      g = best_g;
      e = best_e;
    }
    if (!rep.converged && g.norm() <= tol) rep.converged = true;
    if (!q.allFinite()) throw Error("non-finite state after step");

    rep.energy = e;
    rep.gradient_norm = g.norm();
    s.qdot = (q - q_n) / h;
    s.q = q;
    for (const auto& [k, target] : s.pins) s.qdot.segment(block * k, block).setZero();
    s.t += h;
    ++s.step;
    return rep;
  }

  /// Local deformation variables z (see material.hpp) at IP k.
  Vec36 local_deformation(std::size_t k, const VecX& q) const {
    const auto& op = ops_[k];
    Eigen::Matrix<double, 3, 12> z = Eigen::Matrix<double, 3, 12>::Zero();
    for (std::size_t r = 0; r < op.index.size(); ++r)
      z.noalias() += q.segment<3>(3 * op.index[r]) * op.g.row(static_cast<Eigen::Index>(r));
    z.leftCols<3>() += Mat3::Identity();
    Vec36 out;
    for (int c = 0; c < 3; ++c) out.segment<12>(12 * c) = z.row(c).transpose();
    return out;
  }

  const std::vector<IpOperator>& ip_operators() const { return ops_; }

 private:
  /// Solver ordering: kernels in layout order (free first, pinned last),
  /// then component, then slot. Each kernel pair and component pair is a
  /// contiguous S x S block and the free system is the leading block.
  struct Layout {
    std::vector<Eigen::Index> position;  // kernel -> block position
    Eigen::Index free = 0;               // leading free DOFs
  };

  static Mat3 f0_of(const Vec36& z) {
    Mat3 f;
    for (int c = 0; c < 3; ++c)
      for (int e = 0; e < 3; ++e) f(c, e) = z[12 * c + e];
    return f;
  }
  static GradF grad_f_of(const Vec36& z) {
    GradF g = zero_grad_f();
    for (int c = 0; c < 3; ++c)
      for (int j = 0; j < 3; ++j)
        for (int l = 0; l < 3; ++l) g[l](c, j) = z[12 * c + 3 + 3 * j + l];
    return g;
  }

  void rebuild() {
    ops_.clear();
    ops_.reserve(model_.ip_bases.size());
    for (const auto& b : model_.ip_bases) ops_.push_back(make_ip_operator(b, slots()));
    assemble_mass();
  }

  /// M = sum rho V_k J_k^T J_k, kept as its scalar factor.
  void assemble_mass() {
    const auto n = static_cast<Eigen::Index>(ndof() / 3);
    scalar_mass_ = MatX::Zero(n, n);
    for (std::size_t k = 0; k < ops_.size(); ++k) {
      const auto& op = ops_[k];
      const double m = material_.density * model_.ips.cuboids[k].volume;
      for (std::size_t a = 0; a < op.index.size(); ++a)
        for (std::size_t b = a; b < op.index.size(); ++b) {
          const double v = m * op.values[static_cast<Eigen::Index>(a)] * op.values[static_cast<Eigen::Index>(b)];
          scalar_mass_(op.index[a], op.index[b]) += v;
          if (b != a) scalar_mass_(op.index[b], op.index[a]) += v;
        }
    }
  }

  int first_inverted_ip(const VecX& q) const {
    for (std::size_t k = 0; k < ops_.size(); ++k) {
      if (ops_[k].index.empty()) continue;
      const Vec36 z = local_deformation(k, q);
      const double e =
          integrate_cuboid(material_, f0_of(z), grad_f_of(z), model_.ips.cuboids[k], Derivatives::energy).energy;
      if (!std::isfinite(e)) return static_cast<int>(k);
    }
    return -1;
  }

  /// dU/dq; *energy receives U (+inf on inversion, gradient then invalid).
  VecX potential_gradient(const VecX& q, double* energy) const {
    const std::size_t m = ops_.size();
    std::vector<double> e(m, 0.0);
    std::vector<Vec36> gz(m, Vec36::Zero());
    std::vector<char> bad(m, 0);
    parallel_for(0, m, [&](std::size_t k) {
      if (ops_[k].index.empty()) return;
      const Vec36 z = local_deformation(k, q);
      const Mat3 f0 = f0_of(z);
      const GradF gf = grad_f_of(z);
      const auto& cub = model_.ips.cuboids[k];
      try {
        const auto r = integrate_cuboid(material_, f0, gf, cub, Derivatives::gradient);
        e[k] = r.energy;
        gz[k] = r.gradient;
      } catch (const InversionError&) {
        bad[k] = 1;
      }
    });
    VecX g = VecX::Zero(static_cast<Eigen::Index>(ndof()));
    double u = 0.0;
    for (std::size_t k = 0; k < m; ++k) {
      if (bad[k]) {
        *energy = std::numeric_limits<double>::infinity();
        return g;
      }
      u += e[k];
      const auto& op = ops_[k];
      for (int c = 0; c < 3; ++c) {
        const VecX gc = op.g * gz[k].segment<12>(12 * c);
        for (std::size_t r = 0; r < op.index.size(); ++r) g[3 * op.index[r] + c] += gc[static_cast<Eigen::Index>(r)];
      }
    }
    *energy = u;
    return g;
  }

  VecX objective_gradient(const VecX& q, const VecX& q_star, const VecX& q_n, const VecX& f_ext, double* e) const {
    const double h = dynamics_.dt;
    double u = 0.0;
    VecX gu = potential_gradient(q, &u);
    if (!std::isfinite(u)) {
      *e = std::numeric_limits<double>::infinity();
      return gu;
    }
    VecX g_ground = VecX::Zero(q.size());
    const double ug = ground_energy(q, &g_ground);
    const VecX a = q - q_star, b = q - q_n;
    const VecX ma = mass_times(a), mb = mass_times(b);
    *e = 0.5 * a.dot(ma) + 0.5 * dynamics_.damping * h * b.dot(mb) + h * h * (u + ug - q.dot(f_ext));
    return ma + dynamics_.damping * h * mb + h * h * (gu + g_ground - f_ext);
  }

  /// Penalty 1/2 k V_k max(0, offset - n . x_k)^2 per IP.
  double ground_energy(const VecX& q, VecX* grad) const {
    const auto& gp = dynamics_.ground;
    if (!gp.enabled) return 0.0;
    double e = 0.0;
    for (std::size_t k = 0; k < ops_.size(); ++k) {
      const Vec3 x = model_.ips.positions[k] + ip_displacement(k, q);
      const double pen = gp.offset - gp.normal.dot(x);
      if (pen <= 0.0) continue;
      const double kv = gp.stiffness * model_.ips.cuboids[k].volume;
      e += 0.5 * kv * pen * pen;
      if (grad) {
        const auto& op = ops_[k];
        for (std::size_t r = 0; r < op.index.size(); ++r)
          grad->segment<3>(3 * op.index[r]) -= kv * pen * op.values[static_cast<Eigen::Index>(r)] * gp.normal;
      }
    }
    return e;
  }

  void add_ground_hessian(const VecX& q, double scale, const Layout& layout, MatX& a) const {
    const auto& gp = dynamics_.ground;
    const Mat3 nn = gp.normal * gp.normal.transpose();
    for (std::size_t k = 0; k < ops_.size(); ++k) {
      const Vec3 x = model_.ips.positions[k] + ip_displacement(k, q);
      if (gp.offset - gp.normal.dot(x) <= 0.0) continue;
      const double kv = scale * gp.stiffness * model_.ips.cuboids[k].volume;
      const auto& op = ops_[k];
      for (std::size_t r = 0; r < op.index.size(); ++r)
        for (std::size_t t = 0; t < op.index.size(); ++t) {
          const double v = kv * op.values[static_cast<Eigen::Index>(r)] * op.values[static_cast<Eigen::Index>(t)];
          for (int c = 0; c < 3; ++c)
            for (int d = 0; d < 3; ++d)
              a(solver_index(layout, 3 * op.index[r] + c), solver_index(layout, 3 * op.index[t] + d)) += v * nn(c, d);
        }
    }
  }

  Layout make_layout(const std::map<int, VecX>& pins) const {
    Layout l;
    const std::size_t nk = model_.kernels.size();
    l.position.resize(nk);
    Eigen::Index next = 0;
    for (std::size_t k = 0; k < nk; ++k)
      if (!pins.count(static_cast<int>(k))) l.position[k] = next++;
    l.free = next * 3 * slots();
    for (std::size_t k = 0; k < nk; ++k)
      if (pins.count(static_cast<int>(k))) l.position[k] = next++;
    return l;
  }

  Eigen::Index solver_index(const Layout& l, Eigen::Index i) const {
    const Eigen::Index s = slots(), b = 3 * s, r = i % b;
    return l.position[static_cast<std::size_t>(i / b)] * b + (r % 3) * s + r / 3;
  }

  /// Lower triangle of alpha * M in solver ordering.
  void fill_mass_lower(const Layout& l, double alpha, MatX& a) const {
    const Eigen::Index s = slots(), nk = static_cast<Eigen::Index>(model_.kernels.size());
    for (Eigen::Index kb = 0; kb < nk; ++kb)
      for (Eigen::Index ka = 0; ka < nk; ++ka) {
        const Eigen::Index pa = l.position[static_cast<std::size_t>(ka)], pb = l.position[static_cast<std::size_t>(kb)];
        if (pa < pb) continue;
        auto blk = a.block(3 * s * pa, 3 * s * pb, 3 * s, 3 * s);
        blk.setZero();
        for (int c = 0; c < 3; ++c) blk.block(s * c, s * c, s, s) = alpha * scalar_mass_.block(s * ka, s * kb, s, s);
      }
  }

  /// Newton direction for the free DOFs: builds M + c h M + h^2 K into the
  /// workspace and factors its leading free block.
  VecX newton_direction(const VecX& q, const VecX& g, const Layout& layout, StepReport& rep) const {
    using clock = std::chrono::steady_clock;
    auto ms = [](clock::time_point a) { return std::chrono::duration<double, std::milli>(clock::now() - a).count(); };
    const auto n = static_cast<Eigen::Index>(ndof());
    const double h = dynamics_.dt;
    if (work_.rows() != n) work_.resize(n, n);
    auto build = [&] {
      const auto t0 = clock::now();
      fill_mass_lower(layout, 1.0 + dynamics_.damping * h, work_);
      add_stiffness_lower(q, dynamics_.project_hessian, h * h, layout, work_);
      if (dynamics_.ground.enabled) add_ground_hessian(q, h * h, layout, work_);
      rep.assembly_ms += ms(t0);
    };
    build();
    const auto t0 = clock::now();
    auto a = work_.topLeftCorner(layout.free, layout.free);
    const double scale = std::max(a.diagonal().cwiseAbs().maxCoeff(), 1e-300);
    bool ok = cholesky_lower(a);
    for (double shift = 1e-10; !ok && shift <= 1e-2; shift *= 10.0) {
      rep.warnings.push_back("Newton matrix shifted by " + std::to_string(shift) + " x max diagonal");
      rep.solve_ms += ms(t0);
      build();
      a.diagonal().array() += shift * scale;
      ok = cholesky_lower(a);
    }
    if (!ok) throw Error("Newton matrix factorization failed after diagonal shift");
    VecX gf(layout.free);
    for (Eigen::Index i = 0; i < n; ++i) {
      const Eigen::Index j = solver_index(layout, i);
      if (j < layout.free) gf[j] = g[i];
    }
    const VecX df = cholesky_solve(a, gf);
    VecX d = VecX::Zero(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const Eigen::Index j = solver_index(layout, i);
      if (j < layout.free) d[i] = -df[j];
    }
    rep.solve_ms += ms(t0);
    return d;
  }

  /// target += scale * K(q) in solver ordering, on and below the diagonal
  /// kernel blocks (the lower triangle is complete). Local 36x36 Hessians are
  /// computed in parallel; the scatter is split by column kernel so every
  /// block is summed in IP order by exactly one worker.
  void add_stiffness_lower(const VecX& q, bool project, double scale, const Layout& layout, MatX& target) const {
    const std::size_t m = ops_.size();
    std::vector<Mat36> hz(m);
    std::vector<char> bad(m, 0);
    parallel_for(0, m, [&](std::size_t k) {
      if (ops_[k].index.empty()) return;
      const Vec36 z = local_deformation(k, q);
      try {
        const Mat36 h =
            integrate_cuboid(material_, f0_of(z), grad_f_of(z), model_.ips.cuboids[k], Derivatives::hessian).hessian;
        hz[k] = scale * (project ? Mat36(project_psd(h)) : Mat36(0.5 * (h + h.transpose())));
      } catch (const InversionError&) {
        bad[k] = 1;
      }
    });
    for (std::size_t k = 0; k < m; ++k)
      if (bad[k]) throw InversionError(static_cast<int>(k));
    if (model_.order == InterpolationOrder::quadratic)
      scatter_stiffness<10>(hz, layout, target);
    else
      scatter_stiffness<4>(hz, layout, target);
  }

  template <int S>
  void scatter_stiffness(const std::vector<Mat36>& hz, const Layout& layout, MatX& target) const {
    const std::size_t workers = std::max<std::size_t>(
        1, std::min<std::size_t>(static_cast<std::size_t>(worker_count()), model_.kernels.size()));
    parallel_for(
        0, workers,
        [&](std::size_t w) {
          Eigen::Matrix<double, Eigen::Dynamic, 36> y, ys;
          Eigen::Matrix<double, 12, Eigen::Dynamic> gt;
          for (std::size_t k = 0; k < ops_.size(); ++k) {
            const auto& op = ops_[k];
            const auto& kr = op.kernel_rows;
            bool owns = false;
            for (const auto& [kernel, row] : kr) owns = owns || static_cast<std::size_t>(kernel) % workers == w;
            if (!owns) continue;
            const auto nk = static_cast<Eigen::Index>(kr.size());
            // ys row 3 S j + S c + s: (G H)_(c, .) for slot s of the j-th kernel
            ys.resize(3 * S * nk, 36);
            for (int c = 0; c < 3; ++c) {
              y.noalias() = op.g * hz[k].middleRows<12>(12 * c);
              for (Eigen::Index j = 0; j < nk; ++j) ys.middleRows<S>(3 * S * j + S * c) = y.middleRows<S>(S * j);
            }
            gt = op.g.transpose();
            for (Eigen::Index jb = 0; jb < nk; ++jb) {
              const auto kb = static_cast<std::size_t>(kr[static_cast<std::size_t>(jb)].first);
              if (kb % workers != w) continue;
              const Eigen::Index pb = layout.position[kb];
              for (int d = 0; d < 3; ++d) {
                const Eigen::Matrix<double, 12, S> gb = gt.template middleCols<S>(S * jb);
                for (Eigen::Index ja = 0; ja < nk; ++ja) {
                  const Eigen::Index pa = layout.position[static_cast<std::size_t>(kr[static_cast<std::size_t>(ja)].first)];
                  if (pa < pb) continue;
                  target.template block<3 * S, S>(3 * S * pa, 3 * S * pb + S * d).noalias() +=
                      ys.template block<3 * S, 12>(3 * S * ja, 12 * d) * gb;
                }
              }
            }
          }
        },
        static_cast<int>(workers));
  }

  static void mirror_lower(MatX& a) {
    const Eigen::Index n = a.rows();
    constexpr Eigen::Index tile = 64;
    for (Eigen::Index j0 = 0; j0 < n; j0 += tile)
      for (Eigen::Index i0 = 0; i0 <= j0; i0 += tile)
        for (Eigen::Index j = j0; j < std::min(n, j0 + tile); ++j)
          for (Eigen::Index i = i0; i < std::min(j, i0 + tile); ++i) a(i, j) = a(j, i);
  }

 public:
  /// In-place right-looking tiled Cholesky of the lower triangle. Panel
  /// solves and trailing updates are spread over workers by tile, and every
  /// tile is computed the same way whatever the worker count.
  static bool cholesky_lower(Eigen::Ref<MatX> a, Eigen::Index tile = 192) {
    const Eigen::Index n = a.rows();
    for (Eigen::Index k = 0; k < n; k += tile) {
      const Eigen::Index b = std::min(tile, n - k), rest = n - k - b;
      auto akk = a.block(k, k, b, b);
      Eigen::LLT<Eigen::Ref<MatX>> llt(akk);
      if (llt.info() != Eigen::Success) return false;
      if (rest == 0) break;
      const auto tiles = static_cast<std::size_t>((rest + tile - 1) / tile);
      parallel_for(0, tiles, [&](std::size_t t) {
        const Eigen::Index r0 = static_cast<Eigen::Index>(t) * tile, rows = std::min(tile, rest - r0);
        auto panel = a.block(k + b + r0, k, rows, b);
        akk.triangularView<Eigen::Lower>().transpose().solveInPlace<Eigen::OnTheRight>(panel);
      });
      const auto a21 = a.block(k + b, k, rest, b);
      parallel_for(0, tiles, [&](std::size_t t) {
        const Eigen::Index j = static_cast<Eigen::Index>(t) * tile, w = std::min(tile, rest - j);
        a.block(k + b + j, k + b + j, rest - j, w).noalias() -= a21.bottomRows(rest - j) * a21.middleRows(j, w).transpose();
      });
    }
    return true;
  }

  static VecX cholesky_solve(const Eigen::Ref<const MatX>& l, const VecX& b) {
    VecX x = l.triangularView<Eigen::Lower>().solve(b);
    l.triangularView<Eigen::Lower>().transpose().solveInPlace(x);
    return x;
  }

 private:
  Model model_;
  MaterialParams material_;
  DynamicsParams dynamics_;
  std::vector<IpOperator> ops_;
  MatX scalar_mass_;
  mutable MatX work_;  // Newton matrix workspace, reused across steps
};

}  // namespace pie
