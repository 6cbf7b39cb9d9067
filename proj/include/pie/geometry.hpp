#pragma once

#include "pie/common.hpp"

#include <cmath>

namespace pie {

/// Planar rectangle: center +/- half_u +/- half_v. half_u and half_v must be
/// orthogonal and nonzero.
struct Quad {
  Vec3 center = Vec3::Zero();
  Vec3 half_u = Vec3::UnitX();
  Vec3 half_v = Vec3::UnitY();

  Vec3 normal() const { return half_u.cross(half_v); }

  bool valid() const {
    const double scale = half_u.norm() * half_v.norm();
    return center.allFinite() && half_u.allFinite() && half_v.allFinite() && scale > 0.0 &&
           std::abs(half_u.dot(half_v)) <= 1e-9 * scale;
  }

  /// True when the open segment (a, b) crosses the rectangle. Endpoints lying
  /// on the plane do not count as separated.
  bool intersects_segment(const Vec3& a, const Vec3& b) const {
    const Vec3 n = normal();
    const double da = n.dot(a - center);
    const double db = n.dot(b - center);
    if (!(da * db < 0.0)) return false;
    const double t = da / (da - db);
    const Vec3 p = a + t * (b - a) - center;
    const double s = p.dot(half_u) / half_u.squaredNorm();
    const double r = p.dot(half_v) / half_v.squaredNorm();
    return std::abs(s) <= 1.0 && std::abs(r) <= 1.0;
  }
};

}  // namespace pie
