#pragma once

// PIESAMP1: particles, kernels, integrator points and the IP shape functions
// of a discretised body. ASCII header lines like PIEGRID1, then a
// little-endian float64 payload in header order.

#include "pie/field.hpp"
#include "pie/model.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>

namespace pie {

inline constexpr const char* kSidecarMagic = "PIESAMP1";
inline constexpr int kSidecarVersion = 1;

namespace detail {

class PayloadWriter {
 public:
  explicit PayloadWriter(std::ostream& out) : out_(out) {}
  void put(double v) {
    std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
    out_.write(reinterpret_cast<const char*>(&bits), sizeof(bits));
  }
  void put(const Vec3& v) {
    for (int i = 0; i < 3; ++i) put(v[i]);
  }
  void put(const Mat3& m) {
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) put(m(r, c));
  }

 private:
  std::ostream& out_;
};

class PayloadReader {
 public:
  explicit PayloadReader(std::istream& in) : in_(in) {}
  double real() {
    std::uint64_t bits = 0;
    if (!in_.read(reinterpret_cast<char*>(&bits), sizeof(bits))) throw Error("truncated sidecar payload");
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
    return std::bit_cast<double>(bits);
  }
  Vec3 vec() {
    Vec3 v;
    for (int i = 0; i < 3; ++i) v[i] = real();
    return v;
  }
  Mat3 mat() {
    Mat3 m;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) m(r, c) = real();
    return m;
  }
  long long count(long long limit, const std::string& what) {
    const double v = real();
    if (!(v >= 0.0 && v <= static_cast<double>(limit)) || v != std::floor(v)) throw Error("corrupt sidecar " + what);
    return static_cast<long long>(v);
  }

 private:
  std::istream& in_;
};

}  // namespace detail

inline void write_sidecar(std::ostream& out, const Model& m) {
  out << kSidecarMagic << '\n';
  out << "version " << kSidecarVersion << '\n';
  out << "order " << (m.order == InterpolationOrder::quadratic ? "quadratic" : "linear") << '\n';
  out << "particles " << m.cloud.size() << '\n';
  out << "kernels " << m.kernels.size() << '\n';
  out << "cuts " << m.kernels.cuts.size() << '\n';
  out << "ips " << m.ips.size() << '\n';
  detail::PayloadWriter w(out);
  for (std::size_t i = 0; i < m.cloud.size(); ++i) {
    w.put(m.cloud.positions[i]);
    w.put(m.cloud.radii[i]);
    w.put(m.cloud.volumes[i]);
    w.put(m.cloud.densities[i]);
  }
  for (std::size_t i = 0; i < m.kernels.size(); ++i) {
    w.put(m.kernels.centers[i]);
    w.put(m.kernels.support_radii[i]);
  }
  for (const auto& q : m.kernels.cuts) {
    w.put(q.center);
    w.put(q.half_u);
    w.put(q.half_v);
  }
  for (std::size_t k = 0; k < m.ips.size(); ++k) {
    const auto& c = m.ips.cuboids[k];
    w.put(m.ips.positions[k]);
    w.put(c.axes);
    w.put(c.lengths);
    w.put(c.volume);
    w.put(m.ips.kernel_ip[k] ? 1.0 : 0.0);
    const auto& b = m.ip_bases[k];
    w.put(b.rcond);
    w.put(b.regularized ? 1.0 : 0.0);
    w.put(static_cast<double>(b.entries.size()));
    for (const auto& e : b.entries) {
      w.put(static_cast<double>(e.index));
      w.put(e.value);
      w.put(e.grad);
      w.put(e.hess);
    }
  }
}

inline Model read_sidecar(std::istream& in) {
  if (detail::read_header_line(in, "magic") != kSidecarMagic) throw Error("bad magic");
  auto field = [&](const std::string& key) {
    std::istringstream ls(detail::read_header_line(in, key));
    std::string tag, value;
    ls >> tag >> value;
    if (tag != key || value.empty()) throw Error("malformed header: expected '" + key + "'");
    return value;
  };
  auto number = [&](const std::string& key) {
    const std::string v = field(key);
    std::size_t used = 0;
    long long n = -1;
    try {
      n = std::stoll(v, &used);
    } catch (const std::exception&) {
    }
    if (used != v.size() || n < 0) throw Error("malformed header line '" + key + "'");
    return n;
  };
  if (number("version") != kSidecarVersion) throw Error("unsupported sidecar version");
  Model m;
  const std::string order = field("order");
  if (order == "quadratic")
    m.order = InterpolationOrder::quadratic;
  else if (order == "linear")
    m.order = InterpolationOrder::linear;
  else
    throw Error("unknown interpolation order '" + order + "'");
  const long long np = number("particles"), nk = number("kernels"), nc = number("cuts"), ni = number("ips");

  detail::PayloadReader r(in);
  for (long long i = 0; i < np; ++i) {
    m.cloud.positions.push_back(r.vec());
    m.cloud.radii.push_back(r.real());
    m.cloud.volumes.push_back(r.real());
    m.cloud.densities.push_back(r.real());
  }
  for (long long i = 0; i < nk; ++i) {
    m.kernels.centers.push_back(r.vec());
    m.kernels.support_radii.push_back(r.real());
  }
  for (long long i = 0; i < nc; ++i) {
    Quad q;
    q.center = r.vec();
    q.half_u = r.vec();
    q.half_v = r.vec();
    m.kernels.cuts.push_back(q);
  }
  const long long ndof = static_cast<long long>(dof_count(m.order, static_cast<std::size_t>(nk))) / 3;
  for (long long k = 0; k < ni; ++k) {
    Cuboid c;
    m.ips.positions.push_back(r.vec());
    c.axes = r.mat();
    c.lengths = r.vec();
    c.volume = r.real();
    m.ips.cuboids.push_back(c);
    m.ips.kernel_ip.push_back(r.real() != 0.0 ? 1 : 0);
    BasisEvaluation b;
    b.point = m.ips.positions.back();
    b.order = m.order;
    b.rcond = r.real();
    b.regularized = r.real() != 0.0;
    const long long ne = r.count(ndof, "entry count");
    for (long long e = 0; e < ne; ++e) {
      ShapeEntry s;
      s.index = static_cast<int>(r.count(ndof - 1, "shape index"));
      s.value = r.real();
      s.grad = r.vec();
      s.hess = r.mat();
      b.entries.push_back(s);
    }
    m.ip_bases.push_back(std::move(b));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw Error("trailing bytes after sidecar payload");
  for (std::size_t k = 0; k < m.ip_bases.size(); ++k)
    if (m.ip_bases[k].empty()) m.warnings.push_back("IP " + std::to_string(k) + " outside all kernel supports");
  return m;
}

inline void save_sidecar(const Model& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  write_sidecar(out, m);
  if (!out) throw Error("write failed for '" + path + "'");
}

inline Model load_sidecar(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open sidecar '" + path + "'");
  return read_sidecar(in);
}

}  // namespace pie
