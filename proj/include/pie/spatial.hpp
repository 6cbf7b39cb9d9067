#pragma once

#include "pie/common.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <queue>
#include <unordered_map>
#include <vector>

namespace pie {

/// Static 3D k-d tree over a point set. Neighbours are reported in ascending
/// distance, ties broken by index, so results do not depend on build order.
class KdTree {
 public:
  struct Neighbor {
    int index;
    double dist2;
  };

  KdTree() = default;
  explicit KdTree(std::vector<Vec3> points) : points_(std::move(points)) { build(); }

  std::size_t size() const { return points_.size(); }
  const std::vector<Vec3>& points() const { return points_; }

  std::vector<Neighbor> knn(const Vec3& q, std::size_t k) const {
    std::vector<Neighbor> heap;  // max-heap on (dist2, index)
    if (k == 0 || nodes_.empty()) return heap;
    heap.reserve(k + 1);
    knn_recurse(0, q, k, heap);
    std::sort_heap(heap.begin(), heap.end(), less);
    return heap;
  }

  std::vector<Neighbor> radius(const Vec3& q, double r) const {
    std::vector<Neighbor> out;
    if (nodes_.empty()) return out;
    radius_recurse(0, q, r * r, out);
    std::sort(out.begin(), out.end(), less);
    return out;
  }

 private:
  struct Node {
    int begin, end;  // range in order_
    int axis = -1;   // -1 for leaves
    double split = 0.0;
    int left = -1, right = -1;
  };
  static constexpr int kLeafSize = 8;

  static bool less(const Neighbor& a, const Neighbor& b) {
    return a.dist2 < b.dist2 || (a.dist2 == b.dist2 && a.index < b.index);
  }

  void build() {
    order_.resize(points_.size());
    std::iota(order_.begin(), order_.end(), 0);
    nodes_.clear();
    if (!points_.empty()) build_node(0, static_cast<int>(points_.size()));
  }

  int build_node(int begin, int end) {
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{begin, end});
    if (end - begin <= kLeafSize) return id;
    Box3 box;
    box.setEmpty();
    for (int i = begin; i < end; ++i) box.extend(points_[order_[i]]);
    Eigen::Index axis = 0;
    box.sizes().maxCoeff(&axis);
    const int mid = (begin + end) / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end, [&](int a, int b) {
      const double pa = points_[a][axis], pb = points_[b][axis];
      return pa < pb || (pa == pb && a < b);
    });
    const double split = points_[order_[mid]][axis];
    const int left = build_node(begin, mid);
    const int right = build_node(mid, end);
    nodes_[id].axis = static_cast<int>(axis);
    nodes_[id].split = split;
    nodes_[id].left = left;
    nodes_[id].right = right;
    return id;
  }

  void knn_recurse(int id, const Vec3& q, std::size_t k, std::vector<Neighbor>& heap) const {
    const Node& n = nodes_[id];
    if (n.axis < 0) {
      for (int i = n.begin; i < n.end; ++i) {
        const int idx = order_[i];
        const Neighbor cand{idx, (points_[idx] - q).squaredNorm()};
        if (heap.size() < k) {
          heap.push_back(cand);
          std::push_heap(heap.begin(), heap.end(), less);
        } else if (less(cand, heap.front())) {
          std::pop_heap(heap.begin(), heap.end(), less);
          heap.back() = cand;
          std::push_heap(heap.begin(), heap.end(), less);
        }
      }
      return;
    }
    const double diff = q[n.axis] - n.split;
    const int near = diff < 0.0 ? n.left : n.right;
    const int far = diff < 0.0 ? n.right : n.left;
    knn_recurse(near, q, k, heap);
    if (heap.size() < k || diff * diff <= heap.front().dist2) knn_recurse(far, q, k, heap);
  }

  void radius_recurse(int id, const Vec3& q, double r2, std::vector<Neighbor>& out) const {
    const Node& n = nodes_[id];
    if (n.axis < 0) {
      for (int i = n.begin; i < n.end; ++i) {
        const int idx = order_[i];
        const double d2 = (points_[idx] - q).squaredNorm();
        if (d2 <= r2) out.push_back({idx, d2});
      }
      return;
    }
    const double diff = q[n.axis] - n.split;
    if (diff < 0.0 || diff * diff <= r2) radius_recurse(n.left, q, r2, out);
    if (diff >= 0.0 || diff * diff <= r2) radius_recurse(n.right, q, r2, out);
  }

  std::vector<Vec3> points_;
  std::vector<int> order_;
  std::vector<Node> nodes_;
};

/// Incremental uniform hash grid for dynamic insertion (Poisson-disk sampling).
class HashGrid {
 public:
  explicit HashGrid(double cell) : cell_(cell) {}

  void insert(const Vec3& p, int index) { cells_[key(cell_of(p))].push_back(index); }

  /// Calls fn(index) for every point in the cells overlapping the cube of
  /// half-width r around p.
  template <class Fn>
  void for_each_near(const Vec3& p, double r, Fn&& fn) const {
    const auto lo = cell_of(p - Vec3::Constant(r));
    const auto hi = cell_of(p + Vec3::Constant(r));
    for (long long z = lo[2]; z <= hi[2]; ++z)
      for (long long y = lo[1]; y <= hi[1]; ++y)
        for (long long x = lo[0]; x <= hi[0]; ++x) {
          auto it = cells_.find(key({x, y, z}));
          if (it == cells_.end()) continue;
          for (int idx : it->second) fn(idx);
        }
  }

 private:
  std::array<long long, 3> cell_of(const Vec3& p) const {
    return {static_cast<long long>(std::floor(p.x() / cell_)), static_cast<long long>(std::floor(p.y() / cell_)),
            static_cast<long long>(std::floor(p.z() / cell_))};
  }
  static unsigned long long key(const std::array<long long, 3>& c) {
    auto enc = [](long long v) { return static_cast<unsigned long long>(v + (1LL << 20)) & 0x1FFFFFULL; };
    return enc(c[0]) | (enc(c[1]) << 21) | (enc(c[2]) << 42);
  }

  double cell_;
  std::unordered_map<unsigned long long, std::vector<int>> cells_;
};

}  // namespace pie
