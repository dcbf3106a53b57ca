#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <numeric>
#include <vector>

#include "diematch/geom.hpp"

namespace diematch::geom {

/// Shared immutable point buffer, so indices, correspondences and results can
/// address the same points without copying them.
using PointSet = std::shared_ptr<const std::vector<Vec3>>;

inline PointSet make_point_set(std::vector<Vec3> points) {
  return std::make_shared<const std::vector<Vec3>>(std::move(points));
}

struct Neighbor {
  std::uint32_t index = 0;
  double sq_distance = std::numeric_limits<double>::infinity();

  double distance() const { return std::sqrt(sq_distance); }
};

/// Exact nearest-neighbor k-d tree over a shared point set. Immutable
/// after construction; concurrent queries are safe.
///
/// Ties in nearest-neighbor queries resolve to the lowest point index, so
/// results match a linear scan exactly.
class SpatialIndex {
 public:
  SpatialIndex() : SpatialIndex(PointSet{}) {}

  explicit SpatialIndex(std::vector<Vec3> points) : SpatialIndex(make_point_set(std::move(points))) {}

  explicit SpatialIndex(PointSet points) : set_(points ? std::move(points) : make_point_set({})) {
    order_.resize(set_->size());
    std::iota(order_.begin(), order_.end(), 0u);
    nodes_.reserve(2 * set_->size() / kLeafSize + 1);
    if (!set_->empty()) build(0, static_cast<std::uint32_t>(set_->size()));
  }

  std::size_t size() const noexcept { return set_->size(); }
  bool empty() const noexcept { return set_->empty(); }
  const std::vector<Vec3>& points() const noexcept { return *set_; }
  const PointSet& point_set() const noexcept { return set_; }
  const Vec3& point(std::size_t i) const { return (*set_)[i]; }

  Neighbor nearest(const Vec3& query) const {
    Neighbor best;
    if (!nodes_.empty()) nearest_rec(0, query, best);
    return best;
  }

  /// All points with squared distance <= radius^2, sorted by index.
  std::vector<Neighbor> radius_search(const Vec3& query, double radius) const {
    std::vector<Neighbor> out;
    radius_search(query, radius, out);
    return out;
  }

  void radius_search(const Vec3& query, double radius, std::vector<Neighbor>& out) const {
    out.clear();
    if (nodes_.empty() || !(radius >= 0.0)) return;
    radius_rec(0, query, radius * radius, out);
    std::sort(out.begin(), out.end(), [](const Neighbor& a, const Neighbor& b) { return a.index < b.index; });
  }

 private:
  static constexpr std::uint32_t kLeafSize = 12;
  static constexpr std::uint32_t kNone = std::numeric_limits<std::uint32_t>::max();

  struct Node {
    std::uint32_t begin = 0, end = 0;  // range in order_ (leaves)
    std::uint32_t left = kNone, right = kNone;
    int axis = -1;
    double split = 0.0;
  };

  std::uint32_t build(std::uint32_t begin, std::uint32_t end) {
    const std::vector<Vec3>& pts = *set_;
    const auto id = static_cast<std::uint32_t>(nodes_.size());
    nodes_.push_back({begin, end});
    if (end - begin <= kLeafSize) return id;

    Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
    Vec3 hi = -lo;
    for (std::uint32_t i = begin; i < end; ++i) {
      lo = lo.cwiseMin(pts[order_[i]]);
      hi = hi.cwiseMax(pts[order_[i]]);
    }
    int axis = 0;
    (hi - lo).maxCoeff(&axis);
    if (hi[axis] - lo[axis] <= 0.0) return id;  // all coincident: keep as leaf

    const std::uint32_t mid = begin + (end - begin) / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                     [&](std::uint32_t a, std::uint32_t b) { return pts[a][axis] < pts[b][axis]; });
    const double split = pts[order_[mid]][axis];

    const std::uint32_t left = build(begin, mid);
    const std::uint32_t right = build(mid, end);
    Node& node = nodes_[id];
    node.axis = axis;
    node.split = split;
    node.left = left;
    node.right = right;
    return id;
  }

  // Left subtree holds coordinates <= split, right subtree >= split.
  void nearest_rec(std::uint32_t id, const Vec3& q, Neighbor& best) const {
    const std::vector<Vec3>& pts = *set_;
    const Node& node = nodes_[id];
    if (node.axis < 0) {
      for (std::uint32_t i = node.begin; i < node.end; ++i) {
        const std::uint32_t idx = order_[i];
        const double d = (pts[idx] - q).squaredNorm();
        if (d < best.sq_distance || (d == best.sq_distance && idx < best.index)) best = {idx, d};
      }
      return;
    }
    const double diff = q[node.axis] - node.split;
    const std::uint32_t near = diff <= 0.0 ? node.left : node.right;
    const std::uint32_t far = diff <= 0.0 ? node.right : node.left;
    nearest_rec(near, q, best);
    if (diff * diff <= best.sq_distance) nearest_rec(far, q, best);
  }

  void radius_rec(std::uint32_t id, const Vec3& q, double r2, std::vector<Neighbor>& out) const {
    const std::vector<Vec3>& pts = *set_;
    const Node& node = nodes_[id];
    if (node.axis < 0) {
      for (std::uint32_t i = node.begin; i < node.end; ++i) {
        const std::uint32_t idx = order_[i];
        const double d = (pts[idx] - q).squaredNorm();
        if (d <= r2) out.push_back({idx, d});
      }
      return;
    }
    const double diff = q[node.axis] - node.split;
    if (diff <= 0.0 || diff * diff <= r2) radius_rec(node.left, q, r2, out);
    if (diff >= 0.0 || diff * diff <= r2) radius_rec(node.right, q, r2, out);
  }

  PointSet set_;
  std::vector<std::uint32_t> order_;
  std::vector<Node> nodes_;
};

}  // namespace diematch::geom
