#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <queue>
#include <span>
#include <utility>
#include <vector>

#include "tapip3d/error.hpp"
#include "tapip3d/feature_cloud.hpp"
#include "tapip3d/geometry.hpp"

namespace tapip3d {

/// K neighbors of a query point sorted by (distance, cell id). When the cloud
/// has fewer than K cells the nearest one is repeated and flagged.
struct NeighborSet {
  std::vector<std::int32_t> ids;
  std::vector<Vec3> offsets;  // neighbor - query
  std::vector<double> distances;
  std::vector<std::uint8_t> duplicate;

  std::size_t size() const { return ids.size(); }

  void push(std::int32_t id, const Vec3& offset, double distance, bool dup) {
    ids.push_back(id);
    offsets.push_back(offset);
    distances.push_back(distance);
    duplicate.push_back(dup ? 1 : 0);
  }

  void pad_to(std::size_t k) {
    while (size() < k && size() > 0) push(ids[0], offsets[0], distances[0], true);
  }
};

/// Exact k-NN over the valid cells of a grid (kd-tree, bucket leaves).
class SpatialIndex {
 public:
  SpatialIndex() = default;

  SpatialIndex(std::span<const Vec3> coords, std::span<const std::uint8_t> valid) {
    require(coords.size() == valid.size(), ErrorCode::kShape, "coords/valid length mismatch");
    for (std::size_t i = 0; i < coords.size(); ++i) {
      if (!valid[i]) continue;
      points_.push_back(coords[i]);
      ids_.push_back(static_cast<std::int32_t>(i));
    }
    require(!points_.empty(), ErrorCode::kEmptyCloud, "no valid cells to index");
    order_.resize(points_.size());
    std::iota(order_.begin(), order_.end(), 0);
    nodes_.reserve(2 * points_.size() / kLeafSize + 2);
    build(0, static_cast<int>(order_.size()));
  }

  explicit SpatialIndex(const CloudGrid& grid) : SpatialIndex(grid.coords, grid.valid) {}

  std::size_t size() const { return points_.size(); }
  bool empty() const { return points_.empty(); }

  NeighborSet query(const Vec3& q, int k) const {
    require(k >= 1, ErrorCode::kConfig, "K must be >= 1");
    require(!points_.empty(), ErrorCode::kEmptyCloud, "query on an empty index");
    const std::size_t want = std::min<std::size_t>(static_cast<std::size_t>(k), points_.size());
    Heap heap;
    search(0, q, want, heap);
    std::vector<Candidate> found;
    found.reserve(heap.size());
    while (!heap.empty()) {
      found.push_back(heap.top());
      heap.pop();
    }
    std::reverse(found.begin(), found.end());
    NeighborSet out;
    for (const auto& c : found) {
      const Vec3 offset = points_[c.slot] - q;
      out.push(ids_[c.slot], offset, std::sqrt(c.d2), false);
    }
    out.pad_to(static_cast<std::size_t>(k));
    return out;
  }

 private:
  static constexpr int kLeafSize = 8;

  struct Node {
    int begin = 0, end = 0;    // range into order_ (leaves)
    int axis = -1;             // -1 for leaves
    double split = 0.0;
    int left = -1, right = -1;
  };

  struct Candidate {
    double d2;
    std::int32_t id;
    int slot;
    bool operator<(const Candidate& o) const { return d2 < o.d2 || (d2 == o.d2 && id < o.id); }
  };
  using Heap = std::priority_queue<Candidate>;  // max-heap: worst on top

  int build(int begin, int end) {
    const int node_index = static_cast<int>(nodes_.size());
    nodes_.push_back({begin, end});
    if (end - begin <= kLeafSize) return node_index;
    Vec3 lo = points_[order_[begin]], hi = lo;
    for (int i = begin; i < end; ++i) {
      lo = lo.cwiseMin(points_[order_[i]]);
      hi = hi.cwiseMax(points_[order_[i]]);
    }
    int axis = 0;
    (hi - lo).maxCoeff(&axis);
    if (hi(axis) == lo(axis)) return node_index;  // all coincident: keep as one leaf
    const int mid = begin + (end - begin) / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                     [&](int a, int b) { return points_[a](axis) < points_[b](axis); });
    const double split = points_[order_[mid]](axis);
    const int left = build(begin, mid);
    const int right = build(mid, end);
    Node& n = nodes_[node_index];
    n.axis = axis;
    n.split = split;
    n.left = left;
    n.right = right;
    return node_index;
  }

  void search(int node_index, const Vec3& q, std::size_t want, Heap& heap) const {
    const Node& n = nodes_[node_index];
    if (n.axis < 0) {
      for (int i = n.begin; i < n.end; ++i) {
        const int slot = order_[i];
        const Candidate c{(points_[slot] - q).squaredNorm(), ids_[slot], slot};
        if (heap.size() < want) {
          heap.push(c);
        } else if (c < heap.top()) {
          heap.pop();
          heap.push(c);
        }
      }
      return;
    }
    // Left holds coords <= split, right holds coords >= split.
    const double diff = q(n.axis) - n.split;
    const int near = diff < 0.0 ? n.left : n.right;
    const int far = diff < 0.0 ? n.right : n.left;
    search(near, q, want, heap);
    if (heap.size() < want || diff * diff <= heap.top().d2) search(far, q, want, heap);
  }

  std::vector<Vec3> points_;
  std::vector<std::int32_t> ids_;
  std::vector<int> order_;
  std::vector<Node> nodes_;
};

inline NeighborSet knn_query(const SpatialIndex& index, const Vec3& query, int k) { return index.query(query, k); }

/// Square image-plane window of (2r+1)^2 cells around the grid cell nearest
/// to full-resolution pixel `query_uv`. Window indices are clamped at the
/// border; clamped repeats and invalid cells are dropped and the remainder is
/// padded with the nearest member (flagged duplicate). An all-invalid window
/// falls back to the nearest valid cell of the level.
inline NeighborSet fixed_2d_neighbors(const CloudGrid& grid, const SpatialIndex& index, const Vec3& query,
                                      const Vec2& query_uv, int radius) {
  require(radius >= 0, ErrorCode::kConfig, "window radius must be >= 0");
  auto to_cell = [&](double pixel, int extent) {
    const double g = std::round(pixel / grid.stride);
    if (!std::isfinite(g)) return 0;
    return static_cast<int>(std::clamp(g, 0.0, static_cast<double>(extent - 1)));
  };
  const int col = to_cell(query_uv.x(), grid.width);
  const int row = to_cell(query_uv.y(), grid.height);
  std::vector<std::pair<double, std::int32_t>> members;
  for (int dr = -radius; dr <= radius; ++dr) {
    for (int dc = -radius; dc <= radius; ++dc) {
      const int r = std::clamp(row + dr, 0, grid.height - 1);
      const int c = std::clamp(col + dc, 0, grid.width - 1);
      const auto id = static_cast<std::int32_t>(grid.index(r, c));
      if (!grid.valid[id]) continue;
      members.emplace_back((grid.coords[id] - query).squaredNorm(), id);
    }
  }
  std::sort(members.begin(), members.end());
  members.erase(std::unique(members.begin(), members.end()), members.end());
  const std::size_t k = std::size_t(2 * radius + 1) * (2 * radius + 1);
  NeighborSet out;
  if (members.empty()) {
    out = index.query(query, 1);
  } else {
    for (const auto& [d2, id] : members) out.push(id, grid.coords[id] - query, std::sqrt(d2), false);
  }
  out.pad_to(k);
  return out;
}

}  // namespace tapip3d
