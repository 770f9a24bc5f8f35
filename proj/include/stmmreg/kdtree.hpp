#pragma once

#include "stmmreg/geometry.hpp"

#include <cstdint>
#include <vector>

namespace stmmreg {

struct NearestHit {
  int index = -1;  // position in the source set's original point order
  double squared_distance = 0.0;
};

/// Static balanced 3-d tree over one view's points. Nodes split at the median
/// along the widest-spread axis of their range. Queries are exact; equidistant
/// candidates resolve to the smallest point index. Construction is
/// deterministic for a given point order.
class KdIndex {
 public:
  static KdIndex build(const PointSet& set);
  static KdIndex build(const std::vector<Point3>& points, int source_view);

  NearestHit nearest(const Point3& query) const;

  /// Same result as nearest(query); `hint` must be a valid point index and is
  /// used to seed the pruning bound, which shortens the search when the
  /// answer is likely unchanged from a previous query.
  NearestHit nearest(const Point3& query, int hint) const;

  /// Nearest point whose index differs from `excluded`. Requires size() >= 2.
  NearestHit nearest_excluding(const Point3& query, int excluded) const;

  int size() const { return static_cast<int>(idx_.size()); }
  int source_view() const { return source_view_; }
  /// Number of nodes on the longest root-to-leaf path.
  int depth() const { return depth_; }
  const Point3& point(int index) const { return points_[index]; }

 private:
  // Tree layout: the node of range [lo, hi) sits at slot mid = (lo + hi) / 2
  // with children [lo, mid) and [mid + 1, hi); small ranges are leaf buckets
  // scanned linearly. Coordinates are stored per slot; idx_ maps slots back
  // to original point indices.
  std::vector<double> px_, py_, pz_;
  std::vector<int> idx_;
  std::vector<std::uint8_t> axis_;
  std::vector<Point3> points_;  // original order
  int source_view_ = 0;
  int depth_ = 0;

  void build_range(std::vector<int>& order, int lo, int hi, int depth);
  void search(const Point3& query, int lo, int hi, int excluded, double box_d2,
              double* axis_gap2, double& best_d2, int& best_idx) const;
};

}  // namespace stmmreg
