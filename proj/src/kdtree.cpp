#include "stmmreg/kdtree.hpp"

#include <algorithm>
#include <limits>
#include <stdexcept>

namespace stmmreg {

namespace {

// Ranges at or below this size become leaf buckets scanned linearly; the
// contiguous coordinate arrays make the scan cheaper than further splits.
constexpr int kBucketSize = 16;

// All candidate distances funnel through one expression so that seeded and
// unseeded searches round identically.
inline double squared_distance(double x, double y, double z, const Point3& query) {
  const double dx = x - query.x();
  const double dy = y - query.y();
  const double dz = z - query.z();
  return dx * dx + dy * dy + dz * dz;
}

}  // namespace

KdIndex KdIndex::build(const PointSet& set) { return build(set.points, set.id); }

KdIndex KdIndex::build(const std::vector<Point3>& points, int source_view) {
  if (points.empty()) {
    throw std::invalid_argument("cannot build an index over an empty point set");
  }
  KdIndex index;
  index.source_view_ = source_view;
  index.points_ = points;
  const int n = static_cast<int>(points.size());
  index.px_.resize(n);
  index.py_.resize(n);
  index.pz_.resize(n);
  index.idx_.resize(n);
  index.axis_.assign(n, 0);

  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  index.build_range(order, 0, n, 1);

  for (int slot = 0; slot < n; ++slot) {
    const Point3& p = points[order[slot]];
    index.px_[slot] = p.x();
    index.py_[slot] = p.y();
    index.pz_[slot] = p.z();
    index.idx_[slot] = order[slot];
  }
  return index;
}

void KdIndex::build_range(std::vector<int>& order, int lo, int hi, int depth) {
  if (hi - lo <= 0) return;
  depth_ = std::max(depth_, depth);
  if (hi - lo <= kBucketSize) return;

  Point3 mins = points_[order[lo]];
  Point3 maxs = mins;
  for (int k = lo + 1; k < hi; ++k) {
    mins = mins.cwiseMin(points_[order[k]]);
    maxs = maxs.cwiseMax(points_[order[k]]);
  }
  const Point3 spread = maxs - mins;
  int axis = 0;
  if (spread.y() > spread[axis]) axis = 1;
  if (spread.z() > spread[axis]) axis = 2;

  const int mid = (lo + hi) / 2;
  std::nth_element(order.begin() + lo, order.begin() + mid, order.begin() + hi,
                   [this, axis](int a, int b) {
                     const double ca = points_[a][axis];
                     const double cb = points_[b][axis];
                     return ca < cb || (ca == cb && a < b);
                   });
  axis_[mid] = static_cast<std::uint8_t>(axis);
  build_range(order, lo, mid, depth + 1);
  build_range(order, mid + 1, hi, depth + 1);
}

// `box_d2` is a lower bound on the squared distance from the query to any
// point in [lo, hi): the sum over axes of the squared gap between the query
// and the range's splitting slabs, tracked incrementally in `axis_gap2`.
// Subtrees are pruned only when the bound strictly exceeds the best squared
// distance, so equidistant candidates stay reachable and the smallest-index
// tie rule gives the same answer as a full scan.
void KdIndex::search(const Point3& query, int lo, int hi, int excluded, double box_d2,
                     double* axis_gap2, double& best_d2, int& best_idx) const {
  if (hi - lo <= kBucketSize) {
    for (int slot = lo; slot < hi; ++slot) {
      const double d2 = squared_distance(px_[slot], py_[slot], pz_[slot], query);
      const int original = idx_[slot];
      if (original != excluded &&
          (d2 < best_d2 || (d2 == best_d2 && original < best_idx))) {
        best_d2 = d2;
        best_idx = original;
      }
    }
    return;
  }

  const int mid = (lo + hi) / 2;
  const double d2 = squared_distance(px_[mid], py_[mid], pz_[mid], query);
  const int original = idx_[mid];
  if (original != excluded &&
      (d2 < best_d2 || (d2 == best_d2 && original < best_idx))) {
    best_d2 = d2;
    best_idx = original;
  }

  const int axis = axis_[mid];
  const double split = axis == 0 ? px_[mid] : (axis == 1 ? py_[mid] : pz_[mid]);
  const double delta = query[axis] - split;
  const int near_lo = delta < 0.0 ? lo : mid + 1;
  const int near_hi = delta < 0.0 ? mid : hi;
  const int far_lo = delta < 0.0 ? mid + 1 : lo;
  const int far_hi = delta < 0.0 ? hi : mid;

  search(query, near_lo, near_hi, excluded, box_d2, axis_gap2, best_d2, best_idx);

  const double gap2 = delta * delta;
  const double far_box_d2 = box_d2 - axis_gap2[axis] + gap2;
  if (far_box_d2 <= best_d2) {
    const double saved = axis_gap2[axis];
    axis_gap2[axis] = gap2;
    search(query, far_lo, far_hi, excluded, far_box_d2, axis_gap2, best_d2, best_idx);
    axis_gap2[axis] = saved;
  }
}

NearestHit KdIndex::nearest(const Point3& query) const {
  double best_d2 = std::numeric_limits<double>::infinity();
  int best_idx = std::numeric_limits<int>::max();
  double axis_gap2[3] = {0.0, 0.0, 0.0};
  search(query, 0, size(), -1, 0.0, axis_gap2, best_d2, best_idx);
  return {best_idx, best_d2};
}

NearestHit KdIndex::nearest(const Point3& query, int hint) const {
  // Seeding with a concrete candidate keeps the result identical to the
  // unseeded search: every point at distance <= the seed remains reachable,
  // and the tie rule already prefers smaller indices.
  const Point3& seed = points_[hint];
  double best_d2 = squared_distance(seed.x(), seed.y(), seed.z(), query);
  int best_idx = hint;
  double axis_gap2[3] = {0.0, 0.0, 0.0};
  search(query, 0, size(), -1, 0.0, axis_gap2, best_d2, best_idx);
  return {best_idx, best_d2};
}

NearestHit KdIndex::nearest_excluding(const Point3& query, int excluded) const {
  if (size() < 2) {
    throw std::invalid_argument("nearest_excluding needs at least 2 points");
  }
  double best_d2 = std::numeric_limits<double>::infinity();
  int best_idx = std::numeric_limits<int>::max();
  double axis_gap2[3] = {0.0, 0.0, 0.0};
  search(query, 0, size(), excluded, 0.0, axis_gap2, best_d2, best_idx);
  return {best_idx, best_d2};
}

}  // namespace stmmreg
