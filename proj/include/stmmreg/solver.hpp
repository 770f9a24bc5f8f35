#pragma once

#include "stmmreg/geometry.hpp"
#include "stmmreg/kdtree.hpp"
#include "stmmreg/stmm.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace stmmreg {

enum class Mode { student_t, gaussian };

std::string to_string(Mode mode);

/// Joint model state: one rigid transform per view plus the shared isotropic
/// variance. An empty transform list means "all identity"; sigma2 <= 0 means
/// "initialize from the scene resolution".
struct ModelParams {
  std::vector<RigidTransform> transforms;
  double sigma2 = 0.0;
};

struct RegistrationConfig {
  double dof = 3.0;
  int max_iterations = 300;
  double tolerance = 5e-4;
  Mode mode = Mode::student_t;
  /// 1-based position of the view held at its initial transform.
  int anchor_view = 1;
  /// Refresh correspondences before each view's rigid update instead of once
  /// per sweep.
  bool estep_per_view = false;
  /// Divide the variance update by the robust weight total instead of the
  /// posterior total.
  bool symmetric_denominator = false;
  int threads = 1;
  /// Record the weighted alignment objective around every rigid update.
  bool track_objective = true;
  std::uint64_t seed = 12345;

  void validate(int num_views) const;
};

/// One (point, other-view) row of the correspondence table. residual2 is the
/// squared world-frame distance to the matched point; delta2 = residual2 /
/// sigma2 at the time the row was last refreshed.
struct EStepEntry {
  int correspondence = -1;
  double posterior = 0.0;
  double scale_expectation = 1.0;
  double robust_weight = 0.0;
  double residual2 = 0.0;
  double delta2 = 0.0;
};

/// Correspondence table for all views. Rows for view i live in entries[i],
/// laid out point-major: entries[i][l * (M - 1) + slot], where slot runs over
/// the other views in ascending order.
struct EStepResult {
  int num_views = 0;
  std::vector<std::vector<EStepEntry>> entries;

  static int slot_of(int view, int other) { return other < view ? other : other - 1; }
  static int other_view(int view, int slot) { return slot < view ? slot : slot + 1; }
};

struct ObjectiveCheck {
  int sweep = 0;
  int view = 0;  // 1-based position
  double before = 0.0;
  double after = 0.0;
};

enum class Termination { converged, max_iterations };

struct RegistrationReport {
  std::vector<RigidTransform> transforms;
  double sigma2 = 0.0;
  int iterations = 0;
  Termination termination = Termination::max_iterations;
  /// Objective value after each completed sweep.
  std::vector<double> q_trajectory;
  /// Objective at the initial parameters, before the first rigid update.
  double q_initial = 0.0;
  double resolution = 0.0;
  double sigma2_initial = 0.0;
  int sigma_floor_hits = 0;
  std::vector<ObjectiveCheck> objective_checks;
};

/// Mean nearest-neighbor distance within each set, averaged over sets (d_r).
/// Every set needs at least 2 points.
double average_resolution(const std::vector<PointSet>& sets);

/// Initial variance d_r^2.
double initialize_sigma(const std::vector<PointSet>& sets);

/// Builds the correspondence table at the given parameters. indices[i] must
/// be built over view i's points transformed by params.transforms[i], in the
/// set's point order. `previous`, when given, seeds each nearest-neighbor
/// query with the prior correspondence.
EStepResult e_step(const std::vector<PointSet>& sets, const ModelParams& params,
                   const std::vector<KdIndex>& indices, const RegistrationConfig& config,
                   const EStepResult* previous = nullptr);

struct WeightedPair {
  Point3 source;
  Point3 target;
  double weight = 0.0;
};

/// Weighted rigid alignment: minimizes sum_k w_k |R s_k + t - y_k|^2 over
/// rotations with det(R) = +1. Throws DegenerateGeometryError when fewer
/// than 3 pairs carry positive weight or the weighted spread is collinear.
RigidTransform m_step_transform(std::span<const WeightedPair> pairs);

/// Shared variance update from the table's weights and the residuals
/// recomputed under params.transforms. Result is clamped from below by
/// `floor` when floor > 0.
double update_covariance(const EStepResult& estep, const std::vector<PointSet>& sets,
                         const ModelParams& params, const RegistrationConfig& config,
                         double floor = 0.0);

/// Recomputes residual2 under params.transforms and delta2 against
/// params.sigma2, keeping correspondences and weights fixed.
void refresh_alignment(EStepResult& estep, const std::vector<PointSet>& sets,
                       const ModelParams& params);

/// Expected complete-data log-likelihood of the table at the given variance.
/// Mahalanobis terms are formed from each row's residual2 divided by sigma2.
/// Accumulated serially in table order (view, point, slot ascending), so the
/// value does not depend on the thread count.
double q_value(const EStepResult& estep, double sigma2, const RegistrationConfig& config);

/// Joint EM registration of all views. The anchor view keeps its initial
/// transform; every other view is updated sequentially within each sweep
/// against the most recent positions of its peers. Stops when the per-view
/// objective change |Q_k - Q_{k-1}| / M falls below config.tolerance.
RegistrationReport register_views(const std::vector<PointSet>& sets,
                                  const ModelParams& initial,
                                  const RegistrationConfig& config);

}  // namespace stmmreg
