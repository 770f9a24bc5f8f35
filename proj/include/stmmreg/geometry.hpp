#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <vector>

namespace stmmreg {

using Point3 = Eigen::Vector3d;

/// Rigid motion p -> rotation * p + translation.
struct RigidTransform {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  static RigidTransform identity() { return {}; }
  static RigidTransform from_axis_angle(const Eigen::Vector3d& axis, double angle,
                                        const Eigen::Vector3d& translation = Eigen::Vector3d::Zero());
  /// Intrinsic x-y-z Euler composition: R = Rx(ax) * Ry(ay) * Rz(az).
  static RigidTransform from_euler_xyz(double ax, double ay, double az,
                                       const Eigen::Vector3d& translation = Eigen::Vector3d::Zero());

  RigidTransform inverse() const;

  /// Largest of max|R^T R - I| and |det(R) - 1|.
  double orthonormality_defect() const;
  bool is_valid(double tol = 1e-9) const;

  /// Nearest rotation in Frobenius norm (polar factor); translation kept.
  RigidTransform orthonormalized() const;
};

/// One view's points in its local frame. `id` is the 1-based view index.
struct PointSet {
  int id = 0;
  std::vector<Point3> points;
};

/// Uniform disturbance intervals for initial transforms. Rotation half-width
/// is in radians per Euler axis; translation half-width is in multiples of
/// the scene resolution d_r, applied per coordinate.
struct PerturbationSpec {
  double rotation_interval = 0.0;
  double translation_interval = 0.0;
  std::uint64_t seed = 0;
};

Point3 apply_transform(const RigidTransform& transform, const Point3& point);

/// compose(A, B) maps p to A(B(p)).
RigidTransform compose(const RigidTransform& outer, const RigidTransform& inner);

/// Disturbed starting estimate: rotation = delta.rotation * T.rotation,
/// translation = T.translation + delta.translation. Note the translation is
/// added component-wise, not rotated through delta.
RigidTransform perturb_transform(const RigidTransform& transform, const RigidTransform& delta);

/// Angle of the rotation in [0, pi], computed as atan2 of the sine recovered
/// from the skew part and the cosine from the trace; exact identities give
/// exactly 0, and round-off near the branch points cannot produce NaN.
double rotation_angle(const Eigen::Matrix3d& rotation);

/// Mean over views of the relative rotation angle between estimate and truth.
double rotation_error(const std::vector<RigidTransform>& estimated,
                      const std::vector<RigidTransform>& ground_truth);

/// Mean over views of the translation distance between estimate and truth.
double translation_error(const std::vector<RigidTransform>& estimated,
                         const std::vector<RigidTransform>& ground_truth);

/// Draws a perturbation: three Euler angles uniform in
/// [-rotation_interval, rotation_interval] (x-y-z intrinsic) and translation
/// components uniform in [-translation_interval, translation_interval] * resolution.
RigidTransform sample_perturbation(const PerturbationSpec& spec, double resolution,
                                   std::mt19937_64& rng);

/// Same, seeding a fresh generator from spec.seed.
RigidTransform sample_perturbation(const PerturbationSpec& spec, double resolution);

}  // namespace stmmreg
