#include "stmmreg/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace stmmreg {

RigidTransform RigidTransform::from_axis_angle(const Eigen::Vector3d& axis, double angle,
                                               const Eigen::Vector3d& translation) {
  const double norm = axis.norm();
  if (!(norm > 0.0)) {
    throw std::invalid_argument("rotation axis must be non-zero");
  }
  RigidTransform out;
  out.rotation = Eigen::AngleAxisd(angle, axis / norm).toRotationMatrix();
  out.translation = translation;
  return out;
}

RigidTransform RigidTransform::from_euler_xyz(double ax, double ay, double az,
                                              const Eigen::Vector3d& translation) {
  RigidTransform out;
  out.rotation = (Eigen::AngleAxisd(ax, Eigen::Vector3d::UnitX()) *
                  Eigen::AngleAxisd(ay, Eigen::Vector3d::UnitY()) *
                  Eigen::AngleAxisd(az, Eigen::Vector3d::UnitZ()))
                     .toRotationMatrix();
  out.translation = translation;
  return out;
}

RigidTransform RigidTransform::inverse() const {
  RigidTransform out;
  out.rotation = rotation.transpose();
  out.translation = -(out.rotation * translation);
  return out;
}

double RigidTransform::orthonormality_defect() const {
  const Eigen::Matrix3d gram = rotation.transpose() * rotation;
  const double off = (gram - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
  const double det = std::abs(rotation.determinant() - 1.0);
  return std::max(off, det);
}

bool RigidTransform::is_valid(double tol) const {
  return rotation.allFinite() && translation.allFinite() && orthonormality_defect() <= tol;
}

RigidTransform RigidTransform::orthonormalized() const {
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(rotation, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d r = svd.matrixU() * svd.matrixV().transpose();
  if (r.determinant() < 0.0) {
    Eigen::Matrix3d u = svd.matrixU();
    u.col(2) *= -1.0;
    r = u * svd.matrixV().transpose();
  }
  return {r, translation};
}

Point3 apply_transform(const RigidTransform& transform, const Point3& point) {
  return transform.rotation * point + transform.translation;
}

RigidTransform compose(const RigidTransform& outer, const RigidTransform& inner) {
  RigidTransform out;
  out.rotation = outer.rotation * inner.rotation;
  out.translation = outer.rotation * inner.translation + outer.translation;
  return out;
}

RigidTransform perturb_transform(const RigidTransform& transform, const RigidTransform& delta) {
  RigidTransform out;
  out.rotation = delta.rotation * transform.rotation;
  out.translation = transform.translation + delta.translation;
  return out;
}

double rotation_angle(const Eigen::Matrix3d& rotation) {
  // atan2 of (sin, cos) instead of acos of the trace alone: acos loses half
  // the significant digits near 0 and pi, which matters when comparing
  // near-identical rotations, while the skew part recovers sin(theta) at
  // full precision. For an exact identity the result is exactly 0.
  const double c = (rotation.trace() - 1.0) / 2.0;
  const Eigen::Matrix3d skew = rotation - rotation.transpose();
  const double s = skew.norm() / (2.0 * std::numbers::sqrt2);
  return std::atan2(s, c);
}

namespace {

void check_same_length(const std::vector<RigidTransform>& estimated,
                       const std::vector<RigidTransform>& ground_truth) {
  if (estimated.empty() || estimated.size() != ground_truth.size()) {
    throw std::invalid_argument("transform lists must be non-empty and of equal length");
  }
}

}  // namespace

double rotation_error(const std::vector<RigidTransform>& estimated,
                      const std::vector<RigidTransform>& ground_truth) {
  check_same_length(estimated, ground_truth);
  double sum = 0.0;
  for (std::size_t i = 0; i < estimated.size(); ++i) {
    sum += rotation_angle(estimated[i].rotation * ground_truth[i].rotation.transpose());
  }
  return sum / static_cast<double>(estimated.size());
}

double translation_error(const std::vector<RigidTransform>& estimated,
                         const std::vector<RigidTransform>& ground_truth) {
  check_same_length(estimated, ground_truth);
  double sum = 0.0;
  for (std::size_t i = 0; i < estimated.size(); ++i) {
    sum += (estimated[i].translation - ground_truth[i].translation).norm();
  }
  return sum / static_cast<double>(estimated.size());
}

RigidTransform sample_perturbation(const PerturbationSpec& spec, double resolution,
                                   std::mt19937_64& rng) {
  if (spec.rotation_interval < 0.0 || spec.translation_interval < 0.0) {
    throw std::invalid_argument("perturbation intervals must be non-negative");
  }
  if (!(resolution > 0.0)) {
    throw std::invalid_argument("resolution must be positive");
  }
  auto uniform = [&rng](double half_width) {
    if (half_width == 0.0) return 0.0;
    return std::uniform_real_distribution<double>(-half_width, half_width)(rng);
  };
  const double ax = uniform(spec.rotation_interval);
  const double ay = uniform(spec.rotation_interval);
  const double az = uniform(spec.rotation_interval);
  Eigen::Vector3d t;
  const double half = spec.translation_interval * resolution;
  t << uniform(half), uniform(half), uniform(half);
  return RigidTransform::from_euler_xyz(ax, ay, az, t);
}

RigidTransform sample_perturbation(const PerturbationSpec& spec, double resolution) {
  std::mt19937_64 rng(spec.seed);
  return sample_perturbation(spec, resolution, rng);
}

}  // namespace stmmreg
