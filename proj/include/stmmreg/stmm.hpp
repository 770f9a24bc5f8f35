#pragma once

#include "stmmreg/geometry.hpp"

#include <span>
#include <vector>

namespace stmmreg {

/// Shared mixture parameters: isotropic covariance sigma2 * I and fixed
/// degrees of freedom. dim is the ambient dimension d.
struct MixtureParams {
  double sigma2 = 1.0;
  double dof = 3.0;
  static constexpr int dim = 3;

  void validate() const;  // throws std::invalid_argument on non-positive values
};

/// log N(x; mu, sigma2 * I) in d = 3.
double gaussian_log_pdf(const Point3& x, const Point3& mu, double sigma2);

/// Log normalizing constant of the multivariate t density with isotropic
/// scale: lgamma((v+d)/2) - lgamma(v/2) - (d/2) log(pi v) - (d/2) log(sigma2).
double t_log_normalizer(const MixtureParams& params);

/// log t_v(x; mu, sigma2 * I) in d = 3.
double t_log_pdf(const Point3& x, const Point3& mu, const MixtureParams& params);

/// Gamma(u; alpha, beta) density in the shape/rate parameterization.
/// Returns 0 for u <= 0; throws std::invalid_argument on non-positive
/// alpha or beta.
double gamma_pdf(double u, double alpha, double beta);

/// Equal-weight t mixture over the given centroids: the weight of every
/// component is 1 / centroids.size().
double mixture_density(const Point3& x, const std::vector<Point3>& centroids,
                       const MixtureParams& params);

/// Posterior responsibility of each component for x, computed in log space
/// with a log-sum-exp reduction; entries sum to 1.
std::vector<double> posterior_z(const Point3& x, const std::vector<Point3>& centroids,
                                const MixtureParams& params);

/// In-place softmax of log densities via log-sum-exp; values must be finite
/// or -inf (at least one finite).
void softmax_in_place(std::span<double> log_values);

/// Latent scale expectation (v + d) / (v + delta2) for squared Mahalanobis
/// distance delta2 >= 0.
double expected_u(double delta2, const MixtureParams& params);

/// Combined weight P * U used by the rigid update.
double robust_posterior(double posterior, double scale_expectation);

/// Per-(point, component) posterior bundle.
struct PosteriorTriple {
  int correspondence = -1;        // index of the matched point in the other view
  double posterior = 0.0;         // P
  double scale_expectation = 0.0; // U
  double robust_weight = 0.0;     // P * U
};

}  // namespace stmmreg
