#include "stmmreg/stmm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace stmmreg {

void MixtureParams::validate() const {
  if (!(sigma2 > 0.0) || !std::isfinite(sigma2)) {
    throw std::invalid_argument("sigma2 must be positive and finite");
  }
  if (!(dof > 0.0) || !std::isfinite(dof)) {
    throw std::invalid_argument("degrees of freedom must be positive and finite");
  }
}

double gaussian_log_pdf(const Point3& x, const Point3& mu, double sigma2) {
  if (!(sigma2 > 0.0)) {
    throw std::invalid_argument("sigma2 must be positive");
  }
  constexpr double d = MixtureParams::dim;
  const double r2 = (x - mu).squaredNorm();
  return -0.5 * d * std::log(2.0 * std::numbers::pi * sigma2) - 0.5 * r2 / sigma2;
}

double t_log_normalizer(const MixtureParams& params) {
  constexpr double d = MixtureParams::dim;
  const double v = params.dof;
  return std::lgamma((v + d) / 2.0) - std::lgamma(v / 2.0) -
         0.5 * d * std::log(std::numbers::pi * v) - 0.5 * d * std::log(params.sigma2);
}

double t_log_pdf(const Point3& x, const Point3& mu, const MixtureParams& params) {
  params.validate();
  constexpr double d = MixtureParams::dim;
  const double v = params.dof;
  const double r2 = (x - mu).squaredNorm();
  return t_log_normalizer(params) - 0.5 * (v + d) * std::log1p(r2 / (v * params.sigma2));
}

double gamma_pdf(double u, double alpha, double beta) {
  if (!(alpha > 0.0) || !(beta > 0.0)) {
    throw std::invalid_argument("gamma shape and rate must be positive");
  }
  if (u <= 0.0) return 0.0;
  return std::exp(alpha * std::log(beta) + (alpha - 1.0) * std::log(u) - beta * u -
                  std::lgamma(alpha));
}

void softmax_in_place(std::span<double> log_values) {
  double max_lv = -std::numeric_limits<double>::infinity();
  for (double lv : log_values) max_lv = std::max(max_lv, lv);
  double sum = 0.0;
  for (double& lv : log_values) {
    lv = std::exp(lv - max_lv);
    sum += lv;
  }
  for (double& lv : log_values) lv /= sum;
}

double mixture_density(const Point3& x, const std::vector<Point3>& centroids,
                       const MixtureParams& params) {
  if (centroids.empty()) {
    throw std::invalid_argument("mixture needs at least one centroid");
  }
  params.validate();
  double max_lp = -std::numeric_limits<double>::infinity();
  std::vector<double> lp(centroids.size());
  for (std::size_t j = 0; j < centroids.size(); ++j) {
    lp[j] = t_log_pdf(x, centroids[j], params);
    max_lp = std::max(max_lp, lp[j]);
  }
  double sum = 0.0;
  for (double v : lp) sum += std::exp(v - max_lp);
  return std::exp(max_lp + std::log(sum) - std::log(static_cast<double>(centroids.size())));
}

std::vector<double> posterior_z(const Point3& x, const std::vector<Point3>& centroids,
                                const MixtureParams& params) {
  if (centroids.empty()) {
    throw std::invalid_argument("mixture needs at least one centroid");
  }
  params.validate();
  std::vector<double> lp(centroids.size());
  for (std::size_t j = 0; j < centroids.size(); ++j) {
    lp[j] = t_log_pdf(x, centroids[j], params);
  }
  softmax_in_place(lp);
  return lp;
}

double expected_u(double delta2, const MixtureParams& params) {
  params.validate();
  if (delta2 < 0.0 || !std::isfinite(delta2)) {
    throw std::invalid_argument("squared Mahalanobis distance must be non-negative");
  }
  constexpr double d = MixtureParams::dim;
  return (params.dof + d) / (params.dof + delta2);
}

double robust_posterior(double posterior, double scale_expectation) {
  return posterior * scale_expectation;
}

}  // namespace stmmreg
