#include "stmmreg/solver.hpp"

#include "stmmreg/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <thread>
#include <utility>

namespace stmmreg {

namespace {

constexpr double kDim = 3.0;

/// Runs fn(lo, hi) over contiguous chunks of [0, n); fn must only write state
/// owned by its own range.
template <typename Fn>
void parallel_chunks(std::size_t n, int threads, Fn&& fn) {
  if (threads <= 1 || n < 2) {
    fn(std::size_t{0}, n);
    return;
  }
  const std::size_t workers = std::min<std::size_t>(threads, n);
  const std::size_t chunk = (n + workers - 1) / workers;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t lo = w * chunk;
    const std::size_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
  }
  for (auto& t : pool) t.join();
}

std::vector<Point3> transformed(const PointSet& set, const RigidTransform& transform) {
  std::vector<Point3> out(set.points.size());
  for (std::size_t l = 0; l < set.points.size(); ++l) {
    out[l] = apply_transform(transform, set.points[l]);
  }
  return out;
}

void check_table_shape(const EStepResult& estep, const std::vector<PointSet>& sets) {
  const int m = static_cast<int>(sets.size());
  if (estep.num_views != m || static_cast<int>(estep.entries.size()) != m) {
    throw std::invalid_argument("correspondence table does not match the view count");
  }
  for (int i = 0; i < m; ++i) {
    if (estep.entries[i].size() != sets[i].points.size() * (sets.size() - 1)) {
      throw std::invalid_argument("correspondence table does not match the point counts");
    }
  }
}

/// Fills the table rows of one view against the given indices. Transform i is
/// applied to the queries; residuals live in the world frame. `prev_rows`
/// seeds each query with the previous correspondence.
void e_step_view(int view, const std::vector<PointSet>& sets,
                 const std::vector<RigidTransform>& transforms,
                 const std::vector<KdIndex>& indices, double sigma2,
                 const RegistrationConfig& config,
                 const std::vector<EStepEntry>* prev_rows,
                 std::vector<EStepEntry>& rows) {
  const int m = static_cast<int>(sets.size());
  const int others = m - 1;
  const std::size_t n = sets[view].points.size();
  rows.assign(n * others, EStepEntry{});

  const double v = config.dof;
  const bool student = config.mode == Mode::student_t;
  // Component log densities share their normalizer across slots, so only the
  // distance-dependent term enters the softmax.
  const double exponent = 0.5 * (v + kDim);

  parallel_chunks(n, config.threads, [&](std::size_t lo, std::size_t hi) {
    std::vector<double> lp(others);
    for (std::size_t l = lo; l < hi; ++l) {
      const Point3 query = apply_transform(transforms[view], sets[view].points[l]);
      EStepEntry* row = &rows[l * others];
      for (int slot = 0; slot < others; ++slot) {
        const int j = EStepResult::other_view(view, slot);
        const EStepEntry* prev =
            prev_rows && !prev_rows->empty() ? &(*prev_rows)[l * others + slot] : nullptr;
        const NearestHit hit =
            prev && prev->correspondence >= 0 && prev->correspondence < indices[j].size()
                ? indices[j].nearest(query, prev->correspondence)
                : indices[j].nearest(query);
        EStepEntry& e = row[slot];
        e.correspondence = hit.index;
        e.residual2 = hit.squared_distance;
        e.delta2 = hit.squared_distance / sigma2;
        lp[slot] = student ? -exponent * std::log1p(e.delta2 / v) : -0.5 * e.delta2;
      }
      softmax_in_place(lp);
      for (int slot = 0; slot < others; ++slot) {
        EStepEntry& e = row[slot];
        e.posterior = lp[slot];
        e.scale_expectation = student ? (v + kDim) / (v + e.delta2) : 1.0;
        e.robust_weight = e.posterior * e.scale_expectation;
      }
    }
  });
}

}  // namespace

std::string to_string(Mode mode) {
  return mode == Mode::student_t ? "student-t" : "gaussian";
}

void RegistrationConfig::validate(int num_views) const {
  if (!(dof > 0.0) || !std::isfinite(dof)) {
    throw std::invalid_argument("degrees of freedom must be positive and finite");
  }
  if (max_iterations < 1) {
    throw std::invalid_argument("max_iterations must be at least 1");
  }
  if (!(tolerance > 0.0)) {
    throw std::invalid_argument("tolerance must be positive");
  }
  if (anchor_view < 1 || anchor_view > num_views) {
    throw std::invalid_argument("anchor_view must lie in [1, number of views]");
  }
  if (threads < 1) {
    throw std::invalid_argument("threads must be at least 1");
  }
}

double average_resolution(const std::vector<PointSet>& sets) {
  if (sets.empty()) {
    throw std::invalid_argument("resolution needs at least one point set");
  }
  double total = 0.0;
  for (const PointSet& set : sets) {
    if (set.points.size() < 2) {
      throw std::invalid_argument("resolution needs at least 2 points per set");
    }
    const KdIndex index = KdIndex::build(set);
    double sum = 0.0;
    for (std::size_t l = 0; l < set.points.size(); ++l) {
      sum += std::sqrt(index.nearest_excluding(set.points[l], static_cast<int>(l)).squared_distance);
    }
    total += sum / static_cast<double>(set.points.size());
  }
  return total / static_cast<double>(sets.size());
}

double initialize_sigma(const std::vector<PointSet>& sets) {
  const double dr = average_resolution(sets);
  return dr * dr;
}

EStepResult e_step(const std::vector<PointSet>& sets, const ModelParams& params,
                   const std::vector<KdIndex>& indices, const RegistrationConfig& config,
                   const EStepResult* previous) {
  const int m = static_cast<int>(sets.size());
  if (m < 2) {
    throw std::invalid_argument("registration needs at least 2 views");
  }
  if (static_cast<int>(params.transforms.size()) != m ||
      static_cast<int>(indices.size()) != m) {
    throw std::invalid_argument("transforms and indices must match the view count");
  }
  for (int i = 0; i < m; ++i) {
    if (indices[i].size() != static_cast<int>(sets[i].points.size())) {
      throw std::invalid_argument("index size does not match its point set");
    }
  }
  if (!(params.sigma2 > 0.0)) {
    throw std::invalid_argument("sigma2 must be positive");
  }

  EStepResult out;
  out.num_views = m;
  out.entries.resize(m);
  for (int i = 0; i < m; ++i) {
    const std::vector<EStepEntry>* prev_rows =
        previous && previous->num_views == m ? &previous->entries[i] : nullptr;
    if (prev_rows && prev_rows->size() != sets[i].points.size() * (sets.size() - 1)) {
      prev_rows = nullptr;
    }
    e_step_view(i, sets, params.transforms, indices, params.sigma2, config, prev_rows,
                out.entries[i]);
  }
  return out;
}

RigidTransform m_step_transform(std::span<const WeightedPair> pairs) {
  double weight_sum = 0.0;
  int effective = 0;
  for (const WeightedPair& p : pairs) {
    if (p.weight < 0.0 || !std::isfinite(p.weight)) {
      throw std::invalid_argument("pair weights must be non-negative and finite");
    }
    if (p.weight > 0.0) {
      ++effective;
      weight_sum += p.weight;
    }
  }
  if (effective < 3 || !(weight_sum > 0.0)) {
    throw DegenerateGeometryError("rigid update needs at least 3 pairs with positive weight");
  }

  Eigen::Vector3d source_mean = Eigen::Vector3d::Zero();
  Eigen::Vector3d target_mean = Eigen::Vector3d::Zero();
  for (const WeightedPair& p : pairs) {
    source_mean += p.weight * p.source;
    target_mean += p.weight * p.target;
  }
  source_mean /= weight_sum;
  target_mean /= weight_sum;

  Eigen::Matrix3d h = Eigen::Matrix3d::Zero();
  for (const WeightedPair& p : pairs) {
    if (p.weight == 0.0) continue;
    h.noalias() += p.weight * (p.source - source_mean) * (p.target - target_mean).transpose();
  }

  Eigen::JacobiSVD<Eigen::Matrix3d> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Vector3d& sv = svd.singularValues();
  if (!(sv(0) > 0.0) || sv(1) <= sv(0) * 1e-12) {
    throw DegenerateGeometryError("weighted point spread is collinear; rotation is not unique");
  }
  Eigen::Matrix3d r = svd.matrixV() * svd.matrixU().transpose();
  if (r.determinant() < 0.0) {
    Eigen::Matrix3d v = svd.matrixV();
    v.col(2) *= -1.0;
    r = v * svd.matrixU().transpose();
  }
  return {r, target_mean - r * source_mean};
}

double update_covariance(const EStepResult& estep, const std::vector<PointSet>& sets,
                         const ModelParams& params, const RegistrationConfig& config,
                         double floor) {
  check_table_shape(estep, sets);
  const int m = static_cast<int>(sets.size());
  if (static_cast<int>(params.transforms.size()) != m) {
    throw std::invalid_argument("transforms must match the view count");
  }
  std::vector<std::vector<Point3>> world(m);
  for (int i = 0; i < m; ++i) world[i] = transformed(sets[i], params.transforms[i]);

  const int others = m - 1;
  double numerator = 0.0;
  double posterior_sum = 0.0;
  double robust_sum = 0.0;
  for (int i = 0; i < m; ++i) {
    const std::size_t n = sets[i].points.size();
    for (std::size_t l = 0; l < n; ++l) {
      for (int slot = 0; slot < others; ++slot) {
        const EStepEntry& e = estep.entries[i][l * others + slot];
        const int j = EStepResult::other_view(i, slot);
        const double r2 = (world[i][l] - world[j][e.correspondence]).squaredNorm();
        numerator += e.robust_weight * r2;
        posterior_sum += e.posterior;
        robust_sum += e.robust_weight;
      }
    }
  }
  const double denominator = kDim * (config.symmetric_denominator ? robust_sum : posterior_sum);
  if (!(denominator > 0.0)) {
    throw std::invalid_argument("covariance update has a zero weight total");
  }
  const double sigma2 = numerator / denominator;
  return floor > 0.0 ? std::max(sigma2, floor) : sigma2;
}

void refresh_alignment(EStepResult& estep, const std::vector<PointSet>& sets,
                       const ModelParams& params) {
  check_table_shape(estep, sets);
  if (!(params.sigma2 > 0.0)) {
    throw std::invalid_argument("sigma2 must be positive");
  }
  const int m = static_cast<int>(sets.size());
  std::vector<std::vector<Point3>> world(m);
  for (int i = 0; i < m; ++i) world[i] = transformed(sets[i], params.transforms[i]);

  const int others = m - 1;
  for (int i = 0; i < m; ++i) {
    const std::size_t n = sets[i].points.size();
    for (std::size_t l = 0; l < n; ++l) {
      for (int slot = 0; slot < others; ++slot) {
        EStepEntry& e = estep.entries[i][l * others + slot];
        const int j = EStepResult::other_view(i, slot);
        e.residual2 = (world[i][l] - world[j][e.correspondence]).squaredNorm();
        e.delta2 = e.residual2 / params.sigma2;
      }
    }
  }
}

double q_value(const EStepResult& estep, double sigma2, const RegistrationConfig& config) {
  if (!(sigma2 > 0.0)) {
    throw std::invalid_argument("sigma2 must be positive");
  }
  const double v = config.dof;
  const double log_sigma2 = std::log(sigma2);
  double q = 0.0;
  if (config.mode == Mode::gaussian) {
    const double c = -0.5 * kDim * std::log(2.0 * std::numbers::pi) - 0.5 * kDim * log_sigma2;
    for (const auto& rows : estep.entries) {
      for (const EStepEntry& e : rows) {
        q += e.posterior * (c - 0.5 * e.residual2 / sigma2);
      }
    }
    return q;
  }
  const double c = 0.5 * v * std::log(0.5 * v) - std::lgamma(0.5 * v) -
                   0.5 * kDim * std::log(2.0 * std::numbers::pi) - 0.5 * kDim * log_sigma2;
  for (const auto& rows : estep.entries) {
    for (const EStepEntry& e : rows) {
      const double u = e.scale_expectation;
      q += e.posterior * (c + (0.5 * (v + kDim) - 1.0) * std::log(u) - 0.5 * v * u -
                          0.5 * u * e.residual2 / sigma2);
    }
  }
  return q;
}

RegistrationReport register_views(const std::vector<PointSet>& sets,
                                  const ModelParams& initial,
                                  const RegistrationConfig& config) {
  const int m = static_cast<int>(sets.size());
  if (m < 2) {
    throw std::invalid_argument("registration needs at least 2 views");
  }
  config.validate(m);

  std::vector<RigidTransform> transforms;
  if (initial.transforms.empty()) {
    transforms.assign(m, RigidTransform::identity());
  } else if (static_cast<int>(initial.transforms.size()) == m) {
    transforms = initial.transforms;
  } else {
    throw std::invalid_argument("initial transform count does not match the view count");
  }
  for (int i = 0; i < m; ++i) {
    if (!transforms[i].is_valid(1e-6)) {
      throw std::invalid_argument("initial transform for view " + std::to_string(i + 1) +
                                  " is not a rigid motion");
    }
  }
  if (initial.sigma2 < 0.0 || !std::isfinite(initial.sigma2)) {
    throw std::invalid_argument("initial sigma2 must be finite and non-negative");
  }

  const double resolution = average_resolution(sets);
  const double floor = 1e-12 * resolution * resolution;
  const int anchor = config.anchor_view - 1;
  const int others = m - 1;

  RegistrationReport report;
  report.resolution = resolution;
  report.sigma2_initial = initial.sigma2 > 0.0 ? initial.sigma2 : resolution * resolution;

  ModelParams params;
  params.transforms = transforms;
  params.sigma2 = report.sigma2_initial;

  std::vector<std::vector<Point3>> world(m);
  std::vector<KdIndex> indices(m);
  EStepResult previous;
  bool have_previous = false;
  double q_prev = 0.0;

  for (int sweep = 1; sweep <= config.max_iterations; ++sweep) {
    for (int i = 0; i < m; ++i) {
      world[i] = transformed(sets[i], params.transforms[i]);
      indices[i] = KdIndex::build(world[i], sets[i].id != 0 ? sets[i].id : i + 1);
    }

    EStepResult estep;
    if (!config.estep_per_view) {
      estep = e_step(sets, params, indices, config, have_previous ? &previous : nullptr);
      if (sweep == 1) {
        q_prev = q_value(estep, params.sigma2, config);
        report.q_initial = q_prev;
      }
    } else {
      if (sweep == 1) {
        const EStepResult at_start =
            e_step(sets, params, indices, config, have_previous ? &previous : nullptr);
        q_prev = q_value(at_start, params.sigma2, config);
        report.q_initial = q_prev;
      }
      estep.num_views = m;
      estep.entries.resize(m);
    }

    for (int i = 0; i < m; ++i) {
      if (config.estep_per_view) {
        const std::vector<EStepEntry>* prev_rows =
            have_previous && previous.num_views == m ? &previous.entries[i] : nullptr;
        e_step_view(i, sets, params.transforms, indices, params.sigma2, config, prev_rows,
                    estep.entries[i]);
      }

      const std::vector<EStepEntry>& rows = estep.entries[i];
      const std::size_t n = sets[i].points.size();
      std::vector<WeightedPair> pairs;
      pairs.reserve(n * others);
      for (std::size_t l = 0; l < n; ++l) {
        for (int slot = 0; slot < others; ++slot) {
          const EStepEntry& e = rows[l * others + slot];
          const int j = EStepResult::other_view(i, slot);
          pairs.push_back({sets[i].points[l], world[j][e.correspondence], e.robust_weight});
        }
      }

      double before = 0.0;
      if (config.track_objective) {
        for (const WeightedPair& p : pairs) {
          before += p.weight *
                    (apply_transform(params.transforms[i], p.source) - p.target).squaredNorm();
        }
      }

      RigidTransform updated;
      try {
        updated = m_step_transform(pairs);
      } catch (const DegenerateGeometryError& err) {
        throw DegenerateGeometryError(std::string(err.what()) + " (view " +
                                          std::to_string(i + 1) + ")",
                                      i + 1);
      }
      params.transforms[i] = updated;
      world[i] = transformed(sets[i], updated);
      if (config.estep_per_view) {
        indices[i] = KdIndex::build(world[i], sets[i].id != 0 ? sets[i].id : i + 1);
      }

      if (config.track_objective) {
        double after = 0.0;
        for (const WeightedPair& p : pairs) {
          after += p.weight * (apply_transform(updated, p.source) - p.target).squaredNorm();
        }
        report.objective_checks.push_back({sweep, i + 1, before, after});
      }
    }

    // Every view moves during the M-steps, so the solution is determined only
    // up to a global rigid motion. Re-express the sweep's result in the gauge
    // where the anchor view keeps its initial pose; residuals, posteriors, and
    // Q are invariant under this conjugation.
    const RigidTransform gauge =
        compose(transforms[anchor], params.transforms[anchor].inverse());
    for (int i = 0; i < m; ++i) {
      params.transforms[i] = compose(gauge, params.transforms[i]);
    }
    params.transforms[anchor] = transforms[anchor];

    const double raw = update_covariance(estep, sets, params, config, 0.0);
    if (raw < floor) {
      params.sigma2 = floor;
      ++report.sigma_floor_hits;
    } else {
      params.sigma2 = raw;
    }
    refresh_alignment(estep, sets, params);

    const double q = q_value(estep, params.sigma2, config);
    report.q_trajectory.push_back(q);
    report.iterations = sweep;

    if (std::abs(q - q_prev) / static_cast<double>(m) < config.tolerance) {
      report.termination = Termination::converged;
      previous = std::move(estep);
      break;
    }
    q_prev = q;
    previous = std::move(estep);
    have_previous = true;
  }

  report.transforms = std::move(params.transforms);
  report.sigma2 = params.sigma2;
  return report;
}

}  // namespace stmmreg
