#pragma once

#include "stmmreg/geometry.hpp"
#include "stmmreg/solver.hpp"

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace stmmreg {

enum class Surface { sphere, torus, wavy_grid };

Surface surface_from_string(const std::string& name);
std::string to_string(Surface surface);

/// Views cover overlapping angular sectors of one closed surface. Sector i is
/// centered at 2*pi*i/M with width 2*pi*overlap_fraction (quantized to an
/// internal arc grid). Points inside an overlap are shared verbatim between
/// the views covering it, so the ground truth is an exact joint alignment.
/// Each stored set is the sector's world points moved by the inverse of that
/// view's ground-truth transform; view 1's ground truth is the identity.
struct SyntheticScene {
  Surface surface = Surface::sphere;
  int views = 0;
  int points_per_view = 0;
  double overlap_fraction = 0.0;
  std::uint64_t seed = 0;
  std::vector<RigidTransform> ground_truth;
  std::vector<PointSet> sets;
  double resolution = 0.0;  // d_r of the stored sets
};

/// Requires views >= 2, points_per_view >= 100, overlap_fraction in (0.3, 1].
/// Throws std::invalid_argument when the sector width leaves adjacent views
/// without a shared region (overlap_fraction <= 1/views).
SyntheticScene generate_scene(Surface surface, int views, int points_per_view,
                              double overlap_fraction, std::uint64_t seed);

/// Additive Gaussian noise per coordinate at the given SNR in dB. Signal
/// power is the mean squared distance from the set centroid; the noise
/// variance per coordinate is power * 10^(-snr_db / 10).
PointSet add_noise_snr(const PointSet& set, double snr_db, std::mt19937_64& rng);

/// Replaces floor(fraction * size) points, chosen uniformly without
/// replacement, with draws from the set's bounding box scaled by 1.5 about
/// its center. Order-stable. fraction must lie in [0, 0.5].
PointSet add_outliers(const PointSet& set, double fraction, std::mt19937_64& rng);

struct TrialRecord {
  std::string level;  // label of the swept quantity ("0.03", "25", "inf")
  int repeat = 0;
  Mode mode = Mode::student_t;
  bool ok = false;
  double e_r_rad = 0.0;
  double e_t = 0.0;
  int iterations = 0;
  double seconds = 0.0;
  std::string error;  // failure message when ok is false
};

struct LevelSummary {
  std::string level;
  Mode mode = Mode::student_t;
  int trials = 0;
  int failures = 0;
  double mean_e_r = 0.0;
  double std_e_r = 0.0;
  double mean_e_t = 0.0;
  double std_e_t = 0.0;
  double mean_iterations = 0.0;
  double mean_seconds = 0.0;
  double median_e_r = 0.0;
};

struct ExperimentReport {
  std::string protocol;
  std::uint64_t master_seed = 0;
  int repeats = 0;
  std::vector<TrialRecord> trials;

  std::vector<Mode> modes() const;
  /// Aggregates successful trials per (mode, level), preserving first-seen
  /// level order. Failed trials are excluded from the statistics but counted.
  std::vector<LevelSummary> summarize() const;
  /// Rows "level,repeat,e_r_rad,e_t,iters,seconds" for one mode; failed
  /// trials carry "nan" metric fields.
  void write_csv(const std::filesystem::path& path, Mode mode) const;
  /// Full report: protocol metadata, per-level summaries, and all trials.
  void write_json(const std::filesystem::path& path) const;
};

enum class SweepAxis { rotation, translation };

/// Convergence-robustness protocol: per level and repeat, every non-anchor
/// view starts from its ground truth perturbed by a fresh draw, and the run
/// is scored against the ground truth. Failures are recorded, not raised.
/// Trial seeds derive from config.seed, the level index, and the repeat.
ExperimentReport run_robustness_experiment(const SyntheticScene& scene,
                                           const std::vector<PerturbationSpec>& levels,
                                           int repeats, const RegistrationConfig& config,
                                           SweepAxis sweep = SweepAxis::rotation);

/// Noise/outlier protocol crossed with solver modes. Each trial corrupts a
/// fresh copy of the scene (outliers first, then noise unless snr_db is
/// infinite) and starts from ground truth perturbed by init_perturbation.
/// An infinite SNR level is labeled "inf" and serves as the clean control.
ExperimentReport run_noise_experiment(const SyntheticScene& scene,
                                      const std::vector<double>& snr_levels_db, int repeats,
                                      const RegistrationConfig& config,
                                      const std::vector<Mode>& modes,
                                      double outlier_fraction = 0.0,
                                      const PerturbationSpec& init_perturbation = {0.02, 1.0, 0});

}  // namespace stmmreg
