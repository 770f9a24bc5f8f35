#include "stmmreg/eval.hpp"

#include "stmmreg/errors.hpp"
#include "stmmreg/io.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace stmmreg {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

// Sector widths are quantized to a grid of kSubdiv arcs per view so that
// overlap regions can carry shared sample points.
constexpr int kSubdiv = 8;

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c, std::uint64_t d) {
  std::uint64_t state = a;
  auto absorb = [&state](std::uint64_t x) {
    state ^= x + 0x9e3779b97f4a7c15ULL + (state << 6) + (state >> 2);
    state += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    state = z ^ (z >> 31);
  };
  absorb(b);
  absorb(c);
  absorb(d);
  return state;
}

double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(rng);
}

/// Box-Muller pairs; hand-rolled so the draw sequence is identical across
/// standard libraries.
class NormalStream {
 public:
  explicit NormalStream(std::mt19937_64& rng) : rng_(rng) {}

  double next(double stddev) {
    if (have_spare_) {
      have_spare_ = false;
      return spare_ * stddev;
    }
    const double u1 = std::max(uniform01(rng_), 0x1.0p-53);
    const double u2 = uniform01(rng_);
    const double radius = std::sqrt(-2.0 * std::log(u1));
    spare_ = radius * std::sin(kTwoPi * u2);
    have_spare_ = true;
    return radius * std::cos(kTwoPi * u2) * stddev;
  }

 private:
  std::mt19937_64& rng_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

Point3 sample_surface_point(Surface surface, double theta, std::mt19937_64& rng) {
  switch (surface) {
    case Surface::sphere: {
      const double u = uniform(rng, -1.0, 1.0);
      const double s = std::sqrt(std::max(0.0, 1.0 - u * u));
      return {s * std::cos(theta), s * std::sin(theta), u};
    }
    case Surface::torus: {
      const double psi = uniform(rng, 0.0, kTwoPi);
      const double ring = 1.0 + 0.4 * std::cos(psi);
      return {ring * std::cos(theta), ring * std::sin(theta), 0.4 * std::sin(psi)};
    }
    case Surface::wavy_grid: {
      const double rho = std::sqrt(uniform01(rng));
      const double x = rho * std::cos(theta);
      const double y = rho * std::sin(theta);
      const double z = 0.3 * std::sin(2.3 * x + 0.7) * std::cos(1.9 * y) +
                       0.12 * std::sin(3.4 * y);
      return {x, y, z};
    }
  }
  throw std::invalid_argument("unknown surface");
}

std::string format_level(double value) {
  if (std::isinf(value)) return "inf";
  char buffer[32];
  std::snprintf(buffer, sizeof(buffer), "%g", value);
  return buffer;
}

double median_of(std::vector<double> values) {
  if (values.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

TrialRecord run_trial(const std::vector<PointSet>& sets,
                      const std::vector<RigidTransform>& ground_truth,
                      const std::vector<RigidTransform>& init,
                      const RegistrationConfig& config, const std::string& label, int repeat) {
  TrialRecord record;
  record.level = label;
  record.repeat = repeat;
  record.mode = config.mode;
  const auto start = std::chrono::steady_clock::now();
  try {
    ModelParams initial;
    initial.transforms = init;
    const RegistrationReport report = register_views(sets, initial, config);
    record.e_r_rad = rotation_error(report.transforms, ground_truth);
    record.e_t = translation_error(report.transforms, ground_truth);
    record.iterations = report.iterations;
    record.ok = true;
  } catch (const std::exception& e) {
    record.ok = false;
    record.error = e.what();
    record.e_r_rad = std::numeric_limits<double>::quiet_NaN();
    record.e_t = std::numeric_limits<double>::quiet_NaN();
  }
  record.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return record;
}

std::vector<RigidTransform> perturbed_init(const std::vector<RigidTransform>& ground_truth,
                                           const PerturbationSpec& spec, double resolution,
                                           int anchor, std::mt19937_64& rng) {
  std::vector<RigidTransform> init = ground_truth;
  for (std::size_t i = 0; i < init.size(); ++i) {
    if (static_cast<int>(i) == anchor) continue;  // the anchor keeps its pose
    init[i] = perturb_transform(ground_truth[i], sample_perturbation(spec, resolution, rng));
  }
  return init;
}

}  // namespace

Surface surface_from_string(const std::string& name) {
  if (name == "sphere") return Surface::sphere;
  if (name == "torus") return Surface::torus;
  if (name == "wavy-grid" || name == "wavy_grid") return Surface::wavy_grid;
  throw std::invalid_argument("unknown surface '" + name + "' (sphere, torus, wavy-grid)");
}

std::string to_string(Surface surface) {
  switch (surface) {
    case Surface::sphere: return "sphere";
    case Surface::torus: return "torus";
    case Surface::wavy_grid: return "wavy-grid";
  }
  return "unknown";
}

SyntheticScene generate_scene(Surface surface, int views, int points_per_view,
                              double overlap_fraction, std::uint64_t seed) {
  if (views < 2) {
    throw std::invalid_argument("a scene needs at least 2 views");
  }
  if (points_per_view < 100) {
    throw std::invalid_argument("a scene needs at least 100 points per view");
  }
  if (!(overlap_fraction > 0.3) || overlap_fraction > 1.0) {
    throw std::invalid_argument("overlap fraction must lie in (0.3, 1]");
  }
  const int arcs = views * kSubdiv;
  int window = static_cast<int>(std::llround(overlap_fraction * arcs));
  window = std::clamp(window, 1, arcs);
  if (window <= kSubdiv) {
    throw std::invalid_argument(
        "overlap fraction " + format_level(overlap_fraction) + " leaves adjacent views with no "
        "shared region for " + std::to_string(views) + " views");
  }

  SyntheticScene scene;
  scene.surface = surface;
  scene.views = views;
  scene.points_per_view = points_per_view;
  scene.overlap_fraction = overlap_fraction;
  scene.seed = seed;

  std::mt19937_64 rng(seed);
  const double arc_width = kTwoPi / arcs;
  const int per_arc = points_per_view / window;
  const int extras = points_per_view - per_arc * window;

  // Shared pool: every arc carries the same points in every view covering it,
  // so the ground truth aligns overlap regions exactly.
  std::vector<std::vector<Point3>> pool(arcs);
  for (int a = 0; a < arcs; ++a) {
    pool[a].reserve(per_arc);
    for (int k = 0; k < per_arc; ++k) {
      const double theta = (a + uniform01(rng)) * arc_width;
      pool[a].push_back(sample_surface_point(surface, theta, rng));
    }
  }

  scene.ground_truth.resize(views);
  scene.ground_truth[0] = RigidTransform::identity();
  for (int i = 1; i < views; ++i) {
    const double ax = uniform(rng, -0.4, 0.4);
    const double ay = uniform(rng, -0.4, 0.4);
    const double az = uniform(rng, -0.4, 0.4);
    Eigen::Vector3d t;
    t << uniform(rng, -0.4, 0.4), uniform(rng, -0.4, 0.4), uniform(rng, -0.4, 0.4);
    scene.ground_truth[i] = RigidTransform::from_euler_xyz(ax, ay, az, t);
  }

  scene.sets.resize(views);
  for (int i = 0; i < views; ++i) {
    PointSet& set = scene.sets[i];
    set.id = i + 1;
    set.points.reserve(points_per_view);
    const RigidTransform to_local = scene.ground_truth[i].inverse();
    const int start = i * kSubdiv;
    for (int k = 0; k < window; ++k) {
      for (const Point3& p : pool[(start + k) % arcs]) {
        set.points.push_back(apply_transform(to_local, p));
      }
    }
    for (int k = 0; k < extras; ++k) {
      const double theta = start * arc_width + uniform01(rng) * window * arc_width;
      set.points.push_back(
          apply_transform(to_local, sample_surface_point(surface, theta, rng)));
    }
  }

  scene.resolution = average_resolution(scene.sets);
  return scene;
}

PointSet add_noise_snr(const PointSet& set, double snr_db, std::mt19937_64& rng) {
  if (std::isnan(snr_db)) {
    throw std::invalid_argument("SNR must not be NaN");
  }
  PointSet out = set;
  if (out.points.empty() || std::isinf(snr_db)) return out;

  Point3 centroid = Point3::Zero();
  for (const Point3& p : out.points) centroid += p;
  centroid /= static_cast<double>(out.points.size());
  double power = 0.0;
  for (const Point3& p : out.points) power += (p - centroid).squaredNorm();
  power /= static_cast<double>(out.points.size());

  const double noise_var = power * std::pow(10.0, -snr_db / 10.0);
  const double stddev = std::sqrt(noise_var);
  if (stddev == 0.0) return out;

  NormalStream normals(rng);
  for (Point3& p : out.points) {
    p.x() += normals.next(stddev);
    p.y() += normals.next(stddev);
    p.z() += normals.next(stddev);
  }
  return out;
}

PointSet add_outliers(const PointSet& set, double fraction, std::mt19937_64& rng) {
  if (fraction < 0.0 || fraction > 0.5) {
    throw std::invalid_argument("outlier fraction must lie in [0, 0.5]");
  }
  PointSet out = set;
  const std::size_t n = out.points.size();
  const std::size_t count = static_cast<std::size_t>(fraction * static_cast<double>(n));
  if (count == 0) return out;

  Point3 lo = out.points[0];
  Point3 hi = out.points[0];
  for (const Point3& p : out.points) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  const Point3 center = 0.5 * (lo + hi);
  const Point3 half = 0.75 * (hi - lo);  // bounding box scaled by 1.5

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng() % (n - i));
    std::swap(order[i], order[j]);
  }
  order.resize(count);
  std::sort(order.begin(), order.end());
  for (std::size_t idx : order) {
    Point3& p = out.points[idx];
    p.x() = center.x() + (2.0 * uniform01(rng) - 1.0) * half.x();
    p.y() = center.y() + (2.0 * uniform01(rng) - 1.0) * half.y();
    p.z() = center.z() + (2.0 * uniform01(rng) - 1.0) * half.z();
  }
  return out;
}

std::vector<Mode> ExperimentReport::modes() const {
  std::vector<Mode> out;
  for (const TrialRecord& trial : trials) {
    if (std::find(out.begin(), out.end(), trial.mode) == out.end()) {
      out.push_back(trial.mode);
    }
  }
  return out;
}

std::vector<LevelSummary> ExperimentReport::summarize() const {
  std::vector<LevelSummary> out;
  auto find_group = [&out](Mode mode, const std::string& level) -> LevelSummary& {
    for (LevelSummary& s : out) {
      if (s.mode == mode && s.level == level) return s;
    }
    out.push_back({});
    out.back().mode = mode;
    out.back().level = level;
    return out.back();
  };

  for (const TrialRecord& trial : trials) {
    LevelSummary& group = find_group(trial.mode, trial.level);
    ++group.trials;
    if (!trial.ok) ++group.failures;
  }
  for (LevelSummary& group : out) {
    std::vector<double> e_r, e_t, iters, secs;
    for (const TrialRecord& trial : trials) {
      if (trial.mode != group.mode || trial.level != group.level || !trial.ok) continue;
      e_r.push_back(trial.e_r_rad);
      e_t.push_back(trial.e_t);
      iters.push_back(trial.iterations);
      secs.push_back(trial.seconds);
    }
    auto mean = [](const std::vector<double>& v) {
      if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
      double s = 0.0;
      for (double x : v) s += x;
      return s / static_cast<double>(v.size());
    };
    auto stddev = [&mean](const std::vector<double>& v) {
      if (v.size() < 2) return 0.0;
      const double m = mean(v);
      double s = 0.0;
      for (double x : v) s += (x - m) * (x - m);
      return std::sqrt(s / static_cast<double>(v.size() - 1));
    };
    group.mean_e_r = mean(e_r);
    group.std_e_r = stddev(e_r);
    group.mean_e_t = mean(e_t);
    group.std_e_t = stddev(e_t);
    group.mean_iterations = mean(iters);
    group.mean_seconds = mean(secs);
    group.median_e_r = median_of(e_r);
  }
  return out;
}

void ExperimentReport::write_csv(const std::filesystem::path& path, Mode mode) const {
  std::ofstream out(path);
  if (!out) {
    throw IoError("cannot write " + path.string());
  }
  out << "level,repeat,e_r_rad,e_t,iters,seconds\n";
  char buffer[160];
  for (const TrialRecord& trial : trials) {
    if (trial.mode != mode) continue;
    std::snprintf(buffer, sizeof(buffer), "%s,%d,%.17g,%.17g,%d,%.6g\n", trial.level.c_str(),
                  trial.repeat, trial.e_r_rad, trial.e_t, trial.iterations, trial.seconds);
    out << buffer;
  }
  if (!out) {
    throw IoError("failed while writing " + path.string());
  }
}

void ExperimentReport::write_json(const std::filesystem::path& path) const {
  nlohmann::json doc;
  doc["protocol"] = protocol;
  doc["master_seed"] = master_seed;
  doc["repeats"] = repeats;
  doc["summary"] = nlohmann::json::array();
  for (const LevelSummary& s : summarize()) {
    doc["summary"].push_back({{"level", s.level},
                              {"mode", to_string(s.mode)},
                              {"trials", s.trials},
                              {"failures", s.failures},
                              {"mean_e_r_rad", s.mean_e_r},
                              {"std_e_r_rad", s.std_e_r},
                              {"median_e_r_rad", s.median_e_r},
                              {"mean_e_t", s.mean_e_t},
                              {"std_e_t", s.std_e_t},
                              {"mean_iterations", s.mean_iterations},
                              {"mean_seconds", s.mean_seconds}});
  }
  doc["trials"] = nlohmann::json::array();
  for (const TrialRecord& trial : trials) {
    doc["trials"].push_back({{"level", trial.level},
                             {"repeat", trial.repeat},
                             {"mode", to_string(trial.mode)},
                             {"ok", trial.ok},
                             {"e_r_rad", trial.e_r_rad},
                             {"e_t", trial.e_t},
                             {"iterations", trial.iterations},
                             {"seconds", trial.seconds},
                             {"error", trial.error}});
  }
  std::ofstream out(path);
  if (!out) {
    throw IoError("cannot write " + path.string());
  }
  out << doc.dump(2) << "\n";
  if (!out) {
    throw IoError("failed while writing " + path.string());
  }
}

ExperimentReport run_robustness_experiment(const SyntheticScene& scene,
                                           const std::vector<PerturbationSpec>& levels,
                                           int repeats, const RegistrationConfig& config,
                                           SweepAxis sweep) {
  if (levels.empty() || repeats < 1) {
    throw std::invalid_argument("robustness experiment needs levels and repeats >= 1");
  }
  config.validate(scene.views);
  const int anchor = config.anchor_view - 1;

  ExperimentReport report;
  report.protocol =
      sweep == SweepAxis::rotation ? "robustness-rotation" : "robustness-translation";
  report.master_seed = config.seed;
  report.repeats = repeats;

  for (std::size_t li = 0; li < levels.size(); ++li) {
    const PerturbationSpec& level = levels[li];
    const std::string label = format_level(
        sweep == SweepAxis::rotation ? level.rotation_interval : level.translation_interval);
    for (int r = 0; r < repeats; ++r) {
      std::mt19937_64 rng(mix_seed(config.seed, 1, li, static_cast<std::uint64_t>(r)));
      const std::vector<RigidTransform> init =
          perturbed_init(scene.ground_truth, level, scene.resolution, anchor, rng);
      report.trials.push_back(run_trial(scene.sets, scene.ground_truth, init, config, label, r));
    }
  }
  return report;
}

ExperimentReport run_noise_experiment(const SyntheticScene& scene,
                                      const std::vector<double>& snr_levels_db, int repeats,
                                      const RegistrationConfig& config,
                                      const std::vector<Mode>& modes,
                                      double outlier_fraction,
                                      const PerturbationSpec& init_perturbation) {
  if (snr_levels_db.empty() || repeats < 1 || modes.empty()) {
    throw std::invalid_argument("noise experiment needs SNR levels, modes, and repeats >= 1");
  }
  config.validate(scene.views);
  const int anchor = config.anchor_view - 1;

  ExperimentReport report;
  report.protocol = "noise";
  report.master_seed = config.seed;
  report.repeats = repeats;

  for (std::size_t mi = 0; mi < modes.size(); ++mi) {
    RegistrationConfig mode_config = config;
    mode_config.mode = modes[mi];
    for (std::size_t si = 0; si < snr_levels_db.size(); ++si) {
      const double snr = snr_levels_db[si];
      const std::string label = format_level(snr);
      for (int r = 0; r < repeats; ++r) {
        std::mt19937_64 rng(
            mix_seed(config.seed, 1000 + mi, si, static_cast<std::uint64_t>(r)));
        std::vector<PointSet> sets = scene.sets;
        for (PointSet& set : sets) {
          if (outlier_fraction > 0.0) set = add_outliers(set, outlier_fraction, rng);
          if (std::isfinite(snr)) set = add_noise_snr(set, snr, rng);
        }
        const std::vector<RigidTransform> init =
            perturbed_init(scene.ground_truth, init_perturbation, scene.resolution, anchor, rng);
        report.trials.push_back(
            run_trial(sets, scene.ground_truth, init, mode_config, label, r));
      }
    }
  }
  return report;
}

}  // namespace stmmreg
