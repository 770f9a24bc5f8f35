#include "stmmreg/errors.hpp"
#include "stmmreg/eval.hpp"
#include "stmmreg/io.hpp"
#include "stmmreg/solver.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace stmmreg;

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  a ^= b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2);
  a *= 0xbf58476d1ce4e5b9ULL;
  return a ^ (a >> 31);
}

Mode parse_mode(const std::string& name) {
  if (name == "student-t" || name == "student_t" || name == "t") return Mode::student_t;
  if (name == "gaussian") return Mode::gaussian;
  throw std::invalid_argument("unknown mode '" + name + "' (student-t, gaussian)");
}

std::string file_tag(Mode mode) {
  return mode == Mode::student_t ? "student_t" : "gaussian";
}

int resolve_threads(int flag_value) {
  if (flag_value > 0) return flag_value;
  if (const char* env = std::getenv("STMMREG_THREADS")) {
    char* end = nullptr;
    const long value = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || value < 1) {
      throw std::invalid_argument("STMMREG_THREADS must be a positive integer");
    }
    return static_cast<int>(value);
  }
  return 1;
}

std::vector<double> parse_number_list(const std::string& text, const std::string& flag) {
  std::vector<double> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t comma = text.find(',', pos);
    const std::string token =
        text.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    if (token == "inf") {
      out.push_back(std::numeric_limits<double>::infinity());
    } else {
      char* end = nullptr;
      const double value = std::strtod(token.c_str(), &end);
      if (end == token.c_str() || *end != '\0') {
        throw std::invalid_argument(flag + ": bad number '" + token + "'");
      }
      out.push_back(value);
    }
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  if (out.empty()) {
    throw std::invalid_argument(flag + ": empty list");
  }
  return out;
}

struct SolverOptions {
  std::string mode = "student-t";
  double dof = 3.0;
  int max_iterations = 300;
  double tolerance = 5e-4;
  int anchor = 1;
  std::uint64_t seed = 12345;
  int threads = 0;
  bool estep_per_view = false;
  bool symmetric_denominator = false;
};

void add_solver_options(CLI::App* cmd, SolverOptions& opts) {
  cmd->add_option("--mode", opts.mode, "Solver mode: student-t or gaussian")
      ->default_str("student-t");
  cmd->add_option("--dof", opts.dof, "Student-t degrees of freedom v")->default_str("3");
  cmd->add_option("--max-iters", opts.max_iterations, "Maximum EM sweeps K")
      ->default_str("300");
  cmd->add_option("--tol", opts.tolerance, "Convergence threshold on |dQ|/M")
      ->default_str("0.0005");
  cmd->add_option("--anchor", opts.anchor, "1-based view held at its initial transform")
      ->default_str("1");
  cmd->add_option("--seed", opts.seed, "Master random seed")->default_str("12345");
  cmd->add_option("--threads", opts.threads,
                  "Worker threads (default: STMMREG_THREADS env var, else 1)");
  cmd->add_flag("--estep-per-view", opts.estep_per_view,
                "Refresh correspondences before each view's update");
  cmd->add_flag("--symmetric-denominator", opts.symmetric_denominator,
                "Divide the variance update by the robust weight total");
}

RegistrationConfig make_config(const SolverOptions& opts) {
  RegistrationConfig config;
  config.mode = parse_mode(opts.mode);
  config.dof = opts.dof;
  config.max_iterations = opts.max_iterations;
  config.tolerance = opts.tolerance;
  config.anchor_view = opts.anchor;
  config.seed = opts.seed;
  config.threads = resolve_threads(opts.threads);
  config.estep_per_view = opts.estep_per_view;
  config.symmetric_denominator = opts.symmetric_denominator;
  return config;
}

void print_config(const RegistrationConfig& config, std::size_t downsample) {
  std::printf("mode                = %s\n", to_string(config.mode).c_str());
  std::printf("dof                 = %g\n", config.dof);
  std::printf("max iterations      = %d\n", config.max_iterations);
  std::printf("tolerance           = %g\n", config.tolerance);
  std::printf("anchor view         = %d\n", config.anchor_view);
  std::printf("seed                = %llu\n", static_cast<unsigned long long>(config.seed));
  std::printf("threads             = %d\n", config.threads);
  std::printf("estep per view      = %s\n", config.estep_per_view ? "on" : "off");
  std::printf("symmetric denom     = %s\n", config.symmetric_denominator ? "on" : "off");
  std::printf("downsample          = %zu%s\n", downsample, downsample == 0 ? " (off)" : "");
}

void print_summary_table(const ExperimentReport& report) {
  std::printf("%-10s %-8s %6s %5s %13s %13s %13s %8s\n", "mode", "level", "trials", "fail",
              "mean_e_r", "std_e_r", "mean_e_t", "iters");
  for (const LevelSummary& s : report.summarize()) {
    std::printf("%-10s %-8s %6d %5d %13.6g %13.6g %13.6g %8.1f\n", to_string(s.mode).c_str(),
                s.level.c_str(), s.trials, s.failures, s.mean_e_r, s.std_e_r, s.mean_e_t,
                s.mean_iterations);
  }
}

struct RegisterArgs {
  std::vector<std::string> clouds;
  std::string out_dir;
  std::string init_path;
  std::size_t downsample = 2000;
  std::string format = "ascii";
  SolverOptions solver;
};

int cmd_register(const RegisterArgs& args) {
  const RegistrationConfig config = make_config(args.solver);
  const PlyFormat format =
      args.format == "binary" ? PlyFormat::binary_le : PlyFormat::ascii;

  std::vector<PointSet> full;
  std::vector<PointSet> sets;
  for (std::size_t i = 0; i < args.clouds.size(); ++i) {
    PlyReadResult read = read_ply(args.clouds[i]);
    if (read.dropped_non_finite > 0) {
      std::fprintf(stderr, "warning: %s: dropped %d non-finite vertex rows\n",
                   args.clouds[i].c_str(), read.dropped_non_finite);
    }
    read.set.id = static_cast<int>(i) + 1;
    if (read.set.points.size() < 2) {
      throw std::invalid_argument(args.clouds[i] + ": needs at least 2 finite points");
    }
    full.push_back(read.set);
    sets.push_back(args.downsample > 0
                       ? downsample(read.set, args.downsample, mix(config.seed, i + 1))
                       : std::move(read.set));
  }

  ModelParams initial;
  if (!args.init_path.empty()) {
    initial.transforms = read_transforms(args.init_path);
    if (initial.transforms.size() != sets.size()) {
      throw std::invalid_argument(args.init_path + ": has " +
                                  std::to_string(initial.transforms.size()) +
                                  " transforms for " + std::to_string(sets.size()) + " clouds");
    }
  }

  print_config(config, args.downsample);
  for (std::size_t i = 0; i < sets.size(); ++i) {
    std::printf("view %zu              = %s (%zu points%s)\n", i + 1, args.clouds[i].c_str(),
                sets[i].points.size(),
                sets[i].points.size() != full[i].points.size() ? " after downsample" : "");
  }

  const RegistrationReport report = register_views(sets, initial, config);

  const double last_delta =
      report.q_trajectory.size() >= 2
          ? std::abs(report.q_trajectory.back() - report.q_trajectory[report.q_trajectory.size() - 2])
          : std::abs(report.q_trajectory.empty() ? 0.0
                                                 : report.q_trajectory.back() - report.q_initial);
  std::printf("%s after %d sweeps (|dQ|/M = %.3g)\n",
              report.termination == Termination::converged ? "converged" : "stopped at max iterations",
              report.iterations, last_delta / static_cast<double>(sets.size()));
  std::printf("resolution d_r      = %.6g\n", report.resolution);
  std::printf("sigma2              = %.6g (initial %.6g, floor hits %d)\n", report.sigma2,
              report.sigma2_initial, report.sigma_floor_hits);

  const fs::path out_dir(args.out_dir);
  fs::create_directories(out_dir);
  write_transforms(report.transforms, out_dir / "transforms.json");
  write_q_trace(report.q_trajectory, out_dir / "q_trace.csv");
  for (std::size_t i = 0; i < full.size(); ++i) {
    PointSet aligned;
    aligned.id = full[i].id;
    aligned.points.reserve(full[i].points.size());
    for (const Point3& p : full[i].points) {
      aligned.points.push_back(apply_transform(report.transforms[i], p));
    }
    char name[32];
    std::snprintf(name, sizeof(name), "aligned_%02zu.ply", i + 1);
    write_ply(aligned, out_dir / name, format);
  }
  std::printf("wrote %s, %s, and %zu aligned clouds to %s\n", "transforms.json", "q_trace.csv",
              full.size(), args.out_dir.c_str());
  return 0;
}

struct SynthArgs {
  std::string surface = "wavy-grid";
  int views = 8;
  int points = 2000;
  double overlap = 0.6;
  std::uint64_t seed = 12345;
  std::string out_dir;
  std::string format = "ascii";
};

int cmd_synth(const SynthArgs& args) {
  const SyntheticScene scene = generate_scene(surface_from_string(args.surface), args.views,
                                              args.points, args.overlap, args.seed);
  const fs::path out_dir(args.out_dir);
  fs::create_directories(out_dir);
  const PlyFormat format =
      args.format == "binary" ? PlyFormat::binary_le : PlyFormat::ascii;

  for (int i = 0; i < scene.views; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "view_%02d.ply", i + 1);
    write_ply(scene.sets[i], out_dir / name, format);
  }
  write_transforms(scene.ground_truth, out_dir / "ground_truth.json");

  nlohmann::json manifest;
  manifest["surface"] = to_string(scene.surface);
  manifest["views"] = scene.views;
  manifest["points_per_view"] = scene.points_per_view;
  manifest["overlap_fraction"] = scene.overlap_fraction;
  manifest["seed"] = scene.seed;
  manifest["resolution"] = scene.resolution;
  manifest["format"] = args.format;
  std::ofstream out(out_dir / "manifest.json");
  if (!out) {
    throw IoError("cannot write " + (out_dir / "manifest.json").string());
  }
  out << manifest.dump(2) << "\n";

  std::printf("surface             = %s\n", to_string(scene.surface).c_str());
  std::printf("views               = %d x %d points\n", scene.views, scene.points_per_view);
  std::printf("overlap fraction    = %g\n", scene.overlap_fraction);
  std::printf("seed                = %llu\n", static_cast<unsigned long long>(scene.seed));
  std::printf("resolution d_r      = %.6g\n", scene.resolution);
  std::printf("wrote %d views, ground_truth.json, manifest.json to %s\n", scene.views,
              args.out_dir.c_str());
  return 0;
}

struct EvalArgs {
  std::string scene_dir;
  std::string out_dir;
  std::string protocol = "robustness";
  std::string levels = "0.01,0.02,0.03,0.04,0.05";
  std::string sweep = "rotation";
  double fixed_rotation = 0.01;
  double fixed_translation = 1.0;
  int repeats = 0;  // 0 = protocol default
  std::string snr = "50,25";
  double outliers = 0.1;
  std::string modes = "both";
  double init_rotation = 0.02;
  double init_translation = 1.0;
  std::size_t downsample = 0;
  SolverOptions solver;
};

SyntheticScene load_scene(const EvalArgs& args) {
  const fs::path dir(args.scene_dir);
  if (!fs::is_directory(dir)) {
    throw IoError(args.scene_dir + " is not a directory");
  }
  std::vector<fs::path> cloud_files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("view_", 0) == 0 && name.size() > 4 &&
        name.substr(name.size() - 4) == ".ply") {
      cloud_files.push_back(entry.path());
    }
  }
  std::sort(cloud_files.begin(), cloud_files.end());
  if (cloud_files.size() < 2) {
    throw IoError(args.scene_dir + ": found " + std::to_string(cloud_files.size()) +
                  " view_*.ply files, need at least 2");
  }
  if (!fs::exists(dir / "ground_truth.json")) {
    throw IoError(args.scene_dir +
                  ": ground_truth.json is required to score an evaluation protocol");
  }

  SyntheticScene scene;
  scene.views = static_cast<int>(cloud_files.size());
  for (std::size_t i = 0; i < cloud_files.size(); ++i) {
    PlyReadResult read = read_ply(cloud_files[i]);
    if (read.dropped_non_finite > 0) {
      std::fprintf(stderr, "warning: %s: dropped %d non-finite vertex rows\n",
                   cloud_files[i].string().c_str(), read.dropped_non_finite);
    }
    read.set.id = static_cast<int>(i) + 1;
    scene.sets.push_back(args.downsample > 0
                             ? downsample(read.set, args.downsample,
                                          mix(args.solver.seed, i + 1))
                             : std::move(read.set));
  }
  scene.ground_truth = read_transforms(dir / "ground_truth.json");
  if (static_cast<int>(scene.ground_truth.size()) != scene.views) {
    throw std::invalid_argument(args.scene_dir + ": ground_truth.json has " +
                                std::to_string(scene.ground_truth.size()) +
                                " transforms for " + std::to_string(scene.views) + " views");
  }

  const fs::path manifest_path = dir / "manifest.json";
  if (fs::exists(manifest_path)) {
    std::ifstream in(manifest_path);
    nlohmann::json manifest;
    try {
      in >> manifest;
      if (manifest.contains("surface")) {
        scene.surface = surface_from_string(manifest["surface"].get<std::string>());
      }
      if (manifest.contains("overlap_fraction")) {
        scene.overlap_fraction = manifest["overlap_fraction"].get<double>();
      }
      if (manifest.contains("seed")) scene.seed = manifest["seed"].get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(manifest_path.string(), 0, e.what());
    }
  }
  scene.points_per_view = static_cast<int>(scene.sets[0].points.size());
  scene.resolution = average_resolution(scene.sets);
  return scene;
}

int cmd_eval(const EvalArgs& args) {
  const RegistrationConfig config = make_config(args.solver);
  const SyntheticScene scene = load_scene(args);

  print_config(config, args.downsample);
  std::printf("scene               = %s (%d views, %d+ points, d_r %.6g)\n",
              args.scene_dir.c_str(), scene.views, scene.points_per_view, scene.resolution);

  const fs::path out_dir(args.out_dir);
  fs::create_directories(out_dir);

  ExperimentReport report;
  if (args.protocol == "robustness") {
    const int repeats = args.repeats > 0 ? args.repeats : 20;
    const SweepAxis sweep =
        args.sweep == "translation" ? SweepAxis::translation : SweepAxis::rotation;
    if (args.sweep != "rotation" && args.sweep != "translation") {
      throw std::invalid_argument("--sweep must be rotation or translation");
    }
    std::vector<PerturbationSpec> levels;
    for (double value : parse_number_list(args.levels, "--levels")) {
      if (sweep == SweepAxis::rotation) {
        levels.push_back({value, args.fixed_translation, 0});
      } else {
        levels.push_back({args.fixed_rotation, value, 0});
      }
    }
    std::printf("protocol            = robustness (%s sweep, %d repeats)\n", args.sweep.c_str(),
                repeats);
    report = run_robustness_experiment(scene, levels, repeats, config, sweep);
    report.write_csv(out_dir / ("trials_" + file_tag(config.mode) + ".csv"), config.mode);
  } else if (args.protocol == "noise") {
    const int repeats = args.repeats > 0 ? args.repeats : 30;
    std::vector<double> snr_levels = parse_number_list(args.snr, "--snr");
    const bool has_control = std::any_of(snr_levels.begin(), snr_levels.end(),
                                         [](double s) { return std::isinf(s); });
    if (!has_control) {
      // The clean control level anchors the "within a factor of the
      // noise-free run" comparisons.
      snr_levels.insert(snr_levels.begin(), std::numeric_limits<double>::infinity());
    }
    std::vector<Mode> modes;
    if (args.modes == "both") {
      modes = {Mode::student_t, Mode::gaussian};
    } else {
      std::size_t pos = 0;
      while (pos <= args.modes.size()) {
        const std::size_t comma = args.modes.find(',', pos);
        modes.push_back(parse_mode(args.modes.substr(
            pos, comma == std::string::npos ? std::string::npos : comma - pos)));
        if (comma == std::string::npos) break;
        pos = comma + 1;
      }
    }
    std::printf("protocol            = noise (outliers %g, %d repeats)\n", args.outliers,
                repeats);
    report = run_noise_experiment(scene, snr_levels, repeats, config, modes, args.outliers,
                                  {args.init_rotation, args.init_translation, 0});
    for (Mode mode : report.modes()) {
      report.write_csv(out_dir / ("trials_" + file_tag(mode) + ".csv"), mode);
    }
  } else {
    throw std::invalid_argument("--protocol must be robustness or noise");
  }

  report.write_json(out_dir / "summary.json");
  print_summary_table(report);
  std::printf("wrote results to %s\n", args.out_dir.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stmmreg: joint rigid registration of multiple point sets"};
  app.require_subcommand(1);

  RegisterArgs reg;
  CLI::App* reg_cmd = app.add_subcommand("register", "Register two or more PLY clouds");
  reg_cmd->add_option("clouds", reg.clouds, "Input PLY files (view order)")
      ->required()
      ->expected(2, 1000);
  reg_cmd->add_option("--out", reg.out_dir, "Output directory")->required();
  reg_cmd->add_option("--init", reg.init_path, "Initial transforms JSON");
  reg_cmd->add_option("--downsample", reg.downsample,
                      "Uniformly subsample each cloud to this many points (0 = off)")
      ->default_str("2000");
  reg_cmd->add_option("--format", reg.format, "Output PLY format: ascii or binary")
      ->check(CLI::IsMember({"ascii", "binary"}))
      ->default_str("ascii");
  add_solver_options(reg_cmd, reg.solver);

  SynthArgs synth;
  CLI::App* synth_cmd = app.add_subcommand("synth", "Generate a synthetic multi-view scene");
  synth_cmd->add_option("--surface", synth.surface, "sphere, torus, or wavy-grid")
      ->default_str("wavy-grid");
  synth_cmd->add_option("--views", synth.views, "Number of views")->default_str("8");
  synth_cmd->add_option("--points", synth.points, "Points per view")->default_str("2000");
  synth_cmd->add_option("--overlap", synth.overlap, "Sector width as a fraction of the surface")
      ->default_str("0.6");
  synth_cmd->add_option("--seed", synth.seed, "Scene seed")->default_str("12345");
  synth_cmd->add_option("--out", synth.out_dir, "Output directory")->required();
  synth_cmd->add_option("--format", synth.format, "PLY format: ascii or binary")
      ->check(CLI::IsMember({"ascii", "binary"}))
      ->default_str("ascii");

  EvalArgs eval;
  CLI::App* eval_cmd = app.add_subcommand("eval", "Run an evaluation protocol on a scene");
  eval_cmd->add_option("--scene", eval.scene_dir, "Scene directory (view_*.ply + ground_truth.json)")
      ->required();
  eval_cmd->add_option("--out", eval.out_dir, "Output directory")->required();
  eval_cmd->add_option("--protocol", eval.protocol, "robustness or noise")
      ->default_str("robustness");
  eval_cmd->add_option("--levels", eval.levels,
                       "Perturbation half-widths for the robustness sweep")
      ->default_str("0.01,0.02,0.03,0.04,0.05");
  eval_cmd->add_option("--sweep", eval.sweep, "Swept axis: rotation or translation")
      ->default_str("rotation");
  eval_cmd->add_option("--fixed-rot", eval.fixed_rotation,
                       "Rotation half-width (rad) held fixed during translation sweeps")
      ->default_str("0.01");
  eval_cmd->add_option("--fixed-trans", eval.fixed_translation,
                       "Translation half-width (d_r multiples) held fixed during rotation sweeps")
      ->default_str("1");
  eval_cmd->add_option("--repeats", eval.repeats,
                       "Trials per level (default: 20 robustness, 30 noise)");
  eval_cmd->add_option("--snr", eval.snr, "Noise protocol SNR levels in dB")
      ->default_str("50,25");
  eval_cmd->add_option("--outliers", eval.outliers, "Outlier fraction for the noise protocol")
      ->default_str("0.1");
  eval_cmd->add_option("--modes", eval.modes, "Noise protocol modes: both, student-t, gaussian")
      ->default_str("both");
  eval_cmd->add_option("--init-rot", eval.init_rotation,
                       "Initial rotation perturbation (rad) for the noise protocol")
      ->default_str("0.02");
  eval_cmd->add_option("--init-trans", eval.init_translation,
                       "Initial translation perturbation (d_r) for the noise protocol")
      ->default_str("1");
  eval_cmd->add_option("--downsample", eval.downsample,
                       "Subsample each loaded view to this many points (0 = off)")
      ->default_str("0");
  add_solver_options(eval_cmd, eval.solver);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (app.got_subcommand(reg_cmd)) return cmd_register(reg);
    if (app.got_subcommand(synth_cmd)) return cmd_synth(synth);
    return cmd_eval(eval);
  } catch (const DegenerateGeometryError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
