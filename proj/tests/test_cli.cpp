#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include <stmmreg/eval.hpp>
#include <stmmreg/geometry.hpp>
#include <stmmreg/io.hpp>

using namespace stmmreg;
namespace fs = std::filesystem;

namespace {

struct RunResult {
  int code = -1;
  std::string out;
  std::string err;
};

std::string binary_path() {
  const char* env = std::getenv("STMMREG_BIN");
  REQUIRE_MESSAGE(env != nullptr, "STMMREG_BIN must point at the CLI binary");
  return env;
}

fs::path temp_dir() {
  static int counter = 0;
  fs::path dir =
      fs::temp_directory_path() / ("stmmreg_cli_test_" + std::to_string(++counter));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

RunResult run(const std::string& args, const std::string& env_prefix = "") {
  const fs::path dir = temp_dir();
  const fs::path out_file = dir / "stdout.txt";
  const fs::path err_file = dir / "stderr.txt";
  const std::string command = env_prefix + (env_prefix.empty() ? "" : " ") + "\"" +
                              binary_path() + "\" " + args + " > " + out_file.string() +
                              " 2> " + err_file.string();
  const int status = std::system(command.c_str());
  RunResult result;
  result.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  result.out = slurp(out_file);
  result.err = slurp(err_file);
  return result;
}

int count_data_rows(const fs::path& csv) {
  std::ifstream in(csv);
  std::string line;
  int rows = 0;
  bool first = true;
  while (std::getline(in, line)) {
    if (first) {
      first = false;
      continue;
    }
    if (!line.empty()) ++rows;
  }
  return rows;
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("synth writes a scene and is deterministic") {
    const fs::path a = temp_dir();
    const fs::path b = temp_dir();
    const std::string common =
        "synth --surface wavy-grid --views 3 --points 150 --overlap 0.75 --seed 7 --out ";
    RunResult first = run(common + a.string());
    REQUIRE(first.code == 0);
    CHECK(first.out.find("resolution d_r") != std::string::npos);

    for (const char* name : {"view_01.ply", "view_02.ply", "view_03.ply",
                             "ground_truth.json", "manifest.json"}) {
      CHECK_MESSAGE(fs::exists(a / name), name);
    }

    nlohmann::json manifest;
    {
      std::ifstream in(a / "manifest.json");
      in >> manifest;
    }
    CHECK(manifest["surface"] == "wavy-grid");
    CHECK(manifest["views"] == 3);
    CHECK(manifest["points_per_view"] == 150);
    CHECK(manifest["overlap_fraction"].get<double>() == doctest::Approx(0.75));
    CHECK(manifest["seed"] == 7);
    CHECK(manifest["format"] == "ascii");
    CHECK(manifest["resolution"].get<double>() > 0.0);

    const auto gt = read_transforms(a / "ground_truth.json");
    REQUIRE(gt.size() == 3);
    CHECK((gt[0].rotation - Eigen::Matrix3d::Identity()).norm() < 1e-15);

    RunResult second = run(common + b.string());
    REQUIRE(second.code == 0);
    CHECK(slurp(a / "view_01.ply") == slurp(b / "view_01.ply"));
    CHECK(slurp(a / "view_03.ply") == slurp(b / "view_03.ply"));
    CHECK(slurp(a / "ground_truth.json") == slurp(b / "ground_truth.json"));
  }

  TEST_CASE("register aligns two copies of one cloud") {
    const fs::path dir = temp_dir();
    SyntheticScene scene = generate_scene(Surface::sphere, 2, 200, 0.9, 3);
    write_ply(scene.sets[0], dir / "a.ply");
    write_ply(scene.sets[0], dir / "b.ply");
    const fs::path out = dir / "out";

    RunResult result = run("register " + (dir / "a.ply").string() + " " +
                           (dir / "b.ply").string() + " --out " + out.string());
    REQUIRE_MESSAGE(result.code == 0, result.err);
    CHECK(result.out.find("converged after") != std::string::npos);
    CHECK(result.out.find("resolution d_r") != std::string::npos);
    CHECK(result.out.find("sigma2") != std::string::npos);
    CHECK(result.out.find("mode                = student-t") != std::string::npos);

    REQUIRE(fs::exists(out / "transforms.json"));
    REQUIRE(fs::exists(out / "q_trace.csv"));
    REQUIRE(fs::exists(out / "aligned_01.ply"));
    REQUIRE(fs::exists(out / "aligned_02.ply"));

    const auto transforms = read_transforms(out / "transforms.json");
    REQUIRE(transforms.size() == 2);
    for (const RigidTransform& t : transforms) {
      CHECK(rotation_angle(t.rotation) < 1e-9);
      CHECK(t.translation.norm() < 1e-9);
    }

    std::ifstream trace(out / "q_trace.csv");
    std::string header;
    REQUIRE(static_cast<bool>(std::getline(trace, header)));
    CHECK(header == "iteration,q");
  }

  TEST_CASE("explicit defaults reproduce the bare run bit for bit") {
    const fs::path dir = temp_dir();
    SyntheticScene scene = generate_scene(Surface::wavy_grid, 2, 180, 0.9, 21);
    write_ply(scene.sets[0], dir / "a.ply");
    write_ply(scene.sets[1], dir / "b.ply");

    const std::string clouds =
        (dir / "a.ply").string() + " " + (dir / "b.ply").string();
    const fs::path bare = dir / "bare";
    const fs::path spelled = dir / "spelled";

    RunResult r1 = run("register " + clouds + " --out " + bare.string());
    RunResult r2 = run("register " + clouds + " --out " + spelled.string() +
                       " --mode student-t --dof 3 --max-iters 300 --tol 0.0005 --anchor 1 "
                       "--seed 12345 --threads 1 --downsample 2000 --format ascii");
    REQUIRE(r1.code == 0);
    REQUIRE(r2.code == 0);
    CHECK(slurp(bare / "transforms.json") == slurp(spelled / "transforms.json"));
    CHECK(slurp(bare / "q_trace.csv") == slurp(spelled / "q_trace.csv"));
    CHECK(slurp(bare / "aligned_01.ply") == slurp(spelled / "aligned_01.ply"));
  }

  TEST_CASE("gaussian mode is selectable") {
    const fs::path dir = temp_dir();
    SyntheticScene scene = generate_scene(Surface::sphere, 2, 150, 0.9, 5);
    write_ply(scene.sets[0], dir / "a.ply");
    write_ply(scene.sets[1], dir / "b.ply");
    RunResult result = run("register " + (dir / "a.ply").string() + " " +
                           (dir / "b.ply").string() + " --out " + (dir / "out").string() +
                           " --mode gaussian");
    REQUIRE_MESSAGE(result.code == 0, result.err);
    CHECK(result.out.find("mode                = gaussian") != std::string::npos);
  }

  TEST_CASE("downsampling registers on the subset but aligns the full cloud") {
    const fs::path dir = temp_dir();
    SyntheticScene scene = generate_scene(Surface::torus, 2, 300, 0.9, 13);
    write_ply(scene.sets[0], dir / "a.ply");
    write_ply(scene.sets[1], dir / "b.ply");
    RunResult result = run("register " + (dir / "a.ply").string() + " " +
                           (dir / "b.ply").string() + " --out " + (dir / "out").string() +
                           " --downsample 120");
    REQUIRE_MESSAGE(result.code == 0, result.err);
    CHECK(result.out.find("downsample          = 120") != std::string::npos);
    CHECK(result.out.find("(120 points after downsample)") != std::string::npos);
    PlyReadResult aligned = read_ply(dir / "out" / "aligned_01.ply");
    CHECK(aligned.set.points.size() == 300);
  }

  TEST_CASE("initial transforms are honored and validated") {
    const fs::path dir = temp_dir();
    SyntheticScene scene = generate_scene(Surface::wavy_grid, 2, 200, 0.9, 31);
    write_ply(scene.sets[0], dir / "a.ply");
    write_ply(scene.sets[1], dir / "b.ply");

    write_transforms(scene.ground_truth, dir / "init.json");
    RunResult good = run("register " + (dir / "a.ply").string() + " " +
                         (dir / "b.ply").string() + " --out " + (dir / "out").string() +
                         " --init " + (dir / "init.json").string());
    REQUIRE_MESSAGE(good.code == 0, good.err);

    std::vector<RigidTransform> three(3);
    write_transforms(three, dir / "wrong.json");
    RunResult bad = run("register " + (dir / "a.ply").string() + " " +
                        (dir / "b.ply").string() + " --out " + (dir / "out2").string() +
                        " --init " + (dir / "wrong.json").string());
    CHECK(bad.code == 1);
    CHECK(bad.err.find("error:") != std::string::npos);
  }

  TEST_CASE("dropped non-finite vertices are reported") {
    const fs::path dir = temp_dir();
    SyntheticScene scene = generate_scene(Surface::sphere, 2, 150, 0.9, 43);
    write_ply(scene.sets[0], dir / "a.ply");
    {
      std::ofstream bad(dir / "b.ply");
      bad << "ply\nformat ascii 1.0\nelement vertex "
          << scene.sets[1].points.size() + 1
          << "\nproperty double x\nproperty double y\nproperty double z\nend_header\n";
      bad << "nan 0 0\n";
      bad.precision(17);
      for (const Point3& p : scene.sets[1].points) {
        bad << p.x() << " " << p.y() << " " << p.z() << "\n";
      }
    }
    RunResult result = run("register " + (dir / "a.ply").string() + " " +
                           (dir / "b.ply").string() + " --out " + (dir / "out").string());
    REQUIRE_MESSAGE(result.code == 0, result.err);
    CHECK(result.err.find("dropped 1 non-finite vertex rows") != std::string::npos);
  }

  TEST_CASE("exit codes distinguish failure kinds") {
    const fs::path dir = temp_dir();
    SUBCASE("missing input file") {
      RunResult result = run("register /nonexistent/x.ply /nonexistent/y.ply --out " +
                             (dir / "out").string());
      CHECK(result.code == 1);
      CHECK(result.err.find("error:") != std::string::npos);
    }
    SUBCASE("unknown flag") {
      RunResult result = run("register a.ply b.ply --out o --frobnicate");
      CHECK(result.code == 1);
    }
    SUBCASE("missing required output option") {
      RunResult result = run("register a.ply b.ply");
      CHECK(result.code == 1);
    }
    SUBCASE("too few clouds") {
      RunResult result = run("register only.ply --out o");
      CHECK(result.code == 1);
    }
    SUBCASE("help exits cleanly") {
      RunResult result = run("--help");
      CHECK(result.code == 0);
      CHECK(result.out.find("register") != std::string::npos);
      CHECK(result.out.find("synth") != std::string::npos);
      CHECK(result.out.find("eval") != std::string::npos);
    }
    SUBCASE("bad mode value") {
      RunResult result = run("register a.ply b.ply --out o --mode cauchy");
      CHECK(result.code == 1);
    }
  }

  TEST_CASE("threads resolve from the flag, then the environment") {
    const fs::path dir = temp_dir();
    SyntheticScene scene = generate_scene(Surface::sphere, 2, 150, 0.9, 53);
    write_ply(scene.sets[0], dir / "a.ply");
    write_ply(scene.sets[1], dir / "b.ply");
    const std::string base = "register " + (dir / "a.ply").string() + " " +
                             (dir / "b.ply").string() + " --out ";

    RunResult from_env = run(base + (dir / "o1").string(), "STMMREG_THREADS=2");
    REQUIRE_MESSAGE(from_env.code == 0, from_env.err);
    CHECK(from_env.out.find("threads             = 2") != std::string::npos);

    RunResult flag_wins = run(base + (dir / "o2").string() + " --threads 3",
                              "STMMREG_THREADS=2");
    REQUIRE_MESSAGE(flag_wins.code == 0, flag_wins.err);
    CHECK(flag_wins.out.find("threads             = 3") != std::string::npos);

    RunResult bad_env = run(base + (dir / "o3").string(), "STMMREG_THREADS=abc");
    CHECK(bad_env.code == 1);
    CHECK(bad_env.err.find("STMMREG_THREADS") != std::string::npos);
  }

  TEST_CASE("eval runs the robustness protocol end to end") {
    const fs::path dir = temp_dir();
    RunResult synth = run("synth --surface wavy-grid --views 3 --points 150 --overlap 0.75 "
                          "--seed 11 --out " + (dir / "scene").string());
    REQUIRE_MESSAGE(synth.code == 0, synth.err);

    const fs::path out = dir / "results";
    RunResult result = run("eval --scene " + (dir / "scene").string() + " --out " +
                           out.string() + " --protocol robustness --levels 0.01,0.02 "
                           "--repeats 2");
    REQUIRE_MESSAGE(result.code == 0, result.err);
    CHECK(result.out.find("protocol            = robustness") != std::string::npos);

    REQUIRE(fs::exists(out / "trials_student_t.csv"));
    REQUIRE(fs::exists(out / "summary.json"));
    CHECK(count_data_rows(out / "trials_student_t.csv") == 4);

    nlohmann::json summary;
    {
      std::ifstream in(out / "summary.json");
      in >> summary;
    }
    CHECK(summary["protocol"] == "robustness-rotation");
    CHECK(summary["repeats"] == 2);
    CHECK(summary["summary"].size() == 2);
    CHECK(summary["trials"].size() == 4);
    for (const auto& trial : summary["trials"]) {
      CHECK(trial["ok"] == true);
    }
  }

  TEST_CASE("eval runs the noise protocol with both modes") {
    const fs::path dir = temp_dir();
    RunResult synth = run("synth --surface wavy-grid --views 3 --points 150 --overlap 0.75 "
                          "--seed 19 --out " + (dir / "scene").string());
    REQUIRE_MESSAGE(synth.code == 0, synth.err);

    const fs::path out = dir / "results";
    RunResult result = run("eval --scene " + (dir / "scene").string() + " --out " +
                           out.string() + " --protocol noise --snr 25 --repeats 1 "
                           "--outliers 0.1 --modes both");
    REQUIRE_MESSAGE(result.code == 0, result.err);
    CHECK(result.out.find("protocol            = noise") != std::string::npos);

    REQUIRE(fs::exists(out / "trials_student_t.csv"));
    REQUIRE(fs::exists(out / "trials_gaussian.csv"));
    REQUIRE(fs::exists(out / "summary.json"));
    // The clean control level is inserted automatically: 2 levels x 2 modes.
    CHECK(count_data_rows(out / "trials_student_t.csv") == 2);
    CHECK(count_data_rows(out / "trials_gaussian.csv") == 2);

    nlohmann::json summary;
    {
      std::ifstream in(out / "summary.json");
      in >> summary;
    }
    bool saw_inf = false;
    for (const auto& s : summary["summary"]) {
      if (s["level"] == "inf") saw_inf = true;
    }
    CHECK(saw_inf);
  }

  TEST_CASE("eval rejects a scene directory without ground truth") {
    const fs::path dir = temp_dir();
    fs::create_directories(dir / "scene");
    SyntheticScene scene = generate_scene(Surface::sphere, 2, 150, 0.9, 61);
    write_ply(scene.sets[0], dir / "scene" / "view_01.ply");
    write_ply(scene.sets[1], dir / "scene" / "view_02.ply");
    RunResult result = run("eval --scene " + (dir / "scene").string() + " --out " +
                           (dir / "out").string());
    CHECK(result.code == 1);
    CHECK(result.err.find("ground_truth.json") != std::string::npos);
  }
}
