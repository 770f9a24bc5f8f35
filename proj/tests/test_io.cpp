#include <doctest.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include <stmmreg/errors.hpp>
#include <stmmreg/geometry.hpp>
#include <stmmreg/io.hpp>

using namespace stmmreg;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  static int counter = 0;
  fs::path dir =
      fs::temp_directory_path() / ("stmmreg_io_test_" + std::to_string(++counter));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

PointSet random_set(std::mt19937_64& rng, int n) {
  std::uniform_real_distribution<double> u(-5.0, 5.0);
  PointSet set;
  for (int i = 0; i < n; ++i) {
    set.points.push_back(Point3{u(rng), u(rng), u(rng)});
  }
  return set;
}

RigidTransform random_rigid(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  RigidTransform t = RigidTransform::from_euler_xyz(u(rng), u(rng), u(rng));
  t.translation = Point3{u(rng), u(rng), u(rng)};
  return t;
}

}  // namespace

TEST_SUITE("io") {
  TEST_CASE("ascii round-trip preserves doubles exactly") {
    const fs::path dir = temp_dir();
    std::mt19937_64 rng(1);
    PointSet set = random_set(rng, 113);
    set.points.push_back(Point3{1.0 / 3.0, -2.0 / 7.0, 1e-300});
    set.points.push_back(Point3{1e300, -1e-17, 0.1});
    write_ply(set, dir / "a.ply", PlyFormat::ascii);
    PlyReadResult result = read_ply(dir / "a.ply");
    REQUIRE(result.set.points.size() == set.points.size());
    CHECK(result.dropped_non_finite == 0);
    for (std::size_t i = 0; i < set.points.size(); ++i) {
      CHECK(result.set.points[i].x() == set.points[i].x());
      CHECK(result.set.points[i].y() == set.points[i].y());
      CHECK(result.set.points[i].z() == set.points[i].z());
    }
  }

  TEST_CASE("binary round-trip preserves doubles exactly") {
    const fs::path dir = temp_dir();
    std::mt19937_64 rng(2);
    PointSet set = random_set(rng, 257);
    write_ply(set, dir / "b.ply", PlyFormat::binary_le);
    PlyReadResult result = read_ply(dir / "b.ply");
    REQUIRE(result.set.points.size() == set.points.size());
    for (std::size_t i = 0; i < set.points.size(); ++i) {
      CHECK(result.set.points[i].x() == set.points[i].x());
      CHECK(result.set.points[i].y() == set.points[i].y());
      CHECK(result.set.points[i].z() == set.points[i].z());
    }
  }

  TEST_CASE("float vertex properties are accepted") {
    const fs::path dir = temp_dir();
    write_text(dir / "f.ply",
               "ply\n"
               "format ascii 1.0\n"
               "element vertex 2\n"
               "property float x\n"
               "property float y\n"
               "property float z\n"
               "end_header\n"
               "1.5 2.5 -3.25\n"
               "0.125 -0.5 4\n");
    PlyReadResult result = read_ply(dir / "f.ply");
    REQUIRE(result.set.points.size() == 2);
    CHECK(result.set.points[0].x() == 1.5);
    CHECK(result.set.points[1].z() == 4.0);
  }

  TEST_CASE("extra properties and face elements are skipped") {
    const fs::path dir = temp_dir();
    SUBCASE("ascii") {
      write_text(dir / "extra.ply",
                 "ply\n"
                 "comment made by hand\n"
                 "format ascii 1.0\n"
                 "element vertex 2\n"
                 "property double x\n"
                 "property double y\n"
                 "property double z\n"
                 "property uchar red\n"
                 "property float confidence\n"
                 "element face 1\n"
                 "property list uchar int vertex_indices\n"
                 "end_header\n"
                 "0 0 1 255 0.5\n"
                 "1 0 0 128 0.25\n"
                 "3 0 1 0\n");
      PlyReadResult result = read_ply(dir / "extra.ply");
      REQUIRE(result.set.points.size() == 2);
      CHECK(result.set.points[0].z() == 1.0);
      CHECK(result.set.points[1].x() == 1.0);
    }
    SUBCASE("binary with interleaved scalar properties") {
      std::ostringstream body;
      body << "ply\nformat binary_little_endian 1.0\n"
           << "element vertex 2\n"
           << "property double x\nproperty double y\nproperty double z\n"
           << "property float quality\n"
           << "end_header\n";
      std::string data = body.str();
      auto push_double = [&data](double v) {
        const char* raw = reinterpret_cast<const char*>(&v);
        data.append(raw, raw + sizeof(double));
      };
      auto push_float = [&data](float v) {
        const char* raw = reinterpret_cast<const char*>(&v);
        data.append(raw, raw + sizeof(float));
      };
      push_double(1.0); push_double(2.0); push_double(3.0); push_float(0.5f);
      push_double(-1.0); push_double(-2.0); push_double(-3.0); push_float(0.25f);
      write_text(dir / "bin_extra.ply", data);
      PlyReadResult result = read_ply(dir / "bin_extra.ply");
      REQUIRE(result.set.points.size() == 2);
      CHECK(result.set.points[0].y() == 2.0);
      CHECK(result.set.points[1].z() == -3.0);
    }
  }

  TEST_CASE("unsupported layouts are rejected with location info") {
    const fs::path dir = temp_dir();
    SUBCASE("big endian") {
      write_text(dir / "be.ply",
                 "ply\nformat binary_big_endian 1.0\nelement vertex 1\n"
                 "property double x\nproperty double y\nproperty double z\n"
                 "end_header\n");
      CHECK_THROWS_AS(read_ply(dir / "be.ply"), ParseError);
    }
    SUBCASE("list property inside the vertex element") {
      write_text(dir / "list.ply",
                 "ply\nformat ascii 1.0\nelement vertex 1\n"
                 "property list uchar float x\nproperty double y\nproperty double z\n"
                 "end_header\n1 0 0 0\n");
      CHECK_THROWS_AS(read_ply(dir / "list.ply"), ParseError);
    }
    SUBCASE("missing coordinate property") {
      write_text(dir / "noz.ply",
                 "ply\nformat ascii 1.0\nelement vertex 1\n"
                 "property double x\nproperty double y\n"
                 "end_header\n0 0\n");
      CHECK_THROWS_AS(read_ply(dir / "noz.ply"), ParseError);
    }
    SUBCASE("not a ply file") {
      write_text(dir / "not.ply", "OFF\n3 1 0\n");
      CHECK_THROWS_AS(read_ply(dir / "not.ply"), ParseError);
    }
    SUBCASE("truncated binary payload") {
      write_text(dir / "trunc.ply",
                 "ply\nformat binary_little_endian 1.0\nelement vertex 3\n"
                 "property double x\nproperty double y\nproperty double z\n"
                 "end_header\nshort");
      CHECK_THROWS_AS(read_ply(dir / "trunc.ply"), ParseError);
    }
    SUBCASE("parse error carries the line number") {
      write_text(dir / "badrow.ply",
                 "ply\nformat ascii 1.0\nelement vertex 2\n"
                 "property double x\nproperty double y\nproperty double z\n"
                 "end_header\n0 0 0\n0 zero 0\n");
      try {
        read_ply(dir / "badrow.ply");
        FAIL("expected ParseError");
      } catch (const ParseError& e) {
        // Header occupies lines 1-7, so the second data row is line 9.
        CHECK(e.line() == 9);
        CHECK(std::string(e.what()).find("badrow.ply:9") != std::string::npos);
      }
    }
  }

  TEST_CASE("non-finite vertices are dropped and counted") {
    const fs::path dir = temp_dir();
    write_text(dir / "nf.ply",
               "ply\nformat ascii 1.0\nelement vertex 4\n"
               "property double x\nproperty double y\nproperty double z\n"
               "end_header\n"
               "0 0 0\n"
               "nan 0 0\n"
               "1 inf 1\n"
               "2 2 2\n");
    PlyReadResult result = read_ply(dir / "nf.ply");
    CHECK(result.dropped_non_finite == 2);
    REQUIRE(result.set.points.size() == 2);
    CHECK(result.set.points[1].x() == 2.0);
  }

  TEST_CASE("missing file raises an io error") {
    CHECK_THROWS_AS(read_ply("/nonexistent/dir/missing.ply"), IoError);
    CHECK_THROWS_AS(read_transforms("/nonexistent/dir/missing.json"), IoError);
  }

  TEST_CASE("downsample keeps order and size") {
    std::mt19937_64 rng(3);
    PointSet set = random_set(rng, 500);
    PointSet smaller = downsample(set, 120, 9);
    REQUIRE(smaller.points.size() == 120);

    // Kept points appear in their original relative order.
    std::size_t cursor = 0;
    for (const Point3& p : smaller.points) {
      bool found = false;
      while (cursor < set.points.size()) {
        if (set.points[cursor] == p) {
          found = true;
          ++cursor;
          break;
        }
        ++cursor;
      }
      REQUIRE(found);
    }

    PointSet same = downsample(set, 500, 9);
    REQUIRE(same.points.size() == 500);
    PointSet bigger = downsample(set, 1000, 9);
    REQUIRE(bigger.points.size() == 500);

    PointSet again = downsample(set, 120, 9);
    for (std::size_t i = 0; i < smaller.points.size(); ++i) {
      REQUIRE(again.points[i] == smaller.points[i]);
    }
    PointSet other_seed = downsample(set, 120, 10);
    bool identical = true;
    for (std::size_t i = 0; i < other_seed.points.size(); ++i) {
      if (!(other_seed.points[i] == smaller.points[i])) identical = false;
    }
    CHECK(!identical);
  }

  TEST_CASE("transform json round-trip") {
    const fs::path dir = temp_dir();
    std::mt19937_64 rng(4);
    std::vector<RigidTransform> transforms;
    for (int i = 0; i < 4; ++i) transforms.push_back(random_rigid(rng));
    write_transforms(transforms, dir / "t.json");
    std::vector<RigidTransform> loaded = read_transforms(dir / "t.json");
    REQUIRE(loaded.size() == transforms.size());
    for (std::size_t i = 0; i < transforms.size(); ++i) {
      CHECK((loaded[i].rotation - transforms[i].rotation).norm() < 1e-12);
      CHECK((loaded[i].translation - transforms[i].translation).norm() < 1e-12);
      CHECK(loaded[i].is_valid(1e-9));
    }

    nlohmann::json doc;
    {
      std::ifstream in(dir / "t.json");
      in >> doc;
    }
    REQUIRE(doc.is_array());
    REQUIRE(doc.size() == 4);
    CHECK(doc[0].contains("view"));
    CHECK(doc[0].contains("rotation"));
    CHECK(doc[0].contains("translation"));
    CHECK(doc[0]["view"] == 1);
    CHECK(doc[3]["view"] == 4);
    REQUIRE(doc[0]["rotation"].size() == 3);
    for (int r = 0; r < 3; ++r) CHECK(doc[0]["rotation"][r].size() == 3);
    CHECK(doc[0]["translation"].size() == 3);
  }

  TEST_CASE("loaded rotations are re-orthonormalized") {
    const fs::path dir = temp_dir();
    std::mt19937_64 rng(5);
    RigidTransform t = random_rigid(rng);

    SUBCASE("small defect is repaired") {
      nlohmann::json doc = nlohmann::json::array();
      nlohmann::json entry;
      entry["view"] = 1;
      nlohmann::json rot = nlohmann::json::array();
      for (int r = 0; r < 3; ++r) {
        nlohmann::json row = nlohmann::json::array();
        for (int c = 0; c < 3; ++c) {
          row.push_back(t.rotation(r, c) + (((r * 3 + c) % 2) ? 1e-5 : -1e-5));
        }
        rot.push_back(row);
      }
      entry["rotation"] = rot;
      entry["translation"] = {t.translation.x(), t.translation.y(), t.translation.z()};
      doc.push_back(entry);
      write_text(dir / "near.json", doc.dump());
      std::vector<RigidTransform> loaded = read_transforms(dir / "near.json");
      REQUIRE(loaded.size() == 1);
      CHECK(loaded[0].orthonormality_defect() < 1e-12);
      CHECK((loaded[0].rotation - t.rotation).norm() < 1e-4);
    }

    SUBCASE("large defect is rejected") {
      nlohmann::json doc = nlohmann::json::array();
      nlohmann::json entry;
      entry["view"] = 1;
      entry["rotation"] = {{1.5, 0, 0}, {0, 1.0, 0}, {0, 0, 1.0}};
      entry["translation"] = {0, 0, 0};
      doc.push_back(entry);
      write_text(dir / "far.json", doc.dump());
      CHECK_THROWS_AS(read_transforms(dir / "far.json"), ParseError);
    }

    SUBCASE("reflection is rejected") {
      nlohmann::json doc = nlohmann::json::array();
      nlohmann::json entry;
      entry["view"] = 1;
      entry["rotation"] = {{1, 0, 0}, {0, 1, 0}, {0, 0, -1.0}};
      entry["translation"] = {0, 0, 0};
      doc.push_back(entry);
      write_text(dir / "mirror.json", doc.dump());
      CHECK_THROWS_AS(read_transforms(dir / "mirror.json"), ParseError);
    }

    SUBCASE("views must cover 1..M exactly") {
      nlohmann::json doc = nlohmann::json::array();
      for (int view : {1, 3}) {
        nlohmann::json entry;
        entry["view"] = view;
        entry["rotation"] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1.0}};
        entry["translation"] = {0, 0, 0};
        doc.push_back(entry);
      }
      write_text(dir / "gap.json", doc.dump());
      CHECK_THROWS_AS(read_transforms(dir / "gap.json"), ParseError);
    }

    SUBCASE("malformed json") {
      write_text(dir / "broken.json", "{ not json");
      CHECK_THROWS_AS(read_transforms(dir / "broken.json"), ParseError);
    }
  }

  TEST_CASE("objective trace format") {
    const fs::path dir = temp_dir();
    write_q_trace({-1.5, -1.25, -1.2}, dir / "q.csv");
    std::ifstream in(dir / "q.csv");
    std::string line;
    REQUIRE(static_cast<bool>(std::getline(in, line)));
    CHECK(line == "iteration,q");
    int rows = 0;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      ++rows;
      CHECK(line.find(',') != std::string::npos);
      CHECK(line.substr(0, line.find(',')) == std::to_string(rows));
    }
    CHECK(rows == 3);
  }

  TEST_CASE("corrupted ply inputs never crash") {
    const fs::path dir = temp_dir();
    std::mt19937_64 rng(6);
    PointSet set = random_set(rng, 40);
    write_ply(set, dir / "base_ascii.ply", PlyFormat::ascii);
    write_ply(set, dir / "base_bin.ply", PlyFormat::binary_le);

    for (const char* name : {"base_ascii.ply", "base_bin.ply"}) {
      std::ifstream in(dir / name, std::ios::binary);
      std::string content((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());
      for (int trial = 0; trial < 200; ++trial) {
        std::string corrupt = content;
        const int edits = 1 + static_cast<int>(rng() % 4);
        for (int e = 0; e < edits; ++e) {
          switch (rng() % 3) {
            case 0: {  // flip a byte
              if (!corrupt.empty()) {
                corrupt[rng() % corrupt.size()] = static_cast<char>(rng() % 256);
              }
              break;
            }
            case 1: {  // truncate
              corrupt = corrupt.substr(0, rng() % (corrupt.size() + 1));
              break;
            }
            default: {  // duplicate a chunk
              if (!corrupt.empty()) {
                const std::size_t at = rng() % corrupt.size();
                corrupt.insert(at, corrupt.substr(at, rng() % 16));
              }
              break;
            }
          }
        }
        const fs::path target = dir / ("fuzz_" + std::to_string(trial) + name);
        write_text(target, corrupt);
        try {
          PlyReadResult result = read_ply(target);
          (void)result;
        } catch (const ParseError&) {
        } catch (const IoError&) {
        }
        fs::remove(target);
      }
    }
  }
}
