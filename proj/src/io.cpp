#include "stmmreg/io.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>

namespace stmmreg {

namespace {

struct PlyProperty {
  std::string name;
  std::string type;
  bool is_list = false;
};

struct PlyElement {
  std::string name;
  long long count = 0;
  std::vector<PlyProperty> properties;
};

int scalar_size(const std::string& type) {
  static const std::map<std::string, int> sizes = {
      {"char", 1},   {"int8", 1},    {"uchar", 1},  {"uint8", 1},  {"short", 2},
      {"int16", 2},  {"ushort", 2},  {"uint16", 2}, {"int", 4},    {"int32", 4},
      {"uint", 4},   {"uint32", 4},  {"float", 4},  {"float32", 4}, {"double", 8},
      {"float64", 8}};
  const auto it = sizes.find(type);
  return it == sizes.end() ? 0 : it->second;
}

bool is_float_type(const std::string& type) {
  return type == "float" || type == "float32" || type == "double" || type == "float64";
}

std::vector<std::string> split_tokens(const std::string& line) {
  std::vector<std::string> tokens;
  std::istringstream stream(line);
  std::string token;
  while (stream >> token) tokens.push_back(token);
  return tokens;
}

void strip_cr(std::string& line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
}

double parse_double_token(const std::string& token, const std::string& file, int line) {
  const char* begin = token.c_str();
  char* end = nullptr;
  const double value = std::strtod(begin, &end);
  if (end == begin || *end != '\0') {
    throw ParseError(file, line, "expected a number, got '" + token + "'");
  }
  return value;
}

double decode_scalar(const unsigned char* bytes, const std::string& type) {
  if (type == "float" || type == "float32") {
    float f;
    std::memcpy(&f, bytes, sizeof(f));
    return static_cast<double>(f);
  }
  double d;
  std::memcpy(&d, bytes, sizeof(d));
  return d;
}

}  // namespace

PlyReadResult read_ply(const std::filesystem::path& path) {
  const std::string name = path.string();
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw IoError("cannot open " + name);
  }

  int lineno = 0;
  auto next_line = [&](std::string& line) {
    if (!std::getline(in, line)) {
      throw ParseError(name, lineno, "unexpected end of header");
    }
    ++lineno;
    strip_cr(line);
  };

  std::string line;
  next_line(line);
  if (line != "ply") {
    throw ParseError(name, lineno, "missing 'ply' magic line");
  }

  bool binary = false;
  bool have_format = false;
  std::vector<PlyElement> elements;
  for (;;) {
    if (lineno > 100000) {
      throw ParseError(name, lineno, "header is implausibly long");
    }
    next_line(line);
    const std::vector<std::string> tokens = split_tokens(line);
    if (tokens.empty() || tokens[0] == "comment" || tokens[0] == "obj_info") continue;
    if (tokens[0] == "end_header") break;
    if (tokens[0] == "format") {
      if (tokens.size() != 3) {
        throw ParseError(name, lineno, "malformed format line");
      }
      if (tokens[1] == "ascii") {
        binary = false;
      } else if (tokens[1] == "binary_little_endian") {
        binary = true;
      } else if (tokens[1] == "binary_big_endian") {
        throw ParseError(name, lineno, "big-endian PLY is not supported");
      } else {
        throw ParseError(name, lineno, "unknown format '" + tokens[1] + "'");
      }
      have_format = true;
    } else if (tokens[0] == "element") {
      if (tokens.size() != 3) {
        throw ParseError(name, lineno, "malformed element line");
      }
      char* end = nullptr;
      const long long count = std::strtoll(tokens[2].c_str(), &end, 10);
      if (end == tokens[2].c_str() || *end != '\0' || count < 0) {
        throw ParseError(name, lineno, "bad element count '" + tokens[2] + "'");
      }
      if (count > 500000000LL) {
        throw ParseError(name, lineno, "element count is implausibly large");
      }
      elements.push_back({tokens[1], count, {}});
    } else if (tokens[0] == "property") {
      if (elements.empty()) {
        throw ParseError(name, lineno, "property before any element");
      }
      if (tokens.size() == 5 && tokens[1] == "list") {
        if (scalar_size(tokens[2]) == 0 || scalar_size(tokens[3]) == 0) {
          throw ParseError(name, lineno, "unknown list property types");
        }
        elements.back().properties.push_back({tokens[4], tokens[3], true});
      } else if (tokens.size() == 3) {
        if (scalar_size(tokens[1]) == 0) {
          throw ParseError(name, lineno, "unknown property type '" + tokens[1] + "'");
        }
        elements.back().properties.push_back({tokens[2], tokens[1], false});
      } else {
        throw ParseError(name, lineno, "malformed property line");
      }
    } else {
      throw ParseError(name, lineno, "unrecognized header line '" + tokens[0] + "'");
    }
  }
  if (!have_format) {
    throw ParseError(name, lineno, "header has no format line");
  }

  std::size_t vertex_pos = elements.size();
  for (std::size_t k = 0; k < elements.size(); ++k) {
    if (elements[k].name == "vertex") {
      vertex_pos = k;
      break;
    }
  }
  if (vertex_pos == elements.size()) {
    throw ParseError(name, lineno, "no vertex element");
  }
  const PlyElement& vertex = elements[vertex_pos];

  int offset = 0;
  int x_offset = -1, y_offset = -1, z_offset = -1;
  int x_prop = -1, y_prop = -1, z_prop = -1;
  std::string x_type, y_type, z_type;
  for (std::size_t p = 0; p < vertex.properties.size(); ++p) {
    const PlyProperty& prop = vertex.properties[p];
    if (prop.is_list) {
      throw ParseError(name, lineno, "list properties in the vertex element are not supported");
    }
    if (prop.name == "x" || prop.name == "y" || prop.name == "z") {
      if (!is_float_type(prop.type)) {
        throw ParseError(name, lineno, "vertex coordinates must be float or double");
      }
      if (prop.name == "x") { x_offset = offset; x_prop = static_cast<int>(p); x_type = prop.type; }
      if (prop.name == "y") { y_offset = offset; y_prop = static_cast<int>(p); y_type = prop.type; }
      if (prop.name == "z") { z_offset = offset; z_prop = static_cast<int>(p); z_type = prop.type; }
    }
    offset += scalar_size(prop.type);
  }
  const int stride = offset;
  if (x_prop < 0 || y_prop < 0 || z_prop < 0) {
    throw ParseError(name, lineno, "vertex element lacks x, y, z properties");
  }

  // Elements declared ahead of the vertices must be skipped to reach the
  // vertex payload; that is only possible when their size is fixed.
  for (std::size_t k = 0; k < vertex_pos; ++k) {
    const PlyElement& element = elements[k];
    if (binary) {
      int element_stride = 0;
      for (const PlyProperty& prop : element.properties) {
        if (prop.is_list) {
          throw ParseError(name, 0,
                           "cannot skip list-typed element '" + element.name +
                               "' ahead of the vertex data");
        }
        element_stride += scalar_size(prop.type);
      }
      in.ignore(static_cast<std::streamsize>(element_stride) * element.count);
      if (!in) {
        throw ParseError(name, 0, "unexpected end of file in element '" + element.name + "'");
      }
    } else {
      for (long long r = 0; r < element.count; ++r) {
        next_line(line);
      }
    }
  }

  PlyReadResult result;
  result.set.points.reserve(static_cast<std::size_t>(std::min(vertex.count, 1LL << 20)));

  if (!binary) {
    for (long long r = 0; r < vertex.count; ++r) {
      if (!std::getline(in, line)) {
        throw ParseError(name, lineno, "unexpected end of file in vertex data");
      }
      ++lineno;
      strip_cr(line);
      const std::vector<std::string> tokens = split_tokens(line);
      if (tokens.size() != vertex.properties.size()) {
        throw ParseError(name, lineno,
                         "vertex row has " + std::to_string(tokens.size()) + " values, expected " +
                             std::to_string(vertex.properties.size()));
      }
      const double x = parse_double_token(tokens[x_prop], name, lineno);
      const double y = parse_double_token(tokens[y_prop], name, lineno);
      const double z = parse_double_token(tokens[z_prop], name, lineno);
      if (!std::isfinite(x) || !std::isfinite(y) || !std::isfinite(z)) {
        ++result.dropped_non_finite;
        continue;
      }
      result.set.points.emplace_back(x, y, z);
    }
  } else {
    std::vector<unsigned char> row(static_cast<std::size_t>(stride));
    for (long long r = 0; r < vertex.count; ++r) {
      in.read(reinterpret_cast<char*>(row.data()), stride);
      if (in.gcount() != stride) {
        throw ParseError(name, 0, "unexpected end of file in vertex data");
      }
      const double x = decode_scalar(row.data() + x_offset, x_type);
      const double y = decode_scalar(row.data() + y_offset, y_type);
      const double z = decode_scalar(row.data() + z_offset, z_type);
      if (!std::isfinite(x) || !std::isfinite(y) || !std::isfinite(z)) {
        ++result.dropped_non_finite;
        continue;
      }
      result.set.points.emplace_back(x, y, z);
    }
  }
  return result;
}

void write_ply(const PointSet& set, const std::filesystem::path& path, PlyFormat format) {
  static_assert(std::endian::native == std::endian::little,
                "binary output assumes a little-endian host");
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw IoError("cannot write " + path.string());
  }
  out << "ply\n";
  out << (format == PlyFormat::ascii ? "format ascii 1.0\n" : "format binary_little_endian 1.0\n");
  out << "element vertex " << set.points.size() << "\n";
  out << "property double x\nproperty double y\nproperty double z\n";
  out << "end_header\n";
  if (format == PlyFormat::ascii) {
    char buffer[96];
    for (const Point3& p : set.points) {
      std::snprintf(buffer, sizeof(buffer), "%.17g %.17g %.17g\n", p.x(), p.y(), p.z());
      out << buffer;
    }
  } else {
    for (const Point3& p : set.points) {
      const double xyz[3] = {p.x(), p.y(), p.z()};
      out.write(reinterpret_cast<const char*>(xyz), sizeof(xyz));
    }
  }
  if (!out) {
    throw IoError("failed while writing " + path.string());
  }
}

PointSet downsample(const PointSet& set, std::size_t target, std::uint64_t seed) {
  if (target >= set.points.size()) return set;
  if (target == 0) {
    PointSet empty;
    empty.id = set.id;
    return empty;
  }
  const std::size_t n = set.points.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  // Partial Fisher-Yates with a plain modulo draw keeps the selection
  // reproducible across standard libraries.
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < target; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng() % (n - i));
    std::swap(order[i], order[j]);
  }
  order.resize(target);
  std::sort(order.begin(), order.end());
  PointSet out;
  out.id = set.id;
  out.points.reserve(target);
  for (std::size_t i : order) out.points.push_back(set.points[i]);
  return out;
}

std::vector<RigidTransform> read_transforms(const std::filesystem::path& path) {
  const std::string name = path.string();
  std::ifstream in(path);
  if (!in) {
    throw IoError("cannot open " + name);
  }
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(name, 0, e.what());
  }
  if (!doc.is_array() || doc.empty()) {
    throw ParseError(name, 0, "expected a non-empty array of transform objects");
  }

  std::map<int, RigidTransform> by_view;
  for (const nlohmann::json& item : doc) {
    if (!item.is_object() || !item.contains("view") || !item.contains("rotation") ||
        !item.contains("translation")) {
      throw ParseError(name, 0, "each entry needs 'view', 'rotation', and 'translation'");
    }
    if (!item["view"].is_number_integer() || item["view"].get<int>() < 1) {
      throw ParseError(name, 0, "'view' must be a positive integer");
    }
    const int view = item["view"].get<int>();
    const nlohmann::json& rotation = item["rotation"];
    if (!rotation.is_array() || rotation.size() != 3) {
      throw ParseError(name, 0, "'rotation' must be a 3x3 array of rows");
    }
    RigidTransform t;
    for (int r = 0; r < 3; ++r) {
      const nlohmann::json& row = rotation[r];
      if (!row.is_array() || row.size() != 3) {
        throw ParseError(name, 0, "'rotation' must be a 3x3 array of rows");
      }
      for (int c = 0; c < 3; ++c) {
        if (!row[c].is_number()) {
          throw ParseError(name, 0, "'rotation' entries must be numbers");
        }
        t.rotation(r, c) = row[c].get<double>();
      }
    }
    const nlohmann::json& translation = item["translation"];
    if (!translation.is_array() || translation.size() != 3) {
      throw ParseError(name, 0, "'translation' must be an array of 3 numbers");
    }
    for (int c = 0; c < 3; ++c) {
      if (!translation[c].is_number()) {
        throw ParseError(name, 0, "'translation' entries must be numbers");
      }
      t.translation(c) = translation[c].get<double>();
    }

    if (!t.rotation.allFinite() || !t.translation.allFinite()) {
      throw ParseError(name, 0, "transform for view " + std::to_string(view) + " is not finite");
    }
    if (t.rotation.determinant() < 0.0) {
      throw ParseError(name, 0, "rotation for view " + std::to_string(view) +
                                    " has a negative determinant");
    }
    if (t.orthonormality_defect() > 1e-3) {
      throw ParseError(name, 0, "rotation for view " + std::to_string(view) +
                                    " deviates from a rotation beyond 1e-3");
    }
    if (!by_view.emplace(view, t.orthonormalized()).second) {
      throw ParseError(name, 0, "duplicate view " + std::to_string(view));
    }
  }

  std::vector<RigidTransform> out;
  out.reserve(by_view.size());
  int expected = 1;
  for (const auto& [view, t] : by_view) {
    if (view != expected) {
      throw ParseError(name, 0, "views must cover 1..M without gaps (missing view " +
                                    std::to_string(expected) + ")");
    }
    out.push_back(t);
    ++expected;
  }
  return out;
}

void write_transforms(const std::vector<RigidTransform>& transforms,
                      const std::filesystem::path& path) {
  nlohmann::json doc = nlohmann::json::array();
  for (std::size_t i = 0; i < transforms.size(); ++i) {
    nlohmann::json rotation = nlohmann::json::array();
    for (int r = 0; r < 3; ++r) {
      rotation.push_back({transforms[i].rotation(r, 0), transforms[i].rotation(r, 1),
                          transforms[i].rotation(r, 2)});
    }
    doc.push_back({{"view", i + 1},
                   {"rotation", rotation},
                   {"translation",
                    {transforms[i].translation.x(), transforms[i].translation.y(),
                     transforms[i].translation.z()}}});
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

void write_q_trace(const std::vector<double>& q_values, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) {
    throw IoError("cannot write " + path.string());
  }
  out << "iteration,q\n";
  char buffer[64];
  for (std::size_t k = 0; k < q_values.size(); ++k) {
    std::snprintf(buffer, sizeof(buffer), "%zu,%.17g\n", k + 1, q_values[k]);
    out << buffer;
  }
  if (!out) {
    throw IoError("failed while writing " + path.string());
  }
}

}  // namespace stmmreg
