#pragma once

#include "stmmreg/errors.hpp"
#include "stmmreg/geometry.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace stmmreg {

enum class PlyFormat { ascii, binary_le };

struct PlyReadResult {
  PointSet set;                 // id is left 0; callers assign view indices
  int dropped_non_finite = 0;   // vertex rows rejected for NaN/inf coordinates
};

/// Reads the vertex positions of an ascii or binary_little_endian PLY file.
/// x, y, z may be float or double; other vertex properties and non-vertex
/// elements (faces etc.) are skipped. big-endian files and list properties
/// inside or before the vertex element are rejected as unsupported.
PlyReadResult read_ply(const std::filesystem::path& path);

/// Writes vertices only. ASCII output carries 17 significant digits so that
/// doubles survive a round-trip exactly.
void write_ply(const PointSet& set, const std::filesystem::path& path,
               PlyFormat format = PlyFormat::ascii);

/// Uniform subsample without replacement, order-stable: the kept points
/// appear in their original relative order. target >= size returns the set
/// unchanged.
PointSet downsample(const PointSet& set, std::size_t target, std::uint64_t seed);

/// Transform list JSON: an array of {view, rotation (row-major 3x3),
/// translation [3]} objects covering views 1..M exactly. Rotations are
/// re-orthonormalized on load; a defect beyond 1e-3 or a negative
/// determinant is rejected.
std::vector<RigidTransform> read_transforms(const std::filesystem::path& path);

void write_transforms(const std::vector<RigidTransform>& transforms,
                      const std::filesystem::path& path);

/// Per-sweep objective trace as CSV with header "iteration,q".
void write_q_trace(const std::vector<double>& q_values, const std::filesystem::path& path);

}  // namespace stmmreg
