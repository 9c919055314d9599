#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "mtml/grid.hpp"

namespace mtml::io {

// MVOX, little-endian:
//   "MVX1" | u32 nx, ny, nz | f32 voxel_size | 3 x f32 origin | u16 num_classes
//   | nx*ny*nz x (u16 semantic, u16 instance), x fastest.
std::vector<char> encode_mvox(const VoxelGrid& grid);
VoxelGrid decode_mvox(const std::vector<char>& bytes);
void write_mvox(const std::filesystem::path& path, const VoxelGrid& grid);
VoxelGrid read_mvox(const std::filesystem::path& path);

// ASCII PLY with per-vertex x y z, red green blue, label, instance.
void write_ply(const std::filesystem::path& path, const PointCloud& cloud);
PointCloud read_ply(const std::filesystem::path& path);

// Voxel centers of every non-empty voxel, colored by `labels` through a
// palette seeded by the label value (0 renders grey).
PointCloud grid_to_cloud(const VoxelGrid& grid, const std::vector<Label>& labels);
std::array<std::uint8_t, 3> label_color(Label label);

// Whole-file helpers that raise IoError with the offending path.
std::vector<char> read_file(const std::filesystem::path& path);
// Writes to a sibling temporary file, then renames over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);
void write_file_atomic(const std::filesystem::path& path, const std::vector<char>& contents);

}  // namespace mtml::io
