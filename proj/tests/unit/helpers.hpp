#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "mtml/grid.hpp"
#include "mtml/rng.hpp"

namespace testutil {

// Axis-aligned box [lo, hi) of one instance written into `grid`.
inline void fill_box(mtml::VoxelGrid& grid, mtml::Coord lo, mtml::Coord hi, mtml::Label semantic,
                     mtml::Label instance) {
  for (int k = lo.k; k < hi.k; ++k)
    for (int j = lo.j; j < hi.j; ++j)
      for (int i = lo.i; i < hi.i; ++i) {
        const auto v = grid.index({i, j, k});
        grid.semantic()[v] = semantic;
        grid.instance()[v] = instance;
      }
}

inline mtml::SceneSample sample_of(const mtml::VoxelGrid& grid) { return {grid, mtml::extract_labeling(grid)}; }

// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("mtml_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testutil
