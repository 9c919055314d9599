#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "mtml/error.hpp"

namespace mtml {

using Vec3 = std::array<float, 3>;
using VoxelIndex = std::uint32_t;
using Label = std::uint16_t;

// Ground plane id in the synthetic data; ignored by default.
inline constexpr Label kGroundClass = 1;

struct Dims {
  int nx = 0;
  int ny = 0;
  int nz = 0;

  std::size_t count() const noexcept {
    return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny) * static_cast<std::size_t>(nz);
  }
  bool operator==(const Dims&) const = default;
};

struct Coord {
  int i = 0;
  int j = 0;
  int k = 0;
  bool operator==(const Coord&) const = default;
};

// Dense labeled lattice. Linear index is x-fastest: i + nx * (j + ny * k).
// Semantic id 0 is empty; valid class ids are 1..num_classes.
class VoxelGrid {
 public:
  VoxelGrid() = default;
  VoxelGrid(Dims dims, float voxel_size = 0.1f, Vec3 origin = {0.f, 0.f, 0.f}, Label num_classes = 0);

  const Dims& dims() const noexcept { return dims_; }
  std::size_t size() const noexcept { return semantic_.size(); }
  float voxel_size() const noexcept { return voxel_size_; }
  const Vec3& origin() const noexcept { return origin_; }
  Label num_classes() const noexcept { return num_classes_; }
  void set_num_classes(Label n) { num_classes_ = n; }
  void set_origin(Vec3 o) { origin_ = o; }

  std::span<Label> semantic() noexcept { return semantic_; }
  std::span<const Label> semantic() const noexcept { return semantic_; }
  std::span<Label> instance() noexcept { return instance_; }
  std::span<const Label> instance() const noexcept { return instance_; }

  bool contains(Coord c) const noexcept {
    return c.i >= 0 && c.j >= 0 && c.k >= 0 && c.i < dims_.nx && c.j < dims_.ny && c.k < dims_.nz;
  }
  VoxelIndex index(Coord c) const noexcept {
    return static_cast<VoxelIndex>(c.i + dims_.nx * (c.j + dims_.ny * c.k));
  }
  Coord coord(VoxelIndex idx) const noexcept {
    const int i = static_cast<int>(idx % dims_.nx);
    const int rest = static_cast<int>(idx / dims_.nx);
    return Coord{i, rest % dims_.ny, rest / dims_.ny};
  }

  // Throws InvalidGeometry when a stated invariant does not hold.
  void validate() const;

  bool operator==(const VoxelGrid&) const = default;

 private:
  Dims dims_;
  float voxel_size_ = 0.1f;
  Vec3 origin_{0.f, 0.f, 0.f};
  Label num_classes_ = 0;
  std::vector<Label> semantic_;
  std::vector<Label> instance_;
};

struct PointCloud {
  std::vector<Vec3> points;
  std::vector<Label> semantic;
  std::vector<Label> instance;
  std::vector<std::array<std::uint8_t, 3>> color;  // optional; empty or one per point

  std::size_t size() const noexcept { return points.size(); }
  void validate() const;
};

struct InstanceInfo {
  Label semantic = 0;
  std::vector<VoxelIndex> voxels;  // sorted
  Vec3 center_of_mass{0.f, 0.f, 0.f};
};

// instance id -> members; ordered by id.
using InstanceLabeling = std::map<Label, InstanceInfo>;

struct SceneSample {
  VoxelGrid grid;
  InstanceLabeling gt;
};

enum class OriginPolicy { MinCorner, Given };

// origin + (i + 0.5, j + 0.5, k + 0.5) * voxel_size
Vec3 voxel_center(const VoxelGrid& grid, VoxelIndex index);

VoxelGrid voxelize(const PointCloud& cloud, float voxel_size, OriginPolicy policy = OriginPolicy::MinCorner,
                   Vec3 origin = {0.f, 0.f, 0.f});

// Per-point label of the containing voxel; points outside the grid get 0.
std::vector<Label> devoxelize(const VoxelGrid& grid, std::span<const Label> voxel_labels, const PointCloud& cloud);

// Members and centers of mass for every non-zero instance id in the grid.
InstanceLabeling extract_labeling(const VoxelGrid& grid);

enum class Connectivity { Six = 6, Eighteen = 18, TwentySix = 26 };

// Maximal connected subsets of `mask`, each sorted, ordered by smallest
// member. With `labels`, neighbours are joined only when their labels agree.
std::vector<std::vector<VoxelIndex>> connected_components(const Dims& dims, std::span<const VoxelIndex> mask,
                                                          Connectivity connectivity = Connectivity::Six,
                                                          std::span<const Label> labels = {});

// Lattice-preserving symmetries of a scene.
struct Augmentation {
  enum class Kind { Identity, FlipX, FlipY, RotateZ };
  Kind kind = Kind::Identity;
  int quarter_turns = 0;  // RotateZ only, counter-clockwise

  static Augmentation identity() { return {}; }
  static Augmentation flip_x() { return {Kind::FlipX, 0}; }
  static Augmentation flip_y() { return {Kind::FlipY, 0}; }
  static Augmentation rotate_z(int quarter_turns) { return {Kind::RotateZ, ((quarter_turns % 4) + 4) % 4}; }

  Augmentation inverse() const;
};

SceneSample augment(const SceneSample& sample, Augmentation op);

// Grid zero-padded at the high end of every axis up to a multiple of `multiple`.
VoxelGrid pad_to_multiple(const VoxelGrid& grid, int multiple);

}  // namespace mtml
