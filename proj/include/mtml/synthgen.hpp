#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "mtml/cluster.hpp"
#include "mtml/grid.hpp"
#include "mtml/tensor.hpp"

namespace mtml {

// Semantic ids: 0 empty, 1 ground, 2 + k for shape k.
inline constexpr Label kFirstObjectClass = 2;

struct SynthConfig {
  std::uint64_t seed = 0;
  int num_scenes = 1000;
  int num_train = 900;
  int num_test = 100;
  Dims dims{48, 48, 24};
  float voxel_size = 0.1f;
  // Cuboid extents in voxels (x, y, z), one class each.
  std::vector<std::array<int, 3>> shapes{{4, 4, 4}, {6, 6, 6}, {9, 9, 9}, {4, 4, 9}, {9, 9, 4}};
  int min_objects = 3;
  int max_objects = 8;
  double contact_probability = 0.5;
  int max_attempts = 1000;
  int max_retries = 32;

  Label num_classes() const { return static_cast<Label>(1 + shapes.size()); }
  // Throws ConfigError.
  void validate() const;
  bool operator==(const SynthConfig&) const = default;
};

void to_json(nlohmann::json& j, const SynthConfig& c);
void from_json(const nlohmann::json& j, SynthConfig& c);

struct PlacedObject {
  Label instance = 0;
  Label semantic = 0;
  int shape = 0;
  double cx = 0.0;  // footprint center, voxel units
  double cy = 0.0;
  double yaw = 0.0;
  bool contact = false;
  std::size_t voxel_count = 0;
};

struct SceneRecord {
  int index = 0;
  std::string file;
  std::uint64_t seed = 0;
  int retries = 0;  // failed sub-seeds before this one
  std::vector<PlacedObject> objects;
};

void to_json(nlohmann::json& j, const PlacedObject& o);
void to_json(nlohmann::json& j, const SceneRecord& r);

struct GeneratedScene {
  SceneSample sample;
  SceneRecord record;
};

// Deterministic in (config.seed, index). Throws PlacementError only when
// every sub-seed fails.
GeneratedScene generate_scene(const SynthConfig& config, int index);

// Percentile with linear interpolation between order statistics.
double percentile(std::vector<double> values, double q);
// Per-class [5th, 95th] percentile of instance voxel counts.
std::map<Label, SizeBand> size_bands(const std::vector<SceneRecord>& records);

// Writes scenes/scene_NNNN.mvox and manifest.json under `out_dir`.
nlohmann::json generate_dataset(const SynthConfig& config, const std::filesystem::path& out_dir, int jobs = 1);

class Dataset {
 public:
  // Throws IoError if the manifest is missing or malformed.
  static Dataset open(const std::filesystem::path& root);

  const std::filesystem::path& root() const noexcept { return root_; }
  const nlohmann::json& manifest() const noexcept { return manifest_; }
  // Throws ConfigError for an unknown split name.
  const std::vector<std::string>& split(const std::string& name) const;
  const std::map<Label, SizeBand>& size_bands() const noexcept { return bands_; }
  SceneSample load(const std::string& file) const;

 private:
  std::filesystem::path root_;
  nlohmann::json manifest_;
  std::map<std::string, std::vector<std::string>> splits_;
  std::map<Label, SizeBand> bands_;
};

SceneSample load_scene(const std::filesystem::path& mvox);

// Each occupied voxel takes a uniformly drawn other class with probability p.
VoxelGrid apply_label_noise(const VoxelGrid& grid, double p, std::uint64_t seed);

// One-hot {num_classes, nz, ny, nx}; channel c - 1 holds semantic id c.
Tensor<float> encode_input(const VoxelGrid& grid);
Tensor<float> encode_input(const VoxelGrid& grid, double noise, std::uint64_t seed);

}  // namespace mtml
