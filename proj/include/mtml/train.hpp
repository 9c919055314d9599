#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mtml/cluster.hpp"
#include "mtml/loss.hpp"
#include "mtml/model.hpp"
#include "mtml/synthgen.hpp"

namespace mtml {

struct TrainConfig {
  std::filesystem::path data_dir;
  std::filesystem::path out_dir;
  std::string train_split = "train";
  int epochs = 100;
  int batch_size = 2;
  double learning_rate = 5e-4;
  std::uint64_t seed = 0;
  bool augment = true;
  double input_noise = 0.0;
  int max_scenes = 0;        // 0 = whole split
  int max_steps = 0;         // 0 = no limit
  int checkpoint_every = 0;  // steps; 0 = end of every epoch
  ModelConfig model;
  LossParams loss;

  // Throws ConfigError.
  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct LossValues {
  double var = 0.0, dist = 0.0, reg = 0.0, fe = 0.0, dir = 0.0, joint = 0.0;
};

struct StepLog {
  int step = 0;  // 1-based
  int epoch = 0;
  LossValues loss;  // batch means
};

struct TrainResult {
  std::filesystem::path checkpoint;
  std::filesystem::path log;
  int steps = 0;
  std::vector<StepLog> history;
};

// Random element of the square's symmetry group: rotation then optional x flip.
SceneSample augment_d4(const SceneSample& sample, int element);

// One optimizer step's worth of loss and gradients for a single scene.
LossValues scene_gradients(const Model<float>& model, const SceneSample& sample, const Tensor<float>& input,
                           const LossParams& params, std::vector<Tensor<float>>* grads);

// Writes loss.csv (step, epoch, L_var, L_dist, L_reg, L_dir, L_joint),
// periodic last.mtml and final model.mtml under out_dir. Throws
// NumericalDivergence on a non-finite loss.
TrainResult train(const TrainConfig& config, const std::function<void(const StepLog&)>& on_step = {});
// Same loop on scenes already in memory; nothing is written when out_dir is empty.
TrainResult train_on(const TrainConfig& config, const std::vector<SceneSample>& scenes, Model<float>& model,
                     const std::function<void(const StepLog&)>& on_step = {});

struct EpochReport {
  LossValues loss;  // scene means
  double ap50 = 0.0;
  double ap = 0.0;
  std::size_t scenes = 0;
  nlohmann::json to_json() const;
};

EpochReport evaluate_epoch(const Model<float>& model, const Dataset& data, const std::string& split,
                           const LossParams& loss, const ClusterParams& cluster, int max_scenes = 0);
EpochReport evaluate_scenes(const Model<float>& model, const std::vector<SceneSample>& scenes,
                            const LossParams& loss, const ClusterParams& cluster);

// Instances of one scene: optional label noise, padding to the pooling
// multiple, forward pass and clustering; indices refer to `grid`.
std::vector<InstanceProposal> predict_scene(const Model<float>& model, const VoxelGrid& grid,
                                            const ClusterParams& cluster, double noise = 0.0,
                                            std::uint64_t seed = 0, FieldPair<float>* fields_out = nullptr);

}  // namespace mtml
