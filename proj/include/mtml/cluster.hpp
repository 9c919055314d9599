#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mtml/grid.hpp"
#include "mtml/model.hpp"

namespace mtml {

struct MeanShiftParams {
  std::vector<double> bandwidths{0.5, 0.75, 1.0};
  double epsilon = 1e-4;  // relative to the bandwidth
  int max_iterations = 300;

  // Bandwidths {d, 1.5 d, 2 d} for margin d.
  static MeanShiftParams from_delta_var(double delta_var);
  void validate() const;
  bool operator==(const MeanShiftParams&) const = default;
};

struct MeanShiftResult {
  std::vector<std::vector<double>> modes;
  std::vector<int> assignment;  // point -> mode
};

// Flat-kernel mean shift. Seeds are the first point of every occupied
// bandwidth-sized bin; converged modes closer than bandwidth / 2 to a more
// populated mode are merged into it; each point joins its nearest mode.
MeanShiftResult mean_shift(const std::vector<std::vector<double>>& points, double bandwidth,
                           double epsilon = 1e-4, int max_iterations = 300);

struct Provenance {
  int bandwidth_index = -1;
  int split_id = -1;  // connected component index, -1 for the full cluster
  bool operator==(const Provenance&) const = default;
};

struct InstanceProposal {
  std::vector<VoxelIndex> voxels;  // sorted
  double fe_coherency = 0.0;
  double dir_coherency = 0.0;
  double size_score = 0.0;
  double final_score = 0.0;
  Label semantic = 0;
  Provenance provenance;
};

struct SizeBand {
  double n_min = 0.0;
  double n_max = 0.0;
  bool operator==(const SizeBand&) const = default;
};

struct ScoreWeights {
  double w_fe = 1.0;
  double w_dir = 1.0;
  double w_size = 0.5;
  std::map<Label, SizeBand> size_bands;  // classes without a band score 1

  void validate() const;
  bool operator==(const ScoreWeights&) const = default;
};

struct ClusterParams {
  MeanShiftParams mean_shift;
  ScoreWeights weights;
  double delta_var = 0.5;
  double nms_threshold = 0.3;
  std::set<Label> ignore_classes{1};

  void validate() const;
  bool operator==(const ClusterParams&) const = default;
};

void to_json(nlohmann::json& j, const MeanShiftParams& p);
void from_json(const nlohmann::json& j, MeanShiftParams& p);
void to_json(nlohmann::json& j, const ScoreWeights& w);
void from_json(const nlohmann::json& j, ScoreWeights& w);
void to_json(nlohmann::json& j, const ClusterParams& p);
void from_json(const nlohmann::json& j, ClusterParams& p);

// Voxels with a non-empty, non-ignored semantic id, ascending.
std::vector<VoxelIndex> semantic_mask(const VoxelGrid& grid, const std::set<Label>& ignore_classes);

// Mean shift on the masked embeddings at every bandwidth, plus the
// connected pieces of every cluster that falls apart spatially.
std::vector<InstanceProposal> generate_proposals(const FieldPair<float>& fields, const VoxelGrid& grid,
                                                 std::span<const VoxelIndex> mask, const MeanShiftParams& params);

double fe_coherency(const InstanceProposal& proposal, const Tensor<float>& embedding, double delta_var);
double dir_coherency(const InstanceProposal& proposal, const Tensor<float>& direction, const VoxelGrid& grid);
double size_score(std::size_t voxel_count, Label semantic, const ScoreWeights& weights);
double final_score(double fe, double dir, double size, const ScoreWeights& weights);

// Modal semantic id over the members; `ignore_classes` and 0 do not vote.
// Returns 0 if no member votes.
Label assign_semantic(const InstanceProposal& proposal, const VoxelGrid& grid,
                      const std::set<Label>& ignore_classes = {});

// Sorted-set intersection over union; 0 for two empty sets.
double mask_iou(std::span<const VoxelIndex> a, std::span<const VoxelIndex> b);

// Greedy by descending final score, ties to the smaller first voxel.
std::vector<InstanceProposal> nms(std::vector<InstanceProposal> proposals, double iou_threshold = 0.3);

// generate_proposals -> assign_semantic -> scores -> nms.
std::vector<InstanceProposal> segment_scene(const FieldPair<float>& fields, const VoxelGrid& grid,
                                            const ClusterParams& params);

// Prediction files: {"scene", "instances": [{semantic_id, final_score, ..., voxels: [[start, length], ...]}]}.
std::vector<std::pair<VoxelIndex, VoxelIndex>> run_length_encode(std::span<const VoxelIndex> sorted);
std::vector<VoxelIndex> run_length_decode(const std::vector<std::pair<VoxelIndex, VoxelIndex>>& runs);
nlohmann::json predictions_to_json(const std::string& scene, const std::vector<InstanceProposal>& proposals);
std::vector<InstanceProposal> predictions_from_json(const nlohmann::json& j);

}  // namespace mtml
