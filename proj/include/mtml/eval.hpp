#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "mtml/cluster.hpp"
#include "mtml/grid.hpp"

namespace mtml {

struct EvalOptions {
  std::set<Label> ignore_classes{kGroundClass};
  // Class names for the report; unnamed classes print as "class <id>".
  std::map<Label, std::string> class_names;
};

// Ground truth and predictions for one scene.
struct SceneEval {
  std::string name;
  VoxelGrid gt;
  std::vector<InstanceProposal> predictions;
};

// IoU thresholds 0.50, 0.55, ..., 0.95.
std::vector<double> ap_thresholds();

// All-point interpolated area under the PR curve of a ranked hit list.
// Hits must already be in descending score order.
double interpolated_ap(const std::vector<bool>& hits, std::size_t gt_count);

// Per-class AP at one IoU threshold over every scene; nullopt if the class
// has no ground-truth instance.
std::optional<double> average_precision(const std::vector<SceneEval>& scenes, Label semantic, double iou_threshold,
                                        const EvalOptions& options = {});

struct ClassRow {
  Label semantic = 0;
  std::string name;
  double ap = 0.0;
  double ap50 = 0.0;
  double ap25 = 0.0;
  std::size_t gt_count = 0;
  std::size_t prediction_count = 0;
};

struct MatchRecord {
  std::string scene;
  std::size_t prediction = 0;  // index within the scene
  Label semantic = 0;
  double score = 0.0;
  int matched_gt = -1;  // instance id matched at IoU 0.5, -1 if none
  double iou = 0.0;     // best IoU with a same-class GT instance
};

struct EvalReport {
  std::vector<ClassRow> classes;
  ClassRow average;
  std::size_t scene_count = 0;
  std::vector<MatchRecord> matches;

  nlohmann::json to_json() const;
  // Aligned columns: class, AP, AP50, AP25, then the average row.
  std::string to_table() const;
};

EvalReport ap_summary(const std::vector<SceneEval>& scenes, const EvalOptions& options = {});

// One proposal per present class covering all of its voxels.
std::vector<InstanceProposal> baseline_seg_as_instance(const VoxelGrid& grid,
                                                       const std::set<Label>& ignore_classes = {kGroundClass});
// One proposal per 6-connected component of each class mask.
std::vector<InstanceProposal> baseline_connected_components(const VoxelGrid& grid,
                                                            const std::set<Label>& ignore_classes = {kGroundClass});

}  // namespace mtml
