#pragma once

#include <set>
#include <vector>

#include <json.hpp>

#include "mtml/grid.hpp"
#include "mtml/model.hpp"
#include "mtml/tape.hpp"

namespace mtml {

struct LossParams {
  double delta_var = 0.5;
  double delta_dist = 1.5;
  double gamma_var = 1.0;
  double gamma_dist = 1.0;
  double gamma_reg = 0.001;
  double alpha_fe = 0.5;
  double alpha_dir = 1.0;
  std::set<Label> ignore_classes{kGroundClass};

  // Throws ConfigError unless delta_dist > delta_var > 0 and weights are >= 0.
  void validate() const;
  bool operator==(const LossParams&) const = default;
};

void to_json(nlohmann::json& j, const LossParams& p);
void from_json(const nlohmann::json& j, LossParams& p);

struct ClusterMembers {
  Label instance = 0;
  Label semantic = 0;
  std::vector<VoxelIndex> voxels;
  Vec3 center{0.f, 0.f, 0.f};  // world-space center of mass
};

// Ground-truth clusters that enter the losses: non-empty, non-ignored instances.
struct ClusterStats {
  std::vector<ClusterMembers> clusters;
  std::size_t size() const noexcept { return clusters.size(); }
};

ClusterStats build_cluster_stats(const SceneSample& sample, const LossParams& params);

// Unit vectors from each member voxel toward its instance center, one per
// grid voxel. Voxels outside the clusters or sitting on the center are zero.
std::vector<Vec3> gt_directions(const ClusterStats& stats, const VoxelGrid& grid);

// Per-cluster mean embedding, shaped {C, D}. `embedding` is {D, ...}.
template <typename T>
Var<T> cluster_means(Var<T> embedding, const ClusterStats& stats);

// (1/C) sum_c (1/N_c) sum_i [||mu_c - x_i|| - delta_var]_+^2
template <typename T>
Var<T> l_var(Var<T> embedding, Var<T> means, const ClusterStats& stats, const LossParams& params);
// 1/(C(C-1)) sum_{a != b} [2 delta_dist - ||mu_a - mu_b||]_+^2, zero for C <= 1.
template <typename T>
Var<T> l_dist(Var<T> means, const LossParams& params);
// (1/C) sum_c ||mu_c||
template <typename T>
Var<T> l_reg(Var<T> means);
template <typename T>
Var<T> l_fe(Var<T> var, Var<T> dist, Var<T> reg, const LossParams& params);
// -(1/C) sum_c (1/N_c) sum_i v_i . v_i^GT over non-center members.
template <typename T>
Var<T> l_dir(Var<T> direction, const std::vector<Vec3>& v_gt, const ClusterStats& stats);

template <typename T>
struct LossTerms {
  Var<T> var, dist, reg, fe, dir, joint;
  // No clusters in the sample: every term is a constant zero.
  bool degenerate = false;
};

// alpha_FE * L_FE + alpha_dir * L_dir for one scene.
template <typename T>
LossTerms<T> l_joint(const FieldVars<T>& fields, const SceneSample& sample, const LossParams& params);
template <typename T>
LossTerms<T> l_joint(Var<T> embedding, Var<T> direction, const ClusterStats& stats, const std::vector<Vec3>& v_gt,
                     const LossParams& params);

}  // namespace mtml
