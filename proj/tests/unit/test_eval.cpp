#include <gtest/gtest.h>

#include <cmath>

#include "../oracle/ap_oracle.hpp"
#include "helpers.hpp"
#include "mtml/eval.hpp"
#include "mtml/rng.hpp"

using namespace mtml;

namespace {

InstanceProposal pred(Label semantic, double score, std::vector<VoxelIndex> voxels) {
  InstanceProposal p;
  p.semantic = semantic;
  p.final_score = score;
  p.voxels = std::move(voxels);
  return p;
}

// 1-D row scene; each entry (semantic, instance).
VoxelGrid row_grid(const std::vector<std::pair<Label, Label>>& cells) {
  VoxelGrid g(Dims{static_cast<int>(cells.size()), 1, 1});
  for (std::size_t v = 0; v < cells.size(); ++v) {
    g.semantic()[v] = cells[v].first;
    g.instance()[v] = cells[v].second;
  }
  return g;
}

std::vector<VoxelIndex> range(VoxelIndex a, VoxelIndex b) {
  std::vector<VoxelIndex> r;
  for (VoxelIndex v = a; v < b; ++v) r.push_back(v);
  return r;
}

// Scene of `count` same-class GT instances, each `len` voxels along x, with
// random predictions that overlap them to varying degrees.
SceneEval random_scene(Rng& rng, int count, int len, int preds) {
  std::vector<std::pair<Label, Label>> cells;
  for (int g = 0; g < count; ++g)
    for (int k = 0; k < len; ++k) cells.push_back({2, static_cast<Label>(g + 1)});
  SceneEval s{"r", row_grid(cells), {}};
  const int n = count * len;
  for (int p = 0; p < preds; ++p) {
    const int a = rng.uniform_int(0, n - 1);
    const int b = rng.uniform_int(a + 1, n);
    s.predictions.push_back(pred(2, rng.uniform(), range(a, b)));
  }
  return s;
}

}  // namespace

TEST(Ap, OnePerfectMatch) {
  const VoxelGrid g = row_grid({{2, 1}, {2, 1}});
  const std::vector<SceneEval> s{{"a", g, {pred(2, 0.9, {0, 1})}}};
  EXPECT_EQ(average_precision(s, 2, 0.5).value(), 1.0);
}

TEST(Ap, LowerScoredMatchGivesHalf) {
  const VoxelGrid h = row_grid({{3, 1}, {3, 1}, {0, 0}, {0, 0}});
  const std::vector<SceneEval> s{{"a", h, {pred(3, 0.9, {2, 3}), pred(3, 0.5, {0, 1})}}};
  EXPECT_EQ(average_precision(s, 3, 0.5).value(), 0.5);
}

TEST(Ap, NoPredictions) {
  const std::vector<SceneEval> s{{"a", row_grid({{2, 1}}), {}}};
  EXPECT_EQ(average_precision(s, 2, 0.5).value(), 0.0);
  EXPECT_FALSE(average_precision(s, 4, 0.5).has_value());
  EXPECT_FALSE(average_precision(s, kGroundClass, 0.5).has_value());
}

TEST(Ap, InterpolatedCurve) {
  EXPECT_DOUBLE_EQ(interpolated_ap({true, false, true}, 2), 0.5 + 0.5 * (2.0 / 3.0));
  EXPECT_EQ(interpolated_ap({}, 3), 0.0);
  EXPECT_EQ(interpolated_ap({true}, 0), 0.0);
}

TEST(Ap, IgnoredVoxelsDoNotCount) {
  // Prediction spills onto ground and empty space; IoU stays 1.
  const VoxelGrid g = row_grid({{kGroundClass, 0}, {2, 1}, {2, 1}, {0, 0}});
  const std::vector<SceneEval> s{{"a", g, {pred(2, 1.0, {0, 1, 2, 3})}}};
  const EvalReport r = ap_summary(s);
  EXPECT_EQ(r.classes.at(0).ap, 1.0);
  EXPECT_EQ(r.matches.at(0).iou, 1.0);
}

TEST(Ap, PredictionOutsideSceneThrows) {
  const std::vector<SceneEval> s{{"a", row_grid({{2, 1}}), {pred(2, 1.0, {5})}}};
  EXPECT_THROW(average_precision(s, 2, 0.5), Error);
}

TEST(ApSummary, PerfectPredictions) {
  const VoxelGrid g = row_grid({{2, 1}, {2, 1}, {0, 0}, {3, 2}, {3, 2}, {2, 3}});
  std::vector<InstanceProposal> preds;
  for (const auto& [id, info] : extract_labeling(g)) preds.push_back(pred(info.semantic, 1.0, info.voxels));
  const EvalReport r = ap_summary({{"a", g, preds}});
  ASSERT_EQ(r.classes.size(), 2u);
  for (const ClassRow& row : r.classes) {
    EXPECT_EQ(row.ap, 1.0);
    EXPECT_EQ(row.ap50, 1.0);
    EXPECT_EQ(row.ap25, 1.0);
  }
  EXPECT_EQ(r.average.ap50, 1.0);
  const auto j = r.to_json();
  EXPECT_EQ(j.at("classes").size(), 2u);
  EXPECT_TRUE(j.contains("average"));
  // Header, column names, one row per class and the average row.
  const std::string table = r.to_table();
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 2 + 2 + 1);
  for (const MatchRecord& m : r.matches) EXPECT_GE(m.matched_gt, 1);
}

TEST(ApSummary, MonotoneAcrossThresholds) {
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<SceneEval> scenes;
    for (int s = 0; s < 3; ++s) scenes.push_back(random_scene(rng, rng.uniform_int(1, 4), rng.uniform_int(2, 6), rng.uniform_int(0, 8)));
    for (const ClassRow& row : ap_summary(scenes).classes) {
      EXPECT_LE(row.ap, row.ap50 + 1e-12);
      EXPECT_LE(row.ap50, row.ap25 + 1e-12);
      EXPECT_GE(row.ap, 0.0);
      EXPECT_LE(row.ap25, 1.0);
    }
  }
}

TEST(ApSummary, MatchesBruteForceEnumeration) {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const SceneEval s = random_scene(rng, rng.uniform_int(1, 4), rng.uniform_int(2, 6), rng.uniform_int(0, 10));
    std::vector<oracle::Pred> preds;
    for (const auto& p : s.predictions) preds.push_back({p.final_score, {p.voxels.begin(), p.voxels.end()}});
    std::vector<std::set<int>> gts;
    for (const auto& [id, info] : extract_labeling(s.gt)) gts.emplace_back(info.voxels.begin(), info.voxels.end());
    for (double tau : {0.25, 0.5, 0.75}) {
      EXPECT_NEAR(average_precision({s}, 2, tau).value(), oracle::average_precision(preds, gts, tau), 1e-12);
    }
  }
}

TEST(ApSummary, InvariantToMonotoneScoreTransform) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    SceneEval s = random_scene(rng, 3, 4, 6);
    const double before = average_precision({s}, 2, 0.5).value();
    for (auto& p : s.predictions) p.final_score = std::exp(3.0 * p.final_score) - 7.0;
    EXPECT_EQ(average_precision({s}, 2, 0.5).value(), before);
  }
}

TEST(ApSummary, AddingPredictionsAtTheEnds) {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const SceneEval s = random_scene(rng, 3, 4, 5);
    const double base = average_precision({s}, 2, 0.5).value();
    SceneEval worse = s;
    worse.predictions.push_back(pred(2, -1.0, {0}));
    worse.predictions.back().voxels = {};  // matches nothing
    EXPECT_LE(average_precision({worse}, 2, 0.5).value(), base + 1e-12);
    // An exact top-ranked mask for a ground truth nobody matched.
    std::set<Label> matched;
    for (const auto& m : ap_summary({s}).matches) matched.insert(m.matched_gt);
    for (const auto& [id, info] : extract_labeling(s.gt)) {
      if (info.semantic != 2 || matched.count(id)) continue;
      SceneEval better = s;
      better.predictions.push_back(pred(2, 2.0, info.voxels));
      EXPECT_GT(average_precision({better}, 2, 0.5).value(), base);
      break;
    }
  }
}

TEST(ApSummary, PoolsAcrossScenes) {
  const VoxelGrid g = row_grid({{2, 1}, {2, 1}});
  const std::vector<SceneEval> s{{"a", g, {pred(2, 0.9, {0, 1})}}, {"b", g, {}}};
  EXPECT_EQ(average_precision(s, 2, 0.5).value(), 0.5);
}

TEST(Baselines, SegAsInstance) {
  const VoxelGrid one = row_grid({{2, 1}, {0, 0}, {3, 2}, {kGroundClass, 0}});
  const auto p = baseline_seg_as_instance(one);
  ASSERT_EQ(p.size(), 2u);
  EXPECT_EQ(ap_summary({{"a", one, p}}).average.ap, 1.0);

  const VoxelGrid two = row_grid({{2, 1}, {2, 1}, {0, 0}, {2, 2}});
  const auto merged = baseline_seg_as_instance(two);
  ASSERT_EQ(merged.size(), 1u);
  for (const auto& [id, info] : extract_labeling(two)) EXPECT_LT(mask_iou(merged[0].voxels, info.voxels), 1.0);
  EXPECT_TRUE(baseline_seg_as_instance(VoxelGrid(Dims{3, 3, 3})).empty());
}

TEST(Baselines, ConnectedComponents) {
  const VoxelGrid apart = row_grid({{2, 1}, {2, 1}, {0, 0}, {2, 2}, {3, 3}});
  const auto p = baseline_connected_components(apart);
  EXPECT_EQ(p.size(), 3u);
  EXPECT_EQ(ap_summary({{"a", apart, p}}).average.ap, 1.0);

  const VoxelGrid touching = row_grid({{2, 1}, {2, 1}, {2, 2}, {2, 2}});
  EXPECT_EQ(baseline_connected_components(touching).size(), 1u);

  const VoxelGrid hole = row_grid({{2, 1}, {2, 1}, {0, 0}, {2, 1}, {2, 1}});
  EXPECT_EQ(baseline_connected_components(hole).size(), 2u);
}
