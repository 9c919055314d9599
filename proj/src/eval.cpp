#include "mtml/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>

namespace mtml {

using nlohmann::json;

std::vector<double> ap_thresholds() {
  std::vector<double> t;
  for (int k = 0; k < 10; ++k) t.push_back(0.5 + 0.05 * k);
  return t;
}

double interpolated_ap(const std::vector<bool>& hits, std::size_t gt_count) {
  if (gt_count == 0) return 0.0;
  const std::size_t n = hits.size();
  std::vector<double> precision(n), recall(n);
  std::size_t tp = 0;
  for (std::size_t k = 0; k < n; ++k) {
    tp += hits[k];
    precision[k] = static_cast<double>(tp) / static_cast<double>(k + 1);
    recall[k] = static_cast<double>(tp) / static_cast<double>(gt_count);
  }
  // Precision envelope, then area under the step curve.
  for (std::size_t k = n; k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    ap += (recall[k] - prev_recall) * precision[k];
    prev_recall = recall[k];
  }
  return ap;
}

namespace {

struct GtInstance {
  Label id = 0;
  Label semantic = 0;
};

struct Prediction {
  Label semantic = 0;
  double score = 0.0;
};

struct Prepared {
  std::vector<GtInstance> gts;
  std::vector<Prediction> preds;
  std::vector<std::vector<double>> iou;  // pred x gt, 0 across classes
};

std::vector<Prepared> prepare(const std::vector<SceneEval>& scenes, const EvalOptions& options) {
  std::vector<Prepared> out;
  out.reserve(scenes.size());
  for (const SceneEval& scene : scenes) {
    Prepared p;
    std::vector<std::vector<VoxelIndex>> gt_voxels;
    for (const auto& [id, info] : extract_labeling(scene.gt)) {
      if (info.semantic == 0 || options.ignore_classes.count(info.semantic)) continue;
      p.gts.push_back({id, info.semantic});
      gt_voxels.push_back(info.voxels);
    }
    const auto sem = scene.gt.semantic();
    for (const InstanceProposal& pred : scene.predictions) {
      // Voxels on empty or ignored ground truth do not count either way.
      std::vector<VoxelIndex> kept;
      for (VoxelIndex v : pred.voxels) {
        MTML_CHECK(v < sem.size(), ErrorCode::IndexOutOfBounds, "prediction voxel outside scene " + scene.name);
        if (sem[v] != 0 && !options.ignore_classes.count(sem[v])) kept.push_back(v);
      }
      p.preds.push_back({pred.semantic, pred.final_score});
      std::vector<double> row(p.gts.size(), 0.0);
      for (std::size_t g = 0; g < p.gts.size(); ++g) {
        if (p.gts[g].semantic == pred.semantic) row[g] = mask_iou(kept, gt_voxels[g]);
      }
      p.iou.push_back(std::move(row));
    }
    out.push_back(std::move(p));
  }
  return out;
}

struct Ranked {
  std::size_t scene;
  std::size_t pred;
};

struct MatchResult {
  std::vector<Ranked> order;
  std::vector<bool> hits;
  std::vector<int> matched;  // gt index per ranked prediction
  std::size_t gt_count = 0;
};

MatchResult match_class(const std::vector<Prepared>& scenes, Label semantic, double tau) {
  MatchResult r;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    for (const GtInstance& g : scenes[s].gts) r.gt_count += g.semantic == semantic;
    for (std::size_t k = 0; k < scenes[s].preds.size(); ++k) {
      if (scenes[s].preds[k].semantic == semantic) r.order.push_back({s, k});
    }
  }
  std::stable_sort(r.order.begin(), r.order.end(), [&](const Ranked& a, const Ranked& b) {
    return scenes[a.scene].preds[a.pred].score > scenes[b.scene].preds[b.pred].score;
  });
  std::vector<std::vector<bool>> used(scenes.size());
  for (std::size_t s = 0; s < scenes.size(); ++s) used[s].assign(scenes[s].gts.size(), false);
  for (const Ranked& rk : r.order) {
    const auto& ious = scenes[rk.scene].iou[rk.pred];
    int best = -1;
    double best_iou = -1.0;
    for (std::size_t g = 0; g < ious.size(); ++g) {
      if (used[rk.scene][g] || scenes[rk.scene].gts[g].semantic != semantic) continue;
      if (ious[g] >= tau && ious[g] > best_iou) {
        best = static_cast<int>(g);
        best_iou = ious[g];
      }
    }
    if (best >= 0) used[rk.scene][best] = true;
    r.hits.push_back(best >= 0);
    r.matched.push_back(best);
  }
  return r;
}

std::set<Label> gt_classes(const std::vector<Prepared>& scenes) {
  std::set<Label> out;
  for (const Prepared& p : scenes) {
    for (const GtInstance& g : p.gts) out.insert(g.semantic);
  }
  return out;
}

}  // namespace

std::optional<double> average_precision(const std::vector<SceneEval>& scenes, Label semantic, double iou_threshold,
                                        const EvalOptions& options) {
  if (options.ignore_classes.count(semantic)) return std::nullopt;
  const MatchResult r = match_class(prepare(scenes, options), semantic, iou_threshold);
  if (r.gt_count == 0) return std::nullopt;
  return interpolated_ap(r.hits, r.gt_count);
}

EvalReport ap_summary(const std::vector<SceneEval>& scenes, const EvalOptions& options) {
  const std::vector<Prepared> prepared = prepare(scenes, options);
  EvalReport report;
  report.scene_count = scenes.size();
  const std::vector<double> taus = ap_thresholds();

  std::vector<std::vector<int>> matched_at_50(prepared.size());
  for (std::size_t s = 0; s < prepared.size(); ++s) matched_at_50[s].assign(prepared[s].preds.size(), -1);

  for (Label c : gt_classes(prepared)) {
    ClassRow row;
    row.semantic = c;
    const auto name = options.class_names.find(c);
    row.name = name != options.class_names.end() ? name->second : "class " + std::to_string(c);
    double sum = 0.0;
    for (double tau : taus) {
      const MatchResult r = match_class(prepared, c, tau);
      const double ap = interpolated_ap(r.hits, r.gt_count);
      sum += ap;
      if (tau == taus.front()) {
        row.ap50 = ap;
        row.gt_count = r.gt_count;
        row.prediction_count = r.order.size();
        for (std::size_t k = 0; k < r.order.size(); ++k) {
          matched_at_50[r.order[k].scene][r.order[k].pred] = r.matched[k];
        }
      }
    }
    row.ap = sum / static_cast<double>(taus.size());
    const MatchResult r25 = match_class(prepared, c, 0.25);
    row.ap25 = interpolated_ap(r25.hits, r25.gt_count);
    report.classes.push_back(row);
  }

  report.average.name = "mean";
  for (const ClassRow& row : report.classes) {
    report.average.ap += row.ap;
    report.average.ap50 += row.ap50;
    report.average.ap25 += row.ap25;
    report.average.gt_count += row.gt_count;
    report.average.prediction_count += row.prediction_count;
  }
  if (!report.classes.empty()) {
    const double n = static_cast<double>(report.classes.size());
    report.average.ap /= n;
    report.average.ap50 /= n;
    report.average.ap25 /= n;
  }

  for (std::size_t s = 0; s < prepared.size(); ++s) {
    for (std::size_t k = 0; k < prepared[s].preds.size(); ++k) {
      MatchRecord m;
      m.scene = scenes[s].name;
      m.prediction = k;
      m.semantic = prepared[s].preds[k].semantic;
      m.score = prepared[s].preds[k].score;
      const auto& ious = prepared[s].iou[k];
      if (!ious.empty()) m.iou = *std::max_element(ious.begin(), ious.end());
      const int g = matched_at_50[s][k];
      m.matched_gt = g < 0 ? -1 : prepared[s].gts[g].id;
      report.matches.push_back(m);
    }
  }
  return report;
}

json EvalReport::to_json() const {
  auto row_json = [](const ClassRow& r) {
    return json{{"semantic_id", r.semantic}, {"name", r.name},         {"ap", r.ap},
                {"ap50", r.ap50},            {"ap25", r.ap25},         {"gt_count", r.gt_count},
                {"prediction_count", r.prediction_count}};
  };
  json rows = json::array();
  for (const ClassRow& r : classes) rows.push_back(row_json(r));
  json audit = json::array();
  for (const MatchRecord& m : matches) {
    audit.push_back({{"scene", m.scene},
                     {"prediction", m.prediction},
                     {"semantic_id", m.semantic},
                     {"score", m.score},
                     {"matched_gt", m.matched_gt},
                     {"iou", m.iou}});
  }
  json avg = row_json(average);
  avg.erase("semantic_id");
  return json{{"note", "prediction voxels on empty or ignored ground truth are excluded from IoU"},
              {"scene_count", scene_count},
              {"classes", rows},
              {"average", avg},
              {"matches", audit}};
}

std::string EvalReport::to_table() const {
  std::size_t width = 5;
  for (const ClassRow& r : classes) width = std::max(width, r.name.size());
  std::string out = "# " + std::to_string(scene_count) +
                    " scenes; prediction voxels on empty or ignored ground truth are excluded from IoU\n";
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-*s %7s %7s %7s %6s\n", static_cast<int>(width), "class", "AP", "AP50", "AP25",
                "GT");
  out += buf;
  auto line = [&](const ClassRow& r) {
    std::snprintf(buf, sizeof buf, "%-*s %7.3f %7.3f %7.3f %6zu\n", static_cast<int>(width), r.name.c_str(), r.ap,
                  r.ap50, r.ap25, r.gt_count);
    out += buf;
  };
  for (const ClassRow& r : classes) line(r);
  line(average);
  return out;
}

std::vector<InstanceProposal> baseline_seg_as_instance(const VoxelGrid& grid, const std::set<Label>& ignore_classes) {
  std::map<Label, std::vector<VoxelIndex>> by_class;
  const auto sem = grid.semantic();
  for (std::size_t v = 0; v < sem.size(); ++v) {
    if (sem[v] != 0 && !ignore_classes.count(sem[v])) by_class[sem[v]].push_back(static_cast<VoxelIndex>(v));
  }
  std::vector<InstanceProposal> out;
  for (auto& [label, voxels] : by_class) {
    InstanceProposal p;
    p.semantic = label;
    p.voxels = std::move(voxels);
    p.final_score = 1.0;
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<InstanceProposal> baseline_connected_components(const VoxelGrid& grid,
                                                            const std::set<Label>& ignore_classes) {
  std::vector<InstanceProposal> out;
  for (InstanceProposal& cls : baseline_seg_as_instance(grid, ignore_classes)) {
    for (auto& comp : connected_components(grid.dims(), cls.voxels, Connectivity::Six)) {
      InstanceProposal p;
      p.semantic = cls.semantic;
      p.voxels = std::move(comp);
      p.final_score = 1.0;
      out.push_back(std::move(p));
    }
  }
  return out;
}

}  // namespace mtml
