#include "mtml/cluster.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mtml/json_util.hpp"

namespace mtml {

using nlohmann::json;

MeanShiftParams MeanShiftParams::from_delta_var(double delta_var) {
  MeanShiftParams p;
  p.bandwidths = {delta_var, 1.5 * delta_var, 2.0 * delta_var};
  return p;
}

void MeanShiftParams::validate() const {
  if (bandwidths.empty()) throw Error(ErrorCode::ConfigError, "mean shift needs at least one bandwidth");
  for (std::size_t i = 0; i < bandwidths.size(); ++i) {
    if (!(bandwidths[i] > 0.0)) throw Error(ErrorCode::ConfigError, "bandwidths must be positive");
    if (i > 0 && bandwidths[i] < bandwidths[i - 1]) {
      throw Error(ErrorCode::ConfigError, "bandwidths must be sorted ascending");
    }
  }
  if (!(epsilon > 0.0)) throw Error(ErrorCode::ConfigError, "mean shift epsilon must be positive");
  if (max_iterations < 1) throw Error(ErrorCode::ConfigError, "mean shift max_iterations must be >= 1");
}

void ScoreWeights::validate() const {
  if (w_fe < 0 || w_dir < 0 || w_size < 0) throw Error(ErrorCode::ConfigError, "score weights must be >= 0");
  for (const auto& [label, band] : size_bands) {
    if (!(band.n_min > 0.0) || band.n_max < band.n_min) {
      throw Error(ErrorCode::ConfigError, "invalid size band for class " + std::to_string(label));
    }
  }
}

void ClusterParams::validate() const {
  mean_shift.validate();
  weights.validate();
  if (!(delta_var > 0.0)) throw Error(ErrorCode::ConfigError, "cluster delta_var must be positive");
  if (nms_threshold < 0.0 || nms_threshold > 1.0) throw Error(ErrorCode::ConfigError, "nms_threshold must be in [0, 1]");
}

void to_json(json& j, const MeanShiftParams& p) {
  j = json{{"bandwidths", p.bandwidths}, {"epsilon", p.epsilon}, {"max_iterations", p.max_iterations}};
}

void from_json(const json& j, MeanShiftParams& p) {
  reject_unknown_keys(j, {"bandwidths", "epsilon", "max_iterations"}, "mean shift params");
  try {
    if (j.contains("bandwidths")) p.bandwidths = j.at("bandwidths").get<std::vector<double>>();
    p.epsilon = j.value("epsilon", p.epsilon);
    p.max_iterations = j.value("max_iterations", p.max_iterations);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ConfigError, std::string("mean shift params: ") + e.what());
  }
}

void to_json(json& j, const ScoreWeights& w) {
  json bands = json::object();
  for (const auto& [label, band] : w.size_bands) bands[std::to_string(label)] = {band.n_min, band.n_max};
  j = json{{"w_fe", w.w_fe}, {"w_dir", w.w_dir}, {"w_size", w.w_size}, {"size_bands", bands}};
}

void from_json(const json& j, ScoreWeights& w) {
  reject_unknown_keys(j, {"w_fe", "w_dir", "w_size", "size_bands"}, "score weights");
  try {
    w.w_fe = j.value("w_fe", w.w_fe);
    w.w_dir = j.value("w_dir", w.w_dir);
    w.w_size = j.value("w_size", w.w_size);
    if (j.contains("size_bands")) {
      w.size_bands.clear();
      for (const auto& [key, value] : j.at("size_bands").items()) {
        const auto pair = value.get<std::array<double, 2>>();
        w.size_bands[static_cast<Label>(std::stoul(key))] = SizeBand{pair[0], pair[1]};
      }
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ConfigError, std::string("score weights: ") + e.what());
  } catch (const std::logic_error&) {
    throw Error(ErrorCode::ConfigError, "score weights: size band keys must be class ids");
  }
}

void to_json(json& j, const ClusterParams& p) {
  j = json{{"mean_shift", p.mean_shift},
           {"weights", p.weights},
           {"delta_var", p.delta_var},
           {"nms_threshold", p.nms_threshold},
           {"ignore_classes", p.ignore_classes}};
}

void from_json(const json& j, ClusterParams& p) {
  reject_unknown_keys(j, {"mean_shift", "weights", "delta_var", "nms_threshold", "ignore_classes"}, "cluster params");
  try {
    if (j.contains("mean_shift")) p.mean_shift = j.at("mean_shift").get<MeanShiftParams>();
    if (j.contains("weights")) p.weights = j.at("weights").get<ScoreWeights>();
    p.delta_var = j.value("delta_var", p.delta_var);
    p.nms_threshold = j.value("nms_threshold", p.nms_threshold);
    if (j.contains("ignore_classes")) p.ignore_classes = j.at("ignore_classes").get<std::set<Label>>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ConfigError, std::string("cluster params: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Mean shift

namespace {

struct PointSet {
  std::size_t n = 0;
  std::size_t d = 0;
  std::vector<double> data;  // row-major n x d

  const double* row(std::size_t i) const { return data.data() + i * d; }
};

double sq_dist(const double* a, const double* b, std::size_t d) {
  double s = 0.0;
  for (std::size_t k = 0; k < d; ++k) {
    const double r = a[k] - b[k];
    s += r * r;
  }
  return s;
}

// Mean of the points within `radius2` of `x`, summed in index order.
std::size_t neighbor_mean(const PointSet& ps, const double* x, double radius2, double* out) {
  std::fill(out, out + ps.d, 0.0);
  std::size_t count = 0;
  for (std::size_t i = 0; i < ps.n; ++i) {
    const double* p = ps.row(i);
    if (sq_dist(p, x, ps.d) <= radius2) {
      for (std::size_t k = 0; k < ps.d; ++k) out[k] += p[k];
      ++count;
    }
  }
  if (count > 0) {
    for (std::size_t k = 0; k < ps.d; ++k) out[k] /= static_cast<double>(count);
  }
  return count;
}

std::size_t neighbor_count(const PointSet& ps, const double* x, double radius2) {
  std::size_t count = 0;
  for (std::size_t i = 0; i < ps.n; ++i) count += sq_dist(ps.row(i), x, ps.d) <= radius2;
  return count;
}

}  // namespace

MeanShiftResult mean_shift(const std::vector<std::vector<double>>& points, double bandwidth, double epsilon,
                           int max_iterations) {
  if (points.empty()) throw Error(ErrorCode::EmptyInput, "mean_shift needs at least one point");
  if (!(bandwidth > 0.0)) throw Error(ErrorCode::ConfigError, "mean_shift bandwidth must be positive");
  PointSet ps;
  ps.n = points.size();
  ps.d = points[0].size();
  ps.data.reserve(ps.n * ps.d);
  for (const auto& p : points) {
    MTML_CHECK(p.size() == ps.d, ErrorCode::ShapeError, "mean_shift points differ in dimension");
    ps.data.insert(ps.data.end(), p.begin(), p.end());
  }

  // Seeds: lowest-index point of every bandwidth-sized bin.
  std::vector<std::pair<std::vector<long long>, std::size_t>> bins;
  bins.reserve(ps.n);
  for (std::size_t i = 0; i < ps.n; ++i) {
    std::vector<long long> key(ps.d);
    for (std::size_t k = 0; k < ps.d; ++k) key[k] = static_cast<long long>(std::floor(ps.row(i)[k] / bandwidth));
    bins.emplace_back(std::move(key), i);
  }
  std::stable_sort(bins.begin(), bins.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<std::size_t> seeds;
  for (std::size_t i = 0; i < bins.size(); ++i) {
    if (i == 0 || bins[i].first != bins[i - 1].first) seeds.push_back(bins[i].second);
  }
  std::sort(seeds.begin(), seeds.end());

  const double radius2 = bandwidth * bandwidth;
  const double tol2 = (epsilon * bandwidth) * (epsilon * bandwidth);
  std::vector<std::vector<double>> modes(seeds.size());
  std::vector<std::size_t> counts(seeds.size());
  std::vector<double> next(ps.d);
  for (std::size_t s = 0; s < seeds.size(); ++s) {
    std::vector<double> x(ps.row(seeds[s]), ps.row(seeds[s]) + ps.d);
    for (int it = 0; it < max_iterations; ++it) {
      neighbor_mean(ps, x.data(), radius2, next.data());
      const double shift2 = sq_dist(next.data(), x.data(), ps.d);
      x.assign(next.begin(), next.end());
      if (shift2 <= tol2) break;
    }
    counts[s] = neighbor_count(ps, x.data(), radius2);
    modes[s] = std::move(x);
  }

  // Most populated modes first; seed order breaks ties.
  std::vector<std::size_t> order(seeds.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return counts[a] > counts[b]; });
  const double merge2 = 0.25 * radius2;
  MeanShiftResult out;
  for (std::size_t s : order) {
    bool keep = true;
    for (const auto& m : out.modes) {
      if (sq_dist(m.data(), modes[s].data(), ps.d) <= merge2) {
        keep = false;
        break;
      }
    }
    if (keep) out.modes.push_back(modes[s]);
  }

  out.assignment.resize(ps.n);
  for (std::size_t i = 0; i < ps.n; ++i) {
    double best = sq_dist(ps.row(i), out.modes[0].data(), ps.d);
    int arg = 0;
    for (std::size_t m = 1; m < out.modes.size(); ++m) {
      const double dist = sq_dist(ps.row(i), out.modes[m].data(), ps.d);
      if (dist < best) {
        best = dist;
        arg = static_cast<int>(m);
      }
    }
    out.assignment[i] = arg;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Proposals and scores

std::vector<VoxelIndex> semantic_mask(const VoxelGrid& grid, const std::set<Label>& ignore_classes) {
  std::vector<VoxelIndex> mask;
  const auto sem = grid.semantic();
  for (std::size_t v = 0; v < sem.size(); ++v) {
    if (sem[v] != 0 && !ignore_classes.count(sem[v])) mask.push_back(static_cast<VoxelIndex>(v));
  }
  return mask;
}

namespace {

void check_field(const Tensor<float>& field, const VoxelGrid& grid, std::size_t channels, const char* what) {
  const Dims& d = grid.dims();
  const Shape want{channels == 0 ? field.dim(0) : channels, std::size_t(d.nz), std::size_t(d.ny), std::size_t(d.nx)};
  MTML_CHECK(field.shape() == want, ErrorCode::ShapeError,
             std::string(what) + " field has shape " + shape_str(field.shape()) + ", expected " + shape_str(want));
}

}  // namespace

std::vector<InstanceProposal> generate_proposals(const FieldPair<float>& fields, const VoxelGrid& grid,
                                                 std::span<const VoxelIndex> mask, const MeanShiftParams& params) {
  params.validate();
  if (mask.empty()) return {};
  check_field(fields.embedding, grid, 0, "embedding");
  const std::size_t d = fields.embedding.dim(0);
  const std::size_t nv = grid.size();
  MTML_CHECK(std::is_sorted(mask.begin(), mask.end()), ErrorCode::InvalidGeometry, "mask must be sorted");

  std::vector<std::vector<double>> points(mask.size(), std::vector<double>(d));
  const float* e = fields.embedding.data();
  for (std::size_t i = 0; i < mask.size(); ++i) {
    MTML_CHECK(mask[i] < nv, ErrorCode::IndexOutOfBounds, "mask voxel outside the grid");
    for (std::size_t a = 0; a < d; ++a) points[i][a] = e[a * nv + mask[i]];
  }

  std::vector<InstanceProposal> out;
  for (std::size_t b = 0; b < params.bandwidths.size(); ++b) {
    const MeanShiftResult ms = mean_shift(points, params.bandwidths[b], params.epsilon, params.max_iterations);
    std::vector<std::vector<VoxelIndex>> members(ms.modes.size());
    for (std::size_t i = 0; i < mask.size(); ++i) members[ms.assignment[i]].push_back(mask[i]);
    for (auto& voxels : members) {
      if (voxels.empty()) continue;
      auto parts = connected_components(grid.dims(), voxels, Connectivity::Six, grid.semantic());
      InstanceProposal whole;
      whole.voxels = std::move(voxels);
      whole.provenance = {static_cast<int>(b), -1};
      out.push_back(std::move(whole));
      if (parts.size() > 1) {
        for (std::size_t p = 0; p < parts.size(); ++p) {
          InstanceProposal split;
          split.voxels = std::move(parts[p]);
          split.provenance = {static_cast<int>(b), static_cast<int>(p)};
          out.push_back(std::move(split));
        }
      }
    }
  }
  return out;
}

double fe_coherency(const InstanceProposal& proposal, const Tensor<float>& embedding, double delta_var) {
  MTML_CHECK(!proposal.voxels.empty(), ErrorCode::EmptyInput, "empty proposal");
  MTML_CHECK(embedding.rank() >= 2, ErrorCode::ShapeError, "embedding must be {D, ...}");
  const std::size_t d = embedding.dim(0);
  const std::size_t nv = embedding.numel() / d;
  const float* e = embedding.data();
  std::vector<double> mean(d, 0.0);
  for (VoxelIndex v : proposal.voxels) {
    MTML_CHECK(v < nv, ErrorCode::IndexOutOfBounds, "proposal voxel outside the field");
    for (std::size_t a = 0; a < d; ++a) mean[a] += e[a * nv + v];
  }
  for (double& m : mean) m /= static_cast<double>(proposal.voxels.size());
  std::size_t inside = 0;
  for (VoxelIndex v : proposal.voxels) {
    double ss = 0.0;
    for (std::size_t a = 0; a < d; ++a) {
      const double r = e[a * nv + v] - mean[a];
      ss += r * r;
    }
    inside += ss <= delta_var * delta_var;
  }
  return static_cast<double>(inside) / static_cast<double>(proposal.voxels.size());
}

double dir_coherency(const InstanceProposal& proposal, const Tensor<float>& direction, const VoxelGrid& grid) {
  MTML_CHECK(!proposal.voxels.empty(), ErrorCode::EmptyInput, "empty proposal");
  check_field(direction, grid, 3, "direction");
  const std::size_t nv = grid.size();
  double centroid[3] = {0.0, 0.0, 0.0};
  for (VoxelIndex v : proposal.voxels) {
    MTML_CHECK(v < nv, ErrorCode::IndexOutOfBounds, "proposal voxel outside the grid");
    const Vec3 z = voxel_center(grid, v);
    for (int a = 0; a < 3; ++a) centroid[a] += z[a];
  }
  for (double& c : centroid) c /= static_cast<double>(proposal.voxels.size());
  const double tiny = 1e-6 * grid.voxel_size();
  const float* p = direction.data();
  double sum = 0.0;
  std::size_t used = 0;
  for (VoxelIndex v : proposal.voxels) {
    const Vec3 z = voxel_center(grid, v);
    const double r[3] = {centroid[0] - z[0], centroid[1] - z[1], centroid[2] - z[2]};
    const double n = std::sqrt(r[0] * r[0] + r[1] * r[1] + r[2] * r[2]);
    if (n <= tiny) continue;
    double dot = 0.0;
    for (int a = 0; a < 3; ++a) dot += p[a * nv + v] * r[a];
    sum += std::clamp(dot / n, -1.0, 1.0);
    ++used;
  }
  return used == 0 ? 0.0 : sum / static_cast<double>(used);
}

double size_score(std::size_t voxel_count, Label semantic, const ScoreWeights& weights) {
  const auto it = weights.size_bands.find(semantic);
  if (it == weights.size_bands.end() || voxel_count == 0) return voxel_count == 0 ? 0.0 : 1.0;
  const double n = static_cast<double>(voxel_count);
  const SizeBand& band = it->second;
  double bound;
  if (n < band.n_min) {
    bound = band.n_min;
  } else if (n > band.n_max) {
    bound = band.n_max;
  } else {
    return 1.0;
  }
  const double sigma = std::log(2.0);
  const double x = std::log(n / bound) / sigma;
  return std::exp(-x * x);
}

double final_score(double fe, double dir, double size, const ScoreWeights& weights) {
  return weights.w_fe * fe + weights.w_dir * dir + weights.w_size * size;
}

Label assign_semantic(const InstanceProposal& proposal, const VoxelGrid& grid, const std::set<Label>& ignore_classes) {
  std::map<Label, std::size_t> votes;
  const auto sem = grid.semantic();
  for (VoxelIndex v : proposal.voxels) {
    MTML_CHECK(v < sem.size(), ErrorCode::IndexOutOfBounds, "proposal voxel outside the grid");
    const Label s = sem[v];
    if (s == 0 || ignore_classes.count(s)) continue;
    ++votes[s];
  }
  Label best = 0;
  std::size_t best_count = 0;
  for (const auto& [label, count] : votes) {
    if (count > best_count) {
      best = label;
      best_count = count;
    }
  }
  return best;
}

double mask_iou(std::span<const VoxelIndex> a, std::span<const VoxelIndex> b) {
  if (a.empty() && b.empty()) return 0.0;
  std::size_t inter = 0;
  std::size_t i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i] < b[j]) {
      ++i;
    } else if (b[j] < a[i]) {
      ++j;
    } else {
      ++inter;
      ++i;
      ++j;
    }
  }
  return static_cast<double>(inter) / static_cast<double>(a.size() + b.size() - inter);
}

std::vector<InstanceProposal> nms(std::vector<InstanceProposal> proposals, double iou_threshold) {
  std::sort(proposals.begin(), proposals.end(), [](const InstanceProposal& a, const InstanceProposal& b) {
    if (a.final_score != b.final_score) return a.final_score > b.final_score;
    const VoxelIndex fa = a.voxels.empty() ? 0 : a.voxels.front();
    const VoxelIndex fb = b.voxels.empty() ? 0 : b.voxels.front();
    if (fa != fb) return fa < fb;
    if (a.voxels.size() != b.voxels.size()) return a.voxels.size() < b.voxels.size();
    return a.voxels < b.voxels;
  });
  std::vector<InstanceProposal> kept;
  for (auto& p : proposals) {
    bool ok = true;
    for (const auto& k : kept) {
      if (mask_iou(p.voxels, k.voxels) > iou_threshold) {
        ok = false;
        break;
      }
    }
    if (ok) kept.push_back(std::move(p));
  }
  return kept;
}

std::vector<InstanceProposal> segment_scene(const FieldPair<float>& fields, const VoxelGrid& grid,
                                            const ClusterParams& params) {
  params.validate();
  const auto mask = semantic_mask(grid, params.ignore_classes);
  std::vector<InstanceProposal> proposals = generate_proposals(fields, grid, mask, params.mean_shift);
  for (InstanceProposal& p : proposals) {
    p.semantic = assign_semantic(p, grid, params.ignore_classes);
    p.fe_coherency = fe_coherency(p, fields.embedding, params.delta_var);
    p.dir_coherency = dir_coherency(p, fields.direction, grid);
    p.size_score = size_score(p.voxels.size(), p.semantic, params.weights);
    p.final_score = final_score(p.fe_coherency, p.dir_coherency, p.size_score, params.weights);
  }
  return nms(std::move(proposals), params.nms_threshold);
}

// ---------------------------------------------------------------------------
// Prediction files

std::vector<std::pair<VoxelIndex, VoxelIndex>> run_length_encode(std::span<const VoxelIndex> sorted) {
  std::vector<std::pair<VoxelIndex, VoxelIndex>> runs;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    if (i > 0) MTML_CHECK(sorted[i] > sorted[i - 1], ErrorCode::InvalidGeometry, "voxel list must be strictly sorted");
    if (!runs.empty() && runs.back().first + runs.back().second == sorted[i]) {
      ++runs.back().second;
    } else {
      runs.emplace_back(sorted[i], 1);
    }
  }
  return runs;
}

std::vector<VoxelIndex> run_length_decode(const std::vector<std::pair<VoxelIndex, VoxelIndex>>& runs) {
  std::vector<VoxelIndex> out;
  for (const auto& [start, length] : runs) {
    MTML_CHECK(out.empty() || start > out.back(), ErrorCode::InvalidGeometry, "runs must be sorted and disjoint");
    for (VoxelIndex k = 0; k < length; ++k) out.push_back(start + k);
  }
  return out;
}

json predictions_to_json(const std::string& scene, const std::vector<InstanceProposal>& proposals) {
  json instances = json::array();
  for (const InstanceProposal& p : proposals) {
    instances.push_back({{"semantic_id", p.semantic},
                         {"final_score", p.final_score},
                         {"fe_coherency", p.fe_coherency},
                         {"dir_coherency", p.dir_coherency},
                         {"size_score", p.size_score},
                         {"bandwidth_index", p.provenance.bandwidth_index},
                         {"split_id", p.provenance.split_id},
                         {"voxels", run_length_encode(p.voxels)}});
  }
  return json{{"scene", scene}, {"instances", instances}};
}

std::vector<InstanceProposal> predictions_from_json(const json& j) {
  try {
    std::vector<InstanceProposal> out;
    for (const json& item : j.at("instances")) {
      InstanceProposal p;
      p.semantic = item.at("semantic_id").get<Label>();
      p.final_score = item.at("final_score").get<double>();
      p.fe_coherency = item.value("fe_coherency", 0.0);
      p.dir_coherency = item.value("dir_coherency", 0.0);
      p.size_score = item.value("size_score", 0.0);
      p.provenance.bandwidth_index = item.value("bandwidth_index", -1);
      p.provenance.split_id = item.value("split_id", -1);
      p.voxels = run_length_decode(item.at("voxels").get<std::vector<std::pair<VoxelIndex, VoxelIndex>>>());
      out.push_back(std::move(p));
    }
    return out;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::IoError, std::string("malformed prediction file: ") + e.what());
  }
}

}  // namespace mtml
