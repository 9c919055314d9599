#include "mtml/loss.hpp"

#include <algorithm>
#include <cmath>

#include "mtml/json_util.hpp"
#include "mtml/ops.hpp"

namespace mtml {

using nlohmann::json;

void LossParams::validate() const {
  auto fail = [](const std::string& why) { throw Error(ErrorCode::ConfigError, "loss params: " + why); };
  if (!(delta_var > 0.0)) fail("delta_var must be positive");
  if (!(delta_dist > delta_var)) fail("delta_dist must exceed delta_var");
  if (gamma_var < 0 || gamma_dist < 0 || gamma_reg < 0 || alpha_fe < 0 || alpha_dir < 0) {
    fail("loss weights must be non-negative");
  }
}

void to_json(json& j, const LossParams& p) {
  j = json{{"delta_var", p.delta_var},   {"delta_dist", p.delta_dist}, {"gamma_var", p.gamma_var},
           {"gamma_dist", p.gamma_dist}, {"gamma_reg", p.gamma_reg},   {"alpha_fe", p.alpha_fe},
           {"alpha_dir", p.alpha_dir},   {"ignore_classes", p.ignore_classes}};
}

void from_json(const json& j, LossParams& p) {
  reject_unknown_keys(j, {"delta_var", "delta_dist", "gamma_var", "gamma_dist", "gamma_reg", "alpha_fe", "alpha_dir",
                          "ignore_classes"},
                      "loss params");
  try {
    p.delta_var = j.value("delta_var", p.delta_var);
    p.delta_dist = j.value("delta_dist", p.delta_dist);
    p.gamma_var = j.value("gamma_var", p.gamma_var);
    p.gamma_dist = j.value("gamma_dist", p.gamma_dist);
    p.gamma_reg = j.value("gamma_reg", p.gamma_reg);
    p.alpha_fe = j.value("alpha_fe", p.alpha_fe);
    p.alpha_dir = j.value("alpha_dir", p.alpha_dir);
    if (j.contains("ignore_classes")) p.ignore_classes = j.at("ignore_classes").get<std::set<Label>>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ConfigError, std::string("loss params: ") + e.what());
  }
}

ClusterStats build_cluster_stats(const SceneSample& sample, const LossParams& params) {
  ClusterStats stats;
  for (const auto& [id, info] : sample.gt) {
    if (id == 0 || info.voxels.empty() || info.semantic == 0 || params.ignore_classes.count(info.semantic)) continue;
    stats.clusters.push_back({id, info.semantic, info.voxels, info.center_of_mass});
  }
  return stats;
}

std::vector<Vec3> gt_directions(const ClusterStats& stats, const VoxelGrid& grid) {
  std::vector<Vec3> out(grid.size(), Vec3{0.f, 0.f, 0.f});
  const double tiny = 1e-6 * grid.voxel_size();
  for (const ClusterMembers& c : stats.clusters) {
    for (VoxelIndex v : c.voxels) {
      const Vec3 z = voxel_center(grid, v);
      const double d[3] = {double(c.center[0]) - z[0], double(c.center[1]) - z[1], double(c.center[2]) - z[2]};
      const double n = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
      if (n <= tiny) continue;
      out[v] = Vec3{static_cast<float>(d[0] / n), static_cast<float>(d[1] / n), static_cast<float>(d[2] / n)};
    }
  }
  return out;
}

namespace {

template <typename T>
std::size_t voxel_count(const Var<T>& field) {
  const Shape& s = field.shape();
  MTML_CHECK(s.size() >= 2, ErrorCode::ShapeError, "field must be {channels, ...}, got " + shape_str(s));
  return field.value().numel() / s[0];
}

template <typename T>
void check_members(const ClusterStats& stats, std::size_t voxels) {
  for (const ClusterMembers& c : stats.clusters) {
    MTML_CHECK(!c.voxels.empty(), ErrorCode::ShapeError, "cluster without members");
    for (VoxelIndex v : c.voxels) {
      MTML_CHECK(v < voxels, ErrorCode::IndexOutOfBounds, "cluster member outside the field");
    }
  }
}

template <typename T>
Var<T> zero_scalar(Tape<T>& tape) {
  return tape.leaf(Tensor<T>::scalar(T(0)), false);
}

}  // namespace

template <typename T>
Var<T> cluster_means(Var<T> embedding, const ClusterStats& stats) {
  const std::size_t d = embedding.shape()[0];
  const std::size_t nv = voxel_count(embedding);
  check_members<T>(stats, nv);
  const std::size_t c = stats.size();
  MTML_CHECK(c > 0, ErrorCode::ShapeError, "cluster_means needs at least one cluster");
  const T* x = embedding.value().data();
  Tensor<T> mu(Shape{c, d});
  for (std::size_t k = 0; k < c; ++k) {
    const auto& members = stats.clusters[k].voxels;
    for (std::size_t a = 0; a < d; ++a) {
      T acc = T(0);
      for (VoxelIndex v : members) acc += x[a * nv + v];
      mu[k * d + a] = acc / static_cast<T>(members.size());
    }
  }
  const std::size_t ie = embedding.id();
  return embedding.tape().record(std::move(mu), {ie}, [ie, stats, d, nv](Tape<T>& t, std::size_t self) {
    Tensor<T>* dx = t.grad_sink(ie);
    if (!dx) return;
    const Tensor<T>& g = t.grad(self);
    for (std::size_t k = 0; k < stats.size(); ++k) {
      const auto& members = stats.clusters[k].voxels;
      const T inv = T(1) / static_cast<T>(members.size());
      for (std::size_t a = 0; a < d; ++a) {
        const T gk = g[k * d + a] * inv;
        for (VoxelIndex v : members) (*dx)[a * nv + v] += gk;
      }
    }
  });
}

template <typename T>
Var<T> l_var(Var<T> embedding, Var<T> means, const ClusterStats& stats, const LossParams& params) {
  if (stats.size() == 0) return zero_scalar(embedding.tape());
  const std::size_t d = embedding.shape()[0];
  const std::size_t nv = voxel_count(embedding);
  check_members<T>(stats, nv);
  MTML_CHECK(means.shape() == (Shape{stats.size(), d}), ErrorCode::ShapeError, "means do not match clusters");
  const T delta = static_cast<T>(params.delta_var);
  const T* x = embedding.value().data();
  const T* mu = means.value().data();
  const T inv_c = T(1) / static_cast<T>(stats.size());
  T total = T(0);
  for (std::size_t k = 0; k < stats.size(); ++k) {
    const auto& members = stats.clusters[k].voxels;
    T acc = T(0);
    for (VoxelIndex v : members) {
      T ss = T(0);
      for (std::size_t a = 0; a < d; ++a) {
        const T r = mu[k * d + a] - x[a * nv + v];
        ss += r * r;
      }
      const T h = std::max(T(0), std::sqrt(ss) - delta);
      acc += h * h;
    }
    total += acc / static_cast<T>(members.size());
  }
  total *= inv_c;
  const std::size_t ie = embedding.id(), im = means.id();
  return embedding.tape().record(
      Tensor<T>::scalar(total), {ie, im}, [ie, im, stats, d, nv, delta, inv_c](Tape<T>& t, std::size_t self) {
        const T g = t.grad(self)[0];
        const T* x = t.value(ie).data();
        const T* mu = t.value(im).data();
        Tensor<T>* dx = t.grad_sink(ie);
        Tensor<T>* dmu = t.grad_sink(im);
        std::vector<T> r(d);
        for (std::size_t k = 0; k < stats.size(); ++k) {
          const auto& members = stats.clusters[k].voxels;
          const T scale = g * inv_c / static_cast<T>(members.size());
          for (VoxelIndex v : members) {
            T ss = T(0);
            for (std::size_t a = 0; a < d; ++a) {
              r[a] = mu[k * d + a] - x[a * nv + v];
              ss += r[a] * r[a];
            }
            const T n = std::sqrt(ss);
            const T h = n - delta;
            if (h <= T(0) || n <= T(0)) continue;
            const T coef = scale * T(2) * h / n;
            for (std::size_t a = 0; a < d; ++a) {
              if (dmu) (*dmu)[k * d + a] += coef * r[a];
              if (dx) (*dx)[a * nv + v] -= coef * r[a];
            }
          }
        }
      });
}

template <typename T>
Var<T> l_dist(Var<T> means, const LossParams& params) {
  const std::size_t c = means.shape()[0];
  const std::size_t d = means.shape()[1];
  if (c <= 1) return zero_scalar(means.tape());
  const T margin = static_cast<T>(2.0 * params.delta_dist);
  const T norm = T(1) / static_cast<T>(c * (c - 1));
  const T* mu = means.value().data();
  T total = T(0);
  for (std::size_t a = 0; a < c; ++a) {
    for (std::size_t b = 0; b < c; ++b) {
      if (a == b) continue;
      T ss = T(0);
      for (std::size_t k = 0; k < d; ++k) {
        const T r = mu[a * d + k] - mu[b * d + k];
        ss += r * r;
      }
      const T h = std::max(T(0), margin - std::sqrt(ss));
      total += h * h;
    }
  }
  total *= norm;
  const std::size_t im = means.id();
  return means.tape().record(Tensor<T>::scalar(total), {im}, [im, c, d, margin, norm](Tape<T>& t, std::size_t self) {
    Tensor<T>* dmu = t.grad_sink(im);
    if (!dmu) return;
    const T g = t.grad(self)[0];
    const T* mu = t.value(im).data();
    std::vector<T> r(d);
    for (std::size_t a = 0; a < c; ++a) {
      for (std::size_t b = 0; b < c; ++b) {
        if (a == b) continue;
        T ss = T(0);
        for (std::size_t k = 0; k < d; ++k) {
          r[k] = mu[a * d + k] - mu[b * d + k];
          ss += r[k] * r[k];
        }
        const T n = std::sqrt(ss);
        const T h = margin - n;
        if (h <= T(0) || n <= T(0)) continue;
        // d/dmu_a of h^2 = -2 h r / n; mu_b gets the opposite sign.
        const T coef = g * norm * T(2) * h / n;
        for (std::size_t k = 0; k < d; ++k) {
          (*dmu)[a * d + k] -= coef * r[k];
          (*dmu)[b * d + k] += coef * r[k];
        }
      }
    }
  });
}

template <typename T>
Var<T> l_reg(Var<T> means) {
  const std::size_t c = means.shape()[0];
  const std::size_t d = means.shape()[1];
  const T* mu = means.value().data();
  T total = T(0);
  for (std::size_t a = 0; a < c; ++a) {
    T ss = T(0);
    for (std::size_t k = 0; k < d; ++k) ss += mu[a * d + k] * mu[a * d + k];
    total += std::sqrt(ss);
  }
  total /= static_cast<T>(c);
  const std::size_t im = means.id();
  return means.tape().record(Tensor<T>::scalar(total), {im}, [im, c, d](Tape<T>& t, std::size_t self) {
    Tensor<T>* dmu = t.grad_sink(im);
    if (!dmu) return;
    const T g = t.grad(self)[0] / static_cast<T>(c);
    const T* mu = t.value(im).data();
    for (std::size_t a = 0; a < c; ++a) {
      T ss = T(0);
      for (std::size_t k = 0; k < d; ++k) ss += mu[a * d + k] * mu[a * d + k];
      const T n = std::sqrt(ss);
      if (n <= T(0)) continue;
      for (std::size_t k = 0; k < d; ++k) (*dmu)[a * d + k] += g * mu[a * d + k] / n;
    }
  });
}

template <typename T>
Var<T> l_fe(Var<T> var, Var<T> dist, Var<T> reg, const LossParams& params) {
  Var<T> out = ops::mul_scalar(var, static_cast<T>(params.gamma_var));
  out = ops::add(out, ops::mul_scalar(dist, static_cast<T>(params.gamma_dist)));
  return ops::add(out, ops::mul_scalar(reg, static_cast<T>(params.gamma_reg)));
}

template <typename T>
Var<T> l_dir(Var<T> direction, const std::vector<Vec3>& v_gt, const ClusterStats& stats) {
  MTML_CHECK(direction.shape()[0] == 3, ErrorCode::ShapeError, "direction field must have 3 channels");
  const std::size_t nv = voxel_count(direction);
  MTML_CHECK(v_gt.size() == nv, ErrorCode::ShapeError, "direction targets do not match the field");
  check_members<T>(stats, nv);
  // Members with a defined target direction, per cluster.
  std::vector<std::vector<VoxelIndex>> used(stats.size());
  std::size_t active = 0;
  for (std::size_t k = 0; k < stats.size(); ++k) {
    for (VoxelIndex v : stats.clusters[k].voxels) {
      const Vec3& g = v_gt[v];
      if (g[0] != 0.f || g[1] != 0.f || g[2] != 0.f) used[k].push_back(v);
    }
    active += !used[k].empty();
  }
  if (active == 0) return zero_scalar(direction.tape());
  const T* p = direction.value().data();
  T total = T(0);
  for (const auto& members : used) {
    if (members.empty()) continue;
    T acc = T(0);
    for (VoxelIndex v : members) {
      for (std::size_t a = 0; a < 3; ++a) acc += p[a * nv + v] * static_cast<T>(v_gt[v][a]);
    }
    total += acc / static_cast<T>(members.size());
  }
  total = -total / static_cast<T>(active);
  const std::size_t id = direction.id();
  return direction.tape().record(Tensor<T>::scalar(total), {id},
                                 [id, used = std::move(used), v_gt, active, nv](Tape<T>& t, std::size_t self) {
                                   Tensor<T>* dp = t.grad_sink(id);
                                   if (!dp) return;
                                   const T g = t.grad(self)[0];
                                   for (const auto& members : used) {
                                     if (members.empty()) continue;
                                     const T scale = -g / static_cast<T>(active * members.size());
                                     for (VoxelIndex v : members) {
                                       for (std::size_t a = 0; a < 3; ++a)
                                         (*dp)[a * nv + v] += scale * static_cast<T>(v_gt[v][a]);
                                     }
                                   }
                                 });
}

template <typename T>
LossTerms<T> l_joint(Var<T> embedding, Var<T> direction, const ClusterStats& stats, const std::vector<Vec3>& v_gt,
                     const LossParams& params) {
  LossTerms<T> out;
  Tape<T>& tape = embedding.tape();
  if (stats.size() == 0) {
    out.degenerate = true;
    out.var = out.dist = out.reg = out.fe = out.dir = out.joint = zero_scalar(tape);
    return out;
  }
  Var<T> means = cluster_means(embedding, stats);
  out.var = l_var(embedding, means, stats, params);
  out.dist = l_dist(means, params);
  out.reg = l_reg(means);
  out.fe = l_fe(out.var, out.dist, out.reg, params);
  out.dir = l_dir(direction, v_gt, stats);
  out.joint = ops::add(ops::mul_scalar(out.fe, static_cast<T>(params.alpha_fe)),
                       ops::mul_scalar(out.dir, static_cast<T>(params.alpha_dir)));
  return out;
}

template <typename T>
LossTerms<T> l_joint(const FieldVars<T>& fields, const SceneSample& sample, const LossParams& params) {
  const ClusterStats stats = build_cluster_stats(sample, params);
  return l_joint(fields.embedding, fields.direction, stats, gt_directions(stats, sample.grid), params);
}

#define MTML_INSTANTIATE_LOSS(T)                                                                               \
  template Var<T> cluster_means<T>(Var<T>, const ClusterStats&);                                               \
  template Var<T> l_var<T>(Var<T>, Var<T>, const ClusterStats&, const LossParams&);                            \
  template Var<T> l_dist<T>(Var<T>, const LossParams&);                                                        \
  template Var<T> l_reg<T>(Var<T>);                                                                            \
  template Var<T> l_fe<T>(Var<T>, Var<T>, Var<T>, const LossParams&);                                          \
  template Var<T> l_dir<T>(Var<T>, const std::vector<Vec3>&, const ClusterStats&);                             \
  template LossTerms<T> l_joint<T>(Var<T>, Var<T>, const ClusterStats&, const std::vector<Vec3>&,              \
                                   const LossParams&);                                                         \
  template LossTerms<T> l_joint<T>(const FieldVars<T>&, const SceneSample&, const LossParams&);

MTML_INSTANTIATE_LOSS(float)
MTML_INSTANTIATE_LOSS(double)

}  // namespace mtml
