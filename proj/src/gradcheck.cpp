#include "mtml/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "mtml/loss.hpp"
#include "mtml/model.hpp"
#include "mtml/ops.hpp"

namespace mtml {

namespace {

using Built = std::pair<Var<double>, std::vector<Var<double>>>;

Tensor<double> random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (double& v : t.storage()) v = rng.uniform(lo, hi);
  return t;
}

// Values bounded away from zero, for ops with a kink there.
Tensor<double> off_zero_tensor(Rng& rng, Shape shape) {
  Tensor<double> t(std::move(shape));
  for (double& v : t.storage()) {
    const double m = rng.uniform(0.05, 1.0);
    v = rng.bernoulli(0.5) ? m : -m;
  }
  return t;
}

// Distinct values at least 0.01 apart, shuffled.
Tensor<double> distinct_tensor(Rng& rng, Shape shape) {
  Tensor<double> t(std::move(shape));
  std::vector<double> values(t.numel());
  for (std::size_t k = 0; k < values.size(); ++k) values[k] = 0.01 * static_cast<double>(k) - 0.5;
  rng.shuffle(std::span<double>(values));
  for (std::size_t k = 0; k < values.size(); ++k) t[k] = values[k];
  return t;
}

Shape random_shape(Rng& rng, int min_rank, int max_rank, int max_dim) {
  const int rank = rng.uniform_int(min_rank, max_rank);
  Shape s;
  for (int r = 0; r < rank; ++r) s.push_back(static_cast<std::size_t>(rng.uniform_int(1, max_dim)));
  return s;
}

// Reduces any output to a scalar through fixed random weights.
Var<double> project(Var<double> y, const Tensor<double>& weights) { return ops::weighted_sum(y, weights); }

GradCase unary(Rng& rng, Tensor<double> x, std::function<Var<double>(Var<double>)> f) {
  GradCase c;
  c.inputs = {std::move(x)};
  Tape<double> probe;
  const Shape out = f(probe.leaf(c.inputs[0], true)).shape();
  const Tensor<double> w = random_tensor(rng, out);
  c.build = [f, w](Tape<double>& t, const std::vector<Tensor<double>>& in) -> Built {
    auto leaves = make_leaves(t, in);
    return {project(f(leaves[0]), w), leaves};
  };
  return c;
}

GradCase binary(Rng& rng, Tensor<double> a, Tensor<double> b, std::function<Var<double>(Var<double>, Var<double>)> f) {
  GradCase c;
  c.inputs = {std::move(a), std::move(b)};
  Tape<double> probe;
  const Shape out = f(probe.leaf(c.inputs[0], true), probe.leaf(c.inputs[1], true)).shape();
  const Tensor<double> w = random_tensor(rng, out);
  c.build = [f, w](Tape<double>& t, const std::vector<Tensor<double>>& in) -> Built {
    auto leaves = make_leaves(t, in);
    return {project(f(leaves[0], leaves[1]), w), leaves};
  };
  return c;
}

struct ClusterCase {
  ClusterStats stats;
  std::vector<Vec3> directions;
  Shape field;  // {D, 1, ny, nx}
};

// Random clusters over a random subset of a small 2-D field.
ClusterCase random_clusters(Rng& rng, int min_clusters) {
  ClusterCase cc;
  const int ny = rng.uniform_int(2, 4), nx = rng.uniform_int(2, 5);
  const std::size_t d = static_cast<std::size_t>(rng.uniform_int(1, 4));
  cc.field = Shape{d, 1, std::size_t(ny), std::size_t(nx)};
  const int voxels = ny * nx;
  const int clusters = rng.uniform_int(min_clusters, std::min(4, voxels));
  std::vector<VoxelIndex> order(voxels);
  for (int v = 0; v < voxels; ++v) order[v] = static_cast<VoxelIndex>(v);
  rng.shuffle(std::span<VoxelIndex>(order));
  cc.stats.clusters.resize(clusters);
  for (int k = 0; k < clusters; ++k) {
    cc.stats.clusters[k].instance = static_cast<Label>(k + 1);
    cc.stats.clusters[k].semantic = 2;
  }
  // Every cluster gets one voxel, the rest are spread or left out.
  for (int v = 0; v < voxels; ++v) {
    const int k = v < clusters ? v : rng.uniform_int(-1, clusters - 1);
    if (k >= 0) cc.stats.clusters[k].voxels.push_back(order[v]);
  }
  for (auto& c : cc.stats.clusters) std::sort(c.voxels.begin(), c.voxels.end());
  cc.directions.assign(voxels, Vec3{0.f, 0.f, 0.f});
  for (auto& c : cc.stats.clusters) {
    for (VoxelIndex v : c.voxels) {
      if (rng.bernoulli(0.15)) continue;  // stands in for a center voxel
      double g[3], n = 0.0;
      for (double& x : g) {
        x = rng.normal();
        n += x * x;
      }
      n = std::sqrt(n);
      cc.directions[v] = Vec3{float(g[0] / n), float(g[1] / n), float(g[2] / n)};
    }
  }
  return cc;
}

LossParams random_loss_params(Rng& rng) {
  LossParams p;
  p.delta_var = rng.uniform(0.1, 0.6);
  p.delta_dist = p.delta_var + rng.uniform(0.2, 1.0);
  p.gamma_var = rng.uniform(0.5, 1.5);
  p.gamma_dist = rng.uniform(0.5, 1.5);
  p.gamma_reg = rng.uniform(0.001, 0.5);
  p.alpha_fe = rng.uniform(0.2, 1.0);
  p.alpha_dir = rng.uniform(0.2, 1.0);
  return p;
}

GradCase loss_case(Rng& rng, int min_clusters,
                   std::function<Var<double>(Var<double>, Var<double>, const ClusterCase&, const LossParams&)> f,
                   bool with_direction = false) {
  ClusterCase cc = random_clusters(rng, min_clusters);
  const LossParams params = random_loss_params(rng);
  GradCase c;
  c.inputs.push_back(random_tensor(rng, cc.field, -1.5, 1.5));
  if (with_direction) c.inputs.push_back(random_tensor(rng, Shape{3, 1, cc.field[2], cc.field[3]}));
  c.build = [f, cc, params, with_direction](Tape<double>& t, const std::vector<Tensor<double>>& in) -> Built {
    auto leaves = make_leaves(t, in);
    Var<double> dir = with_direction ? leaves[1] : Var<double>();
    return {f(leaves[0], dir, cc, params), leaves};
  };
  return c;
}

GradCase conv_case(Rng& rng) {
  const std::size_t cin = rng.uniform_int(1, 3), cout = rng.uniform_int(1, 3);
  const int k = rng.bernoulli(0.3) ? 1 : 3, stride = rng.uniform_int(1, 2), dilation = rng.uniform_int(1, 2);
  const int padding = rng.bernoulli(0.5) ? -1 : rng.uniform_int(0, 1);
  Shape xs{cin};
  for (int a = 0; a < 3; ++a) xs.push_back(static_cast<std::size_t>(rng.uniform_int(dilation * (k - 1) + 1, 5)));
  const bool bias = rng.bernoulli(0.7);
  const ops::ConvOptions opt{stride, dilation, padding};
  GradCase c;
  c.inputs.push_back(random_tensor(rng, xs));
  c.inputs.push_back(random_tensor(rng, Shape{cout, cin, std::size_t(k), std::size_t(k), std::size_t(k)}));
  if (bias) c.inputs.push_back(random_tensor(rng, Shape{cout}));
  Tape<double> probe;
  const Shape out = ops::conv3d(probe.leaf(c.inputs[0]), probe.leaf(c.inputs[1]),
                                bias ? probe.leaf(c.inputs[2]) : Var<double>(), opt)
                        .shape();
  const Tensor<double> w = random_tensor(rng, out);
  c.build = [opt, bias, w](Tape<double>& t, const std::vector<Tensor<double>>& in) -> Built {
    auto l = make_leaves(t, in);
    return {project(ops::conv3d(l[0], l[1], bias ? l[2] : Var<double>(), opt), w), l};
  };
  return c;
}

GradCase deconv_case(Rng& rng) {
  const std::size_t cin = rng.uniform_int(1, 3), cout = rng.uniform_int(1, 3);
  const int k = rng.uniform_int(1, 3), stride = rng.uniform_int(1, 2), dilation = rng.uniform_int(1, 2);
  const int output_padding = rng.uniform_int(0, stride - 1);
  Shape xs{cin};
  for (int a = 0; a < 3; ++a) xs.push_back(static_cast<std::size_t>(rng.uniform_int(1, 4)));
  const bool bias = rng.bernoulli(0.7);
  const ops::ConvTransposeOptions opt{stride, dilation, 0, output_padding};
  GradCase c;
  c.inputs.push_back(random_tensor(rng, xs));
  c.inputs.push_back(random_tensor(rng, Shape{cin, cout, std::size_t(k), std::size_t(k), std::size_t(k)}));
  if (bias) c.inputs.push_back(random_tensor(rng, Shape{cout}));
  Tape<double> probe;
  const Shape out = ops::conv_transpose3d(probe.leaf(c.inputs[0]), probe.leaf(c.inputs[1]),
                                          bias ? probe.leaf(c.inputs[2]) : Var<double>(), opt)
                        .shape();
  const Tensor<double> w = random_tensor(rng, out);
  c.build = [opt, bias, w](Tape<double>& t, const std::vector<Tensor<double>>& in) -> Built {
    auto l = make_leaves(t, in);
    return {project(ops::conv_transpose3d(l[0], l[1], bias ? l[2] : Var<double>(), opt), w), l};
  };
  return c;
}

// A two-level network small enough for exhaustive differencing.
GradCase model_case(Rng& rng) {
  ModelConfig cfg;
  cfg.num_classes = rng.uniform_int(2, 3);
  cfg.embed_dim = rng.uniform_int(2, 3);
  cfg.layers = {LayerSpec::conv(2), LayerSpec::pool(), LayerSpec::conv(2, 3, 2), LayerSpec::deconv(2),
                LayerSpec::conv(2)};
  cfg.skip_concat = rng.bernoulli(0.5);
  cfg.target_receptive_field = 0;
  const Model<double> base = Model<double>::build(cfg, rng.next());
  std::vector<std::string> names;
  GradCase c;
  for (const auto& p : base.parameters()) {
    names.push_back(p.name);
    c.inputs.push_back(random_tensor(rng, p.value.shape(), -0.5, 0.5));
  }
  const Tensor<double> x = random_tensor(rng, Shape{std::size_t(cfg.num_classes), 2, 4, 4}, 0.0, 1.0);
  const Tensor<double> we = random_tensor(rng, Shape{std::size_t(cfg.embed_dim), 2, 4, 4});
  const Tensor<double> wd = random_tensor(rng, Shape{3, 2, 4, 4});
  c.build = [cfg, names, x, we, wd](Tape<double>& t, const std::vector<Tensor<double>>& in) -> Built {
    std::vector<NamedTensor<double>> params;
    for (std::size_t k = 0; k < in.size(); ++k) params.push_back({names[k], in[k]});
    const Model<double> model(cfg, std::move(params));
    FieldVars<double> f = model.forward(t, t.leaf(x, false));
    Var<double> loss = ops::add(project(f.embedding, we), project(f.direction, wd));
    return {loss, f.parameters};
  };
  return c;
}

}  // namespace

std::vector<Var<double>> make_leaves(Tape<double>& tape, const std::vector<Tensor<double>>& inputs) {
  std::vector<Var<double>> out;
  for (const auto& t : inputs) out.push_back(tape.leaf(t, true));
  return out;
}

std::vector<GradOp> gradcheck_ops() {
  std::vector<GradOp> ops;
  ops.push_back({"add", [](Rng& r) {
                   const Shape s = random_shape(r, 1, 4, 4);
                   return binary(r, random_tensor(r, s), random_tensor(r, s), ops::add<double>);
                 }});
  ops.push_back({"mul", [](Rng& r) {
                   const Shape s = random_shape(r, 1, 4, 4);
                   return binary(r, random_tensor(r, s), random_tensor(r, s), ops::mul<double>);
                 }});
  ops.push_back({"mul_scalar", [](Rng& r) {
                   const double k = r.uniform(-2.0, 2.0);
                   return unary(r, random_tensor(r, random_shape(r, 1, 4, 4)),
                                [k](Var<double> x) { return ops::mul_scalar(x, k); });
                 }});
  ops.push_back({"relu", [](Rng& r) {
                   return unary(r, off_zero_tensor(r, random_shape(r, 1, 4, 4)), ops::relu<double>);
                 }});
  ops.push_back({"sum", [](Rng& r) {
                   return unary(r, random_tensor(r, random_shape(r, 1, 4, 4)), ops::sum<double>);
                 }});
  ops.push_back({"weighted_sum", [](Rng& r) {
                   const Shape s = random_shape(r, 1, 4, 4);
                   const Tensor<double> w = random_tensor(r, s);
                   return unary(r, random_tensor(r, s), [w](Var<double> x) { return ops::weighted_sum(x, w); });
                 }});
  ops.push_back({"concat", [](Rng& r) {
                   Shape a = random_shape(r, 4, 4, 3), b = a;
                   const std::size_t axis = r.below(4);
                   b[axis] = static_cast<std::size_t>(r.uniform_int(1, 3));
                   return binary(r, random_tensor(r, a), random_tensor(r, b),
                                 [axis](Var<double> x, Var<double> y) { return ops::concat(x, y, axis); });
                 }});
  ops.push_back({"l2_normalize", [](Rng& r) {
                   const Shape s = random_shape(r, 2, 4, 4);
                   const std::size_t axis = r.below(s.size());
                   return unary(r, off_zero_tensor(r, s),
                                [axis](Var<double> x) { return ops::l2_normalize(x, axis); });
                 }});
  ops.push_back({"conv3d", conv_case});
  ops.push_back({"conv_transpose3d", deconv_case});
  ops.push_back({"maxpool3d", [](Rng& r) {
                   Shape s{static_cast<std::size_t>(r.uniform_int(1, 2))};
                   for (int a = 0; a < 3; ++a) s.push_back(2 * static_cast<std::size_t>(r.uniform_int(1, 2)));
                   return unary(r, distinct_tensor(r, s), ops::maxpool3d<double>);
                 }});
  ops.push_back({"cluster_means", [](Rng& r) {
                   return loss_case(r, 1, [&r](Var<double> e, Var<double>, const ClusterCase& cc, const LossParams&) {
                     (void)r;
                     Var<double> mu = cluster_means(e, cc.stats);
                     Tensor<double> w(mu.shape());
                     for (std::size_t k = 0; k < w.numel(); ++k) w[k] = std::sin(1.7 * double(k) + 0.3);
                     return ops::weighted_sum(mu, w);
                   });
                 }});
  ops.push_back({"l_var", [](Rng& r) {
                   return loss_case(r, 1, [](Var<double> e, Var<double>, const ClusterCase& cc, const LossParams& p) {
                     return l_var(e, cluster_means(e, cc.stats), cc.stats, p);
                   });
                 }});
  ops.push_back({"l_dist", [](Rng& r) {
                   return loss_case(r, 2, [](Var<double> e, Var<double>, const ClusterCase& cc, const LossParams& p) {
                     return l_dist(cluster_means(e, cc.stats), p);
                   });
                 }});
  ops.push_back({"l_reg", [](Rng& r) {
                   return loss_case(r, 1, [](Var<double> e, Var<double>, const ClusterCase& cc, const LossParams&) {
                     return l_reg(cluster_means(e, cc.stats));
                   });
                 }});
  ops.push_back({"l_fe", [](Rng& r) {
                   return loss_case(r, 1, [](Var<double> e, Var<double>, const ClusterCase& cc, const LossParams& p) {
                     Var<double> mu = cluster_means(e, cc.stats);
                     return l_fe(l_var(e, mu, cc.stats, p), l_dist(mu, p), l_reg(mu), p);
                   });
                 }});
  ops.push_back({"l_dir", [](Rng& r) {
                   return loss_case(
                       r, 1,
                       [](Var<double>, Var<double> d, const ClusterCase& cc, const LossParams&) {
                         return l_dir(d, cc.directions, cc.stats);
                       },
                       true);
                 }});
  ops.push_back({"l_joint", [](Rng& r) {
                   return loss_case(
                       r, 1,
                       [](Var<double> e, Var<double> d, const ClusterCase& cc, const LossParams& p) {
                         return l_joint(e, d, cc.stats, cc.directions, p).joint;
                       },
                       true);
                 }});
  ops.push_back({"model", model_case});
  return ops;
}

std::vector<Tensor<double>> analytic_gradients(const GradCase& c) {
  Tape<double> tape;
  auto [loss, leaves] = c.build(tape, c.inputs);
  tape.backward(loss);
  std::vector<Tensor<double>> out;
  for (const auto& l : leaves) out.push_back(l.grad());
  return out;
}

double evaluate_case(const GradCase& c, const std::vector<Tensor<double>>& inputs) {
  Tape<double> tape;
  return c.build(tape, inputs).first.value()[0];
}

GradCheckOutcome gradient_check(const GradCase& c, double h) {
  const auto analytic = analytic_gradients(c);
  std::vector<Tensor<double>> inputs = c.inputs;
  const double f0 = evaluate_case(c, inputs);
  double max_diff = 0.0, scale = kGradErrorFloor, max_jump = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t n = 0; n < inputs[k].numel(); ++n) {
      const double x0 = inputs[k][n];
      inputs[k][n] = x0 + h;
      const double fp = evaluate_case(c, inputs);
      inputs[k][n] = x0 - h;
      const double fm = evaluate_case(c, inputs);
      inputs[k][n] = x0;
      const double numeric = (fp - fm) / (2.0 * h);
      max_diff = std::max(max_diff, std::abs(numeric - analytic[k][n]));
      scale = std::max({scale, std::abs(numeric), std::abs(analytic[k][n])});
      max_jump = std::max(max_jump, std::abs(fp - 2.0 * f0 + fm) / h);
    }
  }
  return {max_diff / scale, max_jump > kKinkSlopeJump * scale};
}

double gradient_error(const GradCase& c, double h) { return gradient_check(c, h).error; }

std::vector<GradcheckResult> run_gradcheck(std::uint64_t seed, int trials, double h, double tolerance) {
  std::vector<GradcheckResult> out;
  std::uint64_t stream = 0;
  for (const GradOp& op : gradcheck_ops()) {
    Rng rng(mix_seed(seed, stream++));
    GradcheckResult r;
    r.op = op.name;
    for (int draws = 0; r.trials < trials && draws < 10 * trials; ++draws) {
      const GradCheckOutcome o = gradient_check(op.make(rng), h);
      if (o.nonsmooth) {
        ++r.redrawn;
        continue;
      }
      ++r.trials;
      r.max_error = std::max(r.max_error, o.error);
    }
    r.passed = r.trials == trials && r.max_error <= tolerance;
    out.push_back(r);
  }
  return out;
}

}  // namespace mtml
