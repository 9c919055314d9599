#include <gtest/gtest.h>

#include <cmath>

#include "../oracle/finite_diff.hpp"
#include "helpers.hpp"
#include "mtml/gradcheck.hpp"
#include "mtml/loss.hpp"
#include "mtml/rng.hpp"
#include "mtml/synthgen.hpp"

using namespace mtml;

TEST(Gradcheck, EveryOpPasses) {
  const auto results = run_gradcheck(1, 20);
  EXPECT_GE(results.size(), 19u);
  for (const auto& r : results) {
    EXPECT_TRUE(r.passed) << r.op << " error " << r.max_error;
    EXPECT_EQ(r.trials, 20);
  }
}

TEST(Gradcheck, DetectsAWrongGradient) {
  GradCase c;
  c.inputs = {Tensor<double>({3}, std::vector<double>{0.3, -0.2, 0.9})};
  // Records x * x but claims a gradient of x instead of 2x.
  c.build = [](Tape<double>& t, const std::vector<Tensor<double>>& in) {
    auto leaves = make_leaves(t, in);
    Tensor<double> v = in[0];
    double s = 0.0;
    for (double x : v.values()) s += x * x;
    const std::size_t id = leaves[0].id();
    Var<double> loss = t.record(Tensor<double>::scalar(s), {id}, [id](Tape<double>& tape, std::size_t self) {
      Tensor<double>* g = tape.grad_sink(id);
      const double up = tape.grad(self)[0];
      for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += up * tape.value(id)[i];
    });
    return std::pair{loss, leaves};
  };
  EXPECT_GT(gradient_error(c), 0.1);
}

TEST(Gradcheck, FullNetworkJointLossOnSmallScene) {
  // 8^3 crop of a generated scene through a two-level network, all parameters differenced.
  SynthConfig sc;
  sc.seed = 5;
  sc.num_scenes = 1;
  sc.num_train = 1;
  sc.num_test = 0;
  const SceneSample full = generate_scene(sc, 0).sample;
  VoxelGrid g(Dims{8, 8, 8}, full.grid.voxel_size(), {0, 0, 0}, full.grid.num_classes());
  for (int k = 0; k < 8; ++k)
    for (int j = 0; j < 8; ++j)
      for (int i = 0; i < 8; ++i) {
        const VoxelIndex src = full.grid.index({i + 12, j + 12, k});
        g.semantic()[g.index({i, j, k})] = full.grid.semantic()[src];
        g.instance()[g.index({i, j, k})] = full.grid.instance()[src];
      }
  // Ensure two clusters exist regardless of the crop.
  testutil::fill_box(g, {0, 0, 1}, {2, 2, 3}, 2, 101);
  testutil::fill_box(g, {6, 6, 1}, {8, 8, 3}, 3, 102);
  const SceneSample sample = testutil::sample_of(g);

  ModelConfig cfg;
  cfg.embed_dim = 3;
  cfg.layers = {LayerSpec::conv(2), LayerSpec::pool(), LayerSpec::conv(2, 3, 2), LayerSpec::deconv(2),
                LayerSpec::conv(2)};
  cfg.target_receptive_field = 0;
  Model<double> model = Model<double>::build(cfg, 9);
  // Nonzero biases keep every direction pre-activation away from the zero-norm guard.
  Rng rng(17);
  for (auto& p : model.parameters()) {
    if (p.name.find("bias") == std::string::npos) continue;
    for (double& v : p.value.storage()) v = rng.uniform(0.05, 0.2) * (rng.bernoulli(0.5) ? -1.0 : 1.0);
  }
  const Tensor<double> input = encode_input(g).cast<double>();
  const LossParams params;

  std::vector<double> flat;
  for (const auto& p : model.parameters()) flat.insert(flat.end(), p.value.values().begin(), p.value.values().end());
  auto unflatten = [&](const std::vector<double>& x) {
    Model<double> m = model;
    std::size_t at = 0;
    for (auto& p : m.parameters())
      for (double& v : p.value.storage()) v = x[at++];
    return m;
  };
  auto loss_of = [&](const std::vector<double>& x) {
    Tape<double> t;
    return l_joint(unflatten(x).forward(t, t.leaf(input)), sample, params).joint.value().item();
  };

  Tape<double> tape;
  const FieldVars<double> f = model.forward(tape, tape.leaf(input));
  const auto terms = l_joint(f, sample, params);
  ASSERT_FALSE(terms.degenerate);
  tape.backward(terms.joint);
  std::vector<double> analytic;
  for (const Var<double>& p : f.parameters)
    analytic.insert(analytic.end(), p.grad().values().begin(), p.grad().values().end());

  const auto numeric = oracle::central_difference(loss_of, flat);
  const auto jump = oracle::slope_jump(loss_of, flat);
  double scale = kGradErrorFloor;
  for (std::size_t i = 0; i < flat.size(); ++i) scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
  double diff = 0.0;
  std::size_t kinks = 0;
  for (std::size_t i = 0; i < flat.size(); ++i) {
    if (jump[i] > kKinkSlopeJump * scale) {
      ++kinks;
      continue;
    }
    diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
  }
  EXPECT_LE(kinks, flat.size() / 50);
  EXPECT_LE(diff / scale, 1e-6);
}
