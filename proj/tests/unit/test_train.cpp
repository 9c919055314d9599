#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "helpers.hpp"
#include "mtml/io.hpp"
#include "mtml/train.hpp"

using namespace mtml;

namespace {

ModelConfig tiny_model() {
  ModelConfig c;
  c.embed_dim = 4;
  c.num_classes = 4;
  c.layers = ModelConfig::default_layers(8);
  c.target_receptive_field = 0;
  return c;
}

// Small generated scenes on a 16 x 16 x 8 grid.
SynthConfig toy_synth(std::uint64_t seed, int scenes) {
  SynthConfig s;
  s.seed = seed;
  s.num_scenes = scenes;
  s.num_train = scenes;
  s.num_test = 0;
  s.dims = {16, 16, 8};
  s.shapes = {{2, 2, 2}, {3, 3, 3}, {2, 2, 4}};
  s.min_objects = 2;
  s.max_objects = 4;
  return s;
}

std::vector<SceneSample> toy_scenes(std::uint64_t seed, int n) {
  std::vector<SceneSample> out;
  for (int k = 0; k < n; ++k) out.push_back(generate_scene(toy_synth(seed, n), k).sample);
  return out;
}

TrainConfig toy_train() {
  TrainConfig c;
  c.model = tiny_model();
  c.epochs = 1;
  c.batch_size = 1;
  c.seed = 3;
  return c;
}

}  // namespace

TEST(Train, AugmentD4Elements) {
  const SceneSample s = toy_scenes(1, 1)[0];
  EXPECT_EQ(augment_d4(s, 0).grid, s.grid);
  EXPECT_EQ(augment_d4(s, 4).grid, augment(s, Augmentation::flip_x()).grid);
  EXPECT_EQ(augment_d4(s, 1).grid, augment(s, Augmentation::rotate_z(1)).grid);
  std::set<std::vector<Label>> distinct;
  for (int e = 0; e < 8; ++e) {
    const auto g = augment_d4(s, e).grid;
    distinct.emplace(g.semantic().begin(), g.semantic().end());
  }
  EXPECT_EQ(distinct.size(), 8u);
}

TEST(Train, SmokeOnOneSceneHalvesTheLoss) {
  // Decrease measured against the analytic floor -alpha_dir of L_joint.
  TrainConfig c = toy_train();
  c.epochs = 30;
  c.augment = false;
  c.learning_rate = 5e-3;
  const std::vector<SceneSample> scenes = toy_scenes(2, 1);
  Model<float> model = Model<float>::build(c.model, c.seed);
  const TrainResult r = train_on(c, scenes, model);
  ASSERT_EQ(r.steps, 30);
  const double floor = -c.loss.alpha_dir;
  const double first = r.history.front().loss.joint - floor, last = r.history.back().loss.joint - floor;
  EXPECT_LE(last, 0.5 * first) << "step 1 " << r.history.front().loss.joint << ", step 30 "
                               << r.history.back().loss.joint;
}

TEST(Train, Deterministic) {
  TrainConfig c = toy_train();
  c.max_steps = 3;
  const std::vector<SceneSample> scenes = toy_scenes(3, 4);
  Model<float> a = Model<float>::build(c.model, c.seed), b = Model<float>::build(c.model, c.seed);
  const TrainResult ra = train_on(c, scenes, a), rb = train_on(c, scenes, b);
  ASSERT_EQ(ra.history.size(), rb.history.size());
  for (std::size_t k = 0; k < ra.history.size(); ++k) EXPECT_EQ(ra.history[k].loss.joint, rb.history[k].loss.joint);
  for (std::size_t k = 0; k < a.parameters().size(); ++k) EXPECT_EQ(a.parameters()[k].value, b.parameters()[k].value);
}

TEST(Train, ZeroLearningRateLeavesParameters) {
  TrainConfig c = toy_train();
  c.learning_rate = 0.0;
  c.max_steps = 3;
  const std::vector<SceneSample> scenes = toy_scenes(4, 3);
  Model<float> m = Model<float>::build(c.model, c.seed);
  const Model<float> before = m;
  train_on(c, scenes, m);
  for (std::size_t k = 0; k < m.parameters().size(); ++k) EXPECT_EQ(m.parameters()[k].value, before.parameters()[k].value);
}

TEST(Train, WritesLogAndCheckpoints) {
  TrainConfig c = toy_train();
  c.epochs = 2;
  c.out_dir = testutil::temp_dir("train_out");
  const std::vector<SceneSample> scenes = toy_scenes(5, 2);
  Model<float> m = Model<float>::build(c.model, c.seed);
  const TrainResult r = train_on(c, scenes, m);
  EXPECT_EQ(r.steps, 4);
  EXPECT_TRUE(std::filesystem::exists(c.out_dir / "model.mtml"));
  EXPECT_TRUE(std::filesystem::exists(c.out_dir / "last.mtml"));
  std::ifstream log(c.out_dir / "loss.csv");
  std::string header;
  std::getline(log, header);
  EXPECT_EQ(header, "step,epoch,L_var,L_dist,L_reg,L_dir,L_joint");
  int rows = 0;
  for (std::string line; std::getline(log, line);) ++rows;
  EXPECT_EQ(rows, 4);
  const Model<float> saved = load_model(c.out_dir / "model.mtml");
  for (std::size_t k = 0; k < m.parameters().size(); ++k) EXPECT_EQ(saved.parameters()[k].value, m.parameters()[k].value);
}

TEST(Train, DivergenceNamesLastCheckpoint) {
  TrainConfig c = toy_train();
  c.learning_rate = 1e30;
  c.epochs = 5;
  c.checkpoint_every = 1;
  c.out_dir = testutil::temp_dir("train_diverge");
  const std::vector<SceneSample> scenes = toy_scenes(6, 2);
  Model<float> m = Model<float>::build(c.model, c.seed);
  try {
    train_on(c, scenes, m);
    FAIL() << "expected divergence";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NumericalDivergence);
    EXPECT_NE(std::string(e.what()).find("last.mtml"), std::string::npos);
  }
}

TEST(Train, ConfigValidation) {
  TrainConfig c = toy_train();
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), Error);
  nlohmann::json j = toy_train();
  EXPECT_EQ(j.get<TrainConfig>(), toy_train());
  Model<float> m = Model<float>::build(tiny_model(), 1);
  EXPECT_THROW(train_on(toy_train(), {}, m), Error);
}

TEST(Train, AugmentedCopiesGiveTheSameLossForASymmetricModel) {
  // Constant trunk kernels commute with the square's symmetries; a zero
  // direction head keeps L_dir at 0.
  ModelConfig cfg = tiny_model();
  Model<float> m = Model<float>::build(cfg, 1);
  for (auto& p : m.parameters()) {
    const bool dir_head = p.name.rfind("head_dir", 0) == 0;
    const bool bias = p.name.find("bias") != std::string::npos;
    p.value.fill(dir_head ? 0.f : bias ? 0.01f : 0.05f);
  }
  const SceneSample s = toy_scenes(7, 1)[0];
  const LossValues base = scene_gradients(m, s, encode_input(s.grid), LossParams{}, nullptr);
  EXPECT_GT(base.fe, 0.0);
  for (int e = 1; e < 8; ++e) {
    const SceneSample a = augment_d4(s, e);
    const LossValues v = scene_gradients(m, a, encode_input(a.grid), LossParams{}, nullptr);
    EXPECT_NEAR(v.joint, base.joint, 1e-5 * std::abs(base.joint)) << "element " << e;
    EXPECT_EQ(v.dir, 0.0);
  }
}

TEST(Evaluate, UntrainedModelScoresNearZero) {
  const std::vector<SceneSample> scenes = toy_scenes(8, 4);
  ModelConfig cfg = tiny_model();
  const Model<float> m = Model<float>::build(cfg, 2);
  const EpochReport r = evaluate_scenes(m, scenes, LossParams{}, ClusterParams{});
  EXPECT_LT(r.ap50, 0.1);
  EXPECT_EQ(r.scenes, 4u);
  const EpochReport again = evaluate_scenes(m, scenes, LossParams{}, ClusterParams{});
  EXPECT_EQ(r.to_json(), again.to_json());
  for (const char* key : {"L_var", "L_dist", "L_reg", "L_FE", "L_dir", "L_joint", "AP50"})
    EXPECT_TRUE(r.to_json().contains(key)) << key;
}

TEST(Evaluate, DatasetSplit) {
  const auto dir = testutil::temp_dir("eval_split");
  SynthConfig s = toy_synth(9, 4);
  s.num_train = 3;
  s.num_test = 1;
  generate_dataset(s, dir);
  const Dataset ds = Dataset::open(dir);
  const Model<float> m = Model<float>::build(tiny_model(), 2);
  const EpochReport r = evaluate_epoch(m, ds, "train", LossParams{}, ClusterParams{}, 2);
  EXPECT_EQ(r.scenes, 2u);
  EXPECT_THROW(evaluate_epoch(m, ds, "nope", LossParams{}, ClusterParams{}), Error);
}
