#include <gtest/gtest.h>

#include <cmath>

#include "../support/footprint.hpp"
#include "helpers.hpp"
#include "mtml/io.hpp"
#include "mtml/model.hpp"
#include "mtml/rng.hpp"

using namespace mtml;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.embed_dim = 3;
  c.layers = {LayerSpec::conv(4), LayerSpec::pool(), LayerSpec::conv(4, 3, 2), LayerSpec::deconv(4),
              LayerSpec::conv(4)};
  c.target_receptive_field = 0;
  return c;
}

Tensor<float> random_input(const ModelConfig& c, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<float> t({std::size_t(c.num_classes), n, n, n});
  for (float& v : t.storage()) v = static_cast<float>(rng.uniform());
  return t;
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::EmptyInput;
}

}  // namespace

TEST(ReceptiveField, Formula) {
  ModelConfig c;
  c.target_receptive_field = 0;
  c.layers = {LayerSpec::conv(4)};
  EXPECT_EQ(receptive_field(c), 3);
  c.layers = {LayerSpec::conv(4), LayerSpec::conv(4, 3, 2)};
  EXPECT_EQ(receptive_field(c), 7);
  // The same dilated conv after a pool contributes twice as much.
  c.layers = {LayerSpec::conv(4), LayerSpec::pool(), LayerSpec::conv(4, 3, 2), LayerSpec::deconv(4)};
  EXPECT_EQ(receptive_field(c), 3 + 1 + 8);
}

TEST(ReceptiveField, DefaultMeetsTarget) {
  const ModelConfig c;
  EXPECT_EQ(receptive_field(c), 196);
  EXPECT_GE(receptive_field(c), 142);
  EXPECT_NO_THROW(c.validate());
}

TEST(ReceptiveField, UndilatedTrunkRejected) {
  ModelConfig c;
  for (LayerSpec& l : c.layers)
    if (l.type == LayerType::Conv) l.dilation = 1;
  EXPECT_LT(receptive_field(c), 142);
  EXPECT_EQ(code_of([&] { c.validate(); }), ErrorCode::ConfigError);
}

TEST(ReceptiveField, FootprintMatchesFormula) {
  const ModelConfig c = small_config();
  const Model<double> m = Model<float>::build(c, 1).cast<double>();
  EXPECT_EQ(testutil::measured_receptive_field(m, 32, 4, 4, 24, 6), receptive_field(c));
  EXPECT_EQ(testutil::measured_receptive_field(m, 32, 4, 4, 23, 7), receptive_field(c));
}

TEST(ReceptiveField, FootprintStaysInsideRadius) {
  const ModelConfig c = small_config();
  const Model<double> m = Model<double>::build(c, 2);
  const int rf = receptive_field(c);
  for (int x0 : {10, 15, 16, 21}) {
    for (bool rising : {false, true}) {
      const auto fp = testutil::footprint_x(m, 32, 4, 4, x0, rising);
      EXPECT_GE(fp.lo, x0 - rf);
      EXPECT_LE(fp.hi, x0 + rf);
      EXPECT_LE(fp.hi - fp.lo + 1, rf);
    }
  }
}

TEST(ModelConfig, Validation) {
  ModelConfig c = small_config();
  c.layers.push_back(LayerSpec::pool());
  EXPECT_EQ(code_of([&] { c.validate(); }), ErrorCode::ConfigError);
  c = small_config();
  c.layers[0].kernel = 2;
  EXPECT_EQ(code_of([&] { c.validate(); }), ErrorCode::ConfigError);
  c = small_config();
  c.embed_dim = 0;
  EXPECT_EQ(code_of([&] { c.validate(); }), ErrorCode::ConfigError);
}

TEST(ModelConfig, JsonRoundTrip) {
  const ModelConfig c = small_config();
  nlohmann::json j = c;
  EXPECT_EQ(j.get<ModelConfig>(), c);
  j["bogus"] = 1;
  EXPECT_EQ(code_of([&] { (void)j.get<ModelConfig>(); }), ErrorCode::ConfigError);
}

TEST(Model, BuildIsDeterministic) {
  const auto a = Model<float>::build(small_config(), 5);
  const auto b = Model<float>::build(small_config(), 5);
  const auto c = Model<float>::build(small_config(), 6);
  ASSERT_EQ(a.parameters().size(), b.parameters().size());
  bool differs = false;
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    EXPECT_EQ(a.parameters()[i].value, b.parameters()[i].value);
    differs = differs || !(a.parameters()[i].value == c.parameters()[i].value);
  }
  EXPECT_TRUE(differs);
}

TEST(Model, OutputMatchesInputExtent) {
  ModelConfig c;
  c.layers = ModelConfig::default_layers(8);
  const Model<float> m = Model<float>::build(c, 1);
  for (std::size_t n : {16u, 32u, 48u}) {
    const FieldPair<float> f = m.infer(random_input(c, n, n));
    EXPECT_EQ(f.embedding.shape(), (Shape{8, n, n, n}));
    EXPECT_EQ(f.direction.shape(), (Shape{3, n, n, n}));
  }
}

TEST(Model, ZeroInputGivesFiniteUnitBoundedDirections) {
  ModelConfig c = small_config();
  Model<float> m = Model<float>::build(c, 3);
  for (auto& p : m.parameters())
    if (p.name.find("bias") != std::string::npos) p.value.fill(0.1f);
  const FieldPair<float> f = m.infer(Tensor<float>({6, 8, 8, 8}, 0.f));
  for (float v : f.embedding.values()) EXPECT_TRUE(std::isfinite(v));
  const std::size_t n = 8 * 8 * 8;
  for (std::size_t v = 0; v < n; ++v) {
    double s = 0.0;
    for (int a = 0; a < 3; ++a) s += double(f.direction[a * n + v]) * f.direction[a * n + v];
    EXPECT_LE(std::sqrt(s), 1.0 + 1e-5);
  }
}

TEST(Model, DirectionsAreUnitLength) {
  const Model<float> m = Model<float>::build(small_config(), 4);
  const FieldPair<float> f = m.infer(random_input(small_config(), 8, 9));
  const std::size_t n = 8 * 8 * 8;
  for (std::size_t v = 0; v < n; ++v) {
    double s = 0.0;
    for (int a = 0; a < 3; ++a) s += double(f.direction[a * n + v]) * f.direction[a * n + v];
    if (s > 0.0) EXPECT_NEAR(std::sqrt(s), 1.0, 1e-5);
  }
}

TEST(Model, RejectsBadInputShape) {
  const Model<float> m = Model<float>::build(small_config(), 1);
  EXPECT_EQ(code_of([&] { m.infer(Tensor<float>({6, 7, 8, 8})); }), ErrorCode::ShapeError);
  EXPECT_EQ(code_of([&] { m.infer(Tensor<float>({5, 8, 8, 8})); }), ErrorCode::ShapeError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const Model<float> m = Model<float>::build(small_config(), 7);
  const auto dir = testutil::temp_dir("ckpt");
  save_model(m, dir / "m.mtml");
  const Model<float> back = load_model(dir / "m.mtml");
  EXPECT_EQ(back.config(), m.config());
  const Tensor<float> x = random_input(small_config(), 8, 1);
  EXPECT_EQ(back.infer(x).embedding, m.infer(x).embedding);
  EXPECT_EQ(back.infer(x).direction, m.infer(x).direction);
}

TEST(Checkpoint, Errors) {
  const auto bytes = encode_checkpoint(Model<float>::build(small_config(), 7));
  auto truncated = bytes;
  truncated.resize(bytes.size() / 2);
  EXPECT_EQ(code_of([&] { decode_checkpoint(truncated); }), ErrorCode::CorruptTensorTable);
  auto magic = bytes;
  magic[0] = 'X';
  EXPECT_EQ(code_of([&] { decode_checkpoint(magic); }), ErrorCode::BadMagic);
  auto version = bytes;
  version[4] = 9;
  EXPECT_EQ(code_of([&] { decode_checkpoint(version); }), ErrorCode::VersionMismatch);
  EXPECT_EQ(code_of([&] { load_model("/nonexistent/m.mtml"); }), ErrorCode::IoError);
}
