#include <gtest/gtest.h>

#include <cmath>

#include "helpers.hpp"
#include "mtml/io.hpp"
#include "mtml/synthgen.hpp"

using namespace mtml;
namespace fs = std::filesystem;

namespace {

SynthConfig small_config(std::uint64_t seed, int scenes = 10) {
  SynthConfig c;
  c.seed = seed;
  c.num_scenes = scenes;
  c.num_train = scenes - scenes / 10;
  c.num_test = scenes / 10;
  return c;
}

bool touching(const VoxelGrid& g, Label a, Label b) {
  const auto inst = g.instance();
  for (VoxelIndex v = 0; v < g.size(); ++v) {
    if (inst[v] != a) continue;
    const Coord c = g.coord(v);
    for (int dk = -1; dk <= 1; ++dk)
      for (int dj = -1; dj <= 1; ++dj)
        for (int di = -1; di <= 1; ++di) {
          const Coord n{c.i + di, c.j + dj, c.k + dk};
          if (g.contains(n) && inst[g.index(n)] == b) return true;
        }
  }
  return false;
}

}  // namespace

TEST(Synthgen, SameSeedAndIndexIsByteIdentical) {
  const SynthConfig c = small_config(7);
  const auto a = generate_scene(c, 3), b = generate_scene(c, 3), other = generate_scene(c, 4);
  EXPECT_EQ(io::encode_mvox(a.sample.grid), io::encode_mvox(b.sample.grid));
  EXPECT_NE(io::encode_mvox(a.sample.grid), io::encode_mvox(other.sample.grid));
}

TEST(Synthgen, NoContactMeansClearance) {
  SynthConfig c = small_config(11);
  c.contact_probability = 0.0;
  for (int s = 0; s < 20; ++s) {
    const auto scene = generate_scene(c, s);
    const auto& objects = scene.record.objects;
    for (std::size_t a = 0; a < objects.size(); ++a)
      for (std::size_t b = a + 1; b < objects.size(); ++b)
        EXPECT_FALSE(touching(scene.sample.grid, objects[a].instance, objects[b].instance)) << "scene " << s;
  }
}

TEST(Synthgen, ContactObjectsTouchSomething) {
  SynthConfig c = small_config(12);
  c.contact_probability = 1.0;
  int contacts = 0;
  for (int s = 0; s < 20; ++s) {
    const auto scene = generate_scene(c, s);
    for (const auto& o : scene.record.objects) {
      if (!o.contact) continue;
      ++contacts;
      bool any = false;
      for (const auto& other : scene.record.objects)
        any = any || (other.instance != o.instance && touching(scene.sample.grid, o.instance, other.instance));
      EXPECT_TRUE(any);
    }
  }
  EXPECT_GT(contacts, 0);
}

TEST(Synthgen, ObjectCountInRange) {
  const SynthConfig c = small_config(13);
  for (int s = 0; s < 100; ++s) {
    const auto n = generate_scene(c, s).record.objects.size();
    EXPECT_GE(n, 3u);
    EXPECT_LE(n, 8u);
  }
}

TEST(Synthgen, InstancesAreConnectedAndDisjoint) {
  const SynthConfig c = small_config(14);
  for (int s = 0; s < 30; ++s) {
    const auto scene = generate_scene(c, s);
    const VoxelGrid& g = scene.sample.grid;
    std::size_t covered = 0;
    for (const auto& o : scene.record.objects) {
      const auto& info = scene.sample.gt.at(o.instance);
      EXPECT_EQ(info.semantic, o.semantic);
      EXPECT_EQ(info.voxels.size(), o.voxel_count);
      EXPECT_EQ(connected_components(g.dims(), info.voxels).size(), 1u);
      for (VoxelIndex v : info.voxels) EXPECT_EQ(g.semantic()[v], o.semantic);
      covered += info.voxels.size();
    }
    std::size_t labeled = 0;
    for (Label id : g.instance()) labeled += id != 0;
    EXPECT_EQ(covered, labeled);
    // Ground plane fills the bottom layer.
    for (int j = 0; j < g.dims().ny; ++j)
      for (int i = 0; i < g.dims().nx; ++i) EXPECT_EQ(g.semantic()[g.index({i, j, 0})], kGroundClass);
  }
}

TEST(Synthgen, ClassesAreBalanced) {
  const SynthConfig c = small_config(15);
  std::map<Label, int> counts;
  int total = 0;
  for (int s = 0; s < 1000; ++s) {
    for (const auto& o : generate_scene(c, s).record.objects) {
      ++counts[o.semantic];
      ++total;
    }
  }
  ASSERT_EQ(counts.size(), 5u);
  for (const auto& [label, n] : counts) EXPECT_NEAR(double(n) / total, 0.2, 0.05) << "class " << label;
}

TEST(Synthgen, Percentile) {
  EXPECT_EQ(percentile({1, 2, 3, 4, 5}, 0.5), 3.0);
  EXPECT_DOUBLE_EQ(percentile({1, 2, 3, 4, 5}, 0.05), 1.2);
  EXPECT_DOUBLE_EQ(percentile({10, 0}, 0.95), 9.5);
  EXPECT_THROW(percentile({}, 0.5), Error);
}

TEST(Synthgen, DatasetLayoutAndDeterminism) {
  const SynthConfig c = small_config(7);
  const auto a = testutil::temp_dir("gen_a"), b = testutil::temp_dir("gen_b");
  generate_dataset(c, a, 1);
  generate_dataset(c, b, 3);
  std::size_t files = 0;
  for (const auto& entry : fs::directory_iterator(a / "scenes")) {
    ++files;
    EXPECT_EQ(io::read_file(entry.path()), io::read_file(b / "scenes" / entry.path().filename()));
  }
  EXPECT_EQ(files, 10u);
  EXPECT_EQ(io::read_file(a / "manifest.json"), io::read_file(b / "manifest.json"));
  const Dataset ds = Dataset::open(a);
  EXPECT_EQ(ds.split("train").size(), 9u);
  EXPECT_EQ(ds.split("test").size(), 1u);
  EXPECT_THROW(ds.split("val"), Error);
  EXPECT_EQ(ds.load(ds.split("test")[0]).grid.dims(), c.dims);
}

TEST(Synthgen, DefaultConfigWritesFullDataset) {
  SynthConfig c;
  c.seed = 1;
  const auto dir = testutil::temp_dir("gen_full");
  const auto manifest = generate_dataset(c, dir, 2);
  std::size_t files = 0;
  for ([[maybe_unused]] const auto& entry : fs::directory_iterator(dir / "scenes")) ++files;
  EXPECT_EQ(files, 1000u);
  EXPECT_EQ(manifest.at("splits").at("train").size(), 900u);
  EXPECT_EQ(manifest.at("splits").at("test").size(), 100u);

  // Bands cover at least 90% of the generated instances.
  const Dataset ds = Dataset::open(dir);
  std::size_t inside = 0, total = 0;
  for (const auto& rec : manifest.at("scenes")) {
    for (const auto& o : rec.at("objects")) {
      const Label sem = o.at("semantic").get<Label>();
      const double n = o.at("voxels").get<double>();
      const SizeBand& band = ds.size_bands().at(sem);
      inside += n >= band.n_min && n <= band.n_max;
      ++total;
    }
  }
  EXPECT_GE(double(inside) / total, 0.9);
  fs::remove_all(dir);
}

TEST(Synthgen, ConfigValidation) {
  SynthConfig c = small_config(1);
  c.num_scenes = 0;
  EXPECT_THROW(c.validate(), Error);
  c = small_config(1);
  c.num_train = 3;
  EXPECT_THROW(c.validate(), Error);
  c = small_config(1);
  c.shapes = {{60, 60, 4}};
  EXPECT_THROW(c.validate(), Error);
  nlohmann::json j = small_config(3);
  EXPECT_EQ(j.get<SynthConfig>(), small_config(3));
}

TEST(Synthgen, MissingDatasetIsIoError) {
  try {
    Dataset::open("/nonexistent/data");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::IoError);
  }
}

TEST(EncodeInput, OneHot) {
  VoxelGrid g(Dims{4, 4, 2}, 0.1f, {0, 0, 0}, 6);
  testutil::fill_box(g, {0, 0, 0}, {2, 2, 1}, 4, 1);
  const Tensor<float> t = encode_input(g);
  ASSERT_EQ(t.shape(), (Shape{6, 2, 4, 4}));
  const std::size_t n = g.size();
  for (std::size_t c = 0; c < 6; ++c) {
    float s = 0.f;
    for (std::size_t v = 0; v < n; ++v) s += t[c * n + v];
    EXPECT_EQ(s, c == 3 ? 4.f : 0.f);
  }
  for (std::size_t v = 0; v < n; ++v) {
    float s = 0.f;
    for (std::size_t c = 0; c < 6; ++c) s += t[c * n + v];
    EXPECT_EQ(s, g.semantic()[v] != 0 ? 1.f : 0.f);
  }
}

TEST(EncodeInput, NoiseRate) {
  VoxelGrid g(Dims{32, 32, 32}, 0.1f, {0, 0, 0}, 6);
  testutil::fill_box(g, {0, 0, 0}, {32, 32, 32}, 3, 1);
  const VoxelGrid noisy = apply_label_noise(g, 0.1, 99);
  std::size_t flipped = 0;
  for (VoxelIndex v = 0; v < g.size(); ++v) {
    flipped += noisy.semantic()[v] != 3;
    EXPECT_NE(noisy.semantic()[v], 0);
    EXPECT_LE(noisy.semantic()[v], 6);
  }
  EXPECT_NEAR(double(flipped) / g.size(), 0.1, 0.02);
  EXPECT_EQ(apply_label_noise(g, 0.0, 1), g);
  EXPECT_EQ(encode_input(g, 0.1, 99), encode_input(noisy));
}
