#include <gtest/gtest.h>

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <sys/wait.h>

#include "helpers.hpp"
#include "mtml/io.hpp"
#include "mtml/model.hpp"

namespace fs = std::filesystem;

namespace {

int run(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(MTML_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  const auto bytes = mtml::io::read_file(p);
  return {bytes.begin(), bytes.end()};
}

bool same_tree(const fs::path& a, const fs::path& b) {
  std::size_t n = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    ++n;
    const fs::path other = b / fs::relative(e.path(), a);
    if (!fs::exists(other) || mtml::io::read_file(e.path()) != mtml::io::read_file(other)) return false;
  }
  std::size_t m = 0;
  for (const auto& e : fs::recursive_directory_iterator(b)) m += e.is_regular_file();
  return n == m;
}

}  // namespace

TEST(Cli, GenDataIsDeterministic) {
  const auto dir = testutil::temp_dir("cli_gen");
  ASSERT_EQ(run("gen-data --scenes 10 --seed 7 --out " + (dir / "a").string(), dir / "log"), 0);
  ASSERT_EQ(run("gen-data --scenes 10 --seed 7 --out " + (dir / "b").string(), dir / "log"), 0);
  std::size_t scenes = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(dir / "a" / "scenes")) ++scenes;
  EXPECT_EQ(scenes, 10u);
  EXPECT_TRUE(fs::exists(dir / "a" / "manifest.json"));
  EXPECT_TRUE(same_tree(dir / "a", dir / "b"));
}

TEST(Cli, ExitCodes) {
  const auto dir = testutil::temp_dir("cli_codes");
  EXPECT_EQ(run("gen-data --scenes 0 --out " + (dir / "x").string(), dir / "log"), 2);
  EXPECT_EQ(run("gen-data --bogus", dir / "log"), 2);
  EXPECT_EQ(run("train --data /nonexistent --out " + (dir / "t").string(), dir / "log"), 3);
  EXPECT_EQ(run("train --data /nonexistent --out " + (dir / "t").string() + " --set train.nope=1", dir / "log"), 2);
  EXPECT_EQ(run("infer --model /nonexistent.mtml --scene /nonexistent.mvox --out " + (dir / "p.json").string(),
                dir / "log"),
            3);
}

TEST(Cli, Gradcheck) {
  const auto dir = testutil::temp_dir("cli_gradcheck");
  EXPECT_EQ(run("gradcheck --trials 3", dir / "log"), 0);
  EXPECT_NE(slurp(dir / "log").find("conv3d"), std::string::npos);
}

TEST(Cli, ToyPipeline) {
  const auto dir = testutil::temp_dir("cli_pipeline");
  const std::string data = (dir / "data").string();
  const std::string small = "--set synth.dims=[16,16,8] --set \"synth.shapes=[[2,2,2],[3,3,3]]\" "
                            "--set synth.min_objects=2 --set synth.max_objects=3";
  ASSERT_EQ(run("gen-data --scenes 4 --seed 1 --out " + data + " " + small, dir / "log"), 0) << slurp(dir / "log");
  ASSERT_EQ(run("train --data " + data + " --out " + (dir / "run").string() +
                    " --set model.width=8 --set model.embed_dim=3 --set model.num_classes=3 --set model.target_receptive_field=0"
                    " --set train.epochs=1 --set train.batch_size=1",
                dir / "log"),
            0)
      << slurp(dir / "log");
  EXPECT_TRUE(fs::exists(dir / "run" / "loss.csv"));
  EXPECT_TRUE(fs::exists(dir / "run" / "config.json"));
  ASSERT_EQ(run("infer --model " + (dir / "run" / "model.mtml").string() + " --data " + data +
                    " --split test --out " + (dir / "pred").string(),
                dir / "log"),
            0)
      << slurp(dir / "log");
  ASSERT_EQ(run("eval --pred " + (dir / "pred").string() + " --gt " + data + " --report " +
                    (dir / "report.json").string(),
                dir / "log"),
            0)
      << slurp(dir / "log");
  const std::string table = slurp(dir / "log");
  EXPECT_NE(table.find("AP50"), std::string::npos);
  EXPECT_NE(table.find("mean"), std::string::npos);
  const auto report = nlohmann::json::parse(slurp(dir / "report.json"));
  EXPECT_TRUE(report.contains("classes"));
  EXPECT_TRUE(report.contains("average"));

  ASSERT_EQ(run("eval --baseline cc --gt " + data + " --split train", dir / "log"), 0) << slurp(dir / "log");
  const std::string scene = (dir / "data" / "scenes" / "scene_0000.mvox").string();
  ASSERT_EQ(run("export-ply --scene " + scene + " --out " + (dir / "s.ply").string(), dir / "log"), 0);
  EXPECT_EQ(slurp(dir / "s.ply").rfind("ply\n", 0), 0u);
}

TEST(Cli, InferOn64CubedSceneWithinBudget) {
  const auto dir = testutil::temp_dir("cli_infer64");
  ASSERT_EQ(run("gen-data --scenes 1 --train 1 --seed 2 --set synth.dims=[64,64,64] --out " +
                    (dir / "data").string(),
                dir / "log"),
            0)
      << slurp(dir / "log");
  mtml::save_model(mtml::Model<float>::build(mtml::ModelConfig{}, 1), dir / "m.mtml");
  const auto start = std::chrono::steady_clock::now();
  ASSERT_EQ(run("infer --model " + (dir / "m.mtml").string() + " --scene " +
                    (dir / "data" / "scenes" / "scene_0000.mvox").string() + " --out " + (dir / "p.json").string(),
                dir / "log"),
            0)
      << slurp(dir / "log");
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  EXPECT_LE(seconds, 10.0);
  const auto pred = nlohmann::json::parse(slurp(dir / "p.json"));
  EXPECT_TRUE(pred.contains("instances"));
}
