#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mtml/cluster.hpp"
#include "mtml/config.hpp"
#include "mtml/eval.hpp"
#include "mtml/gradcheck.hpp"
#include "mtml/io.hpp"
#include "mtml/model.hpp"
#include "mtml/synthgen.hpp"
#include "mtml/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mtml;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kIo = 3, kDivergence = 4, kGradcheck = 5 };

int exit_code(ErrorCode code) {
  switch (code) {
    case ErrorCode::ConfigError: return kConfig;
    case ErrorCode::IoError:
    case ErrorCode::BadMagic:
    case ErrorCode::VersionMismatch:
    case ErrorCode::CorruptTensorTable: return kIo;
    case ErrorCode::NumericalDivergence: return kDivergence;
    default: return kFailure;
  }
}

struct Common {
  std::optional<std::string> config;
  std::optional<std::uint64_t> seed;
  int jobs = 1;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "JSON run configuration");
  app->add_option("--seed", c.seed, "Random seed");
  app->add_option("--jobs", c.jobs, "Worker threads")->check(CLI::PositiveNumber);
  app->add_option("--set", c.overrides, "Override a config value, e.g. --set train.epochs=5");
}

RunConfig resolve(const Common& c, std::vector<std::string> extra = {}) {
  std::vector<std::string> overrides = c.overrides;
  overrides.insert(overrides.end(), extra.begin(), extra.end());
  std::optional<fs::path> file;
  if (c.config) file = *c.config;
  return RunConfig::resolve(file, overrides);
}

void echo_config(const RunConfig& cfg, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::IoError, dir.string() + ": " + ec.message());
  io::write_file_atomic(dir / "config.json", cfg.to_json().dump(2) + "\n");
}

json read_json(const fs::path& path) {
  const auto bytes = io::read_file(path);
  json j = json::parse(bytes.begin(), bytes.end(), nullptr, false);
  if (j.is_discarded()) throw Error(ErrorCode::IoError, path.string() + ": not valid JSON");
  return j;
}

// Size bands from the dataset manifest when one is next to the scene.
void load_size_bands(ClusterParams& cluster, const std::optional<fs::path>& data) {
  if (!data) return;
  const Dataset ds = Dataset::open(*data);
  if (cluster.weights.size_bands.empty()) cluster.weights.size_bands = ds.size_bands();
}

void write_embedding_ply(const fs::path& path, const VoxelGrid& grid, const FieldPair<float>& fields,
                         const std::vector<VoxelIndex>& mask) {
  const std::size_t d = fields.embedding.dim(0);
  const std::size_t nv = grid.size();
  PointCloud cloud;
  for (VoxelIndex v : mask) {
    Vec3 p{0.f, 0.f, 0.f};
    for (std::size_t a = 0; a < std::min<std::size_t>(3, d); ++a) p[a] = fields.embedding[a * nv + v];
    cloud.points.push_back(p);
    cloud.semantic.push_back(grid.semantic()[v]);
    cloud.instance.push_back(grid.instance()[v]);
    cloud.color.push_back(io::label_color(grid.instance()[v]));
  }
  io::write_ply(path, cloud);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-task metric learning for 3D voxel instance segmentation"};
  app.require_subcommand(1);

  // gen-data
  Common gen_common;
  std::string gen_out;
  std::optional<int> gen_scenes, gen_train;
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic cuboid dataset");
  add_common(gen, gen_common);
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--scenes", gen_scenes, "Number of scenes");
  gen->add_option("--train", gen_train, "Training scenes (default 90%)");

  // train
  Common train_common;
  std::string train_data, train_out;
  auto* trn = app.add_subcommand("train", "Train a model on a generated dataset");
  add_common(trn, train_common);
  trn->add_option("--data", train_data, "Dataset directory")->required();
  trn->add_option("--out", train_out, "Output directory")->required();

  // infer
  Common infer_common;
  std::string infer_model, infer_out;
  std::optional<std::string> infer_scene_path, infer_data, infer_split, infer_dump;
  double infer_noise = 0.0;
  auto* inf = app.add_subcommand("infer", "Predict instances for one scene or a dataset split");
  add_common(inf, infer_common);
  inf->add_option("--model", infer_model, "Checkpoint")->required();
  inf->add_option("--scene", infer_scene_path, "MVOX scene");
  inf->add_option("--data", infer_data, "Dataset directory (size bands; with --split, all scenes)");
  inf->add_option("--split", infer_split, "Split to predict, requires --data");
  inf->add_option("--out", infer_out, "Prediction JSON, or a directory with --split")->required();
  inf->add_option("--dump-embedding", infer_dump, "PLY of the embedding of every object voxel");
  inf->add_option("--noise", infer_noise, "Label noise applied to the input");

  // eval
  Common eval_common;
  std::optional<std::string> eval_pred, eval_baseline, eval_split, eval_report;
  std::string eval_gt;
  auto* evl = app.add_subcommand("eval", "Score predictions against ground truth");
  add_common(evl, eval_common);
  evl->add_option("--pred", eval_pred, "Prediction JSON or directory of them");
  evl->add_option("--baseline", eval_baseline, "Evaluate a baseline instead: cc | seg")
      ->check(CLI::IsMember({"cc", "seg"}));
  evl->add_option("--gt", eval_gt, "MVOX scene or dataset directory")->required();
  evl->add_option("--split", eval_split, "Dataset split for --baseline (default test)");
  evl->add_option("--report", eval_report, "Report JSON path");

  // export-ply
  std::string ply_scene, ply_out;
  std::optional<std::string> ply_pred;
  auto* ply = app.add_subcommand("export-ply", "Write a scene as a PLY colored by instance");
  ply->add_option("--scene", ply_scene, "MVOX scene")->required();
  ply->add_option("--pred", ply_pred, "Color by predicted instances instead of ground truth");
  ply->add_option("--out", ply_out, "PLY path")->required();

  // gradcheck
  std::uint64_t gc_seed = 0;
  int gc_trials = 20;
  double gc_tol = 1e-6;
  auto* gc = app.add_subcommand("gradcheck", "Compare reverse-mode gradients with finite differences");
  gc->add_option("--seed", gc_seed, "Random seed");
  gc->add_option("--trials", gc_trials, "Random instances per op")->check(CLI::PositiveNumber);
  gc->add_option("--tolerance", gc_tol, "Maximum relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    if (*gen) {
      std::vector<std::string> extra;
      if (gen_common.seed) extra.push_back("synth.seed=" + std::to_string(*gen_common.seed));
      if (gen_scenes) {
        if (*gen_scenes < 1) throw Error(ErrorCode::ConfigError, "--scenes must be >= 1");
        const int train = gen_train ? *gen_train : (*gen_scenes * 9 + 5) / 10;
        extra.push_back("synth.num_scenes=" + std::to_string(*gen_scenes));
        extra.push_back("synth.num_train=" + std::to_string(train));
        extra.push_back("synth.num_test=" + std::to_string(*gen_scenes - train));
      } else if (gen_train) {
        throw Error(ErrorCode::ConfigError, "--train requires --scenes");
      }
      const RunConfig cfg = resolve(gen_common, extra);
      const json manifest = generate_dataset(cfg.synth, gen_out, gen_common.jobs);
      echo_config(cfg, gen_out);
      std::printf("wrote %zu scenes to %s\n", manifest.at("scenes").size(), gen_out.c_str());
      return kOk;
    }

    if (*trn) {
      std::vector<std::string> extra{"train.data_dir=" + json(train_data).dump(),
                                     "train.out_dir=" + json(train_out).dump()};
      if (train_common.seed) extra.push_back("train.seed=" + std::to_string(*train_common.seed));
      const RunConfig cfg = resolve(train_common, extra);
      echo_config(cfg, train_out);
      const TrainResult result = train(cfg.train, [](const StepLog& s) {
        std::printf("epoch %d step %d  L_var %.4f  L_dist %.4f  L_reg %.4f  L_dir %.4f  L_joint %.4f\n", s.epoch,
                    s.step, s.loss.var, s.loss.dist, s.loss.reg, s.loss.dir, s.loss.joint);
        std::fflush(stdout);
      });
      std::printf("trained %d steps; checkpoint %s\n", result.steps, result.checkpoint.string().c_str());
      return kOk;
    }

    if (*inf) {
      const RunConfig cfg = resolve(infer_common);
      ClusterParams cluster = cfg.cluster;
      std::optional<fs::path> data;
      if (infer_data) data = *infer_data;
      load_size_bands(cluster, data);
      const Model<float> model = load_model(infer_model);
      const std::uint64_t seed = infer_common.seed.value_or(0);
      if (infer_split) {
        if (!data) throw Error(ErrorCode::ConfigError, "--split requires --data");
        const Dataset ds = Dataset::open(*data);
        fs::create_directories(infer_out);
        std::size_t k = 0;
        for (const std::string& file : ds.split(*infer_split)) {
          const SceneSample s = ds.load(file);
          const auto pred = predict_scene(model, s.grid, cluster, infer_noise, mix_seed(seed, k++));
          const fs::path name = fs::path(file).filename().replace_extension(".json");
          io::write_file_atomic(fs::path(infer_out) / name, predictions_to_json(file, pred).dump() + "\n");
        }
        echo_config(cfg, infer_out);
        std::printf("wrote %zu predictions to %s\n", k, infer_out.c_str());
        return kOk;
      }
      if (!infer_scene_path) throw Error(ErrorCode::ConfigError, "infer needs --scene or --data with --split");
      const VoxelGrid grid = io::read_mvox(*infer_scene_path);
      FieldPair<float> fields;
      const auto pred = predict_scene(model, grid, cluster, infer_noise, seed, &fields);
      std::string scene_name = fs::path(*infer_scene_path).filename().string();
      if (data) {
        const auto rel = fs::relative(*infer_scene_path, *data);
        if (!rel.empty() && rel.native()[0] != '.') scene_name = rel.generic_string();
      }
      io::write_file_atomic(infer_out, predictions_to_json(scene_name, pred).dump() + "\n");
      if (infer_dump) {
        const VoxelGrid padded = pad_to_multiple(grid, 1 << model.config().pool_count());
        write_embedding_ply(*infer_dump, padded, fields, semantic_mask(padded, cluster.ignore_classes));
      }
      std::printf("%zu instances -> %s\n", pred.size(), infer_out.c_str());
      return kOk;
    }

    if (*evl) {
      const RunConfig cfg = resolve(eval_common);
      EvalOptions options;
      options.ignore_classes = cfg.cluster.ignore_classes;
      for (std::size_t k = 0; k < cfg.synth.shapes.size(); ++k) {
        options.class_names[static_cast<Label>(kFirstObjectClass + k)] = "Obj" + std::to_string(k + 1);
      }
      std::vector<SceneEval> scenes;
      const bool gt_is_dir = fs::is_directory(eval_gt);
      if (eval_baseline) {
        if (eval_pred) throw Error(ErrorCode::ConfigError, "--pred and --baseline are exclusive");
        std::vector<std::pair<std::string, VoxelGrid>> grids;
        if (gt_is_dir) {
          const Dataset ds = Dataset::open(eval_gt);
          for (const std::string& f : ds.split(eval_split.value_or("test"))) grids.emplace_back(f, ds.load(f).grid);
        } else {
          grids.emplace_back(eval_gt, io::read_mvox(eval_gt));
        }
        for (auto& [name, grid] : grids) {
          auto pred = *eval_baseline == "cc" ? baseline_connected_components(grid, options.ignore_classes)
                                             : baseline_seg_as_instance(grid, options.ignore_classes);
          scenes.push_back({name, std::move(grid), std::move(pred)});
        }
      } else {
        if (!eval_pred) throw Error(ErrorCode::ConfigError, "eval needs --pred or --baseline");
        std::vector<fs::path> files;
        if (fs::is_directory(*eval_pred)) {
          for (const auto& e : fs::directory_iterator(*eval_pred)) {
            if (e.path().extension() == ".json" && e.path().filename() != "config.json") files.push_back(e.path());
          }
          std::sort(files.begin(), files.end());
        } else {
          files.push_back(*eval_pred);
        }
        for (const fs::path& f : files) {
          const json j = read_json(f);
          const std::string scene = j.value("scene", std::string());
          const fs::path gt_path = gt_is_dir ? fs::path(eval_gt) / scene : fs::path(eval_gt);
          scenes.push_back({scene, io::read_mvox(gt_path), predictions_from_json(j)});
        }
      }
      const EvalReport report = ap_summary(scenes, options);
      std::fputs(report.to_table().c_str(), stdout);
      if (eval_report) {
        io::write_file_atomic(*eval_report, report.to_json().dump(2) + "\n");
        echo_config(cfg, fs::path(*eval_report).parent_path().empty() ? fs::path(".")
                                                                       : fs::path(*eval_report).parent_path());
      }
      return kOk;
    }

    if (*ply) {
      const VoxelGrid grid = io::read_mvox(ply_scene);
      std::vector<Label> labels(grid.instance().begin(), grid.instance().end());
      if (ply_pred) {
        const auto pred = predictions_from_json(read_json(*ply_pred));
        std::fill(labels.begin(), labels.end(), Label{0});
        // Later (lower-ranked) instances never overwrite earlier ones.
        for (std::size_t k = pred.size(); k-- > 0;) {
          for (VoxelIndex v : pred[k].voxels) {
            if (v < labels.size()) labels[v] = static_cast<Label>(k + 1);
          }
        }
      }
      io::write_ply(ply_out, io::grid_to_cloud(grid, labels));
      std::printf("wrote %s\n", ply_out.c_str());
      return kOk;
    }

    if (*gc) {
      bool ok = true;
      for (const GradcheckResult& r : run_gradcheck(gc_seed, gc_trials, 1e-5, gc_tol)) {
        std::printf("%-18s %s  max rel err %.3e over %d trials (%d redrawn at kinks)\n", r.op.c_str(),
                    r.passed ? "PASS" : "FAIL", r.max_error, r.trials, r.redrawn);
        ok = ok && r.passed;
      }
      return ok ? kOk : kGradcheck;
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code(e.code());
  } catch (const std::filesystem::filesystem_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kIo;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kFailure;
  }
  return kOk;
}
