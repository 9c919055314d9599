#include "mtml/train.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "mtml/adam.hpp"
#include "mtml/eval.hpp"
#include "mtml/io.hpp"
#include "mtml/json_util.hpp"
#include "mtml/rng.hpp"

namespace mtml {

using nlohmann::json;
namespace fs = std::filesystem;

void TrainConfig::validate() const {
  auto fail = [](const std::string& why) { throw Error(ErrorCode::ConfigError, "train config: " + why); };
  if (epochs < 1) fail("epochs must be >= 1");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (!(learning_rate >= 0.0)) fail("learning_rate must be >= 0");
  if (input_noise < 0.0 || input_noise > 1.0) fail("input_noise must be in [0, 1]");
  if (max_scenes < 0 || max_steps < 0 || checkpoint_every < 0) fail("limits must be >= 0");
  model.validate();
  loss.validate();
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"data_dir", c.data_dir.string()},
           {"out_dir", c.out_dir.string()},
           {"train_split", c.train_split},
           {"epochs", c.epochs},
           {"batch_size", c.batch_size},
           {"learning_rate", c.learning_rate},
           {"seed", c.seed},
           {"augment", c.augment},
           {"input_noise", c.input_noise},
           {"max_scenes", c.max_scenes},
           {"max_steps", c.max_steps},
           {"checkpoint_every", c.checkpoint_every},
           {"model", c.model},
           {"loss", c.loss}};
}

void from_json(const json& j, TrainConfig& c) {
  reject_unknown_keys(j,
                      {"data_dir", "out_dir", "train_split", "epochs", "batch_size", "learning_rate", "seed",
                       "augment", "input_noise", "max_scenes", "max_steps", "checkpoint_every", "model", "loss"},
                      "train config");
  try {
    if (j.contains("data_dir")) c.data_dir = j.at("data_dir").get<std::string>();
    if (j.contains("out_dir")) c.out_dir = j.at("out_dir").get<std::string>();
    c.train_split = j.value("train_split", c.train_split);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.seed = j.value("seed", c.seed);
    c.augment = j.value("augment", c.augment);
    c.input_noise = j.value("input_noise", c.input_noise);
    c.max_scenes = j.value("max_scenes", c.max_scenes);
    c.max_steps = j.value("max_steps", c.max_steps);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
    if (j.contains("loss")) c.loss = j.at("loss").get<LossParams>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ConfigError, std::string("train config: ") + e.what());
  }
}

SceneSample augment_d4(const SceneSample& sample, int element) {
  const int e = ((element % 8) + 8) % 8;
  SceneSample out = e % 4 == 0 ? sample : augment(sample, Augmentation::rotate_z(e % 4));
  if (e >= 4) out = augment(out, Augmentation::flip_x());
  return out;
}

namespace {

// Pads the grid so every pooling level divides it; labels follow the grid.
SceneSample fit_to_model(const SceneSample& sample, const ModelConfig& config) {
  const int m = 1 << config.pool_count();
  const Dims& d = sample.grid.dims();
  if (d.nx % m == 0 && d.ny % m == 0 && d.nz % m == 0) return sample;
  SceneSample out;
  out.grid = pad_to_multiple(sample.grid, m);
  out.gt = extract_labeling(out.grid);
  return out;
}

LossValues values_of(const LossTerms<float>& t) {
  return {t.var.value()[0], t.dist.value()[0], t.reg.value()[0], t.fe.value()[0], t.dir.value()[0], t.joint.value()[0]};
}

void accumulate(LossValues& acc, const LossValues& v, double w) {
  acc.var += w * v.var;
  acc.dist += w * v.dist;
  acc.reg += w * v.reg;
  acc.fe += w * v.fe;
  acc.dir += w * v.dir;
  acc.joint += w * v.joint;
}

bool finite(const LossValues& v) {
  return std::isfinite(v.var) && std::isfinite(v.dist) && std::isfinite(v.reg) && std::isfinite(v.dir) &&
         std::isfinite(v.joint);
}

std::vector<Tensor<float>> parameter_values(const Model<float>& model) {
  std::vector<Tensor<float>> out;
  for (const auto& p : model.parameters()) out.push_back(p.value);
  return out;
}

}  // namespace

LossValues scene_gradients(const Model<float>& model, const SceneSample& sample, const Tensor<float>& input,
                           const LossParams& params, std::vector<Tensor<float>>* grads) {
  Tape<float> tape;
  Var<float> x = tape.leaf(input, false);
  FieldVars<float> fields = model.forward(tape, x);
  LossTerms<float> terms = l_joint(fields, sample, params);
  const LossValues values = values_of(terms);
  if (grads && !terms.degenerate) {
    tape.backward(terms.joint);
    if (grads->empty()) {
      for (const auto& p : fields.parameters) grads->push_back(Tensor<float>::zeros(p.shape()));
    }
    for (std::size_t k = 0; k < fields.parameters.size(); ++k) {
      const Tensor<float>& g = fields.parameters[k].grad();
      float* dst = (*grads)[k].data();
      for (std::size_t n = 0; n < g.numel(); ++n) dst[n] += g[n];
    }
  }
  return values;
}

TrainResult train_on(const TrainConfig& config, const std::vector<SceneSample>& scenes, Model<float>& model,
                     const std::function<void(const StepLog&)>& on_step) {
  config.validate();
  MTML_CHECK(!scenes.empty(), ErrorCode::ConfigError, "training split is empty");
  MTML_CHECK(model.config() == config.model, ErrorCode::ConfigError, "model does not match the training config");
  for (const SceneSample& s : scenes) {
    MTML_CHECK(static_cast<int>(s.grid.num_classes()) == config.model.num_classes, ErrorCode::ConfigError,
               "dataset has " + std::to_string(s.grid.num_classes()) + " classes but model.num_classes is " +
                   std::to_string(config.model.num_classes));
  }
  TrainResult result;
  const bool write = !config.out_dir.empty();
  std::ofstream log;
  if (write) {
    std::error_code ec;
    fs::create_directories(config.out_dir, ec);
    if (ec) throw Error(ErrorCode::IoError, config.out_dir.string() + ": " + ec.message());
    result.log = config.out_dir / "loss.csv";
    log.open(result.log, std::ios::trunc);
    if (!log) throw Error(ErrorCode::IoError, "cannot write " + result.log.string());
    log << "step,epoch,L_var,L_dist,L_reg,L_dir,L_joint\n";
  }
  const fs::path last = config.out_dir / "last.mtml";
  bool have_last = false;

  Rng rng(mix_seed(config.seed, 0x747261696e));
  std::vector<Tensor<float>> params = parameter_values(model);
  AdamState<float> adam(params, AdamOptions{config.learning_rate});
  std::vector<std::size_t> order(scenes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  int step = 0;
  bool done = false;

  auto sync_model = [&] {
    for (std::size_t k = 0; k < params.size(); ++k) model.parameters()[k].value = params[k];
  };

  for (int epoch = 1; epoch <= config.epochs && !done; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t start = 0; start < order.size() && !done; start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      const double weight = 1.0 / static_cast<double>(end - start);
      std::vector<Tensor<float>> grads;
      LossValues mean;
      for (std::size_t b = start; b < end; ++b) {
        const int element = config.augment ? static_cast<int>(rng.below(8)) : 0;
        const std::uint64_t noise_seed = rng.next();
        SceneSample sample = fit_to_model(augment_d4(scenes[order[b]], element), config.model);
        const Tensor<float> input = config.input_noise > 0.0
                                        ? encode_input(sample.grid, config.input_noise, noise_seed)
                                        : encode_input(sample.grid);
        accumulate(mean, scene_gradients(model, sample, input, config.loss, &grads), weight);
      }
      ++step;
      if (!finite(mean)) {
        throw Error(ErrorCode::NumericalDivergence,
                    "non-finite loss at step " + std::to_string(step) +
                        (have_last ? "; last good checkpoint: " + last.string() : "; no checkpoint written yet"));
      }
      if (!grads.empty()) {
        for (Tensor<float>& g : grads) {
          for (float& v : g.storage()) v = static_cast<float>(v * weight);
        }
        adam.step(params, grads);
        sync_model();
      }
      const StepLog entry{step, epoch, mean};
      result.history.push_back(entry);
      if (write) {
        char buf[256];
        std::snprintf(buf, sizeof buf, "%d,%d,%.9g,%.9g,%.9g,%.9g,%.9g\n", step, epoch, mean.var, mean.dist, mean.reg,
                      mean.dir, mean.joint);
        log << buf << std::flush;
        if (config.checkpoint_every > 0 && step % config.checkpoint_every == 0) {
          save_model(model, last);
          have_last = true;
        }
      }
      if (on_step) on_step(entry);
      if (config.max_steps > 0 && step >= config.max_steps) done = true;
    }
    if (write && config.checkpoint_every == 0) {
      save_model(model, last);
      have_last = true;
    }
  }
  result.steps = step;
  if (write) {
    result.checkpoint = config.out_dir / "model.mtml";
    save_model(model, result.checkpoint);
  }
  return result;
}

TrainResult train(const TrainConfig& config, const std::function<void(const StepLog&)>& on_step) {
  config.validate();
  if (config.out_dir.empty()) throw Error(ErrorCode::ConfigError, "train config: out_dir is required");
  const Dataset data = Dataset::open(config.data_dir);
  const auto& files = data.split(config.train_split);
  const std::size_t count =
      config.max_scenes > 0 ? std::min<std::size_t>(files.size(), config.max_scenes) : files.size();
  std::vector<SceneSample> scenes;
  scenes.reserve(count);
  for (std::size_t k = 0; k < count; ++k) scenes.push_back(data.load(files[k]));
  Model<float> model = Model<float>::build(config.model, config.seed);
  return train_on(config, scenes, model, on_step);
}

json EpochReport::to_json() const {
  return json{{"scenes", scenes}, {"L_var", loss.var}, {"L_dist", loss.dist}, {"L_reg", loss.reg},
              {"L_FE", loss.fe},  {"L_dir", loss.dir}, {"L_joint", loss.joint}, {"AP50", ap50},
              {"AP", ap}};
}

EpochReport evaluate_scenes(const Model<float>& model, const std::vector<SceneSample>& scenes,
                            const LossParams& loss, const ClusterParams& cluster) {
  EpochReport report;
  report.scenes = scenes.size();
  if (scenes.empty()) return report;
  std::vector<SceneEval> evals;
  const double w = 1.0 / static_cast<double>(scenes.size());
  for (std::size_t k = 0; k < scenes.size(); ++k) {
    const SceneSample sample = fit_to_model(scenes[k], model.config());
    const Tensor<float> input = encode_input(sample.grid);
    Tape<float> tape;
    FieldVars<float> vars = model.forward(tape, tape.leaf(input, false));
    accumulate(report.loss, values_of(l_joint(vars, sample, loss)), w);
    const FieldPair<float> fields{vars.embedding.value(), vars.direction.value()};
    evals.push_back({"scene " + std::to_string(k), sample.grid, segment_scene(fields, sample.grid, cluster)});
  }
  EvalOptions options;
  options.ignore_classes = cluster.ignore_classes;
  const EvalReport ap = ap_summary(evals, options);
  report.ap50 = ap.average.ap50;
  report.ap = ap.average.ap;
  return report;
}

EpochReport evaluate_epoch(const Model<float>& model, const Dataset& data, const std::string& split,
                           const LossParams& loss, const ClusterParams& cluster, int max_scenes) {
  const auto& files = data.split(split);
  const std::size_t count = max_scenes > 0 ? std::min<std::size_t>(files.size(), max_scenes) : files.size();
  std::vector<SceneSample> scenes;
  for (std::size_t k = 0; k < count; ++k) scenes.push_back(data.load(files[k]));
  return evaluate_scenes(model, scenes, loss, cluster);
}

std::vector<InstanceProposal> predict_scene(const Model<float>& model, const VoxelGrid& grid,
                                          const ClusterParams& cluster, double noise, std::uint64_t seed,
                                          FieldPair<float>* fields_out) {
  const int m = 1 << model.config().pool_count();
  const VoxelGrid input_grid = noise > 0.0 ? apply_label_noise(grid, noise, seed) : grid;
  const VoxelGrid padded = pad_to_multiple(input_grid, m);
  FieldPair<float> fields = model.infer(encode_input(padded));
  std::vector<InstanceProposal> out = segment_scene(fields, padded, cluster);
  // Padding only adds voxels at the high end of each axis; map indices back.
  if (padded.dims() != input_grid.dims()) {
    for (InstanceProposal& p : out) {
      std::vector<VoxelIndex> kept;
      for (VoxelIndex v : p.voxels) {
        const Coord c = padded.coord(v);
        if (input_grid.contains(c)) kept.push_back(input_grid.index(c));
      }
      p.voxels = std::move(kept);
    }
  }
  if (fields_out) *fields_out = std::move(fields);
  return out;
}


}  // namespace mtml
