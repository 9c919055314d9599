#include "mtml/config.hpp"

#include "mtml/io.hpp"
#include "mtml/json_util.hpp"

namespace mtml {

using nlohmann::json;

json RunConfig::to_json() const {
  json train_section = train;
  train_section.erase("model");
  train_section.erase("loss");
  return json{{"model", model}, {"loss", loss}, {"train", train_section}, {"cluster", cluster}, {"synth", synth}};
}

RunConfig RunConfig::from_json(const json& j) {
  reject_unknown_keys(j, {"model", "loss", "train", "cluster", "synth"}, "run config");
  RunConfig c;
  try {
    if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
    if (j.contains("loss")) c.loss = j.at("loss").get<LossParams>();
    if (j.contains("train")) {
      const json& t = j.at("train");
      if (t.is_object() && (t.contains("model") || t.contains("loss"))) {
        throw Error(ErrorCode::ConfigError, "model and loss belong in their own sections, not under train");
      }
      c.train = t.get<TrainConfig>();
    }
    if (j.contains("cluster")) c.cluster = j.at("cluster").get<ClusterParams>();
    if (j.contains("synth")) c.synth = j.at("synth").get<SynthConfig>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ConfigError, std::string("run config: ") + e.what());
  }
  c.train.model = c.model;
  c.train.loss = c.loss;
  return c;
}

void RunConfig::validate() const {
  model.validate();
  loss.validate();
  train.validate();
  cluster.validate();
  synth.validate();
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw Error(ErrorCode::ConfigError, "override '" + assignment + "' is not of the form key.path=value");
  }
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json* node = &j;
  std::size_t pos = 0;
  while (true) {
    const auto dot = path.find('.', pos);
    const std::string key = path.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
    if (!node->is_object() || !node->contains(key)) {
      throw Error(ErrorCode::ConfigError, "unknown config key '" + path + "'");
    }
    node = &(*node)[key];
    if (dot == std::string::npos) break;
    pos = dot + 1;
  }
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  *node = std::move(value);
}

RunConfig RunConfig::resolve(const std::optional<std::filesystem::path>& file, const std::vector<std::string>& overrides) {
  json j = RunConfig{}.to_json();
  if (file) {
    const auto bytes = io::read_file(*file);
    json user = json::parse(bytes.begin(), bytes.end(), nullptr, false);
    if (user.is_discarded()) throw Error(ErrorCode::ConfigError, file->string() + ": not valid JSON");
    reject_unknown_keys(user, {"model", "loss", "train", "cluster", "synth"}, file->string());
    // Model layouts are replaced wholesale, everything else merges key by key.
    j.merge_patch(user);
    if (user.contains("model") && user["model"].contains("width") && !user["model"].contains("layers")) {
      j["model"].erase("layers");
    }
  }
  for (const std::string& o : overrides) {
    if (o.rfind("model.width=", 0) == 0) {
      j["model"].erase("layers");
      j["model"]["width"] = json::parse(o.substr(12), nullptr, false);
      if (j["model"]["width"].is_discarded()) throw Error(ErrorCode::ConfigError, "model.width must be an integer");
      continue;
    }
    apply_override(j, o);
  }
  RunConfig c = from_json(j);
  c.validate();
  return c;
}

}  // namespace mtml
