#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mtml/cluster.hpp"
#include "mtml/loss.hpp"
#include "mtml/model.hpp"
#include "mtml/synthgen.hpp"
#include "mtml/train.hpp"

namespace mtml {

// Every tunable of a run. `train.model` and `train.loss` mirror the
// top-level sections and are kept in sync by `resolve`.
struct RunConfig {
  ModelConfig model;
  LossParams loss;
  TrainConfig train;
  ClusterParams cluster;
  SynthConfig synth;

  // Defaults, then the JSON file, then `key.path=value` overrides (values are
  // parsed as JSON, falling back to a plain string). Unknown keys throw ConfigError.
  static RunConfig resolve(const std::optional<std::filesystem::path>& file,
                           const std::vector<std::string>& overrides = {});
  static RunConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  void validate() const;
};

// Sets a dotted path inside `j`; the path must already exist.
void apply_override(nlohmann::json& j, const std::string& assignment);

}  // namespace mtml
