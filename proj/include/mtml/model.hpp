#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "mtml/tape.hpp"
#include "mtml/tensor.hpp"

namespace mtml {

enum class LayerType { Conv, Pool, Deconv };

// (filters, kernel, stride, dilation); pools are fixed 2x2x2 / stride 2.
struct LayerSpec {
  LayerType type = LayerType::Conv;
  int filters = 0;
  int kernel = 3;
  int stride = 1;
  int dilation = 1;

  static LayerSpec conv(int filters, int kernel = 3, int dilation = 1) {
    return {LayerType::Conv, filters, kernel, 1, dilation};
  }
  static LayerSpec pool() { return {LayerType::Pool, 0, 2, 2, 1}; }
  static LayerSpec deconv(int filters, int kernel = 2, int stride = 2) {
    return {LayerType::Deconv, filters, kernel, stride, 1};
  }
  bool operator==(const LayerSpec&) const = default;
};

struct ModelConfig {
  int num_classes = 6;  // one-hot input channels
  int embed_dim = 8;
  std::vector<LayerSpec> layers = default_layers();
  // Concatenates the pooled features onto the input of the first deconv.
  bool skip_concat = true;
  int target_receptive_field = 142;

  // Trunk with base width `width`: conv(w/2), conv(w), pool, dilated convs
  // (1, 2, 4, 8, 16, 16), deconv(w), conv(w).
  static std::vector<LayerSpec> default_layers(int width = 32);
  // D = 3 for direct inspection of the embedding space.
  static ModelConfig visualization_preset(int num_classes);

  int pool_count() const;
  // Throws ConfigError.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// Full receptive-field width in voxels: RF += (k - 1) * d * jump per conv,
// pools add jump and double it, a deconv adds (ceil(k / s) - 1) * jump and
// divides it by s.
int receptive_field(const ModelConfig& config);

template <typename T>
struct FieldPair {
  Tensor<T> embedding;  // {D, nz, ny, nx}
  Tensor<T> direction;  // {3, nz, ny, nx}, unit length per voxel
};

template <typename T>
struct FieldVars {
  Var<T> embedding;
  Var<T> direction;
  std::vector<Var<T>> parameters;  // same order as Model::parameters()
};

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> value;
};

template <typename T>
class Model {
 public:
  Model() = default;
  Model(ModelConfig config, std::vector<NamedTensor<T>> params);

  // He-initialized weights, zero biases; deterministic in `seed`.
  static Model build(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return config_; }
  std::vector<NamedTensor<T>>& parameters() noexcept { return params_; }
  const std::vector<NamedTensor<T>>& parameters() const noexcept { return params_; }
  std::size_t parameter_count() const;

  // Records the network on `tape`; parameters become gradient leaves.
  FieldVars<T> forward(Tape<T>& tape, Var<T> input) const;
  FieldPair<T> infer(const Tensor<T>& input) const;

  template <typename U>
  Model<U> cast() const {
    std::vector<NamedTensor<U>> out;
    for (const auto& p : params_) out.push_back({p.name, p.value.template cast<U>()});
    return Model<U>(config_, std::move(out));
  }

 private:
  ModelConfig config_;
  std::vector<NamedTensor<T>> params_;
};

extern template class Model<float>;
extern template class Model<double>;

// Checkpoint: "MTML" | u32 version | u32 tensor count | per tensor
// (u32 name length, name, u32 rank, u32 dims..., f32 data) | u32 json length | config JSON.
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<char> encode_checkpoint(const Model<float>& model);
Model<float> decode_checkpoint(const std::vector<char>& bytes);
void save_model(const Model<float>& model, const std::filesystem::path& path);
Model<float> load_model(const std::filesystem::path& path);

}  // namespace mtml
