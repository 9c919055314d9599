#include "mtml/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>

#include "mtml/io.hpp"
#include "mtml/json_util.hpp"
#include "mtml/ops.hpp"
#include "mtml/rng.hpp"

namespace mtml {

using nlohmann::json;

std::vector<LayerSpec> ModelConfig::default_layers(int width) {
  const int half = std::max(1, width / 2);
  std::vector<LayerSpec> layers{LayerSpec::conv(half), LayerSpec::conv(width), LayerSpec::pool()};
  for (int d : {1, 2, 4, 8, 16, 16}) layers.push_back(LayerSpec::conv(width, 3, d));
  layers.push_back(LayerSpec::deconv(width));
  layers.push_back(LayerSpec::conv(width));
  return layers;
}

ModelConfig ModelConfig::visualization_preset(int num_classes) {
  ModelConfig c;
  c.num_classes = num_classes;
  c.embed_dim = 3;
  return c;
}

int ModelConfig::pool_count() const {
  int n = 0;
  for (const LayerSpec& l : layers) n += l.type == LayerType::Pool;
  return n;
}

int receptive_field(const ModelConfig& config) {
  long rf = 1;
  long jump = 1;
  for (const LayerSpec& l : config.layers) {
    switch (l.type) {
      case LayerType::Conv:
        rf += static_cast<long>(l.kernel - 1) * l.dilation * jump;
        jump *= l.stride;
        break;
      case LayerType::Pool:
        rf += jump;
        jump *= 2;
        break;
      case LayerType::Deconv: {
        const long taps = (l.kernel + l.stride - 1) / l.stride;
        rf += (taps - 1) * jump;
        jump = std::max<long>(1, jump / l.stride);
        break;
      }
    }
  }
  return static_cast<int>(rf);
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& why) { throw Error(ErrorCode::ConfigError, "model config: " + why); };
  if (num_classes < 1) fail("num_classes must be >= 1");
  if (embed_dim < 1) fail("embed_dim must be >= 1");
  if (layers.empty()) fail("layer list is empty");
  int open_pools = 0;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    const std::string at = "layer " + std::to_string(i) + ": ";
    switch (l.type) {
      case LayerType::Conv:
        if (l.filters < 1) fail(at + "filters must be >= 1");
        if (l.kernel < 1 || l.kernel % 2 == 0) fail(at + "conv kernel must be odd");
        if (l.stride != 1) fail(at + "trunk convolutions must have stride 1");
        if (l.dilation < 1) fail(at + "dilation must be >= 1");
        break;
      case LayerType::Pool:
        if (l.kernel != 2 || l.stride != 2) fail(at + "pooling is 2x2x2 with stride 2");
        ++open_pools;
        break;
      case LayerType::Deconv:
        if (l.filters < 1) fail(at + "filters must be >= 1");
        if (l.kernel != 2 || l.stride != 2) fail(at + "deconv must have kernel 2 and stride 2");
        if (--open_pools < 0) fail(at + "deconv without a preceding pool");
        break;
    }
  }
  if (open_pools != 0) fail("every pool needs a matching deconv so output and input sizes agree");
  const int rf = receptive_field(*this);
  if (rf < target_receptive_field) {
    fail("receptive field " + std::to_string(rf) + " voxels is below the target " +
         std::to_string(target_receptive_field));
  }
}

namespace {

const char* layer_type_name(LayerType t) {
  switch (t) {
    case LayerType::Conv: return "conv";
    case LayerType::Pool: return "pool";
    case LayerType::Deconv: return "deconv";
  }
  return "?";
}

}  // namespace

void to_json(json& j, const ModelConfig& c) {
  json layers = json::array();
  for (const LayerSpec& l : c.layers) {
    layers.push_back({{"type", layer_type_name(l.type)},
                      {"filters", l.filters},
                      {"kernel", l.kernel},
                      {"stride", l.stride},
                      {"dilation", l.dilation}});
  }
  j = json{{"num_classes", c.num_classes},
           {"embed_dim", c.embed_dim},
           {"layers", layers},
           {"skip_concat", c.skip_concat},
           {"target_receptive_field", c.target_receptive_field}};
}

void from_json(const json& j, ModelConfig& c) {
  reject_unknown_keys(j, {"num_classes", "embed_dim", "layers", "skip_concat", "target_receptive_field", "width"},
                 "model config");
  try {
    if (j.contains("width")) c.layers = ModelConfig::default_layers(j.at("width").get<int>());
    if (j.contains("num_classes")) c.num_classes = j.at("num_classes").get<int>();
    if (j.contains("embed_dim")) c.embed_dim = j.at("embed_dim").get<int>();
    if (j.contains("skip_concat")) c.skip_concat = j.at("skip_concat").get<bool>();
    if (j.contains("target_receptive_field")) c.target_receptive_field = j.at("target_receptive_field").get<int>();
    if (j.contains("layers")) {
      c.layers.clear();
      for (const json& lj : j.at("layers")) {
        reject_unknown_keys(lj, {"type", "filters", "kernel", "stride", "dilation"}, "layer spec");
        LayerSpec l;
        const std::string type = lj.at("type").get<std::string>();
        if (type == "conv") {
          l = LayerSpec::conv(0);
        } else if (type == "pool") {
          l = LayerSpec::pool();
        } else if (type == "deconv") {
          l = LayerSpec::deconv(0);
        } else {
          throw Error(ErrorCode::ConfigError, "unknown layer type '" + type + "'");
        }
        l.filters = lj.value("filters", l.filters);
        l.kernel = lj.value("kernel", l.kernel);
        l.stride = lj.value("stride", l.stride);
        l.dilation = lj.value("dilation", l.dilation);
        c.layers.push_back(l);
      }
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ConfigError, std::string("model config: ") + e.what());
  }
}

namespace {

struct ParamShape {
  std::string name;
  Shape shape;
  std::size_t fan_in;
};

std::vector<ParamShape> parameter_layout(const ModelConfig& config) {
  std::vector<ParamShape> out;
  std::size_t c = static_cast<std::size_t>(config.num_classes);
  std::size_t pooled = 0;
  bool skip_used = false;
  for (std::size_t i = 0; i < config.layers.size(); ++i) {
    const LayerSpec& l = config.layers[i];
    const std::string prefix = "layer" + std::to_string(i);
    const std::size_t k = static_cast<std::size_t>(l.kernel);
    const std::size_t f = static_cast<std::size_t>(l.filters);
    switch (l.type) {
      case LayerType::Conv:
        out.push_back({prefix + ".weight", {f, c, k, k, k}, c * k * k * k});
        out.push_back({prefix + ".bias", {f}, 0});
        c = f;
        break;
      case LayerType::Pool:
        if (pooled == 0) pooled = c;
        break;
      case LayerType::Deconv: {
        if (config.skip_concat && !skip_used) {
          c += pooled;
          skip_used = true;
        }
        const std::size_t taps = (k + l.stride - 1) / l.stride;
        out.push_back({prefix + ".weight", {c, f, k, k, k}, c * taps * taps * taps});
        out.push_back({prefix + ".bias", {f}, 0});
        c = f;
        break;
      }
    }
  }
  const std::size_t d = static_cast<std::size_t>(config.embed_dim);
  out.push_back({"head_embed.weight", {d, c, 1, 1, 1}, c});
  out.push_back({"head_embed.bias", {d}, 0});
  out.push_back({"head_dir.weight", {3, c, 1, 1, 1}, c});
  out.push_back({"head_dir.bias", {3}, 0});
  return out;
}

}  // namespace

template <typename T>
Model<T>::Model(ModelConfig config, std::vector<NamedTensor<T>> params)
    : config_(std::move(config)), params_(std::move(params)) {
  config_.validate();
  const auto layout = parameter_layout(config_);
  MTML_CHECK(layout.size() == params_.size(), ErrorCode::CorruptTensorTable,
             "expected " + std::to_string(layout.size()) + " parameter tensors, got " + std::to_string(params_.size()));
  for (std::size_t i = 0; i < layout.size(); ++i) {
    MTML_CHECK(layout[i].name == params_[i].name && layout[i].shape == params_[i].value.shape(),
               ErrorCode::CorruptTensorTable,
               "parameter " + std::to_string(i) + " is " + params_[i].name + shape_str(params_[i].value.shape()) +
                   ", expected " + layout[i].name + shape_str(layout[i].shape));
  }
}

template <typename T>
Model<T> Model<T>::build(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(mix_seed(seed, 0x6d6f64656cULL));
  std::vector<NamedTensor<T>> params;
  for (const ParamShape& p : parameter_layout(config)) {
    Tensor<T> t(p.shape);
    if (p.fan_in > 0) {
      const double stddev = std::sqrt(2.0 / static_cast<double>(p.fan_in));
      for (T& v : t.values()) v = static_cast<T>(stddev * rng.normal());
    }
    params.push_back({p.name, std::move(t)});
  }
  return Model(config, std::move(params));
}

template <typename T>
std::size_t Model<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

template <typename T>
FieldVars<T> Model<T>::forward(Tape<T>& tape, Var<T> input) const {
  const Shape& s = input.shape();
  MTML_CHECK(s.size() == 4 && s[0] == static_cast<std::size_t>(config_.num_classes), ErrorCode::ShapeError,
             "model input must be {" + std::to_string(config_.num_classes) + ", nz, ny, nx}, got " + shape_str(s));
  const std::size_t multiple = std::size_t{1} << config_.pool_count();
  for (int a = 1; a < 4; ++a) {
    MTML_CHECK(s[a] % multiple == 0, ErrorCode::ShapeError,
               "spatial dims must be multiples of " + std::to_string(multiple) + ", got " + shape_str(s));
  }
  FieldVars<T> out;
  out.parameters.reserve(params_.size());
  for (const auto& p : params_) out.parameters.push_back(tape.leaf(p.value, true));

  std::size_t next = 0;
  auto take = [&]() { return out.parameters.at(next++); };
  Var<T> x = input;
  Var<T> pooled;
  bool skip_used = false;
  for (const LayerSpec& l : config_.layers) {
    switch (l.type) {
      case LayerType::Conv: {
        Var<T> w = take();
        Var<T> b = take();
        x = ops::relu(ops::conv3d(x, w, b, {1, l.dilation, -1}));
        break;
      }
      case LayerType::Pool:
        x = ops::maxpool3d(x);
        if (!pooled.valid()) pooled = x;
        break;
      case LayerType::Deconv: {
        if (config_.skip_concat && !skip_used) {
          x = ops::concat(x, pooled, 0);
          skip_used = true;
        }
        Var<T> w = take();
        Var<T> b = take();
        x = ops::relu(ops::conv_transpose3d(x, w, b, {l.stride, 1, 0, 0}));
        break;
      }
    }
  }
  Var<T> we = take(), be = take(), wd = take(), bd = take();
  out.embedding = ops::conv3d(x, we, be, {1, 1, 0});
  out.direction = ops::l2_normalize(ops::conv3d(x, wd, bd, {1, 1, 0}), 0, T(1e-8));
  return out;
}

template <typename T>
FieldPair<T> Model<T>::infer(const Tensor<T>& input) const {
  Tape<T> tape;
  FieldVars<T> v = forward(tape, tape.leaf(input, false));
  return FieldPair<T>{v.embedding.value(), v.direction.value()};
}

template class Model<float>;
template class Model<double>;

namespace {

void put_u32(std::vector<char>& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(const std::vector<char>& bytes) : bytes_(bytes) {}
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + b])) << (8 * b);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    MTML_CHECK(pos_ + n <= bytes_.size(), ErrorCode::CorruptTensorTable, "checkpoint truncated");
  }
  const std::vector<char>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<char> encode_checkpoint(const Model<float>& model) {
  std::vector<char> out{'M', 'T', 'M', 'L'};
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(model.parameters().size()));
  for (const auto& p : model.parameters()) {
    put_u32(out, static_cast<std::uint32_t>(p.name.size()));
    out.insert(out.end(), p.name.begin(), p.name.end());
    put_u32(out, static_cast<std::uint32_t>(p.value.rank()));
    for (std::size_t d : p.value.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : p.value.values()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  const std::string cfg = json(model.config()).dump();
  put_u32(out, static_cast<std::uint32_t>(cfg.size()));
  out.insert(out.end(), cfg.begin(), cfg.end());
  return out;
}

Model<float> decode_checkpoint(const std::vector<char>& bytes) {
  MTML_CHECK(bytes.size() >= 4 && std::memcmp(bytes.data(), "MTML", 4) == 0, ErrorCode::BadMagic,
             "not an MTML checkpoint");
  Reader r(bytes);
  r.str(4);
  const std::uint32_t version = r.u32();
  MTML_CHECK(version == kCheckpointVersion, ErrorCode::VersionMismatch,
             "checkpoint version " + std::to_string(version) + ", expected " + std::to_string(kCheckpointVersion));
  const std::uint32_t count = r.u32();
  MTML_CHECK(count < 4096, ErrorCode::CorruptTensorTable, "implausible tensor count");
  std::vector<NamedTensor<float>> params;
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::uint32_t name_len = r.u32();
    MTML_CHECK(name_len < 4096, ErrorCode::CorruptTensorTable, "implausible tensor name length");
    std::string name = r.str(name_len);
    const std::uint32_t rank = r.u32();
    MTML_CHECK(rank >= 1 && rank <= 8, ErrorCode::CorruptTensorTable, "implausible tensor rank");
    Shape shape(rank);
    std::size_t n = 1;
    for (auto& d : shape) {
      d = r.u32();
      MTML_CHECK(d > 0 && d < (1u << 24), ErrorCode::CorruptTensorTable, "implausible tensor dim");
      n *= d;
    }
    MTML_CHECK(n <= bytes.size(), ErrorCode::CorruptTensorTable, "tensor larger than file");
    std::vector<float> data(n);
    for (float& v : data) v = r.f32();
    params.push_back({std::move(name), Tensor<float>(std::move(shape), std::move(data))});
  }
  const std::uint32_t cfg_len = r.u32();
  const std::string cfg = r.str(cfg_len);
  MTML_CHECK(r.done(), ErrorCode::CorruptTensorTable, "trailing bytes after checkpoint");
  ModelConfig config;
  try {
    config = json::parse(cfg).get<ModelConfig>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::CorruptTensorTable, std::string("embedded config unreadable: ") + e.what());
  } catch (const Error& e) {
    throw Error(ErrorCode::CorruptTensorTable, std::string("embedded config invalid: ") + e.what());
  }
  return Model<float>(std::move(config), std::move(params));
}

void save_model(const Model<float>& model, const std::filesystem::path& path) {
  io::write_file_atomic(path, encode_checkpoint(model));
}

Model<float> load_model(const std::filesystem::path& path) {
  try {
    return decode_checkpoint(io::read_file(path));
  } catch (const Error& e) {
    if (e.code() == ErrorCode::IoError) throw;
    throw Error(e.code(), path.string() + ": " + e.what());
  }
}

}  // namespace mtml
