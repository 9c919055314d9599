#include "mtml/synthgen.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <mutex>
#include <numbers>
#include <thread>

#include "mtml/io.hpp"
#include "mtml/json_util.hpp"
#include "mtml/rng.hpp"

namespace mtml {

using nlohmann::json;
namespace fs = std::filesystem;

void SynthConfig::validate() const {
  auto fail = [](const std::string& why) { throw Error(ErrorCode::ConfigError, "synth config: " + why); };
  if (num_scenes < 1) fail("num_scenes must be >= 1");
  if (num_train < 0 || num_test < 0 || num_train + num_test != num_scenes) fail("splits must sum to num_scenes");
  if (dims.nx < 1 || dims.ny < 1 || dims.nz < 2) fail("grid dims must be positive with nz >= 2");
  if (!(voxel_size > 0.f)) fail("voxel_size must be positive");
  if (shapes.empty()) fail("at least one shape is required");
  if (shapes.size() + 1 > 0xFFFF) fail("too many shapes");
  for (const auto& s : shapes) {
    if (s[0] < 1 || s[1] < 1 || s[2] < 1) fail("shape extents must be positive");
    const double diag = std::hypot(double(s[0]), double(s[1]));
    if (diag + 2.0 > std::min(dims.nx, dims.ny) || s[2] + 2 > dims.nz) fail("shapes must fit the grid with margin 1");
  }
  if (min_objects < 1 || max_objects < min_objects) fail("object range must satisfy 1 <= min <= max");
  if (max_objects >= 0xFFFF) fail("max_objects too large");
  if (contact_probability < 0.0 || contact_probability > 1.0) fail("contact_probability must be in [0, 1]");
  if (max_attempts < 1 || max_retries < 1) fail("max_attempts and max_retries must be >= 1");
}

void to_json(json& j, const SynthConfig& c) {
  j = json{{"seed", c.seed},
           {"num_scenes", c.num_scenes},
           {"num_train", c.num_train},
           {"num_test", c.num_test},
           {"dims", {c.dims.nx, c.dims.ny, c.dims.nz}},
           {"voxel_size", std::round(double(c.voxel_size) * 1e6) / 1e6},
           {"shapes", c.shapes},
           {"min_objects", c.min_objects},
           {"max_objects", c.max_objects},
           {"contact_probability", c.contact_probability},
           {"max_attempts", c.max_attempts},
           {"max_retries", c.max_retries}};
}

void from_json(const json& j, SynthConfig& c) {
  reject_unknown_keys(j,
                      {"seed", "num_scenes", "num_train", "num_test", "dims", "voxel_size", "shapes", "min_objects",
                       "max_objects", "contact_probability", "max_attempts", "max_retries"},
                      "synth config");
  try {
    c.seed = j.value("seed", c.seed);
    c.num_scenes = j.value("num_scenes", c.num_scenes);
    c.num_train = j.value("num_train", c.num_train);
    c.num_test = j.value("num_test", c.num_test);
    if (j.contains("dims")) {
      const auto d = j.at("dims").get<std::array<int, 3>>();
      c.dims = Dims{d[0], d[1], d[2]};
    }
    c.voxel_size = j.value("voxel_size", c.voxel_size);
    if (j.contains("shapes")) c.shapes = j.at("shapes").get<std::vector<std::array<int, 3>>>();
    c.min_objects = j.value("min_objects", c.min_objects);
    c.max_objects = j.value("max_objects", c.max_objects);
    c.contact_probability = j.value("contact_probability", c.contact_probability);
    c.max_attempts = j.value("max_attempts", c.max_attempts);
    c.max_retries = j.value("max_retries", c.max_retries);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ConfigError, std::string("synth config: ") + e.what());
  }
}

void to_json(json& j, const PlacedObject& o) {
  j = json{{"instance", o.instance}, {"semantic", o.semantic}, {"shape", o.shape},
           {"cx", o.cx},             {"cy", o.cy},             {"yaw", o.yaw},
           {"contact", o.contact},   {"voxels", o.voxel_count}};
}

void to_json(json& j, const SceneRecord& r) {
  j = json{{"index", r.index}, {"file", r.file}, {"seed", r.seed}, {"retries", r.retries}, {"objects", r.objects}};
}

// ---------------------------------------------------------------------------
// Scene generation

namespace {

struct Footprint {
  std::vector<int> cells;  // j * nx + i, ascending
  bool in_bounds = true;
};

// Voxel columns whose centers fall inside the yawed rectangle.
Footprint rasterize(double cx, double cy, double yaw, int sx, int sy, const Dims& dims) {
  Footprint fp;
  const double c = std::cos(yaw), s = std::sin(yaw);
  const double hx = 0.5 * sx, hy = 0.5 * sy;
  const double r = std::hypot(hx, hy);
  const int i0 = static_cast<int>(std::floor(cx - r)) - 1, i1 = static_cast<int>(std::ceil(cx + r)) + 1;
  const int j0 = static_cast<int>(std::floor(cy - r)) - 1, j1 = static_cast<int>(std::ceil(cy + r)) + 1;
  for (int j = j0; j <= j1; ++j) {
    for (int i = i0; i <= i1; ++i) {
      const double dx = i + 0.5 - cx, dy = j + 0.5 - cy;
      const double lx = c * dx + s * dy;
      const double ly = -s * dx + c * dy;
      if (lx < -hx || lx >= hx || ly < -hy || ly >= hy) continue;
      if (i < 0 || j < 0 || i >= dims.nx || j >= dims.ny) {
        fp.in_bounds = false;
        continue;
      }
      fp.cells.push_back(j * dims.nx + i);
    }
  }
  std::sort(fp.cells.begin(), fp.cells.end());
  return fp;
}

class Placer {
 public:
  Placer(const SynthConfig& config, Rng& rng) : cfg_(config), rng_(rng), owner_(config.dims.nx * config.dims.ny, 0) {}

  // Returns false when no valid pose was found within max_attempts.
  bool place(PlacedObject& obj, bool contact) {
    const auto& shape = cfg_.shapes[obj.shape];
    for (int attempt = 0; attempt < cfg_.max_attempts; ++attempt) {
      const double yaw = rng_.uniform(0.0, 2.0 * std::numbers::pi);
      double cx, cy;
      Footprint fp;
      if (contact) {
        if (!slide_into_contact(shape, yaw, cx, cy, fp)) continue;
      } else {
        cx = rng_.uniform(0.0, cfg_.dims.nx);
        cy = rng_.uniform(0.0, cfg_.dims.ny);
        fp = rasterize(cx, cy, yaw, shape[0], shape[1], cfg_.dims);
        if (!fp.in_bounds || fp.cells.empty() || !clear_of_all(fp)) continue;
      }
      if (!connected(fp)) continue;
      obj.cx = cx;
      obj.cy = cy;
      obj.yaw = yaw;
      obj.contact = contact;
      for (int cell : fp.cells) owner_[cell] = obj.instance;
      placed_.push_back({cx, cy, std::hypot(0.5 * shape[0], 0.5 * shape[1])});
      footprints_.push_back(std::move(fp.cells));
      return true;
    }
    return false;
  }

  const std::vector<std::vector<int>>& footprints() const { return footprints_; }

 private:
  struct Disk {
    double cx, cy, r;
  };

  bool overlaps(const Footprint& fp) const {
    for (int cell : fp.cells) {
      if (owner_[cell] != 0) return true;
    }
    return false;
  }

  // No occupied column in the 8-neighbourhood of any footprint column.
  bool clear_of_all(const Footprint& fp) const {
    for (int cell : fp.cells) {
      const int i = cell % cfg_.dims.nx, j = cell / cfg_.dims.nx;
      for (int dj = -1; dj <= 1; ++dj) {
        for (int di = -1; di <= 1; ++di) {
          const int a = i + di, b = j + dj;
          if (a < 0 || b < 0 || a >= cfg_.dims.nx || b >= cfg_.dims.ny) continue;
          if (owner_[b * cfg_.dims.nx + a] != 0) return false;
        }
      }
    }
    return true;
  }

  bool face_contact(const Footprint& fp) const {
    static constexpr int di[4] = {1, -1, 0, 0}, dj[4] = {0, 0, 1, -1};
    for (int cell : fp.cells) {
      const int i = cell % cfg_.dims.nx, j = cell / cfg_.dims.nx;
      for (int n = 0; n < 4; ++n) {
        const int a = i + di[n], b = j + dj[n];
        if (a < 0 || b < 0 || a >= cfg_.dims.nx || b >= cfg_.dims.ny) continue;
        if (owner_[b * cfg_.dims.nx + a] != 0) return true;
      }
    }
    return false;
  }

  bool connected(const Footprint& fp) const {
    std::vector<VoxelIndex> mask(fp.cells.begin(), fp.cells.end());
    return connected_components(Dims{cfg_.dims.nx, cfg_.dims.ny, 1}, mask, Connectivity::Six).size() == 1;
  }

  // Starts outside a random placed object and moves toward it until the
  // next step would overlap; accepts the last free pose if it touches.
  bool slide_into_contact(const std::array<int, 3>& shape, double yaw, double& cx, double& cy, Footprint& out) {
    const Disk& target = placed_[rng_.below(placed_.size())];
    const double phi = rng_.uniform(0.0, 2.0 * std::numbers::pi);
    const double r = std::hypot(0.5 * shape[0], 0.5 * shape[1]);
    const double start = target.r + r + 2.0;
    constexpr double kStep = 0.1;
    bool have_free = false;
    for (double dist = start; dist > 0.0; dist -= kStep) {
      const double x = target.cx + dist * std::cos(phi);
      const double y = target.cy + dist * std::sin(phi);
      Footprint fp = rasterize(x, y, yaw, shape[0], shape[1], cfg_.dims);
      if (overlaps(fp)) break;
      out = std::move(fp);
      cx = x;
      cy = y;
      have_free = true;
    }
    return have_free && out.in_bounds && !out.cells.empty() && face_contact(out);
  }

  const SynthConfig& cfg_;
  Rng& rng_;
  std::vector<Label> owner_;
  std::vector<Disk> placed_;
  std::vector<std::vector<int>> footprints_;
};

std::string scene_file(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%04d.mvox", index);
  return std::string("scenes/") + buf;
}

bool try_generate(const SynthConfig& cfg, std::uint64_t seed, GeneratedScene& out) {
  Rng rng(seed);
  VoxelGrid grid(cfg.dims, cfg.voxel_size, Vec3{0.f, 0.f, 0.f}, cfg.num_classes());
  auto sem = grid.semantic();
  auto inst = grid.instance();
  const std::size_t layer = static_cast<std::size_t>(cfg.dims.nx) * cfg.dims.ny;
  std::fill(sem.begin(), sem.begin() + layer, kGroundClass);

  const int count = rng.uniform_int(cfg.min_objects, cfg.max_objects);
  Placer placer(cfg, rng);
  std::vector<PlacedObject> objects;
  for (int n = 0; n < count; ++n) {
    PlacedObject obj;
    obj.instance = static_cast<Label>(n + 1);
    obj.shape = static_cast<int>(rng.below(cfg.shapes.size()));
    obj.semantic = static_cast<Label>(kFirstObjectClass + obj.shape);
    const bool contact = rng.bernoulli(cfg.contact_probability) && n > 0;
    if (!placer.place(obj, contact)) return false;
    const int height = cfg.shapes[obj.shape][2];
    const auto& cells = placer.footprints().back();
    for (int k = 1; k <= height; ++k) {
      for (int cell : cells) {
        sem[k * layer + cell] = obj.semantic;
        inst[k * layer + cell] = obj.instance;
      }
    }
    obj.voxel_count = cells.size() * static_cast<std::size_t>(height);
    objects.push_back(obj);
  }
  out.sample.gt = extract_labeling(grid);
  out.sample.grid = std::move(grid);
  out.record.objects = std::move(objects);
  return true;
}

}  // namespace

GeneratedScene generate_scene(const SynthConfig& config, int index) {
  config.validate();
  const std::uint64_t base = mix_seed(config.seed, static_cast<std::uint64_t>(index));
  for (int retry = 0; retry < config.max_retries; ++retry) {
    const std::uint64_t seed = retry == 0 ? base : mix_seed(base, static_cast<std::uint64_t>(retry));
    GeneratedScene scene;
    if (try_generate(config, seed, scene)) {
      scene.record.index = index;
      scene.record.file = scene_file(index);
      scene.record.seed = seed;
      scene.record.retries = retry;
      return scene;
    }
  }
  throw Error(ErrorCode::PlacementError, "scene " + std::to_string(index) + ": no valid layout after " +
                                             std::to_string(config.max_retries) + " sub-seeds");
}

double percentile(std::vector<double> values, double q) {
  MTML_CHECK(!values.empty(), ErrorCode::EmptyInput, "percentile of an empty sample");
  std::sort(values.begin(), values.end());
  const double pos = std::clamp(q, 0.0, 1.0) * static_cast<double>(values.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

std::map<Label, SizeBand> size_bands(const std::vector<SceneRecord>& records) {
  std::map<Label, std::vector<double>> sizes;
  for (const SceneRecord& r : records) {
    for (const PlacedObject& o : r.objects) sizes[o.semantic].push_back(static_cast<double>(o.voxel_count));
  }
  std::map<Label, SizeBand> bands;
  for (const auto& [label, values] : sizes) bands[label] = SizeBand{percentile(values, 0.05), percentile(values, 0.95)};
  return bands;
}

json generate_dataset(const SynthConfig& config, const fs::path& out_dir, int jobs) {
  config.validate();
  std::error_code ec;
  fs::create_directories(out_dir / "scenes", ec);
  if (ec) throw Error(ErrorCode::IoError, out_dir.string() + ": " + ec.message());

  std::vector<SceneRecord> records(config.num_scenes);
  std::atomic<int> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (int i = next++; i < config.num_scenes; i = next++) {
      try {
        GeneratedScene scene = generate_scene(config, i);
        io::write_mvox(out_dir / scene.record.file, scene.sample.grid);
        records[i] = std::move(scene.record);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = config.num_scenes;
      }
    }
  };
  const int threads = std::clamp(jobs, 1, config.num_scenes);
  std::vector<std::thread> pool;
  for (int t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);

  const std::vector<SceneRecord> train(records.begin(), records.begin() + config.num_train);
  json splits{{"train", json::array()}, {"test", json::array()}};
  for (int i = 0; i < config.num_scenes; ++i) splits[i < config.num_train ? "train" : "test"].push_back(records[i].file);
  json bands = json::object();
  for (const auto& [label, band] : size_bands(train.empty() ? records : train)) {
    bands[std::to_string(label)] = {band.n_min, band.n_max};
  }
  json manifest{{"config", config}, {"splits", splits}, {"size_bands", bands}, {"scenes", records}};
  io::write_file_atomic(out_dir / "manifest.json", manifest.dump(2) + "\n");
  return manifest;
}

// ---------------------------------------------------------------------------
// Loading and input encoding

Dataset Dataset::open(const fs::path& root) {
  Dataset ds;
  ds.root_ = root;
  const auto bytes = io::read_file(root / "manifest.json");
  try {
    ds.manifest_ = json::parse(bytes.begin(), bytes.end());
    for (const auto& [name, files] : ds.manifest_.at("splits").items()) {
      ds.splits_[name] = files.get<std::vector<std::string>>();
    }
    for (const auto& [key, value] : ds.manifest_.at("size_bands").items()) {
      const auto pair = value.get<std::array<double, 2>>();
      ds.bands_[static_cast<Label>(std::stoul(key))] = SizeBand{pair[0], pair[1]};
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::IoError, (root / "manifest.json").string() + ": " + e.what());
  } catch (const std::logic_error&) {
    throw Error(ErrorCode::IoError, (root / "manifest.json").string() + ": bad size band key");
  }
  return ds;
}

const std::vector<std::string>& Dataset::split(const std::string& name) const {
  const auto it = splits_.find(name);
  if (it == splits_.end()) throw Error(ErrorCode::ConfigError, "dataset has no split named '" + name + "'");
  return it->second;
}

SceneSample Dataset::load(const std::string& file) const { return load_scene(root_ / file); }

SceneSample load_scene(const fs::path& mvox) {
  SceneSample s;
  s.grid = io::read_mvox(mvox);
  s.gt = extract_labeling(s.grid);
  return s;
}

VoxelGrid apply_label_noise(const VoxelGrid& grid, double p, std::uint64_t seed) {
  MTML_CHECK(p >= 0.0 && p <= 1.0, ErrorCode::ConfigError, "noise probability must be in [0, 1]");
  const Label classes = grid.num_classes();
  VoxelGrid out = grid;
  if (p == 0.0 || classes < 2) return out;
  Rng rng(seed);
  auto sem = out.semantic();
  for (Label& s : sem) {
    if (s == 0) continue;
    if (!rng.bernoulli(p)) continue;
    // Uniform over the other classes in 1..classes.
    const Label pick = static_cast<Label>(1 + rng.below(classes - 1));
    s = pick >= s ? static_cast<Label>(pick + 1) : pick;
  }
  return out;
}

Tensor<float> encode_input(const VoxelGrid& grid) {
  const Dims& d = grid.dims();
  const std::size_t classes = grid.num_classes();
  MTML_CHECK(classes > 0, ErrorCode::InvalidGeometry, "grid declares no classes");
  Tensor<float> out(Shape{classes, std::size_t(d.nz), std::size_t(d.ny), std::size_t(d.nx)});
  const std::size_t n = grid.size();
  const auto sem = grid.semantic();
  for (std::size_t v = 0; v < n; ++v) {
    const Label s = sem[v];
    if (s == 0) continue;
    MTML_CHECK(s <= classes, ErrorCode::InvalidGeometry, "unknown class id " + std::to_string(s));
    out[(s - 1) * n + v] = 1.f;
  }
  return out;
}

Tensor<float> encode_input(const VoxelGrid& grid, double noise, std::uint64_t seed) {
  return encode_input(apply_label_noise(grid, noise, seed));
}

}  // namespace mtml
