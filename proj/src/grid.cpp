#include "mtml/grid.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <string>
#include <tuple>

namespace mtml {

VoxelGrid::VoxelGrid(Dims dims, float voxel_size, Vec3 origin, Label num_classes)
    : dims_(dims), voxel_size_(voxel_size), origin_(origin), num_classes_(num_classes) {
  MTML_CHECK(dims.nx > 0 && dims.ny > 0 && dims.nz > 0, ErrorCode::InvalidGeometry,
             "grid dims must be positive");
  MTML_CHECK(voxel_size > 0.f && std::isfinite(voxel_size), ErrorCode::InvalidGeometry,
             "voxel_size must be positive");
  semantic_.assign(dims.count(), 0);
  instance_.assign(dims.count(), 0);
}

void VoxelGrid::validate() const {
  MTML_CHECK(dims_.nx > 0 && dims_.ny > 0 && dims_.nz > 0, ErrorCode::InvalidGeometry, "grid dims must be positive");
  MTML_CHECK(voxel_size_ > 0.f, ErrorCode::InvalidGeometry, "voxel_size must be positive");
  MTML_CHECK(semantic_.size() == dims_.count() && instance_.size() == dims_.count(), ErrorCode::InvalidGeometry,
             "label arrays do not match grid dims");
  for (std::size_t i = 0; i < semantic_.size(); ++i) {
    MTML_CHECK(instance_[i] == 0 || semantic_[i] != 0, ErrorCode::InvalidGeometry,
               "voxel " + std::to_string(i) + " has an instance id but no semantic id");
  }
}

void PointCloud::validate() const {
  MTML_CHECK(semantic.size() == points.size() && instance.size() == points.size(), ErrorCode::InvalidGeometry,
             "point attribute lists differ in length");
  MTML_CHECK(color.empty() || color.size() == points.size(), ErrorCode::InvalidGeometry,
             "color list length differs from point count");
  for (const Vec3& p : points) {
    MTML_CHECK(std::isfinite(p[0]) && std::isfinite(p[1]) && std::isfinite(p[2]), ErrorCode::InvalidGeometry,
               "non-finite point coordinate");
  }
}

Vec3 voxel_center(const VoxelGrid& grid, VoxelIndex index) {
  MTML_CHECK(index < grid.size(), ErrorCode::IndexOutOfBounds,
             "voxel index " + std::to_string(index) + " outside grid of " + std::to_string(grid.size()));
  const Coord c = grid.coord(index);
  const double s = grid.voxel_size();
  const Vec3& o = grid.origin();
  return Vec3{static_cast<float>(o[0] + (c.i + 0.5) * s), static_cast<float>(o[1] + (c.j + 0.5) * s),
              static_cast<float>(o[2] + (c.k + 0.5) * s)};
}

namespace {

// Smallest label among those with the highest count; input sorted by label.
template <typename It, typename Key>
auto majority(It first, It last, Key key) {
  auto best = key(*first);
  std::size_t best_count = 0;
  for (It run = first; run != last;) {
    It end = run;
    while (end != last && key(*end) == key(*run)) ++end;
    const std::size_t n = static_cast<std::size_t>(end - run);
    if (n > best_count) {
      best_count = n;
      best = key(*run);
    }
    run = end;
  }
  return best;
}

}  // namespace

VoxelGrid voxelize(const PointCloud& cloud, float voxel_size, OriginPolicy policy, Vec3 origin) {
  MTML_CHECK(!cloud.points.empty(), ErrorCode::EmptyInput, "cannot voxelize an empty point cloud");
  MTML_CHECK(voxel_size > 0.f, ErrorCode::InvalidGeometry, "voxel_size must be positive");
  cloud.validate();
  if (policy == OriginPolicy::MinCorner) {
    origin = cloud.points.front();
    for (const Vec3& p : cloud.points) {
      for (int a = 0; a < 3; ++a) origin[a] = std::min(origin[a], p[a]);
    }
  }
  std::vector<std::array<long long, 3>> cells(cloud.size());
  std::array<long long, 3> hi{0, 0, 0};
  for (std::size_t n = 0; n < cloud.size(); ++n) {
    for (int a = 0; a < 3; ++a) {
      const long long c = static_cast<long long>(
          std::floor((static_cast<double>(cloud.points[n][a]) - origin[a]) / static_cast<double>(voxel_size)));
      MTML_CHECK(c >= 0, ErrorCode::InvalidGeometry, "point lies below the given origin");
      cells[n][a] = c;
      hi[a] = std::max(hi[a], c);
    }
  }
  MTML_CHECK(hi[0] < (1 << 20) && hi[1] < (1 << 20) && hi[2] < (1 << 20), ErrorCode::InvalidGeometry,
             "point cloud extent too large for the voxel size");
  const Dims dims{static_cast<int>(hi[0] + 1), static_cast<int>(hi[1] + 1), static_cast<int>(hi[2] + 1)};
  VoxelGrid grid(dims, voxel_size, origin);

  // (voxel, semantic, instance) sorted so each voxel's votes are contiguous.
  std::vector<std::tuple<VoxelIndex, Label, Label>> votes(cloud.size());
  Label max_class = 0;
  for (std::size_t n = 0; n < cloud.size(); ++n) {
    const VoxelIndex v = grid.index(
        Coord{static_cast<int>(cells[n][0]), static_cast<int>(cells[n][1]), static_cast<int>(cells[n][2])});
    votes[n] = {v, cloud.semantic[n], cloud.instance[n]};
    max_class = std::max(max_class, cloud.semantic[n]);
  }
  std::sort(votes.begin(), votes.end());
  for (auto run = votes.begin(); run != votes.end();) {
    auto end = run;
    while (end != votes.end() && std::get<0>(*end) == std::get<0>(*run)) ++end;
    const Label sem = majority(run, end, [](const auto& t) { return std::get<1>(t); });
    Label inst = 0;
    if (sem != 0) {
      auto s0 = std::find_if(run, end, [&](const auto& t) { return std::get<1>(t) == sem; });
      auto s1 = std::find_if(s0, end, [&](const auto& t) { return std::get<1>(t) != sem; });
      inst = majority(s0, s1, [](const auto& t) { return std::get<2>(t); });
    }
    grid.semantic()[std::get<0>(*run)] = sem;
    grid.instance()[std::get<0>(*run)] = inst;
    run = end;
  }
  grid.set_num_classes(max_class);
  return grid;
}

std::vector<Label> devoxelize(const VoxelGrid& grid, std::span<const Label> voxel_labels, const PointCloud& cloud) {
  MTML_CHECK(voxel_labels.size() == grid.size(), ErrorCode::InvalidGeometry,
             "label array has " + std::to_string(voxel_labels.size()) + " entries for a grid of " +
                 std::to_string(grid.size()));
  std::vector<Label> out(cloud.size(), 0);
  const double s = grid.voxel_size();
  for (std::size_t n = 0; n < cloud.size(); ++n) {
    const Vec3& p = cloud.points[n];
    Coord c{static_cast<int>(std::floor((p[0] - static_cast<double>(grid.origin()[0])) / s)),
            static_cast<int>(std::floor((p[1] - static_cast<double>(grid.origin()[1])) / s)),
            static_cast<int>(std::floor((p[2] - static_cast<double>(grid.origin()[2])) / s))};
    if (grid.contains(c)) out[n] = voxel_labels[grid.index(c)];
  }
  return out;
}

InstanceLabeling extract_labeling(const VoxelGrid& grid) {
  InstanceLabeling out;
  std::map<Label, std::vector<Label>> sems;
  const auto inst = grid.instance();
  const auto sem = grid.semantic();
  for (VoxelIndex v = 0; v < grid.size(); ++v) {
    if (inst[v] == 0) continue;
    out[inst[v]].voxels.push_back(v);
    sems[inst[v]].push_back(sem[v]);
  }
  for (auto& [id, info] : out) {
    auto& s = sems[id];
    std::sort(s.begin(), s.end());
    info.semantic = majority(s.begin(), s.end(), [](Label l) { return l; });
    double acc[3] = {0, 0, 0};
    for (VoxelIndex v : info.voxels) {
      const Vec3 c = voxel_center(grid, v);
      for (int a = 0; a < 3; ++a) acc[a] += c[a];
    }
    for (int a = 0; a < 3; ++a) info.center_of_mass[a] = static_cast<float>(acc[a] / info.voxels.size());
  }
  return out;
}

namespace {

std::vector<Coord> neighbour_offsets(Connectivity conn) {
  std::vector<Coord> out;
  for (int dk = -1; dk <= 1; ++dk) {
    for (int dj = -1; dj <= 1; ++dj) {
      for (int di = -1; di <= 1; ++di) {
        const int manhattan = std::abs(di) + std::abs(dj) + std::abs(dk);
        if (manhattan == 0) continue;
        if (conn == Connectivity::Six && manhattan > 1) continue;
        if (conn == Connectivity::Eighteen && manhattan > 2) continue;
        out.push_back(Coord{di, dj, dk});
      }
    }
  }
  return out;
}

}  // namespace

std::vector<std::vector<VoxelIndex>> connected_components(const Dims& dims, std::span<const VoxelIndex> mask,
                                                          Connectivity connectivity, std::span<const Label> labels) {
  std::vector<std::vector<VoxelIndex>> comps;
  if (mask.empty()) return comps;
  const std::size_t n = dims.count();
  MTML_CHECK(labels.empty() || labels.size() == n, ErrorCode::InvalidGeometry,
             "label array does not match grid dims");
  // 0: not in mask, 1: unvisited, 2: visited
  std::vector<std::uint8_t> state(n, 0);
  for (VoxelIndex v : mask) {
    MTML_CHECK(v < n, ErrorCode::IndexOutOfBounds, "mask index " + std::to_string(v) + " outside grid");
    state[v] = 1;
  }
  std::vector<VoxelIndex> order(mask.begin(), mask.end());
  std::sort(order.begin(), order.end());
  const auto offsets = neighbour_offsets(connectivity);
  std::deque<VoxelIndex> queue;
  for (VoxelIndex seed : order) {
    if (state[seed] != 1) continue;
    std::vector<VoxelIndex> comp;
    state[seed] = 2;
    queue.push_back(seed);
    while (!queue.empty()) {
      const VoxelIndex v = queue.front();
      queue.pop_front();
      comp.push_back(v);
      const int i = static_cast<int>(v % dims.nx);
      const int j = static_cast<int>((v / dims.nx) % dims.ny);
      const int k = static_cast<int>(v / (static_cast<std::size_t>(dims.nx) * dims.ny));
      for (const Coord& d : offsets) {
        const int a = i + d.i, b = j + d.j, c = k + d.k;
        if (a < 0 || b < 0 || c < 0 || a >= dims.nx || b >= dims.ny || c >= dims.nz) continue;
        const VoxelIndex u = static_cast<VoxelIndex>(a + dims.nx * (b + dims.ny * c));
        if (state[u] != 1) continue;
        if (!labels.empty() && labels[u] != labels[v]) continue;
        state[u] = 2;
        queue.push_back(u);
      }
    }
    std::sort(comp.begin(), comp.end());
    comps.push_back(std::move(comp));
  }
  return comps;
}

Augmentation Augmentation::inverse() const {
  if (kind == Kind::RotateZ) return rotate_z(4 - quarter_turns);
  return *this;
}

namespace {

Coord flip_x_coord(Coord c, const Dims& d) { return {d.nx - 1 - c.i, c.j, c.k}; }
Coord flip_y_coord(Coord c, const Dims& d) { return {c.i, d.ny - 1 - c.j, c.k}; }
Coord rot_coord(Coord c, const Dims& d) { return {d.ny - 1 - c.j, c.i, c.k}; }

SceneSample apply_step(const SceneSample& in, Augmentation::Kind kind) {
  const VoxelGrid& g = in.grid;
  const Dims& d = g.dims();
  Dims nd = d;
  Coord (*map)(Coord, const Dims&) = nullptr;
  switch (kind) {
    case Augmentation::Kind::FlipX: map = flip_x_coord; break;
    case Augmentation::Kind::FlipY: map = flip_y_coord; break;
    case Augmentation::Kind::RotateZ:
      map = rot_coord;
      nd = Dims{d.ny, d.nx, d.nz};
      break;
    case Augmentation::Kind::Identity: return in;
  }
  SceneSample out;
  out.grid = VoxelGrid(nd, g.voxel_size(), g.origin(), g.num_classes());
  std::vector<VoxelIndex> remap(g.size());
  for (VoxelIndex v = 0; v < g.size(); ++v) {
    const VoxelIndex u = out.grid.index(map(g.coord(v), d));
    remap[v] = u;
    out.grid.semantic()[u] = g.semantic()[v];
    out.grid.instance()[u] = g.instance()[v];
  }
  const double s = g.voxel_size();
  const Vec3& o = g.origin();
  for (const auto& [id, info] : in.gt) {
    InstanceInfo t;
    t.semantic = info.semantic;
    t.voxels.reserve(info.voxels.size());
    for (VoxelIndex v : info.voxels) t.voxels.push_back(remap[v]);
    std::sort(t.voxels.begin(), t.voxels.end());
    const double u = info.center_of_mass[0] - o[0];
    const double w = info.center_of_mass[1] - o[1];
    double nu = u, nw = w;
    switch (kind) {
      case Augmentation::Kind::FlipX: nu = d.nx * s - u; break;
      case Augmentation::Kind::FlipY: nw = d.ny * s - w; break;
      case Augmentation::Kind::RotateZ:
        nu = d.ny * s - w;
        nw = u;
        break;
      case Augmentation::Kind::Identity: break;
    }
    t.center_of_mass = {static_cast<float>(o[0] + nu), static_cast<float>(o[1] + nw), info.center_of_mass[2]};
    out.gt.emplace(id, std::move(t));
  }
  return out;
}

}  // namespace

SceneSample augment(const SceneSample& sample, Augmentation op) {
  switch (op.kind) {
    case Augmentation::Kind::Identity: return sample;
    case Augmentation::Kind::FlipX:
    case Augmentation::Kind::FlipY: return apply_step(sample, op.kind);
    case Augmentation::Kind::RotateZ: {
      SceneSample cur = sample;
      for (int q = 0; q < op.quarter_turns; ++q) cur = apply_step(cur, Augmentation::Kind::RotateZ);
      return cur;
    }
  }
  return sample;
}

VoxelGrid pad_to_multiple(const VoxelGrid& grid, int multiple) {
  MTML_CHECK(multiple >= 1, ErrorCode::InvalidGeometry, "padding multiple must be >= 1");
  auto up = [multiple](int n) { return (n + multiple - 1) / multiple * multiple; };
  const Dims& d = grid.dims();
  const Dims nd{up(d.nx), up(d.ny), up(d.nz)};
  if (nd == d) return grid;
  VoxelGrid out(nd, grid.voxel_size(), grid.origin(), grid.num_classes());
  for (VoxelIndex v = 0; v < grid.size(); ++v) {
    const VoxelIndex u = out.index(grid.coord(v));
    out.semantic()[u] = grid.semantic()[v];
    out.instance()[u] = grid.instance()[v];
  }
  return out;
}

}  // namespace mtml
