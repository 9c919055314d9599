#include "mtml/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

namespace mtml::io {

namespace {

constexpr char kMvoxMagic[4] = {'M', 'V', 'X', '1'};
constexpr std::size_t kMvoxHeader = 4 + 3 * 4 + 4 + 3 * 4 + 2;

template <typename U>
void put_le(std::vector<char>& out, U value) {
  static_assert(std::is_trivially_copyable_v<U>);
  using Bits = std::conditional_t<sizeof(U) == 2, std::uint16_t, std::uint32_t>;
  const Bits bits = std::bit_cast<Bits>(value);
  for (std::size_t b = 0; b < sizeof(U); ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
}

template <typename U>
U get_le(const char* p) {
  using Bits = std::conditional_t<sizeof(U) == 2, std::uint16_t, std::uint32_t>;
  Bits bits = 0;
  for (std::size_t b = 0; b < sizeof(U); ++b) bits |= static_cast<Bits>(static_cast<unsigned char>(p[b])) << (8 * b);
  return std::bit_cast<U>(bits);
}

}  // namespace

std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  MTML_CHECK(in.good(), ErrorCode::IoError, "cannot open " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  MTML_CHECK(!in.bad(), ErrorCode::IoError, "read failed for " + path.string());
  return bytes;
}

void write_file_atomic(const std::filesystem::path& path, const std::vector<char>& contents) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  MTML_CHECK(!ec, ErrorCode::IoError, "cannot create " + path.parent_path().string() + ": " + ec.message());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    MTML_CHECK(out.good(), ErrorCode::IoError, "cannot open " + tmp.string() + " for writing");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    MTML_CHECK(out.good(), ErrorCode::IoError, "write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path, ec);
  MTML_CHECK(!ec, ErrorCode::IoError, "cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  write_file_atomic(path, std::vector<char>(contents.begin(), contents.end()));
}

std::vector<char> encode_mvox(const VoxelGrid& grid) {
  grid.validate();
  std::vector<char> out;
  out.reserve(kMvoxHeader + grid.size() * 4);
  for (int b = 0; b < 4; ++b) out.push_back(kMvoxMagic[b]);
  put_le(out, static_cast<std::uint32_t>(grid.dims().nx));
  put_le(out, static_cast<std::uint32_t>(grid.dims().ny));
  put_le(out, static_cast<std::uint32_t>(grid.dims().nz));
  put_le(out, grid.voxel_size());
  for (float o : grid.origin()) put_le(out, o);
  put_le(out, static_cast<std::uint16_t>(grid.num_classes()));
  const auto sem = grid.semantic();
  const auto inst = grid.instance();
  for (std::size_t v = 0; v < grid.size(); ++v) {
    put_le(out, sem[v]);
    put_le(out, inst[v]);
  }
  return out;
}

VoxelGrid decode_mvox(const std::vector<char>& bytes) {
  MTML_CHECK(bytes.size() >= kMvoxHeader, ErrorCode::IoError, "MVOX stream shorter than its header");
  MTML_CHECK(std::memcmp(bytes.data(), kMvoxMagic, 4) == 0, ErrorCode::BadMagic, "not an MVOX stream");
  const char* p = bytes.data() + 4;
  const auto nx = get_le<std::uint32_t>(p);
  const auto ny = get_le<std::uint32_t>(p + 4);
  const auto nz = get_le<std::uint32_t>(p + 8);
  const float size = get_le<float>(p + 12);
  const Vec3 origin{get_le<float>(p + 16), get_le<float>(p + 20), get_le<float>(p + 24)};
  const auto classes = get_le<std::uint16_t>(p + 28);
  MTML_CHECK(nx > 0 && ny > 0 && nz > 0 && nx < (1u << 16) && ny < (1u << 16) && nz < (1u << 16),
             ErrorCode::InvalidGeometry, "MVOX dims out of range");
  const std::size_t n = static_cast<std::size_t>(nx) * ny * nz;
  MTML_CHECK(bytes.size() == kMvoxHeader + 4 * n, ErrorCode::IoError,
             "MVOX payload has " + std::to_string(bytes.size() - kMvoxHeader) + " bytes, expected " +
                 std::to_string(4 * n));
  VoxelGrid grid(Dims{static_cast<int>(nx), static_cast<int>(ny), static_cast<int>(nz)}, size, origin, classes);
  const char* rec = bytes.data() + kMvoxHeader;
  auto sem = grid.semantic();
  auto inst = grid.instance();
  for (std::size_t v = 0; v < n; ++v) {
    sem[v] = get_le<std::uint16_t>(rec + 4 * v);
    inst[v] = get_le<std::uint16_t>(rec + 4 * v + 2);
  }
  grid.validate();
  return grid;
}

void write_mvox(const std::filesystem::path& path, const VoxelGrid& grid) { write_file_atomic(path, encode_mvox(grid)); }

VoxelGrid read_mvox(const std::filesystem::path& path) {
  try {
    return decode_mvox(read_file(path));
  } catch (const Error& e) {
    throw Error(e.code(), path.string() + ": " + e.what());
  }
}

std::array<std::uint8_t, 3> label_color(Label label) {
  if (label == 0) return {128, 128, 128};
  std::mt19937 rng(label);
  std::array<std::uint8_t, 3> c{};
  for (auto& ch : c) ch = static_cast<std::uint8_t>(40 + rng() % 216);
  return c;
}

PointCloud grid_to_cloud(const VoxelGrid& grid, const std::vector<Label>& labels) {
  MTML_CHECK(labels.size() == grid.size(), ErrorCode::InvalidGeometry, "label array does not match grid");
  PointCloud cloud;
  for (VoxelIndex v = 0; v < grid.size(); ++v) {
    if (grid.semantic()[v] == 0) continue;
    cloud.points.push_back(voxel_center(grid, v));
    cloud.semantic.push_back(grid.semantic()[v]);
    cloud.instance.push_back(labels[v]);
    cloud.color.push_back(label_color(labels[v]));
  }
  return cloud;
}

void write_ply(const std::filesystem::path& path, const PointCloud& cloud) {
  cloud.validate();
  std::ostringstream os;
  os << "ply\nformat ascii 1.0\nelement vertex " << cloud.size() << "\n"
     << "property float x\nproperty float y\nproperty float z\n"
     << "property uchar red\nproperty uchar green\nproperty uchar blue\n"
     << "property ushort label\nproperty ushort instance\nend_header\n";
  os.precision(9);
  for (std::size_t n = 0; n < cloud.size(); ++n) {
    const auto& p = cloud.points[n];
    const auto c = cloud.color.empty() ? label_color(cloud.instance[n]) : cloud.color[n];
    os << p[0] << ' ' << p[1] << ' ' << p[2] << ' ' << int(c[0]) << ' ' << int(c[1]) << ' ' << int(c[2]) << ' '
       << cloud.semantic[n] << ' ' << cloud.instance[n] << '\n';
  }
  write_file_atomic(path, os.str());
}

PointCloud read_ply(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  std::istringstream in(std::string(bytes.begin(), bytes.end()));
  std::string line;
  auto fail = [&](const std::string& why) { throw Error(ErrorCode::IoError, path.string() + ": " + why); };
  if (!std::getline(in, line) || line.rfind("ply", 0) != 0) fail("missing ply magic");
  std::size_t vertices = 0;
  bool in_vertex = false;
  bool ascii = false;
  std::vector<std::string> props;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    std::string kw;
    ls >> kw;
    if (kw == "format") {
      std::string fmt;
      ls >> fmt;
      ascii = fmt == "ascii";
    } else if (kw == "element") {
      std::string name;
      std::size_t count = 0;
      ls >> name >> count;
      in_vertex = name == "vertex";
      if (in_vertex) vertices = count;
    } else if (kw == "property" && in_vertex) {
      std::string type, name;
      ls >> type >> name;
      if (type == "list") fail("list properties on vertices are not supported");
      props.push_back(name);
    } else if (kw == "end_header") {
      break;
    }
  }
  if (!ascii) fail("only ascii PLY is supported");
  auto find = [&](const char* name) -> int {
    for (std::size_t i = 0; i < props.size(); ++i)
      if (props[i] == name) return static_cast<int>(i);
    return -1;
  };
  const int ix = find("x"), iy = find("y"), iz = find("z");
  if (ix < 0 || iy < 0 || iz < 0) fail("vertex element lacks x/y/z");
  const int ir = find("red"), ig = find("green"), ib = find("blue");
  int il = find("label");
  if (il < 0) il = find("semantic");
  const int ii = find("instance");
  PointCloud cloud;
  std::vector<double> vals(props.size());
  for (std::size_t n = 0; n < vertices; ++n) {
    for (double& v : vals) {
      if (!(in >> v)) fail("truncated vertex data at vertex " + std::to_string(n));
    }
    cloud.points.push_back(Vec3{static_cast<float>(vals[ix]), static_cast<float>(vals[iy]), static_cast<float>(vals[iz])});
    cloud.semantic.push_back(il >= 0 ? static_cast<Label>(vals[il]) : Label{0});
    cloud.instance.push_back(ii >= 0 ? static_cast<Label>(vals[ii]) : Label{0});
    if (ir >= 0 && ig >= 0 && ib >= 0) {
      cloud.color.push_back({static_cast<std::uint8_t>(vals[ir]), static_cast<std::uint8_t>(vals[ig]),
                             static_cast<std::uint8_t>(vals[ib])});
    }
  }
  cloud.validate();
  return cloud;
}

}  // namespace mtml::io
