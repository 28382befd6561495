#include "uad/volume.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "uad/binary_io.hpp"

namespace uad {

Volume::Volume(int nx, int ny, int nz, int channels, Eigen::Vector3d voxel_size_mm)
    : nx_(nx), ny_(ny), nz_(nz), channels_(channels), voxel_size_(voxel_size_mm) {
  if (nx <= 0 || ny <= 0 || nz <= 0)
    throw std::invalid_argument("Volume: dims must be positive, got " + std::to_string(nx) +
                                "x" + std::to_string(ny) + "x" + std::to_string(nz));
  if (channels <= 0)
    throw std::invalid_argument("Volume: channels must be positive, got " +
                                std::to_string(channels));
  if (!(voxel_size_.x() > 0 && voxel_size_.y() > 0 && voxel_size_.z() > 0))
    throw std::invalid_argument("Volume: voxel sizes must be strictly positive");
  data_ = Eigen::MatrixXd::Zero(channels_, num_voxels());
}

namespace {

constexpr int kNiftiHeaderSize = 348;

enum NiftiType : int {
  kInt16 = 4,
  kInt32 = 8,
  kFloat32 = 16,
  kFloat64 = 64,
};

int nifti_type_size(int code) {
  switch (code) {
    case kInt16: return 2;
    case kInt32: return 4;
    case kFloat32: return 4;
    case kFloat64: return 8;
    default: return 0;
  }
}

}  // namespace

Volume read_nifti(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < kNiftiHeaderSize)
    throw std::runtime_error("nifti: file shorter than the 348-byte header (" +
                             std::to_string(bytes.size()) + " bytes)");

  ByteReader r(bytes);
  std::int32_t sizeof_hdr = r.i32();
  bool swap = false;
  if (sizeof_hdr != kNiftiHeaderSize) {
    if (ByteReader::bswap32(static_cast<std::uint32_t>(sizeof_hdr)) == kNiftiHeaderSize) {
      swap = true;
    } else {
      throw std::runtime_error("nifti: malformed header, sizeof_hdr=" +
                               std::to_string(sizeof_hdr) + " in both byte orders");
    }
  }
  r.set_swap(swap);

  r.seek(40);
  std::int16_t dim[8];
  for (auto& d : dim) d = r.i16();
  r.seek(70);
  const std::int16_t datatype = r.i16();
  r.seek(76);
  float pixdim[8];
  for (auto& p : pixdim) p = r.f32();
  r.seek(108);
  const float vox_offset = r.f32();
  const float scl_slope = r.f32();
  const float scl_inter = r.f32();

  if (dim[0] != 3 && dim[0] != 4)
    throw std::runtime_error("nifti: unsupported dim[0]=" + std::to_string(dim[0]) +
                             " (need 3 or 4)");
  const int elem = nifti_type_size(datatype);
  if (elem == 0)
    throw std::runtime_error("nifti: unsupported datatype code " + std::to_string(datatype));

  const int nx = dim[1], ny = dim[2], nz = dim[3];
  const int nt = dim[0] == 4 ? dim[4] : 1;
  if (nx <= 0 || ny <= 0 || nz <= 0 || nt <= 0)
    throw std::runtime_error("nifti: non-positive dimensions in header");

  Eigen::Vector3d voxel(pixdim[1], pixdim[2], pixdim[3]);
  for (int i = 0; i < 3; ++i)
    if (!(voxel[i] > 0)) voxel[i] = 1.0;

  std::size_t offset = kNiftiHeaderSize;
  if (std::isfinite(vox_offset) && vox_offset >= kNiftiHeaderSize)
    offset = static_cast<std::size_t>(vox_offset);

  const std::int64_t n_values = static_cast<std::int64_t>(nx) * ny * nz * nt;
  const std::size_t need = static_cast<std::size_t>(n_values) * elem;
  if (bytes.size() < offset || bytes.size() - offset < need)
    throw std::runtime_error("nifti: truncated data section, expected " + std::to_string(need) +
                             " bytes at offset " + std::to_string(offset) + ", have " +
                             std::to_string(bytes.size() - std::min(bytes.size(), offset)));

  Volume v(nx, ny, nz, nt, voxel);
  ByteReader data(bytes.data() + offset, need);
  data.set_swap(swap);

  const bool scaled = scl_slope != 0.0f && std::isfinite(scl_slope);
  const double slope = scaled ? scl_slope : 1.0;
  const double inter = scaled ? scl_inter : 0.0;

  // stored order: x fastest, then y, z, then channel
  const std::int64_t nvox = v.num_voxels();
  for (int t = 0; t < nt; ++t) {
    for (std::int64_t i = 0; i < nvox; ++i) {
      double raw;
      switch (datatype) {
        case kInt16: raw = data.i16(); break;
        case kInt32: raw = data.i32(); break;
        case kFloat32: raw = data.f32(); break;
        default: raw = data.f64(); break;
      }
      v.data()(t, i) = slope * raw + inter;
    }
  }
  if (!v.all_finite()) throw std::runtime_error("nifti: non-finite values in data section");
  return v;
}

Volume read_nifti_file(const std::filesystem::path& path) {
  try {
    return read_nifti(read_file_bytes(path));
  } catch (const std::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

namespace {
constexpr char kRawMagic[4] = {'U', 'A', 'D', 'V'};
constexpr std::uint32_t kRawVersion = 1;
}  // namespace

std::vector<std::uint8_t> write_raw(const Volume& v) {
  ByteWriter w;
  w.magic(kRawMagic);
  w.u32(kRawVersion);
  w.u32(static_cast<std::uint32_t>(v.nx()));
  w.u32(static_cast<std::uint32_t>(v.ny()));
  w.u32(static_cast<std::uint32_t>(v.nz()));
  w.u32(static_cast<std::uint32_t>(v.channels()));
  w.f64(v.voxel_size_mm().x());
  w.f64(v.voxel_size_mm().y());
  w.f64(v.voxel_size_mm().z());
  const double* p = v.data().data();
  const std::int64_t n = v.data().size();
  for (std::int64_t i = 0; i < n; ++i) w.f32(static_cast<float>(p[i]));
  return w.take();
}

Volume read_raw(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes);
  if (r.magic4() != std::string(kRawMagic, 4))
    throw std::runtime_error("raw volume: bad magic (expected UADV)");
  const std::uint32_t version = r.u32();
  if (version != kRawVersion)
    throw std::runtime_error("raw volume: unsupported version " + std::to_string(version));
  const auto nx = static_cast<int>(r.u32());
  const auto ny = static_cast<int>(r.u32());
  const auto nz = static_cast<int>(r.u32());
  const auto nc = static_cast<int>(r.u32());
  Eigen::Vector3d voxel(r.f64(), r.f64(), r.f64());
  Volume v(nx, ny, nz, nc, voxel);
  const std::int64_t n = v.data().size();
  const std::size_t need = static_cast<std::size_t>(n) * 4;
  if (r.remaining() != need)
    throw std::runtime_error("raw volume: payload length mismatch, expected " +
                             std::to_string(need) + " bytes, have " +
                             std::to_string(r.remaining()));
  double* p = v.data().data();
  for (std::int64_t i = 0; i < n; ++i) p[i] = r.f32();
  if (!v.all_finite()) throw std::runtime_error("raw volume: non-finite values in payload");
  return v;
}

void write_raw_file(const Volume& v, const std::filesystem::path& path) {
  write_file_bytes(path, write_raw(v));
}

Volume read_raw_file(const std::filesystem::path& path) {
  try {
    return read_raw(read_file_bytes(path));
  } catch (const std::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

Volume read_volume_file(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".nii") return read_nifti_file(path);
  return read_raw_file(path);
}

double interpolated_quantile(std::vector<double> values, double q) {
  if (values.empty()) throw std::invalid_argument("quantile of empty sample");
  if (!(q >= 0.0 && q <= 1.0)) throw std::invalid_argument("quantile level outside [0,1]");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  if (lo + 1 >= values.size()) return values.back();
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[lo + 1] - values[lo]);
}

NormalizationStats fit_normalization(const std::vector<Volume>& train_volumes) {
  if (train_volumes.empty())
    throw std::invalid_argument("fit_normalization: need at least one volume");
  const int channels = train_volumes.front().channels();
  std::int64_t total = 0;
  for (const auto& v : train_volumes) {
    if (v.channels() != channels)
      throw std::invalid_argument("fit_normalization: channel count mismatch (" +
                                  std::to_string(v.channels()) + " vs " +
                                  std::to_string(channels) + ")");
    total += v.num_voxels();
  }

  NormalizationStats s;
  s.q01.resize(channels);
  s.q99.resize(channels);
  std::vector<double> pooled;
  pooled.reserve(static_cast<std::size_t>(total));
  for (int c = 0; c < channels; ++c) {
    pooled.clear();
    for (const auto& v : train_volumes) {
      const auto row = v.data().row(c);
      pooled.insert(pooled.end(), row.begin(), row.end());
    }
    s.q01[c] = interpolated_quantile(pooled, 0.01);
    s.q99[c] = interpolated_quantile(pooled, 0.99);
    if (!(s.q99[c] > s.q01[c]))
      throw std::runtime_error("fit_normalization: degenerate channel " + std::to_string(c) +
                               " (q01 == q99 == " + std::to_string(s.q01[c]) + ")");
  }
  return s;
}

Volume normalize(const Volume& v, const NormalizationStats& s) {
  if (v.channels() != s.q01.size())
    throw std::invalid_argument("normalize: stats have " + std::to_string(s.q01.size()) +
                                " channels, volume has " + std::to_string(v.channels()));
  Volume out = v;
  for (int c = 0; c < v.channels(); ++c) {
    const double span = s.q99[c] - s.q01[c];
    out.data().row(c) = (v.data().row(c).array() - s.q01[c]) / span;
  }
  return out;
}

VoxelMask brain_mask(const Volume& v, double eps) {
  if (eps < 0) throw std::invalid_argument("brain_mask: eps must be >= 0");
  VoxelMask m(v.nx(), v.ny(), v.nz());
  m.in = (v.data().cwiseAbs().colwise().maxCoeff().array() > eps).transpose();
  return m;
}

LabelAtlas make_label_atlas(const Volume& labels, const std::string& names_tsv) {
  if (labels.channels() != 1)
    throw std::runtime_error("atlas: label volume must have exactly one channel");
  LabelAtlas atlas;
  atlas.nx = labels.nx();
  atlas.ny = labels.ny();
  atlas.nz = labels.nz();
  atlas.labels.resize(labels.num_voxels());
  for (std::int64_t i = 0; i < labels.num_voxels(); ++i) {
    const double v = labels.data()(0, i);
    const double r = std::round(v);
    if (std::abs(v - r) > 1e-6 || r < 0)
      throw std::runtime_error("atlas: non-integer or negative label value " + std::to_string(v));
    atlas.labels[i] = static_cast<int>(r);
  }

  std::istringstream in(names_tsv);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw std::runtime_error("atlas: names TSV line without tab: \"" + line + "\"");
    const int id = std::stoi(line.substr(0, tab));
    atlas.names[id] = line.substr(tab + 1);
  }

  for (std::int64_t i = 0; i < atlas.labels.size(); ++i) {
    const int id = atlas.labels[i];
    if (id != 0 && !atlas.names.count(id))
      throw std::runtime_error("atlas: label id " + std::to_string(id) +
                               " present in volume but missing from names TSV");
  }
  return atlas;
}

LabelAtlas read_label_atlas(const std::filesystem::path& label_volume,
                            const std::filesystem::path& names_tsv) {
  return make_label_atlas(read_volume_file(label_volume), read_text_file(names_tsv));
}

std::string atlas_names_tsv(const LabelAtlas& atlas) {
  std::string out;
  for (const auto& [id, name] : atlas.names)
    out += std::to_string(id) + "\t" + name + "\n";
  return out;
}

}  // namespace uad
