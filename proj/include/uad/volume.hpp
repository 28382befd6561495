#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace uad {

// Dense 3D multi-channel scalar field. Storage is one column per voxel
// (channel values contiguous per voxel); the voxel linear index is
// x + nx*(y + ny*z).
class Volume {
 public:
  Volume(int nx, int ny, int nz, int channels,
         Eigen::Vector3d voxel_size_mm = Eigen::Vector3d(1.0, 1.0, 1.0));

  int nx() const { return nx_; }
  int ny() const { return ny_; }
  int nz() const { return nz_; }
  int channels() const { return channels_; }
  std::int64_t num_voxels() const {
    return static_cast<std::int64_t>(nx_) * ny_ * nz_;
  }
  const Eigen::Vector3d& voxel_size_mm() const { return voxel_size_; }

  std::int64_t voxel_index(int x, int y, int z) const {
    return static_cast<std::int64_t>(x) +
           static_cast<std::int64_t>(nx_) * (y + static_cast<std::int64_t>(ny_) * z);
  }

  double& at(int x, int y, int z, int c) { return data_(c, voxel_index(x, y, z)); }
  double at(int x, int y, int z, int c) const { return data_(c, voxel_index(x, y, z)); }
  double operator()(int x, int y, int z, int c = 0) const { return at(x, y, z, c); }

  // channels x num_voxels; a row is one channel, a column one voxel
  Eigen::MatrixXd& data() { return data_; }
  const Eigen::MatrixXd& data() const { return data_; }

  bool all_finite() const { return data_.allFinite(); }

 private:
  int nx_, ny_, nz_, channels_;
  Eigen::Vector3d voxel_size_;
  Eigen::MatrixXd data_;
};

// Per-voxel boolean field sharing the Volume index convention.
struct VoxelMask {
  int nx = 0, ny = 0, nz = 0;
  Eigen::Array<bool, Eigen::Dynamic, 1> in;

  VoxelMask() = default;
  VoxelMask(int nx_, int ny_, int nz_)
      : nx(nx_), ny(ny_), nz(nz_),
        in(Eigen::Array<bool, Eigen::Dynamic, 1>::Constant(
            static_cast<Eigen::Index>(nx_) * ny_ * nz_, false)) {}

  std::int64_t index(int x, int y, int z) const {
    return static_cast<std::int64_t>(x) +
           static_cast<std::int64_t>(nx) * (y + static_cast<std::int64_t>(ny) * z);
  }
  bool at(int x, int y, int z) const { return in[index(x, y, z)]; }
  void set(int x, int y, int z, bool v) { in[index(x, y, z)] = v; }
  std::int64_t count() const { return in.count(); }
  bool same_dims(const VoxelMask& o) const {
    return nx == o.nx && ny == o.ny && nz == o.nz;
  }
};

// Integer label field with region names; 0 is background.
struct LabelAtlas {
  int nx = 0, ny = 0, nz = 0;
  Eigen::VectorXi labels;
  std::map<int, std::string> names;

  std::int64_t index(int x, int y, int z) const {
    return static_cast<std::int64_t>(x) +
           static_cast<std::int64_t>(nx) * (y + static_cast<std::int64_t>(ny) * z);
  }
};

struct NormalizationStats {
  Eigen::VectorXd q01;  // per channel
  Eigen::VectorXd q99;  // per channel
};

// NIfTI-1 subset reader: uncompressed single-file volumes, datatypes
// int16/int32/float32/float64, dim[0] in {3,4}, endianness auto-detected
// from sizeof_hdr.  Orientation handling is out of scope; inputs are
// assumed co-registered.
Volume read_nifti(const std::vector<std::uint8_t>& bytes);
Volume read_nifti_file(const std::filesystem::path& path);

// Raw volume container ("UADV"): self-describing dims, channels and voxel
// sizes, float32 little-endian payload.  read/write round-trips bit-exactly
// on float32-representable data.
std::vector<std::uint8_t> write_raw(const Volume& v);
Volume read_raw(const std::vector<std::uint8_t>& bytes);
void write_raw_file(const Volume& v, const std::filesystem::path& path);
Volume read_raw_file(const std::filesystem::path& path);

// Loads a volume by extension: .uadv (raw container) or .nii.
Volume read_volume_file(const std::filesystem::path& path);

// Per-channel 1% / 99% quantiles of the intensity distribution pooled over
// all voxels of all training volumes (linear-interpolation quantiles).
NormalizationStats fit_normalization(const std::vector<Volume>& train_volumes);

// x -> (x - q01) / (q99 - q01) per channel; no clipping.
Volume normalize(const Volume& v, const NormalizationStats& s);

// In-mask iff any channel exceeds eps in absolute value.
VoxelMask brain_mask(const Volume& v, double eps);

// q-quantile with linear interpolation between order statistics; the input
// is copied and sorted internally.
double interpolated_quantile(std::vector<double> values, double q);

// Atlas = 1-channel integer-valued label volume + two-column TSV (id, name).
LabelAtlas make_label_atlas(const Volume& labels, const std::string& names_tsv);
LabelAtlas read_label_atlas(const std::filesystem::path& label_volume,
                            const std::filesystem::path& names_tsv);
std::string atlas_names_tsv(const LabelAtlas& atlas);

}  // namespace uad
