#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "uad/volume.hpp"

namespace uad {

// One multi-channel image plane: window[c](y, x).
using Image = std::vector<Eigen::MatrixXd>;

// p x p multi-channel window from one transverse slice, centred at
// `location` (voxel indices in the source volume).
struct Patch {
  Image window;
  Eigen::Vector3i location{0, 0, 0};
  std::string subject_id;

  int side() const { return window.empty() ? 0 : static_cast<int>(window.front().rows()); }
  int channels() const { return static_cast<int>(window.size()); }
};

// Two patches of different subjects at the same brain location.
struct PatchPair {
  Patch a;
  Patch b;
};

void validate_pair(const PatchPair& pair);

// n center locations drawn uniformly with replacement from in-mask voxels
// whose (x, y) lie at least `margin` from the volume border. Deterministic
// given the seed.
std::vector<Eigen::Vector3i> sample_locations(const VoxelMask& mask, std::int64_t n, int margin,
                                              std::uint64_t seed);

// Centers eligible for a patch of side p = 2*margin+1, in voxel index order.
std::vector<Eigen::Vector3i> eligible_locations(const VoxelMask& mask, int margin,
                                                int stride = 1);

// Axis-aligned p x p crop of transverse slice loc.z centred at (loc.x, loc.y),
// all channels; p odd, no padding.
Patch extract_patch(const Volume& v, const Eigen::Vector3i& loc, int p,
                    const std::string& subject_id = "");

// Pairs for siamese training: a shared eligible location plus two distinct
// subjects per pair, both drawn uniformly. Locations are eligible in every
// subject's mask.
std::vector<PatchPair> sample_pairs(const std::vector<Volume>& volumes,
                                    const std::vector<std::string>& subject_ids,
                                    const std::vector<VoxelMask>& masks, std::int64_t n_pairs,
                                    int p, std::uint64_t seed);

// Patch dump: concatenated raw volume containers of dims (p, p, 1) with C
// channels, plus a sidecar TSV of (subject_id, x, y, z) rows.
void write_patches(const std::vector<Patch>& patches, const std::filesystem::path& data_path,
                   const std::filesystem::path& sidecar_tsv_path);
std::vector<Patch> read_patches(const std::filesystem::path& data_path,
                                const std::filesystem::path& sidecar_tsv_path);

}  // namespace uad
