#pragma once

#include <Eigen/Dense>
#include <cstdint>

#include "uad/volume.hpp"

namespace uad {

// Synthetic volume: ellipsoidal foreground filled with smooth correlated
// noise around a per-channel base intensity, zero background.
struct PhantomSpec {
  int nx = 48, ny = 56, nz = 48;
  int channels = 3;
  Eigen::Vector3d voxel_size_mm{1.5, 1.5, 1.5};
  Eigen::Vector3d foreground_semiaxis_frac{0.42, 0.42, 0.42};  // of dims
  double correlation_length_vox = 3.0;  // 1/e autocorrelation lag of texture
  Eigen::VectorXd base_intensity;       // per channel; defaults to 1.0
  double noise_sigma = 0.1;             // texture std dev, same per channel
  std::uint64_t seed = 0;
};

// Spherical additive anomaly with a parabolic radial taper; the contrast is
// expressed in units of the texture's standard deviation so its subtlety is
// directly calibratable.
struct AnomalySpec {
  Eigen::Vector3d center{0, 0, 0};  // voxel coordinates
  double radius_vox = 5.0;
  double contrast_sigma = 1.5;  // per-channel delta = contrast_sigma * noise_sigma
};

struct PhantomVolume {
  Volume volume;
  VoxelMask foreground;
};

struct InjectedAnomaly {
  Volume volume;
  VoxelMask affected;  // exact set of modified voxels
};

PhantomVolume generate_normal(const PhantomSpec& spec);

// Adds delta * taper(r) inside the sphere; every affected voxel must lie in
// the foreground. The returned mask is exactly the taper support, also for
// zero contrast.
InjectedAnomaly inject_anomaly(const Volume& v, const VoxelMask& foreground,
                               const PhantomSpec& spec, const AnomalySpec& anomaly);

// Anomaly center placed uniformly inside the central part of the foreground
// so that the whole sphere stays interior. Deterministic given the seed.
AnomalySpec place_anomaly(const PhantomSpec& spec, double radius_vox, double contrast_sigma,
                          std::uint64_t seed);

// Simple geometric atlas for phantom runs: an inner ellipsoidal core plus
// left/right outer shells.
LabelAtlas phantom_atlas(const PhantomSpec& spec);

}  // namespace uad
