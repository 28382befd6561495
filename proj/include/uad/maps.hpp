#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "uad/mmst.hpp"
#include "uad/ocsvm.hpp"
#include "uad/sae.hpp"
#include "uad/volume.hpp"

namespace uad {

// Per-voxel anomaly scores (higher = more anomalous); only voxels marked
// valid were scored.
struct AnomalyMap {
  int nx = 0, ny = 0, nz = 0;
  Eigen::VectorXd scores;
  VoxelMask valid;

  AnomalyMap() = default;
  AnomalyMap(int nx_, int ny_, int nz_)
      : nx(nx_), ny(ny_), nz(nz_),
        scores(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(nx_) * ny_ * nz_)),
        valid(nx_, ny_, nz_) {}

  std::int64_t index(int x, int y, int z) const { return valid.index(x, y, z); }
};

// Squared reconstruction error of the patch at each location, written to the
// patch's central voxel.
AnomalyMap recon_error_map(const SaeModel& m, const Volume& v,
                           const std::vector<Eigen::Vector3i>& locations);

// Latent-space anomaly score of the encoded patch at each location.
AnomalyMap latent_score_map(const OcsvmEnsemble& scorer, const SaeModel& m, const Volume& v,
                            const std::vector<Eigen::Vector3i>& locations);
AnomalyMap latent_score_map(const MmstParams& scorer, const SaeModel& m, const Volume& v,
                            const std::vector<Eigen::Vector3i>& locations);

// q-quantile (linear interpolation) of all valid scores pooled across the
// training maps.
double abnormality_threshold(const std::vector<AnomalyMap>& train_maps, double q);

// abnormal iff valid and score > threshold
VoxelMask binarize(const AnomalyMap& map, double threshold);

struct RegionRow {
  int label = 0;
  std::string name;
  std::int64_t n_voxels = 0;    // valid voxels in the region
  std::int64_t n_abnormal = 0;
  std::optional<double> pct;    // missing when the region has no valid voxel
};

// label 0 row = whole brain (all valid voxels)
struct RegionReport {
  std::vector<RegionRow> rows;

  const RegionRow* find(int label) const;
};

RegionReport region_aggregate(const VoxelMask& abnormal, const VoxelMask& valid,
                              const LabelAtlas& atlas);

// CSV with header "label,name,n_voxels,n_abnormal,pct"; missing percentages
// are written as NA.
std::string region_report_csv(const RegionReport& report);
RegionReport parse_region_report_csv(const std::string& text);

// Maps persist as 2-channel raw volume containers (scores, validity).
void save_anomaly_map(const AnomalyMap& map, const std::filesystem::path& path);
AnomalyMap load_anomaly_map(const std::filesystem::path& path);

}  // namespace uad
