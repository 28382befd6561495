#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "uad/eval.hpp"

namespace uad {

struct PathsConfig {
  std::string data_dir = "phantoms";
  std::string atlas = "phantoms/atlas.uadv";
  std::string atlas_names = "phantoms/atlas_names.tsv";
  std::string metadata_csv = "phantoms/metadata.csv";
};

struct SaeConfig {
  std::vector<int> kernels{5, 3, 3, 3};
  std::vector<int> strides{1, 1, 3, 1};
  std::vector<int> filters{3, 4, 12, 16};
  int epochs = 20;
  int batch_pairs = 1000;
  double alpha = 1e-3;
  double lr = 1e-3;
  double val_fraction = 0.1;
};

struct OcsvmConfig {
  int n_models = 5;
  int n_per_model = 500;
  double nu = 0.03;
  double tol = 1e-4;
  double gamma = 0.0;  // 0 = derive from the latent samples
};

struct MmstConfig {
  int K = 9;
  double kappa = 0.6;
  double t0 = 100.0;
  std::int64_t burn_in = 500;
  std::int64_t d_refresh = 1000;
  int passes = 2;
  std::int64_t warmup = 2000;
  std::int64_t heldout = 1000;
};

struct PhantomConfig {
  int n_controls = 20;
  int n_patients = 20;
  int nx = 48, ny = 56, nz = 48;
  int channels = 3;
  double correlation_length_vox = 3.0;
  double noise_sigma = 0.1;
  std::vector<double> base_intensity{1.0, 0.8, 1.2};
  double anomaly_radius_vox = 5.0;
  double contrast_sigma = 1.5;
};

struct PipelineConfig {
  PathsConfig paths;
  std::uint64_t seed = 1234;
  int patch_size = 15;
  std::int64_t patches_per_subject = 25000;
  std::int64_t features_per_subject = 2000;
  double mask_eps = 1e-6;
  int score_stride = 1;
  double threshold_q = 0.98;
  SaeConfig sae;
  OcsvmConfig ocsvm;
  MmstConfig mmst;
  FoldConfig folds;
  PhantomConfig phantom;
};

// Parses and validates; throws with the offending field name on any value
// outside its documented range.
PipelineConfig parse_config(const std::string& json_text);
PipelineConfig load_config(const std::filesystem::path& path);
std::string config_json(const PipelineConfig& cfg);

}  // namespace uad
