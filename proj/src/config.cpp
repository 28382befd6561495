#include "uad/config.hpp"

#include <json.hpp>
#include <stdexcept>

#include "uad/binary_io.hpp"

namespace uad {

namespace {

using nlohmann::json;

[[noreturn]] void fail(const std::string& field, const std::string& what) {
  throw std::runtime_error("config: " + field + " " + what);
}

template <typename T>
void get_to(const json& j, const std::string& section, const char* key, T& out) {
  if (!j.contains(key)) return;
  const std::string field = section.empty() ? key : section + "." + key;
  try {
    j.at(key).get_to(out);
  } catch (const json::exception&) {
    fail(field, "has the wrong type");
  }
}

void check(bool ok, const std::string& field, const std::string& what) {
  if (!ok) fail(field, what);
}

}  // namespace

PipelineConfig parse_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("config: invalid JSON: ") + e.what());
  }

  PipelineConfig c;
  if (j.contains("paths")) {
    const auto& p = j["paths"];
    get_to(p, "paths", "data_dir", c.paths.data_dir);
    get_to(p, "paths", "atlas", c.paths.atlas);
    get_to(p, "paths", "atlas_names", c.paths.atlas_names);
    get_to(p, "paths", "metadata_csv", c.paths.metadata_csv);
  }
  get_to(j, "", "seed", c.seed);
  get_to(j, "", "patch_size", c.patch_size);
  get_to(j, "", "patches_per_subject", c.patches_per_subject);
  get_to(j, "", "features_per_subject", c.features_per_subject);
  get_to(j, "", "mask_eps", c.mask_eps);
  get_to(j, "", "score_stride", c.score_stride);
  get_to(j, "", "threshold_q", c.threshold_q);
  if (j.contains("sae")) {
    const auto& s = j["sae"];
    get_to(s, "sae", "kernels", c.sae.kernels);
    get_to(s, "sae", "strides", c.sae.strides);
    get_to(s, "sae", "filters", c.sae.filters);
    get_to(s, "sae", "epochs", c.sae.epochs);
    get_to(s, "sae", "batch_pairs", c.sae.batch_pairs);
    get_to(s, "sae", "alpha", c.sae.alpha);
    get_to(s, "sae", "lr", c.sae.lr);
    get_to(s, "sae", "val_fraction", c.sae.val_fraction);
  }
  if (j.contains("ocsvm")) {
    const auto& s = j["ocsvm"];
    get_to(s, "ocsvm", "n_models", c.ocsvm.n_models);
    get_to(s, "ocsvm", "n_per_model", c.ocsvm.n_per_model);
    get_to(s, "ocsvm", "nu", c.ocsvm.nu);
    get_to(s, "ocsvm", "tol", c.ocsvm.tol);
    get_to(s, "ocsvm", "gamma", c.ocsvm.gamma);
  }
  if (j.contains("mmst")) {
    const auto& s = j["mmst"];
    get_to(s, "mmst", "K", c.mmst.K);
    get_to(s, "mmst", "kappa", c.mmst.kappa);
    get_to(s, "mmst", "t0", c.mmst.t0);
    get_to(s, "mmst", "burn_in", c.mmst.burn_in);
    get_to(s, "mmst", "d_refresh", c.mmst.d_refresh);
    get_to(s, "mmst", "passes", c.mmst.passes);
    get_to(s, "mmst", "warmup", c.mmst.warmup);
    get_to(s, "mmst", "heldout", c.mmst.heldout);
  }
  if (j.contains("folds")) {
    const auto& s = j["folds"];
    get_to(s, "folds", "n_folds", c.folds.n_folds);
    get_to(s, "folds", "control_train_fraction", c.folds.control_train_fraction);
    get_to(s, "folds", "patient_train_fraction", c.folds.patient_train_fraction);
  }
  if (j.contains("phantom")) {
    const auto& s = j["phantom"];
    get_to(s, "phantom", "n_controls", c.phantom.n_controls);
    get_to(s, "phantom", "n_patients", c.phantom.n_patients);
    if (s.contains("dims")) {
      std::vector<int> dims;
      get_to(s, "phantom", "dims", dims);
      check(dims.size() == 3, "phantom.dims", "must have exactly 3 entries");
      c.phantom.nx = dims[0];
      c.phantom.ny = dims[1];
      c.phantom.nz = dims[2];
    }
    get_to(s, "phantom", "channels", c.phantom.channels);
    get_to(s, "phantom", "correlation_length_vox", c.phantom.correlation_length_vox);
    get_to(s, "phantom", "noise_sigma", c.phantom.noise_sigma);
    get_to(s, "phantom", "base_intensity", c.phantom.base_intensity);
    get_to(s, "phantom", "anomaly_radius_vox", c.phantom.anomaly_radius_vox);
    get_to(s, "phantom", "contrast_sigma", c.phantom.contrast_sigma);
  }

  // range validation
  check(c.patch_size >= 1 && c.patch_size % 2 == 1, "patch_size", "must be odd and >= 1");
  check(c.patches_per_subject >= 2, "patches_per_subject", "must be >= 2");
  check(c.features_per_subject >= 1, "features_per_subject", "must be >= 1");
  check(c.mask_eps >= 0, "mask_eps", "must be >= 0");
  check(c.score_stride >= 1, "score_stride", "must be >= 1");
  check(c.threshold_q >= 0.90 && c.threshold_q < 1.0, "threshold_q",
        "must be in [0.90, 1.0), got " + std::to_string(c.threshold_q));
  check(!c.sae.kernels.empty() && c.sae.kernels.size() == c.sae.strides.size() &&
            c.sae.kernels.size() == c.sae.filters.size(),
        "sae.kernels", "kernels/strides/filters must be nonempty and aligned");
  for (const int k : c.sae.kernels) check(k >= 1, "sae.kernels", "entries must be >= 1");
  for (const int s : c.sae.strides) check(s >= 1, "sae.strides", "entries must be >= 1");
  for (const int f : c.sae.filters) check(f >= 1, "sae.filters", "entries must be >= 1");
  check(c.sae.epochs >= 1, "sae.epochs", "must be >= 1");
  check(c.sae.batch_pairs >= 1, "sae.batch_pairs", "must be >= 1");
  check(c.sae.alpha >= 0, "sae.alpha", "must be >= 0");
  check(c.sae.lr > 0, "sae.lr", "must be > 0");
  check(c.sae.val_fraction > 0 && c.sae.val_fraction < 1, "sae.val_fraction",
        "must be in (0, 1)");
  check(c.ocsvm.n_models >= 1, "ocsvm.n_models", "must be >= 1");
  check(c.ocsvm.n_per_model >= 2, "ocsvm.n_per_model", "must be >= 2");
  check(c.ocsvm.nu > 0 && c.ocsvm.nu < 1, "ocsvm.nu",
        "must be in (0, 1), got " + std::to_string(c.ocsvm.nu));
  check(c.ocsvm.tol > 0, "ocsvm.tol", "must be > 0");
  check(c.ocsvm.gamma >= 0, "ocsvm.gamma", "must be >= 0 (0 selects the data-driven default)");
  check(c.mmst.K >= 1, "mmst.K", "must be >= 1");
  check(c.mmst.kappa > 0.5 && c.mmst.kappa <= 1.0, "mmst.kappa", "must be in (0.5, 1]");
  check(c.mmst.t0 >= 0, "mmst.t0", "must be >= 0");
  check(c.mmst.burn_in >= 1, "mmst.burn_in", "must be >= 1");
  check(c.mmst.d_refresh >= 1, "mmst.d_refresh", "must be >= 1");
  check(c.mmst.passes >= 1, "mmst.passes", "must be >= 1");
  check(c.mmst.warmup >= 1, "mmst.warmup", "must be >= 1");
  check(c.mmst.heldout >= 0, "mmst.heldout", "must be >= 0");
  check(c.folds.n_folds >= 1, "folds.n_folds", "must be >= 1");
  check(c.folds.control_train_fraction > 0 && c.folds.control_train_fraction < 1,
        "folds.control_train_fraction", "must be in (0, 1)");
  check(c.folds.patient_train_fraction >= 0 && c.folds.patient_train_fraction < 1,
        "folds.patient_train_fraction", "must be in [0, 1)");
  check(c.phantom.n_controls >= 2, "phantom.n_controls", "must be >= 2");
  check(c.phantom.n_patients >= 1, "phantom.n_patients", "must be >= 1");
  check(c.phantom.nx >= 1 && c.phantom.ny >= 1 && c.phantom.nz >= 1, "phantom.dims",
        "must be positive");
  check(c.phantom.channels >= 1, "phantom.channels", "must be >= 1");
  check(c.phantom.correlation_length_vox > 0, "phantom.correlation_length_vox", "must be > 0");
  check(c.phantom.noise_sigma >= 0, "phantom.noise_sigma", "must be >= 0");
  check(static_cast<int>(c.phantom.base_intensity.size()) == c.phantom.channels,
        "phantom.base_intensity", "must have one entry per channel");
  check(c.phantom.anomaly_radius_vox >= 0, "phantom.anomaly_radius_vox", "must be >= 0");

  return c;
}

PipelineConfig load_config(const std::filesystem::path& path) {
  try {
    return parse_config(read_text_file(path));
  } catch (const std::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

std::string config_json(const PipelineConfig& c) {
  json j;
  j["paths"] = {{"data_dir", c.paths.data_dir},
                {"atlas", c.paths.atlas},
                {"atlas_names", c.paths.atlas_names},
                {"metadata_csv", c.paths.metadata_csv}};
  j["seed"] = c.seed;
  j["patch_size"] = c.patch_size;
  j["patches_per_subject"] = c.patches_per_subject;
  j["features_per_subject"] = c.features_per_subject;
  j["mask_eps"] = c.mask_eps;
  j["score_stride"] = c.score_stride;
  j["threshold_q"] = c.threshold_q;
  j["sae"] = {{"kernels", c.sae.kernels},   {"strides", c.sae.strides},
              {"filters", c.sae.filters},   {"epochs", c.sae.epochs},
              {"batch_pairs", c.sae.batch_pairs}, {"alpha", c.sae.alpha},
              {"lr", c.sae.lr},             {"val_fraction", c.sae.val_fraction}};
  j["ocsvm"] = {{"n_models", c.ocsvm.n_models},
                {"n_per_model", c.ocsvm.n_per_model},
                {"nu", c.ocsvm.nu},
                {"tol", c.ocsvm.tol},
                {"gamma", c.ocsvm.gamma}};
  j["mmst"] = {{"K", c.mmst.K},           {"kappa", c.mmst.kappa},
               {"t0", c.mmst.t0},         {"burn_in", c.mmst.burn_in},
               {"d_refresh", c.mmst.d_refresh}, {"passes", c.mmst.passes},
               {"warmup", c.mmst.warmup}, {"heldout", c.mmst.heldout}};
  j["folds"] = {{"n_folds", c.folds.n_folds},
                {"control_train_fraction", c.folds.control_train_fraction},
                {"patient_train_fraction", c.folds.patient_train_fraction}};
  j["phantom"] = {{"n_controls", c.phantom.n_controls},
                  {"n_patients", c.phantom.n_patients},
                  {"dims", {c.phantom.nx, c.phantom.ny, c.phantom.nz}},
                  {"channels", c.phantom.channels},
                  {"correlation_length_vox", c.phantom.correlation_length_vox},
                  {"noise_sigma", c.phantom.noise_sigma},
                  {"base_intensity", c.phantom.base_intensity},
                  {"anomaly_radius_vox", c.phantom.anomaly_radius_vox},
                  {"contrast_sigma", c.phantom.contrast_sigma}};
  return j.dump(2);
}

}  // namespace uad
