#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <string>
#include <vector>

#include "uad/config.hpp"
#include "uad/eval.hpp"

namespace uad {

inline const std::vector<std::string> kMethods{"recon", "ocsvm", "mmst"};

// Resolved run: every stage reads and writes files under run_root (relative
// config paths resolve against it), so any stage can be re-run in isolation
// from its persisted inputs.
struct RunContext {
  PipelineConfig cfg;
  std::filesystem::path run_root;

  std::filesystem::path resolve(const std::string& p) const;
  std::filesystem::path data_dir() const { return resolve(cfg.paths.data_dir); }
  std::filesystem::path folds_json() const { return run_root / "folds.json"; }
  std::filesystem::path fold_dir(int fold) const;
  std::filesystem::path norm_stats_json(int fold) const;
  std::filesystem::path sae_model(int fold) const;
  std::filesystem::path sae_trace_csv(int fold) const;
  std::filesystem::path latents_file(int fold) const;
  std::filesystem::path latents_sidecar(int fold) const;
  std::filesystem::path ocsvm_model(int fold) const;
  std::filesystem::path mmst_model(int fold) const;
  std::filesystem::path mmst_diag_csv(int fold) const;
  std::filesystem::path map_file(int fold, const std::string& method,
                                 const std::string& subject) const;
  std::filesystem::path threshold_json(int fold, const std::string& method) const;
  std::filesystem::path report_csv(int fold, const std::string& method,
                                   const std::string& subject) const;
  std::filesystem::path results_csv() const { return run_root / "results.csv"; }
};

RunContext make_run_context(PipelineConfig cfg, const std::filesystem::path& out_root,
                            const std::string& run_id);

// pipeline stages; each validates that its inputs exist and reports the
// stage name and missing file otherwise
void run_phantom_gen(const RunContext& ctx);
void run_folds(const RunContext& ctx);
void run_sae_train(const RunContext& ctx, int fold);
void run_features(const RunContext& ctx, int fold);
void run_fit_ocsvm(const RunContext& ctx, int fold);
void run_fit_mmst(const RunContext& ctx, int fold);
void run_score(const RunContext& ctx, int fold, const std::string& method);
void run_threshold(const RunContext& ctx, int fold, const std::string& method);
void run_aggregate(const RunContext& ctx, int fold, const std::string& method);
void run_evaluate(const RunContext& ctx);

// every stage for every fold, in dependency order; `only_stage` restricts to
// one stage name, fold < 0 means all folds
void run_all(const RunContext& ctx, const std::string& only_stage = "", int fold = -1);

// fold persistence (folds.json)
void save_folds(const std::vector<Fold>& folds, const std::filesystem::path& path);
std::vector<Fold> load_folds(const std::filesystem::path& path);

// latent matrix container ("UADZ"): rows = samples, float64 payload, plus a
// sidecar TSV of (subject_id, x, y, z) rows
void save_latents(const Eigen::MatrixXd& latents, const std::vector<std::string>& sidecar_rows,
                  const std::filesystem::path& path, const std::filesystem::path& sidecar_path);
Eigen::MatrixXd load_latents(const std::filesystem::path& path);

struct ResultRow {
  std::string method;
  int fold = 0;
  int region_label = 0;
  std::string region_name;
  double gmean = 0.0;
  double threshold = 0.0;
};

std::vector<ResultRow> parse_results_csv(const std::string& text);

}  // namespace uad
