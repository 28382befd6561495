#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace uad {

// nu-one-class SVM with Gaussian kernel. Solves the dual
//   minimize 1/2 a' K a   s.t.  sum(a) = 1,  0 <= a_i <= 1/(nu n)
// and keeps the training points with a_i > 0 as support vectors.
struct OcsvmModel {
  Eigen::MatrixXd support_vectors;  // n_sv x M, one row per support vector
  Eigen::VectorXd alphas;
  double rho = 0.0;
  double gamma = 1.0;
  double nu = 0.5;
};

struct OcsvmEnsemble {
  std::vector<OcsvmModel> models;
};

struct OcsvmFitOptions {
  double tol = 1e-4;                     // max KKT violation at convergence
  std::int64_t max_iter_per_sample = 100000;  // iteration cap = this * n
};

double gaussian_kernel(const Eigen::VectorXd& z1, const Eigen::VectorXd& z2, double gamma);

// 1/gamma = latent dimension * mean per-coordinate variance of the samples
// (population variance), so 1/gamma equals the total variance.
double default_gamma(const Eigen::MatrixXd& samples);

// SMO solver over maximal-violating pairs; samples are rows.
OcsvmModel fit_ocsvm(const Eigen::MatrixXd& samples, double nu, double gamma,
                     const OcsvmFitOptions& options = {});

// f(z) = sum_i a_i k(z_i, z) - rho; positive inside the estimated support.
double decision(const OcsvmModel& m, const Eigen::VectorXd& z);

// Ensemble of independently subsampled fits; the anomaly score is the
// negated mean decision value (higher = more anomalous).
OcsvmEnsemble fit_ensemble(const Eigen::MatrixXd& latents, int n_models, int n_per_model,
                           double nu, double gamma, std::uint64_t seed,
                           const OcsvmFitOptions& options = {});
double score(const OcsvmEnsemble& e, const Eigen::VectorXd& z);
double anomaly_score(const OcsvmEnsemble& e, const Eigen::VectorXd& z);

void save_ocsvm_ensemble(const OcsvmEnsemble& e, const std::filesystem::path& path);
OcsvmEnsemble load_ocsvm_ensemble(const std::filesystem::path& path);

}  // namespace uad
