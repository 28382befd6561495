#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace uad {

// One multiple-scale t-distribution: in the eigenbasis D each direction m
// carries its own Gamma-distributed scale variable W_m with shape alpha_m
// and rate beta_m (beta_m = alpha_m by default, so E[W_m] = 1 a priori and
// A_m is the per-direction variance scale).
struct MstParams {
  Eigen::VectorXd mu;
  Eigen::MatrixXd D;      // orthogonal, columns are directions
  Eigen::VectorXd A;      // per-direction scale, > 0
  Eigen::VectorXd alpha;  // per-direction shape, > 0
  Eigen::VectorXd beta;   // per-direction rate, > 0

  int dim() const { return static_cast<int>(mu.size()); }
};

struct MmstParams {
  Eigen::VectorXd weights;  // simplex over components
  std::vector<MstParams> components;

  int K() const { return static_cast<int>(components.size()); }
  int dim() const { return components.empty() ? 0 : components.front().dim(); }
};

// Stochastic-approximation averages of the per-sample expected complete-data
// statistics. s1/s2 accumulate the eigenbasis coordinates y = D'z
// (uncentered), so the M-step mean and variance come out of the usual moment
// identities; the scatter is centered at the running mu and only feeds the
// periodic direction refresh.
struct MstSuffStats {
  double s0 = 0.0;      // <r>
  Eigen::VectorXd s1;   // <r w_m y_m>
  Eigen::VectorXd s2;   // <r w_m y_m^2>
  Eigen::VectorXd s3;   // <r w_m>
  Eigen::VectorXd s4;   // <r log w_m>
  Eigen::MatrixXd scatter;  // <r (z - mu)(z - mu)'>
};

struct MmstSuffStats {
  std::vector<MstSuffStats> comp;
};

double mst_logpdf(const MstParams& p, const Eigen::VectorXd& z);
double mmst_logpdf(const MmstParams& P, const Eigen::VectorXd& z);
Eigen::VectorXd responsibilities(const MmstParams& P, const Eigen::VectorXd& z);

// Posterior mean of the scale variables given z, mixed over component
// responsibilities: w_bar_m = sum_k r_k (alpha_km + 1/2)/(beta_km + y_km^2/(2 A_km)).
Eigen::VectorXd scale_expectation(const MmstParams& P, const Eigen::VectorXd& z);

// proximity f(z) = max_m w_bar_m; anomaly score = -f(z).
double proximity(const MmstParams& P, const Eigen::VectorXd& z);
double anomaly_score(const MmstParams& P, const Eigen::VectorXd& z);

// k-means++ seeded initialization; directions and scales from the cluster
// scatter eigensystems, alpha = beta = 1, uniform weights.
MmstParams init_params(const Eigen::MatrixXd& samples, int K, std::uint64_t seed);

struct OnlineEmOptions {
  double kappa = 0.6;           // step exponent, in (0.5, 1]
  double t0 = 100.0;            // step offset: gamma_t = (t + t0)^(-kappa)
  std::int64_t burn_in = 500;   // steps before the first M-step
  std::int64_t d_refresh_period = 1000;  // direction refresh cadence
  double a_floor = 1e-8;
  double alpha_min = 0.05;
  double alpha_max = 100.0;
};

struct OnlineEmState {
  MmstParams params;
  MmstSuffStats stats;
  std::int64_t t = 0;  // accepted steps so far
  std::int64_t rejected = 0;

  static OnlineEmState from(MmstParams params);
};

// One stochastic E step + (after burn-in) M step on sample z. A step whose
// update would produce non-finite state is rejected and counted.
void online_em_step(OnlineEmState& state, const Eigen::VectorXd& z, const OnlineEmOptions& opt);

struct MmstFitConfig {
  int K = 9;
  OnlineEmOptions em;
  int passes = 2;
  std::int64_t warmup = 2000;   // samples used for initialization
  std::int64_t heldout = 1000;  // samples reserved for the diagnostic trace
  std::uint64_t seed = 0;
};

struct MmstFitResult {
  MmstParams params;
  std::int64_t rejected_steps = 0;
  std::vector<double> heldout_loglik;  // mean held-out log-likelihood per pass
};

MmstFitResult fit_mmst(const Eigen::MatrixXd& latents, const MmstFitConfig& cfg);

void save_mmst(const MmstParams& P, const std::filesystem::path& path);
MmstParams load_mmst(const std::filesystem::path& path);

// digamma / trigamma (needed by the shape update)
double digamma(double x);
double trigamma(double x);

}  // namespace uad
