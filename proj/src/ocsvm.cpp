#include "uad/ocsvm.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "uad/binary_io.hpp"
#include "uad/rng.hpp"

namespace uad {

double gaussian_kernel(const Eigen::VectorXd& z1, const Eigen::VectorXd& z2, double gamma) {
  if (z1.size() != z2.size())
    throw std::invalid_argument("gaussian_kernel: dimension mismatch (" +
                                std::to_string(z1.size()) + " vs " + std::to_string(z2.size()) +
                                ")");
  if (!(gamma > 0)) throw std::invalid_argument("gaussian_kernel: gamma must be > 0");
  return std::exp(-gamma * (z1 - z2).squaredNorm());
}

double default_gamma(const Eigen::MatrixXd& samples) {
  const auto n = samples.rows();
  if (n < 2) throw std::invalid_argument("default_gamma: need at least 2 samples");
  const Eigen::RowVectorXd mean = samples.colwise().mean();
  const double mean_var =
      (samples.rowwise() - mean).array().square().colwise().mean().mean();
  if (!(mean_var > 0)) throw std::runtime_error("default_gamma: samples have zero variance");
  return 1.0 / (static_cast<double>(samples.cols()) * mean_var);
}

OcsvmModel fit_ocsvm(const Eigen::MatrixXd& samples, double nu, double gamma,
                     const OcsvmFitOptions& options) {
  const auto n = samples.rows();
  if (n < 2) throw std::invalid_argument("fit_ocsvm: need at least 2 samples");
  if (!(nu > 0.0 && nu < 1.0)) throw std::invalid_argument("fit_ocsvm: nu must be in (0,1)");
  if (!(nu * static_cast<double>(n) >= 1.0))
    throw std::invalid_argument("fit_ocsvm: nu*n must be >= 1 (nu=" + std::to_string(nu) +
                                ", n=" + std::to_string(n) + ")");
  if (!(gamma > 0)) throw std::invalid_argument("fit_ocsvm: gamma must be > 0");

  // full kernel matrix; the ensemble keeps n at a few hundred
  const Eigen::VectorXd sq = samples.rowwise().squaredNorm();
  Eigen::MatrixXd K = samples * samples.transpose();
  K = (((-2.0 * K).colwise() + sq).rowwise() + sq.transpose()) * -gamma;
  K = K.array().exp();

  const double C = 1.0 / (nu * static_cast<double>(n));

  // libsvm-style initialization: the first floor(nu*n) points at the box
  // bound, one fractional remainder, the rest at zero
  Eigen::VectorXd alpha = Eigen::VectorXd::Zero(n);
  {
    double remaining = 1.0;
    for (Eigen::Index i = 0; i < n && remaining > 0; ++i) {
      alpha[i] = std::min(C, remaining);
      remaining -= alpha[i];
    }
  }
  Eigen::VectorXd grad = K * alpha;

  const double bound_eps = 1e-12 * C;
  const std::int64_t max_iter = options.max_iter_per_sample * static_cast<std::int64_t>(n);
  double violation = 0.0;
  for (std::int64_t iter = 0;; ++iter) {
    // maximal violating pair: grow the smallest gradient among the
    // increasable, shrink the largest among the decreasable
    Eigen::Index up = -1, down = -1;
    double g_up = 0.0, g_down = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (alpha[i] < C - bound_eps && (up < 0 || grad[i] < g_up)) {
        up = i;
        g_up = grad[i];
      }
      if (alpha[i] > bound_eps && (down < 0 || grad[i] > g_down)) {
        down = i;
        g_down = grad[i];
      }
    }
    violation = (up >= 0 && down >= 0) ? g_down - g_up : 0.0;
    if (violation <= options.tol) break;
    if (iter >= max_iter)
      throw std::runtime_error("fit_ocsvm: no convergence after " + std::to_string(max_iter) +
                               " iterations, max KKT violation " + std::to_string(violation));

    const double eta = std::max(K(up, up) + K(down, down) - 2.0 * K(up, down), 1e-12);
    const double step = std::min({violation / eta, C - alpha[up], alpha[down]});
    alpha[up] += step;
    alpha[down] -= step;
    if (alpha[down] < bound_eps) alpha[down] = 0.0;
    if (alpha[up] > C - bound_eps) alpha[up] = C;
    grad.noalias() += step * (K.col(up) - K.col(down));
  }

  // renormalize the simplex constraint against accumulated roundoff, then
  // recompute the gradient once so rho does not inherit incremental drift
  alpha *= 1.0 / alpha.sum();
  grad.noalias() = K * alpha;

  // rho: mean of (K alpha)_i over free support vectors, midpoint of the
  // active bounds when no free vector exists
  double rho;
  {
    double acc = 0.0;
    Eigen::Index free_count = 0;
    for (Eigen::Index i = 0; i < n; ++i)
      if (alpha[i] > bound_eps && alpha[i] < C - bound_eps) {
        acc += grad[i];
        ++free_count;
      }
    if (free_count > 0) {
      rho = acc / static_cast<double>(free_count);
    } else {
      double lo = -std::numeric_limits<double>::infinity();
      double hi = std::numeric_limits<double>::infinity();
      for (Eigen::Index i = 0; i < n; ++i) {
        if (alpha[i] > bound_eps)
          lo = std::max(lo, grad[i]);
        else
          hi = std::min(hi, grad[i]);
      }
      rho = 0.5 * (lo + hi);
    }
  }

  OcsvmModel model;
  model.gamma = gamma;
  model.nu = nu;
  model.rho = rho;
  const Eigen::Index n_sv = (alpha.array() > 0.0).count();
  model.support_vectors.resize(n_sv, samples.cols());
  model.alphas.resize(n_sv);
  for (Eigen::Index i = 0, s = 0; i < n; ++i)
    if (alpha[i] > 0.0) {
      model.support_vectors.row(s) = samples.row(i);
      model.alphas[s] = alpha[i];
      ++s;
    }
  return model;
}

double decision(const OcsvmModel& m, const Eigen::VectorXd& z) {
  if (z.size() != m.support_vectors.cols())
    throw std::invalid_argument("decision: latent dimension mismatch (" +
                                std::to_string(z.size()) + " vs " +
                                std::to_string(m.support_vectors.cols()) + ")");
  const Eigen::VectorXd d2 =
      (m.support_vectors.rowwise() - z.transpose()).rowwise().squaredNorm();
  return ((-m.gamma * d2.array()).exp() * m.alphas.array()).sum() - m.rho;
}

OcsvmEnsemble fit_ensemble(const Eigen::MatrixXd& latents, int n_models, int n_per_model,
                           double nu, double gamma, std::uint64_t seed,
                           const OcsvmFitOptions& options) {
  const auto n = latents.rows();
  if (n_models < 1) throw std::invalid_argument("fit_ensemble: need at least one model");
  if (n < n_per_model)
    throw std::invalid_argument("fit_ensemble: have " + std::to_string(n) +
                                " latent samples, need " + std::to_string(n_per_model) +
                                " per model");
  OcsvmEnsemble ensemble;
  for (int m = 0; m < n_models; ++m) {
    Rng rng(substream_seed(seed, "ocsvm-subsample", static_cast<std::uint64_t>(m)));
    // partial Fisher-Yates: the first n_per_model entries are a uniform
    // without-replacement draw
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    for (int i = 0; i < n_per_model; ++i) {
      const auto j = i + static_cast<Eigen::Index>(
                             rng.uniform_int(static_cast<std::uint64_t>(n - i)));
      std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
    }
    Eigen::MatrixXd subset(n_per_model, latents.cols());
    for (int i = 0; i < n_per_model; ++i)
      subset.row(i) = latents.row(idx[static_cast<std::size_t>(i)]);
    ensemble.models.push_back(fit_ocsvm(subset, nu, gamma, options));
  }
  return ensemble;
}

double score(const OcsvmEnsemble& e, const Eigen::VectorXd& z) {
  if (e.models.empty()) throw std::invalid_argument("score: empty ensemble");
  double acc = 0.0;
  for (const auto& m : e.models) acc += decision(m, z);
  return acc / static_cast<double>(e.models.size());
}

double anomaly_score(const OcsvmEnsemble& e, const Eigen::VectorXd& z) { return -score(e, z); }

namespace {
constexpr char kModelMagic[4] = {'U', 'A', 'D', 'M'};
constexpr std::uint32_t kModelVersion = 1;
constexpr std::uint32_t kKindOcsvm = 2;
}  // namespace

void save_ocsvm_ensemble(const OcsvmEnsemble& e, const std::filesystem::path& path) {
  ByteWriter w;
  w.magic(kModelMagic);
  w.u32(kModelVersion);
  w.u32(kKindOcsvm);
  w.u32(static_cast<std::uint32_t>(e.models.size()));
  for (const auto& m : e.models) {
    w.u32(static_cast<std::uint32_t>(m.support_vectors.rows()));
    w.u32(static_cast<std::uint32_t>(m.support_vectors.cols()));
    w.f64(m.rho);
    w.f64(m.gamma);
    w.f64(m.nu);
    for (Eigen::Index i = 0; i < m.alphas.size(); ++i) w.f64(m.alphas[i]);
    for (Eigen::Index i = 0; i < m.support_vectors.rows(); ++i)
      for (Eigen::Index j = 0; j < m.support_vectors.cols(); ++j)
        w.f64(m.support_vectors(i, j));
  }
  write_file_bytes(path, w.bytes());
}

OcsvmEnsemble load_ocsvm_ensemble(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  ByteReader r(bytes);
  if (r.magic4() != std::string(kModelMagic, 4))
    throw std::runtime_error(path.string() + ": bad magic (expected UADM)");
  if (r.u32() != kModelVersion) throw std::runtime_error(path.string() + ": unsupported version");
  if (r.u32() != kKindOcsvm)
    throw std::runtime_error(path.string() + ": not an OC-SVM ensemble checkpoint");
  OcsvmEnsemble e;
  const std::uint32_t n_models = r.u32();
  for (std::uint32_t k = 0; k < n_models; ++k) {
    OcsvmModel m;
    const std::uint32_t n_sv = r.u32();
    const std::uint32_t dim = r.u32();
    m.rho = r.f64();
    m.gamma = r.f64();
    m.nu = r.f64();
    m.alphas.resize(n_sv);
    for (std::uint32_t i = 0; i < n_sv; ++i) m.alphas[i] = r.f64();
    m.support_vectors.resize(n_sv, dim);
    for (std::uint32_t i = 0; i < n_sv; ++i)
      for (std::uint32_t j = 0; j < dim; ++j) m.support_vectors(i, j) = r.f64();
    e.models.push_back(std::move(m));
  }
  return e;
}

}  // namespace uad
