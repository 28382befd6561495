#include "uad/mmst.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "uad/binary_io.hpp"
#include "uad/rng.hpp"

namespace uad {

namespace {
constexpr double kLog2Pi = 1.8378770664093454836;
}

double digamma(double x) {
  if (!(x > 0)) throw std::invalid_argument("digamma: x must be > 0");
  double result = 0.0;
  while (x < 6.0) {
    result -= 1.0 / x;
    x += 1.0;
  }
  const double inv = 1.0 / x, inv2 = inv * inv;
  result += std::log(x) - 0.5 * inv -
            inv2 * (1.0 / 12.0 - inv2 * (1.0 / 120.0 - inv2 / 252.0));
  return result;
}

double trigamma(double x) {
  if (!(x > 0)) throw std::invalid_argument("trigamma: x must be > 0");
  double result = 0.0;
  while (x < 6.0) {
    result += 1.0 / (x * x);
    x += 1.0;
  }
  const double inv = 1.0 / x, inv2 = inv * inv;
  result += inv * (1.0 + 0.5 * inv + inv2 * (1.0 / 6.0 - inv2 * (1.0 / 30.0 - inv2 / 42.0)));
  return result;
}

namespace {

void check_params(const MstParams& p) {
  const int M = p.dim();
  if (p.D.rows() != M || p.D.cols() != M || p.A.size() != M || p.alpha.size() != M ||
      p.beta.size() != M)
    throw std::invalid_argument("MstParams: inconsistent dimensions");
}

// per-direction log density terms for y = D'(z - mu)
double mst_logpdf_y(const MstParams& p, const Eigen::VectorXd& y) {
  double acc = 0.0;
  for (int m = 0; m < p.dim(); ++m) {
    const double a = p.alpha[m], b = p.beta[m], A = p.A[m];
    acc += std::lgamma(a + 0.5) - std::lgamma(a) - 0.5 * (kLog2Pi + std::log(A)) +
           a * std::log(b) - (a + 0.5) * std::log(b + y[m] * y[m] / (2.0 * A));
  }
  return acc;
}

}  // namespace

double mst_logpdf(const MstParams& p, const Eigen::VectorXd& z) {
  check_params(p);
  if (z.size() != p.dim())
    throw std::invalid_argument("mst_logpdf: dimension mismatch");
  if (!z.allFinite()) throw std::invalid_argument("mst_logpdf: non-finite input");
  return mst_logpdf_y(p, p.D.transpose() * (z - p.mu));
}

double mmst_logpdf(const MmstParams& P, const Eigen::VectorXd& z) {
  if (P.K() == 0) throw std::invalid_argument("mmst_logpdf: empty mixture");
  Eigen::VectorXd terms(P.K());
  for (int k = 0; k < P.K(); ++k)
    terms[k] = std::log(P.weights[k]) + mst_logpdf(P.components[k], z);
  const double mx = terms.maxCoeff();
  return mx + std::log((terms.array() - mx).exp().sum());
}

Eigen::VectorXd responsibilities(const MmstParams& P, const Eigen::VectorXd& z) {
  Eigen::VectorXd terms(P.K());
  for (int k = 0; k < P.K(); ++k)
    terms[k] = std::log(P.weights[k]) + mst_logpdf(P.components[k], z);
  const double mx = terms.maxCoeff();
  Eigen::VectorXd r = (terms.array() - mx).exp();
  r /= r.sum();
  return r;
}

Eigen::VectorXd scale_expectation(const MmstParams& P, const Eigen::VectorXd& z) {
  const Eigen::VectorXd r = responsibilities(P, z);
  Eigen::VectorXd w_bar = Eigen::VectorXd::Zero(P.dim());
  for (int k = 0; k < P.K(); ++k) {
    const auto& p = P.components[k];
    const Eigen::VectorXd y = p.D.transpose() * (z - p.mu);
    for (int m = 0; m < P.dim(); ++m)
      w_bar[m] += r[k] * (p.alpha[m] + 0.5) / (p.beta[m] + y[m] * y[m] / (2.0 * p.A[m]));
  }
  return w_bar;
}

double proximity(const MmstParams& P, const Eigen::VectorXd& z) {
  return scale_expectation(P, z).maxCoeff();
}

double anomaly_score(const MmstParams& P, const Eigen::VectorXd& z) { return -proximity(P, z); }

MmstParams init_params(const Eigen::MatrixXd& samples, int K, std::uint64_t seed) {
  const Eigen::Index n = samples.rows();
  const int M = static_cast<int>(samples.cols());
  if (K < 1) throw std::invalid_argument("init_params: K must be >= 1");
  if (n < K) throw std::invalid_argument("init_params: fewer samples than components");

  Rng rng(substream_seed(seed, "mmst-init"));

  // subsample for seeding
  const Eigen::Index sub_n = std::min<Eigen::Index>(n, 4096);
  std::vector<Eigen::Index> subset(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) subset[static_cast<std::size_t>(i)] = i;
  rng.shuffle(subset);
  subset.resize(static_cast<std::size_t>(sub_n));

  // k-means++ seeding over distinct points
  std::vector<Eigen::Index> centers;
  centers.push_back(subset[0]);
  Eigen::VectorXd d2 = Eigen::VectorXd::Constant(sub_n, std::numeric_limits<double>::infinity());
  while (static_cast<int>(centers.size()) < K) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < sub_n; ++i) {
      const double d =
          (samples.row(subset[static_cast<std::size_t>(i)]) - samples.row(centers.back()))
              .squaredNorm();
      d2[i] = std::min(d2[i], d);
      total += d2[i];
    }
    if (!(total > 0))
      throw std::runtime_error("init_params: fewer than K distinct samples");
    double u = rng.uniform() * total;
    Eigen::Index pick = sub_n - 1;
    for (Eigen::Index i = 0; i < sub_n; ++i) {
      u -= d2[i];
      if (u <= 0) {
        pick = i;
        break;
      }
    }
    centers.push_back(subset[static_cast<std::size_t>(pick)]);
  }

  Eigen::MatrixXd mu(K, M);
  for (int k = 0; k < K; ++k) mu.row(k) = samples.row(centers[static_cast<std::size_t>(k)]);

  // a few Lloyd sweeps on the subsample to settle the seeds
  std::vector<int> assign(static_cast<std::size_t>(sub_n), 0);
  for (int sweep = 0; sweep < 5; ++sweep) {
    for (Eigen::Index i = 0; i < sub_n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (int k = 0; k < K; ++k) {
        const double d =
            (samples.row(subset[static_cast<std::size_t>(i)]) - mu.row(k)).squaredNorm();
        if (d < best) {
          best = d;
          assign[static_cast<std::size_t>(i)] = k;
        }
      }
    }
    Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(K, M);
    Eigen::VectorXd cnt = Eigen::VectorXd::Zero(K);
    for (Eigen::Index i = 0; i < sub_n; ++i) {
      acc.row(assign[static_cast<std::size_t>(i)]) += samples.row(subset[static_cast<std::size_t>(i)]);
      cnt[assign[static_cast<std::size_t>(i)]] += 1.0;
    }
    for (int k = 0; k < K; ++k)
      if (cnt[k] > 0) mu.row(k) = acc.row(k) / cnt[k];
  }

  MmstParams P;
  P.weights = Eigen::VectorXd::Constant(K, 1.0 / K);
  for (int k = 0; k < K; ++k) {
    Eigen::MatrixXd scatter = Eigen::MatrixXd::Zero(M, M);
    double cnt = 0.0;
    for (Eigen::Index i = 0; i < sub_n; ++i) {
      if (assign[static_cast<std::size_t>(i)] != k) continue;
      const Eigen::VectorXd d =
          samples.row(subset[static_cast<std::size_t>(i)]).transpose() - mu.row(k).transpose();
      scatter.noalias() += d * d.transpose();
      cnt += 1.0;
    }
    if (cnt > 0) scatter /= cnt;

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(scatter);
    MstParams p;
    p.mu = mu.row(k).transpose();
    p.D = eig.eigenvectors();
    p.A = eig.eigenvalues().cwiseMax(1e-6);
    p.alpha = Eigen::VectorXd::Ones(M);
    p.beta = Eigen::VectorXd::Ones(M);
    P.components.push_back(std::move(p));
  }
  return P;
}

OnlineEmState OnlineEmState::from(MmstParams params) {
  OnlineEmState st;
  const int M = params.dim();
  st.stats.comp.resize(static_cast<std::size_t>(params.K()));
  for (auto& s : st.stats.comp) {
    s.s0 = 0.0;
    s.s1 = Eigen::VectorXd::Zero(M);
    s.s2 = Eigen::VectorXd::Zero(M);
    s.s3 = Eigen::VectorXd::Zero(M);
    s.s4 = Eigen::VectorXd::Zero(M);
    s.scatter = Eigen::MatrixXd::Zero(M, M);
  }
  st.params = std::move(params);
  return st;
}

namespace {

// solve log(a) + 1 - psi(a) + c = 0 for a in [lo, hi]; the left side is
// strictly decreasing from +inf to 1, so a root exists iff c < -1
double solve_shape(double c, double lo, double hi) {
  const auto f = [c](double a) { return std::log(a) + 1.0 - digamma(a) + c; };
  if (f(hi) > 0) return hi;
  if (f(lo) < 0) return lo;
  double a = std::clamp(1.0, lo, hi);
  double blo = lo, bhi = hi;
  for (int it = 0; it < 60; ++it) {
    const double fa = f(a);
    if (fa > 0)
      blo = a;
    else
      bhi = a;
    const double fp = 1.0 / a - trigamma(a);  // negative
    double next = a - fa / fp;
    if (!(next > blo && next < bhi)) next = 0.5 * (blo + bhi);
    if (std::abs(next - a) < 1e-12 * std::max(1.0, a)) return next;
    a = next;
  }
  return a;
}

bool finite(const Eigen::VectorXd& v) { return v.allFinite(); }

}  // namespace

void online_em_step(OnlineEmState& state, const Eigen::VectorXd& z, const OnlineEmOptions& opt) {
  MmstParams& P = state.params;
  const int K = P.K();
  const int M = P.dim();
  if (z.size() != M) throw std::invalid_argument("online_em_step: dimension mismatch");
  if (!(opt.kappa > 0.5 && opt.kappa <= 1.0))
    throw std::invalid_argument("online_em_step: kappa must be in (0.5, 1]");

  const std::int64_t t = state.t + 1;
  const double gamma_t = std::pow(static_cast<double>(t) + opt.t0, -opt.kappa);

  // E step
  Eigen::VectorXd r;
  std::vector<Eigen::VectorXd> y_raw(static_cast<std::size_t>(K));
  std::vector<Eigen::VectorXd> w_hat(static_cast<std::size_t>(K));
  std::vector<Eigen::VectorXd> logw_hat(static_cast<std::size_t>(K));
  try {
    r = responsibilities(P, z);
  } catch (const std::exception&) {
    ++state.rejected;
    return;
  }
  if (!finite(r)) {
    ++state.rejected;
    return;
  }
  for (int k = 0; k < K; ++k) {
    const auto& p = P.components[k];
    const Eigen::VectorXd y = p.D.transpose() * (z - p.mu);
    y_raw[static_cast<std::size_t>(k)] = p.D.transpose() * z;
    Eigen::VectorXd w(M), lw(M);
    for (int m = 0; m < M; ++m) {
      const double b = p.beta[m] + y[m] * y[m] / (2.0 * p.A[m]);
      w[m] = (p.alpha[m] + 0.5) / b;
      lw[m] = digamma(p.alpha[m] + 0.5) - std::log(b);
    }
    w_hat[static_cast<std::size_t>(k)] = std::move(w);
    logw_hat[static_cast<std::size_t>(k)] = std::move(lw);
  }

  // stochastic-approximation update of the averaged statistics
  MmstSuffStats stats = state.stats;
  for (int k = 0; k < K; ++k) {
    auto& s = stats.comp[static_cast<std::size_t>(k)];
    const auto& w = w_hat[static_cast<std::size_t>(k)];
    const auto& y = y_raw[static_cast<std::size_t>(k)];
    const Eigen::VectorXd zc = z - P.components[k].mu;
    s.s0 = (1.0 - gamma_t) * s.s0 + gamma_t * r[k];
    s.s1 = (1.0 - gamma_t) * s.s1 + gamma_t * (r[k] * w.array() * y.array()).matrix();
    s.s2 = (1.0 - gamma_t) * s.s2 +
           gamma_t * (r[k] * w.array() * y.array().square()).matrix();
    s.s3 = (1.0 - gamma_t) * s.s3 + gamma_t * r[k] * w;
    s.s4 = (1.0 - gamma_t) * s.s4 +
           gamma_t * r[k] * logw_hat[static_cast<std::size_t>(k)];
    s.scatter = (1.0 - gamma_t) * s.scatter + gamma_t * r[k] * (zc * zc.transpose());
  }

  if (t <= opt.burn_in) {
    state.stats = std::move(stats);
    state.t = t;
    return;
  }

  // M step from the averaged statistics
  MmstParams cand = P;
  double pi_sum = 0.0;
  for (int k = 0; k < K; ++k) pi_sum += stats.comp[static_cast<std::size_t>(k)].s0;
  bool ok = pi_sum > 0 && std::isfinite(pi_sum);
  for (int k = 0; ok && k < K; ++k) {
    const auto& s = stats.comp[static_cast<std::size_t>(k)];
    auto& p = cand.components[k];
    cand.weights[k] = s.s0 / pi_sum;
    if (!(s.s0 > 0) || !(s.s3.minCoeff() > 0)) {
      ok = false;
      break;
    }
    const Eigen::VectorXd mu_y = s.s1.array() / s.s3.array();
    p.mu = p.D * mu_y;
    p.A = ((s.s2.array() - s.s1.array().square() / s.s3.array()) / s.s0)
              .max(opt.a_floor)
              .matrix();
    for (int m = 0; m < M; ++m) {
      const double c = (s.s4[m] - s.s3[m]) / s.s0;
      p.alpha[m] = solve_shape(c, opt.alpha_min, opt.alpha_max);
      p.beta[m] = p.alpha[m];
    }
    ok = ok && finite(p.mu) && finite(p.A) && finite(p.alpha);
  }

  // periodic direction refresh from the scatter eigensystem; the scale
  // profile is rotated into the new basis (the raw scatter eigenvalues carry
  // an E[1/W] factor, so they set directions only) and s1/s2 re-expressed so
  // the next M step reproduces mu and A
  if (ok && opt.d_refresh_period > 0 && t % opt.d_refresh_period == 0) {
    for (int k = 0; k < K; ++k) {
      auto& s = stats.comp[static_cast<std::size_t>(k)];
      auto& p = cand.components[k];
      if (!(s.s0 > 0)) continue;
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(s.scatter / s.s0);
      if (eig.info() != Eigen::Success) {
        ok = false;
        break;
      }
      const Eigen::MatrixXd d_new = eig.eigenvectors();
      const Eigen::MatrixXd rot = p.D.transpose() * d_new;
      p.A = (rot.array().square().matrix().transpose() * p.A).cwiseMax(opt.a_floor);
      p.D = d_new;
      const Eigen::VectorXd mu_y = p.D.transpose() * p.mu;
      s.s1 = (s.s3.array() * mu_y.array()).matrix();
      s.s2 = (s.s3.array() * mu_y.array().square()).matrix() + s.s0 * p.A;
    }
  }

  if (!ok || !cand.weights.allFinite()) {
    ++state.rejected;
    return;
  }
  state.params = std::move(cand);
  state.stats = std::move(stats);
  state.t = t;
}

MmstFitResult fit_mmst(const Eigen::MatrixXd& latents, const MmstFitConfig& cfg) {
  const Eigen::Index n = latents.rows();
  if (n < cfg.K + cfg.heldout)
    throw std::invalid_argument("fit_mmst: not enough samples (have " + std::to_string(n) + ")");

  Rng rng(substream_seed(cfg.seed, "mmst-split"));
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  rng.shuffle(order);

  const Eigen::Index n_held = std::min<Eigen::Index>(cfg.heldout, n / 4);
  std::vector<Eigen::Index> held(order.begin(), order.begin() + n_held);
  std::vector<Eigen::Index> train(order.begin() + n_held, order.end());
  if (static_cast<Eigen::Index>(train.size()) < cfg.K)
    throw std::invalid_argument("fit_mmst: training stream smaller than K");

  const Eigen::Index n_warm = std::min<Eigen::Index>(cfg.warmup, static_cast<Eigen::Index>(train.size()));
  Eigen::MatrixXd warm(n_warm, latents.cols());
  for (Eigen::Index i = 0; i < n_warm; ++i)
    warm.row(i) = latents.row(train[static_cast<std::size_t>(i)]);

  OnlineEmState state = OnlineEmState::from(init_params(warm, cfg.K, cfg.seed));

  MmstFitResult result;
  for (int pass = 0; pass < std::max(1, cfg.passes); ++pass) {
    Rng pass_rng(substream_seed(cfg.seed, "mmst-pass", static_cast<std::uint64_t>(pass)));
    pass_rng.shuffle(train);
    for (const auto idx : train) online_em_step(state, latents.row(idx).transpose(), cfg.em);

    double acc = 0.0;
    for (const auto idx : held) acc += mmst_logpdf(state.params, latents.row(idx).transpose());
    result.heldout_loglik.push_back(n_held > 0 ? acc / static_cast<double>(n_held) : 0.0);
  }
  result.params = std::move(state.params);
  result.rejected_steps = state.rejected;
  return result;
}

namespace {
constexpr char kModelMagic[4] = {'U', 'A', 'D', 'M'};
constexpr std::uint32_t kModelVersion = 1;
constexpr std::uint32_t kKindMmst = 3;

void write_vec(ByteWriter& w, const Eigen::VectorXd& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) w.f64(v[i]);
}
Eigen::VectorXd read_vec(ByteReader& r, Eigen::Index n) {
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = r.f64();
  return v;
}
}  // namespace

void save_mmst(const MmstParams& P, const std::filesystem::path& path) {
  ByteWriter w;
  w.magic(kModelMagic);
  w.u32(kModelVersion);
  w.u32(kKindMmst);
  w.u32(static_cast<std::uint32_t>(P.K()));
  w.u32(static_cast<std::uint32_t>(P.dim()));
  write_vec(w, P.weights);
  for (const auto& p : P.components) {
    write_vec(w, p.mu);
    for (Eigen::Index j = 0; j < p.D.cols(); ++j) write_vec(w, p.D.col(j));
    write_vec(w, p.A);
    write_vec(w, p.alpha);
    write_vec(w, p.beta);
  }
  write_file_bytes(path, w.bytes());
}

MmstParams load_mmst(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  ByteReader r(bytes);
  if (r.magic4() != std::string(kModelMagic, 4))
    throw std::runtime_error(path.string() + ": bad magic (expected UADM)");
  if (r.u32() != kModelVersion) throw std::runtime_error(path.string() + ": unsupported version");
  if (r.u32() != kKindMmst)
    throw std::runtime_error(path.string() + ": not a mixture checkpoint");
  const std::uint32_t K = r.u32();
  const std::uint32_t M = r.u32();
  MmstParams P;
  P.weights = read_vec(r, K);
  for (std::uint32_t k = 0; k < K; ++k) {
    MstParams p;
    p.mu = read_vec(r, M);
    p.D.resize(M, M);
    for (std::uint32_t j = 0; j < M; ++j) p.D.col(j) = read_vec(r, M);
    p.A = read_vec(r, M);
    p.alpha = read_vec(r, M);
    p.beta = read_vec(r, M);
    P.components.push_back(std::move(p));
  }
  return P;
}

}  // namespace uad
