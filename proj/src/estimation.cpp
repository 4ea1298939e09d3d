#include "fhdgm/estimation.hpp"

#include <Eigen/Cholesky>
#include <Eigen/QR>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <mutex>
#include <thread>
#include <utility>

#include "fhdgm/error.hpp"
#include "fhdgm/rng.hpp"

namespace fhdgm {

namespace {

constexpr double kGClamp = 0.999;
constexpr double kVarianceFloor = 1e-14;
constexpr double kGoldenTol = 1e-4;  // relative bracket width in log space

struct ObsCache {
  int site;
  double h;
  double y;
  bool missing;
  Eigen::VectorXd phi_z;
  Eigen::VectorXd phi_sigma;
  Eigen::VectorXd u;  // x (x) phi_beta, covariate-major
};

// Per-partition immutable description: sub-dataset geometry plus basis
// evaluations, computed once per fit.
struct BlockCache {
  int n = 0;
  std::vector<int> original_sites;
  Eigen::MatrixXd D;
  std::vector<std::vector<ObsCache>> times;
};

// phi_z^T zhat and phi_z^T P phi_z per observation, refreshed each E-step.
struct ObsSmoothCache {
  std::vector<std::vector<double>> zdot;
  std::vector<std::vector<double>> quad;
};

BlockCache make_block_cache(const ProfileDataset& ds, const BasisTriple& bt) {
  BlockCache bc;
  bc.n = ds.n();
  bc.original_sites = ds.original_sites;
  bc.D = distance_matrix(ds.sites);
  bc.times.resize(static_cast<std::size_t>(ds.T));
  const int b = ds.b();
  const int p_beta = bt.for_beta.count();
  for (const auto& rec : ds.records) {
    auto& slice = bc.times[static_cast<std::size_t>(rec.time) - 1];
    for (std::size_t i = 0; i < rec.q(); ++i) {
      ObsCache oc;
      oc.site = rec.site;
      oc.h = rec.h_points[i];
      oc.y = rec.y_values[i];
      oc.missing = is_missing(rec.y_values[i]);
      oc.phi_z = bt.for_z.eval(oc.h);
      oc.phi_sigma = bt.for_sigma.eval(oc.h);
      if (b > 0) {
        const Eigen::VectorXd phi_beta = bt.for_beta.eval(oc.h);
        oc.u.resize(b * p_beta);
        for (int c = 0; c < b; ++c)
          oc.u.segment(c * p_beta, p_beta) =
              rec.covariates[static_cast<std::size_t>(c)][i] * phi_beta;
      } else {
        oc.u.resize(0);
      }
      slice.push_back(std::move(oc));
    }
  }
  return bc;
}

Eigen::MatrixXd assemble_innov_cov(const Eigen::MatrixXd& D, const SpatialParams& sp) {
  const int n = static_cast<int>(D.rows());
  const int p = static_cast<int>(sp.v.size());
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(n * p, n * p);
  const auto blocks = innovation_covariance(D, sp);
  for (int j = 0; j < p; ++j) cov.block(j * n, j * n, n, n) = blocks[static_cast<std::size_t>(j)];
  return cov;
}

StateSpaceSystem make_system(const BlockCache& bc, const ModelParams& params) {
  StateSpaceSystem sys;
  sys.n_sites = bc.n;
  sys.p = static_cast<int>(params.g.size());
  sys.g = params.g;
  sys.innov_cov = assemble_innov_cov(bc.D, params.sp);
  sys.mu0 = Eigen::VectorXd::Zero(sys.state_dim());
  sys.P0 = sys.innov_cov;
  sys.times.resize(bc.times.size());
  for (std::size_t t = 0; t < bc.times.size(); ++t) {
    auto& slice = sys.times[t];
    slice.obs.reserve(bc.times[t].size());
    for (const ObsCache& oc : bc.times[t]) {
      Observation ob;
      ob.site = oc.site;
      ob.h = oc.h;
      ob.y = oc.y;
      ob.offset = oc.u.size() > 0 ? oc.u.dot(params.c_beta) : 0.0;
      ob.meas_var = std::exp(oc.phi_sigma.dot(params.c_eps));
      ob.phi = oc.phi_z;
      slice.obs.push_back(std::move(ob));
    }
  }
  return sys;
}

ObsSmoothCache make_obs_smooth_cache(const BlockCache& bc, const SmootherOutput& sm) {
  ObsSmoothCache c;
  const int n = bc.n;
  c.zdot.resize(bc.times.size());
  c.quad.resize(bc.times.size());
  for (std::size_t t = 0; t < bc.times.size(); ++t) {
    const auto& z = sm.z_smooth[t + 1];
    const auto& P = sm.P_smooth[t + 1];
    c.zdot[t].resize(bc.times[t].size(), 0.0);
    c.quad[t].resize(bc.times[t].size(), 0.0);
    for (std::size_t o = 0; o < bc.times[t].size(); ++o) {
      const ObsCache& oc = bc.times[t][o];
      const int p = static_cast<int>(oc.phi_z.size());
      double zdot = 0.0, quad = 0.0;
      for (int j = 0; j < p; ++j) {
        const int idx = j * n + oc.site;
        zdot += oc.phi_z(j) * z(idx);
        for (int l = 0; l < p; ++l)
          quad += oc.phi_z(j) * oc.phi_z(l) * P(idx, l * n + oc.site);
      }
      c.zdot[t][o] = zdot;
      c.quad[t][o] = quad;
    }
  }
  return c;
}

// Runs one job per block over `workers` threads; results land in index order.
template <typename Fn>
void parallel_blocks(std::size_t count, int workers, Fn&& fn) {
  const int n_threads = std::max(1, std::min<int>(workers, static_cast<int>(count)));
  if (n_threads == 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  std::exception_ptr error;
  std::mutex error_mutex;
  for (int w = 0; w < n_threads; ++w)
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= count) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

// ---- M-step pieces ----------------------------------------------------

Eigen::VectorXd update_c_beta(const std::vector<BlockCache>& blocks,
                              const std::vector<StateSpaceSystem>& systems,
                              const std::vector<ObsSmoothCache>& caches,
                              int dim_beta) {
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(dim_beta, dim_beta);
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(dim_beta);
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const BlockCache& bc = blocks[b];
    for (std::size_t t = 0; t < bc.times.size(); ++t)
      for (std::size_t o = 0; o < bc.times[t].size(); ++o) {
        const ObsCache& oc = bc.times[t][o];
        if (oc.missing) continue;
        const double w = 1.0 / systems[b].times[t].obs[o].meas_var;
        A.selfadjointView<Eigen::Lower>().rankUpdate(oc.u, w);
        rhs.noalias() += (w * (oc.y - caches[b].zdot[t][o])) * oc.u;
      }
  }
  const Eigen::MatrixXd A_full = A.selfadjointView<Eigen::Lower>();
  return A_full.ldlt().solve(rhs);
}

struct LatentBlockStats {
  // per basis component j: within-block n x n moment matrices
  std::vector<Eigen::MatrixXd> S11, S10, S00, Z0;
};

LatentBlockStats latent_block_stats(const BlockCache& bc, int p,
                                    const SufficientStats& st,
                                    const SmootherOutput& sm) {
  LatentBlockStats out;
  const int n = bc.n;
  const auto& z0 = sm.z_smooth[0];
  const auto& P00 = sm.P_smooth[0];
  for (int j = 0; j < p; ++j) {
    out.S11.push_back(st.S11.block(j * n, j * n, n, n));
    out.S10.push_back(st.S10.block(j * n, j * n, n, n));
    out.S00.push_back(st.S00.block(j * n, j * n, n, n));
    Eigen::MatrixXd z0m = z0.segment(j * n, n) * z0.segment(j * n, n).transpose() +
                          P00.block(j * n, j * n, n, n);
    out.Z0.push_back(std::move(z0m));
  }
  return out;
}

double solve_trace(const Eigen::LLT<Eigen::MatrixXd>& llt, const Eigen::MatrixXd& A) {
  return llt.solve(A).trace();
}

double chol_logdet(const Eigen::LLT<Eigen::MatrixXd>& llt) {
  return 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
}

// Exact conditional maximizer of the latent Q-term over g_j given theta_j.
double update_g_component(const std::vector<BlockCache>& blocks,
                          const std::vector<LatentBlockStats>& stats, int j,
                          double theta_old, double g_old) {
  double num = 0.0, den = 0.0;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const Eigen::MatrixXd R = (-blocks[b].D / theta_old).array().exp().matrix();
    const Eigen::LLT<Eigen::MatrixXd> llt(R);
    if (llt.info() != Eigen::Success) return g_old;
    const Eigen::MatrixXd S10s =
        0.5 * (stats[b].S10[static_cast<std::size_t>(j)] +
               stats[b].S10[static_cast<std::size_t>(j)].transpose());
    num += solve_trace(llt, S10s);
    den += solve_trace(llt, stats[b].S00[static_cast<std::size_t>(j)]);
  }
  if (!(den > 0.0) || !std::isfinite(num)) return g_old;
  return std::clamp(num / den, -kGClamp, kGClamp);
}

// Latent Q-term for component j profiled over v: the contribution is
// -(T+1)/2 * (n log v*(theta) + sum_b log|R_b(theta)|) - n(T+1)/2 with
// v*(theta) = sum_b tr(R_b^{-1} A_b) / (n (T+1)). The z_0 ~ N(0, Sigma_eta)
// term is included, hence T+1 transitions.
struct ThetaProfile {
  const std::vector<BlockCache>* blocks;
  std::vector<Eigen::MatrixXd> A;  // per block, n_b x n_b
  int n_total;
  int T;

  // returns profile Q and the profiled v for a candidate theta
  std::pair<double, double> eval(double theta) const {
    double tr_sum = 0.0, logdet_sum = 0.0;
    for (std::size_t b = 0; b < blocks->size(); ++b) {
      const Eigen::MatrixXd R = (-(*blocks)[b].D / theta).array().exp().matrix();
      const Eigen::LLT<Eigen::MatrixXd> llt(R);
      if (llt.info() != Eigen::Success)
        return {-std::numeric_limits<double>::infinity(), 0.0};
      tr_sum += solve_trace(llt, A[b]);
      logdet_sum += chol_logdet(llt);
    }
    const double denom = static_cast<double>(n_total) * (T + 1);
    const double v = std::max(tr_sum / denom, kVarianceFloor);
    const double q = -0.5 * (T + 1) * (n_total * std::log(v) + logdet_sum) - 0.5 * denom;
    return std::isfinite(q) ? std::make_pair(q, v)
                            : std::make_pair(-std::numeric_limits<double>::infinity(), v);
  }
};

// Golden-section search in log(theta) over [1e-3, 3] * max_distance; the old
// theta is kept whenever it scores better than the search result.
std::pair<double, double> update_v_theta_component(const ThetaProfile& profile,
                                                   double max_distance,
                                                   double theta_old) {
  const double lo_bound = 1e-3 * max_distance;
  const double hi_bound = 3.0 * max_distance;
  double lo = std::log(lo_bound), hi = std::log(hi_bound);
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;

  double x1 = hi - inv_phi * (hi - lo);
  double x2 = lo + inv_phi * (hi - lo);
  double f1 = profile.eval(std::exp(x1)).first;
  double f2 = profile.eval(std::exp(x2)).first;
  while (hi - lo > kGoldenTol) {
    if (f1 >= f2) {
      hi = x2;
      x2 = x1;
      f2 = f1;
      x1 = hi - inv_phi * (hi - lo);
      f1 = profile.eval(std::exp(x1)).first;
    } else {
      lo = x1;
      x1 = x2;
      f1 = f2;
      x2 = lo + inv_phi * (hi - lo);
      f2 = profile.eval(std::exp(x2)).first;
    }
  }
  double theta_best = std::exp(0.5 * (lo + hi));
  auto [q_best, v_best] = profile.eval(theta_best);

  const double theta_old_clamped = std::clamp(theta_old, lo_bound, hi_bound);
  const auto [q_old, v_old] = profile.eval(theta_old_clamped);
  if (q_old > q_best) return {theta_old_clamped, v_old};
  return {theta_best, v_best};
}

// One guarded Fisher-scoring step on the measurement-variance coefficients.
Eigen::VectorXd update_c_eps(const std::vector<BlockCache>& blocks,
                             const std::vector<ObsSmoothCache>& caches,
                             const Eigen::VectorXd& c_beta,
                             const Eigen::VectorXd& c_eps_old) {
  const int p_sigma = static_cast<int>(c_eps_old.size());
  // collect (phi_sigma, m) pairs with m the expected squared residual
  std::vector<std::pair<Eigen::VectorXd, double>> items;
  for (std::size_t b = 0; b < blocks.size(); ++b)
    for (std::size_t t = 0; t < blocks[b].times.size(); ++t)
      for (std::size_t o = 0; o < blocks[b].times[t].size(); ++o) {
        const ObsCache& oc = blocks[b].times[t][o];
        if (oc.missing) continue;
        const double offset = oc.u.size() > 0 ? oc.u.dot(c_beta) : 0.0;
        const double e = oc.y - offset - caches[b].zdot[t][o];
        items.emplace_back(oc.phi_sigma, e * e + caches[b].quad[t][o]);
      }

  auto q_term = [&](const Eigen::VectorXd& c) {
    double q = 0.0;
    for (const auto& [phi, m] : items) {
      const double lp = phi.dot(c);
      q += -0.5 * lp - 0.5 * m * std::exp(-lp);
    }
    return q;
  };

  Eigen::MatrixXd info = Eigen::MatrixXd::Zero(p_sigma, p_sigma);
  Eigen::VectorXd score = Eigen::VectorXd::Zero(p_sigma);
  for (const auto& [phi, m] : items) {
    info.selfadjointView<Eigen::Lower>().rankUpdate(phi, 0.5);
    score.noalias() += 0.5 * (m * std::exp(-phi.dot(c_eps_old)) - 1.0) * phi;
  }
  const Eigen::MatrixXd info_full = info.selfadjointView<Eigen::Lower>();
  const Eigen::VectorXd direction = info_full.ldlt().solve(score);
  if (!direction.allFinite()) return c_eps_old;

  // step halving keeps this a Q-ascent (generalized EM) step
  const double q0 = q_term(c_eps_old);
  double alpha = 1.0;
  for (int halving = 0; halving < 40; ++halving) {
    const Eigen::VectorXd candidate = c_eps_old + alpha * direction;
    if (q_term(candidate) >= q0) return candidate;
    alpha *= 0.5;
  }
  return c_eps_old;
}

double max_relative_change(const Eigen::VectorXd& now, const Eigen::VectorXd& before) {
  double worst = 0.0;
  for (Eigen::Index l = 0; l < now.size(); ++l) {
    const double diff = std::abs(now(l) - before(l));
    if (diff == 0.0) continue;
    const double denom = std::abs(now(l));
    worst = std::max(worst, denom == 0.0 ? std::numeric_limits<double>::infinity()
                                         : diff / denom);
  }
  return worst;
}

}  // namespace

// ---- params / layout ---------------------------------------------------

void ModelParams::validate() const {
  if (c_eps.size() < 1) throw ArgumentError("c_eps must be non-empty");
  if (g.size() < 1) throw ArgumentError("g must be non-empty");
  sp.validate();
  if (sp.v.size() != g.size())
    throw ArgumentError("v/theta length must match g length");
  for (Eigen::Index j = 0; j < g.size(); ++j)
    if (!(std::abs(g(j)) < 1.0))
      throw ArgumentError("|g_j| < 1 required for stationarity");
}

ParamLayout ParamLayout::of(const ModelParams& params) {
  ParamLayout l;
  l.p_sigma = static_cast<int>(params.c_eps.size());
  l.p = static_cast<int>(params.g.size());
  if (params.c_beta.size() > 0) {
    // covariate count is not recoverable from the vector alone; callers that
    // need per-covariate labels use the dataset. Treat as one group here.
    l.n_cov = 1;
    l.p_beta = static_cast<int>(params.c_beta.size());
  }
  return l;
}

std::vector<std::pair<std::string, int>> ParamLayout::labels(
    const std::vector<std::string>& covariate_names) const {
  std::vector<std::pair<std::string, int>> out;
  for (int i = 0; i < p_sigma; ++i) out.emplace_back("c_eps", i);
  if (!covariate_names.empty()) {
    const int per = n_cov * p_beta / static_cast<int>(covariate_names.size());
    for (const auto& name : covariate_names)
      for (int i = 0; i < per; ++i) out.emplace_back("c_beta_" + name, i);
  } else {
    for (int i = 0; i < n_cov * p_beta; ++i) out.emplace_back("c_beta", i);
  }
  for (int i = 0; i < p; ++i) out.emplace_back("g", i);
  for (int i = 0; i < p; ++i) out.emplace_back("v", i);
  for (int i = 0; i < p; ++i) out.emplace_back("theta", i);
  return out;
}

Eigen::VectorXd flatten(const ModelParams& params) {
  Eigen::VectorXd psi(params.c_eps.size() + params.c_beta.size() + 3 * params.g.size());
  Eigen::Index at = 0;
  psi.segment(at, params.c_eps.size()) = params.c_eps;
  at += params.c_eps.size();
  psi.segment(at, params.c_beta.size()) = params.c_beta;
  at += params.c_beta.size();
  psi.segment(at, params.g.size()) = params.g;
  at += params.g.size();
  psi.segment(at, params.sp.v.size()) = params.sp.v;
  at += params.sp.v.size();
  psi.segment(at, params.sp.theta.size()) = params.sp.theta;
  return psi;
}

ModelParams unflatten(const Eigen::VectorXd& psi, const ParamLayout& layout) {
  if (psi.size() != layout.dim()) throw ArgumentError("parameter vector length mismatch");
  ModelParams out;
  out.c_eps = psi.segment(layout.c_eps_offset(), layout.p_sigma);
  out.c_beta = psi.segment(layout.c_beta_offset(), layout.n_cov * layout.p_beta);
  out.g = psi.segment(layout.g_offset(), layout.p);
  out.sp.v = psi.segment(layout.v_offset(), layout.p);
  out.sp.theta = psi.segment(layout.theta_offset(), layout.p);
  return out;
}

std::string to_string(ExitReason r) {
  switch (r) {
    case ExitReason::par_toll: return "par_toll";
    case ExitReason::loglik_toll: return "loglik_toll";
    case ExitReason::max_iter: return "max_iter";
  }
  return "?";
}

// ---- public operations ---------------------------------------------------

StateSpaceSystem build_system(const ProfileDataset& ds, const BasisTriple& bt,
                              const ModelParams& params) {
  params.validate();
  if (ds.b() > 0 &&
      static_cast<int>(params.c_beta.size()) != ds.b() * bt.for_beta.count())
    throw ArgumentError("c_beta length must be b * p_beta = " +
                        std::to_string(ds.b() * bt.for_beta.count()));
  if (ds.b() == 0 && params.c_beta.size() != 0)
    throw ArgumentError("dataset has no covariates but c_beta is non-empty");
  if (static_cast<int>(params.c_eps.size()) != bt.for_sigma.count())
    throw ArgumentError("c_eps length must equal the sigma basis count");
  const BlockCache bc = make_block_cache(ds, bt);
  StateSpaceSystem sys = make_system(bc, params);
  sys.validate();
  return sys;
}

ModelParams initialize(const ProfileDataset& ds, const BasisTriple& bt) {
  if (ds.records.empty()) throw ArgumentError("cannot initialize from an empty dataset");
  const int b = ds.b();
  const int p_beta = bt.for_beta.count();
  const int p_sigma = bt.for_sigma.count();
  const int p = bt.for_z.count();
  const int dim_beta = b * p_beta;

  std::vector<double> ys;
  std::vector<Eigen::VectorXd> us, phis;
  for (const auto& rec : ds.records)
    for (std::size_t i = 0; i < rec.q(); ++i) {
      if (is_missing(rec.y_values[i])) continue;
      ys.push_back(rec.y_values[i]);
      phis.push_back(bt.for_sigma.eval(rec.h_points[i]));
      if (b > 0) {
        const Eigen::VectorXd phi_beta = bt.for_beta.eval(rec.h_points[i]);
        Eigen::VectorXd u(dim_beta);
        for (int c = 0; c < b; ++c)
          u.segment(c * p_beta, p_beta) =
              rec.covariates[static_cast<std::size_t>(c)][i] * phi_beta;
        us.push_back(std::move(u));
      }
    }
  const Eigen::Index n_obs = static_cast<Eigen::Index>(ys.size());
  if (n_obs == 0) throw ArgumentError("dataset has no observed y values");

  ModelParams params;
  Eigen::VectorXd residuals(n_obs);
  if (dim_beta > 0) {
    Eigen::MatrixXd X(n_obs, dim_beta);
    Eigen::VectorXd yv(n_obs);
    for (Eigen::Index i = 0; i < n_obs; ++i) {
      X.row(i) = us[static_cast<std::size_t>(i)].transpose();
      yv(i) = ys[static_cast<std::size_t>(i)];
    }
    const Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
    if (qr.rank() < dim_beta)
      throw NumericError(
          "design matrix for beta is rank-deficient; use fewer beta basis functions");
    params.c_beta = qr.solve(yv);
    residuals = yv - X * params.c_beta;
  } else {
    params.c_beta.resize(0);
    for (Eigen::Index i = 0; i < n_obs; ++i) residuals(i) = ys[static_cast<std::size_t>(i)];
  }

  // log squared residuals on the sigma basis, floored to stay finite
  Eigen::MatrixXd Phi(n_obs, p_sigma);
  Eigen::VectorXd logr(n_obs);
  for (Eigen::Index i = 0; i < n_obs; ++i) {
    Phi.row(i) = phis[static_cast<std::size_t>(i)].transpose();
    logr(i) = std::log(residuals(i) * residuals(i) + 1e-6);
  }
  const Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr_sigma(Phi);
  if (qr_sigma.rank() < p_sigma)
    throw NumericError(
        "sigma basis is rank-deficient over the observed h points; use fewer "
        "sigma basis functions");
  params.c_eps = qr_sigma.solve(logr);

  params.g = Eigen::VectorXd::Constant(p, 0.5);
  const double mean_r = residuals.mean();
  double var_r = 0.0;
  for (Eigen::Index i = 0; i < n_obs; ++i)
    var_r += (residuals(i) - mean_r) * (residuals(i) - mean_r);
  var_r = n_obs > 1 ? var_r / static_cast<double>(n_obs - 1) : 1.0;
  params.sp.v = Eigen::VectorXd::Constant(p, std::max(var_r, 1e-6));

  const Eigen::MatrixXd D = distance_matrix(ds.sites);
  const double dmax = D.maxCoeff();
  params.sp.theta = Eigen::VectorXd::Constant(p, dmax > 0.0 ? 0.25 * dmax : 1.0);
  return params;
}

FitResult em_fit(const ProfileDataset& ds, const BasisTriple& bt,
                 const ModelParams& init, const EmOptions& opts) {
  init.validate();
  if (opts.max_iterations < 1) throw ArgumentError("max_iterations must be >= 1");
  if (!(opts.exit_toll_par > 0.0) || !(opts.exit_toll_loglike > 0.0))
    throw ArgumentError("exit tolerances must be positive");

  // partition blocks (a single block when no partitioning was requested)
  std::vector<ProfileDataset> block_data;
  if (opts.partitions) {
    if (static_cast<int>(opts.partitions->assignment.size()) != ds.n())
      throw ArgumentError("partitioning does not match the dataset site count");
    block_data = partition_dataset(ds, *opts.partitions);
  } else {
    block_data.push_back(ds);
  }
  const std::size_t n_blocks = block_data.size();

  std::vector<BlockCache> blocks;
  blocks.reserve(n_blocks);
  for (const auto& bd : block_data) blocks.push_back(make_block_cache(bd, bt));

  const double dmax_global = distance_matrix(ds.sites).maxCoeff();
  const double max_distance = dmax_global > 0.0 ? dmax_global : 1.0;
  const int p = bt.for_z.count();
  const int dim_beta = ds.b() * bt.for_beta.count();
  const int T = ds.T;

  ModelParams params = init;
  std::vector<StateSpaceSystem> systems(n_blocks);
  std::vector<SmootherOutput> smoothers(n_blocks);
  std::vector<ObsSmoothCache> caches(n_blocks);

  auto e_step = [&]() {
    parallel_blocks(n_blocks, opts.workers, [&](std::size_t b) {
      systems[b] = make_system(blocks[b], params);
      smoothers[b] = kalman_smoother(systems[b]);
      caches[b] = make_obs_smooth_cache(blocks[b], smoothers[b]);
    });
    double ll = 0.0;
    for (const auto& sm : smoothers) ll += sm.loglik;
    return ll;
  };

  FitResult result;
  double ll_old = e_step();
  result.loglik_trace.push_back(ll_old);
  Eigen::VectorXd psi_old = flatten(params);

  int iter = 0;
  ExitReason reason = ExitReason::max_iter;
  for (iter = 1; iter <= opts.max_iterations; ++iter) {
    // latent moments per block
    std::vector<LatentBlockStats> lstats(n_blocks);
    parallel_blocks(n_blocks, opts.workers, [&](std::size_t b) {
      const SufficientStats st = expected_sufficient_stats(systems[b], smoothers[b]);
      lstats[b] = latent_block_stats(blocks[b], p, st, smoothers[b]);
    });

    // (a) regression coefficients
    if (dim_beta > 0) params.c_beta = update_c_beta(blocks, systems, caches, dim_beta);

    // (b) transition coefficients, (c)+(d) innovation variance and range
    int n_total = 0;
    for (const auto& bc : blocks) n_total += bc.n;
    for (int j = 0; j < p; ++j) {
      params.g(j) = update_g_component(blocks, lstats, j, params.sp.theta(j), params.g(j));
      ThetaProfile profile;
      profile.blocks = &blocks;
      profile.n_total = n_total;
      profile.T = T;
      profile.A.reserve(n_blocks);
      const double gj = params.g(j);
      for (std::size_t b = 0; b < n_blocks; ++b) {
        const auto& s = lstats[b];
        Eigen::MatrixXd A =
            s.S11[static_cast<std::size_t>(j)] -
            gj * (s.S10[static_cast<std::size_t>(j)] +
                  s.S10[static_cast<std::size_t>(j)].transpose()) +
            gj * gj * s.S00[static_cast<std::size_t>(j)] + s.Z0[static_cast<std::size_t>(j)];
        profile.A.push_back(std::move(A));
      }
      const auto [theta_j, v_j] = update_v_theta_component(profile, max_distance,
                                                           params.sp.theta(j));
      params.sp.theta(j) = theta_j;
      params.sp.v(j) = v_j;
    }

    // (e) measurement-variance coefficients (one guarded scoring step)
    params.c_eps = update_c_eps(blocks, caches, params.c_beta, params.c_eps);

    if (!flatten(params).allFinite())
      throw NumericError("non-finite parameter after M-step at iteration " +
                         std::to_string(iter));

    const double ll_new = e_step();
    result.loglik_trace.push_back(ll_new);
    if (ll_new < ll_old - 1e-6)
      throw NumericError("log-likelihood decreased at iteration " + std::to_string(iter) +
                         " (" + std::to_string(ll_old) + " -> " + std::to_string(ll_new) +
                         ")");

    const Eigen::VectorXd psi_new = flatten(params);
    const double par_change = max_relative_change(psi_new, psi_old);
    const double ll_change = std::abs(ll_new - ll_old) / std::abs(ll_new);
    psi_old = psi_new;
    ll_old = ll_new;
    if (par_change < opts.exit_toll_par) {
      reason = ExitReason::par_toll;
      break;
    }
    if (ll_change < opts.exit_toll_loglike) {
      reason = ExitReason::loglik_toll;
      break;
    }
  }
  if (iter > opts.max_iterations) {
    iter = opts.max_iterations;
    reason = ExitReason::max_iter;
  }

  result.params = params;
  result.iterations = iter;
  result.exit_reason = reason;
  result.block_smoothers = std::move(smoothers);
  for (const auto& bc : blocks) result.block_sites.push_back(bc.original_sites);
  return result;
}

Eigen::VectorXd FitResult::smoothed_state(int site, int t) const {
  for (std::size_t b = 0; b < block_sites.size(); ++b) {
    const auto& sites = block_sites[b];
    const auto it = std::find(sites.begin(), sites.end(), site);
    if (it == sites.end()) continue;
    const int local = static_cast<int>(it - sites.begin());
    const int n = static_cast<int>(sites.size());
    const auto& z = block_smoothers[b].z_smooth[static_cast<std::size_t>(t)];
    const int p = static_cast<int>(z.size()) / n;
    Eigen::VectorXd out(p);
    for (int j = 0; j < p; ++j) out(j) = z(j * n + local);
    return out;
  }
  throw ArgumentError("site index not covered by the fit");
}

Eigen::MatrixXd FitResult::smoothed_cov(int site, int t) const {
  for (std::size_t b = 0; b < block_sites.size(); ++b) {
    const auto& sites = block_sites[b];
    const auto it = std::find(sites.begin(), sites.end(), site);
    if (it == sites.end()) continue;
    const int local = static_cast<int>(it - sites.begin());
    const int n = static_cast<int>(sites.size());
    const auto& P = block_smoothers[b].P_smooth[static_cast<std::size_t>(t)];
    const int p = static_cast<int>(P.rows()) / n;
    Eigen::MatrixXd out(p, p);
    for (int j = 0; j < p; ++j)
      for (int l = 0; l < p; ++l) out(j, l) = P(j * n + local, l * n + local);
    return out;
  }
  throw ArgumentError("site index not covered by the fit");
}

ProfileDataset simulate(const ProfileDataset& ds_template, const BasisTriple& bt,
                        const ModelParams& params, std::uint64_t seed) {
  params.validate();
  const int n = ds_template.n();
  const int p = static_cast<int>(params.g.size());
  const Eigen::MatrixXd D = distance_matrix(ds_template.sites);
  const auto cov_blocks = innovation_covariance(D, params.sp);
  std::vector<Eigen::MatrixXd> chol;
  chol.reserve(static_cast<std::size_t>(p));
  for (const auto& block : cov_blocks) {
    Eigen::LLT<Eigen::MatrixXd> llt(block);
    if (llt.info() != Eigen::Success)
      throw NumericError("innovation covariance is not positive definite");
    chol.push_back(llt.matrixL());
  }

  Rng rng(seed);
  auto draw_block_field = [&](Eigen::MatrixXd& z) {
    // one n-vector per basis component, columns of z (n x p)
    Eigen::VectorXd white(n);
    for (int j = 0; j < p; ++j) {
      for (int i = 0; i < n; ++i) white(i) = rng.normal();
      z.col(j) = chol[static_cast<std::size_t>(j)] * white;
    }
  };

  Eigen::MatrixXd z(n, p);
  draw_block_field(z);  // z_0 ~ N(0, Sigma_eta)
  std::vector<Eigen::MatrixXd> z_at(static_cast<std::size_t>(ds_template.T) + 1);
  z_at[0] = z;
  Eigen::MatrixXd eta(n, p);
  for (int t = 1; t <= ds_template.T; ++t) {
    draw_block_field(eta);
    for (int j = 0; j < p; ++j) z.col(j) = params.g(j) * z.col(j) + eta.col(j);
    z_at[static_cast<std::size_t>(t)] = z;
  }

  ProfileDataset out = ds_template;
  const int b = out.b();
  const int p_beta = bt.for_beta.count();
  for (auto& rec : out.records) {
    const Eigen::MatrixXd& zt = z_at[static_cast<std::size_t>(rec.time)];
    for (std::size_t i = 0; i < rec.q(); ++i) {
      const double h = rec.h_points[i];
      const Eigen::VectorXd phi_z = bt.for_z.eval(h);
      double mean = 0.0;
      if (b > 0) {
        const Eigen::VectorXd phi_beta = bt.for_beta.eval(h);
        for (int c = 0; c < b; ++c)
          mean += rec.covariates[static_cast<std::size_t>(c)][i] *
                  phi_beta.dot(params.c_beta.segment(c * p_beta, p_beta));
      }
      for (int j = 0; j < p; ++j) mean += phi_z(j) * zt(rec.site, j);
      const double sd =
          std::sqrt(std::exp(bt.for_sigma.eval(h).dot(params.c_eps)));
      rec.y_values[i] = mean + sd * rng.normal();
    }
  }
  return out;
}

}  // namespace fhdgm
