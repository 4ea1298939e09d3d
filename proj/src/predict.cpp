#include "fhdgm/predict.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <mutex>
#include <numeric>
#include <thread>

#include "fhdgm/error.hpp"
#include "fhdgm/spatial.hpp"

namespace fhdgm {

namespace {

// Smoothed latent state of every target for all times, conditioned on the
// data at the neighbor-union sites.
struct TargetStates {
  // [target][t] with t = 1..T at index t-1
  std::vector<std::vector<Eigen::VectorXd>> z;
  std::vector<std::vector<Eigen::MatrixXd>> P;
};

TargetStates smooth_targets(const FittedModel& model,
                            const std::vector<Coordinate>& targets, int nn_size) {
  const ProfileDataset& ds = model.data;
  const int n = ds.n();
  const int p = model.basis.for_z.count();
  const int eff_nn = nn_size <= 0 ? n : std::min(nn_size, n);

  // union of nearest-neighbor sets over the block's targets
  std::vector<bool> in_union(static_cast<std::size_t>(n), false);
  for (const auto& target : targets)
    for (const int s : nearest_neighbors(ds.sites, target, eff_nn))
      in_union[static_cast<std::size_t>(s)] = true;
  std::vector<int> cond_sites;
  for (int s = 0; s < n; ++s)
    if (in_union[static_cast<std::size_t>(s)]) cond_sites.push_back(s);

  ProfileDataset aug = subset_sites(ds, cond_sites);

  // targets coinciding with a conditioning site (or with a previous target)
  // alias to that state instead of being added, so the augmented covariance
  // stays positive definite
  std::vector<int> target_state(targets.size(), -1);
  for (std::size_t j = 0; j < targets.size(); ++j) {
    for (int s = 0; s < static_cast<int>(aug.sites.size()); ++s)
      if (aug.sites[static_cast<std::size_t>(s)].same_location(targets[j])) {
        target_state[j] = s;
        break;
      }
    if (target_state[j] == -1) {
      target_state[j] = static_cast<int>(aug.sites.size());
      aug.sites.push_back(targets[j]);
      aug.original_sites.push_back(-1);
    }
  }

  const StateSpaceSystem sys = build_system(aug, model.basis, model.params);
  const SmootherOutput sm = kalman_smoother(sys);

  const int n_aug = static_cast<int>(aug.sites.size());
  TargetStates out;
  out.z.resize(targets.size());
  out.P.resize(targets.size());
  for (std::size_t j = 0; j < targets.size(); ++j) {
    const int local = target_state[j];
    out.z[j].resize(static_cast<std::size_t>(ds.T));
    out.P[j].resize(static_cast<std::size_t>(ds.T));
    for (int t = 1; t <= ds.T; ++t) {
      const auto& zfull = sm.z_smooth[static_cast<std::size_t>(t)];
      const auto& Pfull = sm.P_smooth[static_cast<std::size_t>(t)];
      Eigen::VectorXd z(p);
      Eigen::MatrixXd P(p, p);
      for (int a = 0; a < p; ++a) {
        z(a) = zfull(a * n_aug + local);
        for (int b = 0; b < p; ++b) P(a, b) = Pfull(a * n_aug + local, b * n_aug + local);
      }
      out.z[j][static_cast<std::size_t>(t) - 1] = std::move(z);
      out.P[j][static_cast<std::size_t>(t) - 1] = std::move(P);
    }
  }
  return out;
}

double covariate_term(const FittedModel& model, const Eigen::VectorXd& x, double h) {
  const int b = model.data.b();
  const int p_beta = model.basis.for_beta.count();
  if (x.size() != b)
    throw ArgumentError("covariate vector length mismatch (expected " +
                        std::to_string(b) + ")");
  const Eigen::VectorXd phi = model.basis.for_beta.eval(h);
  double term = 0.0;
  for (int c = 0; c < b; ++c)
    term += x(c) * phi.dot(model.params.c_beta.segment(c * p_beta, p_beta));
  return term;
}

}  // namespace

KrigingGrid KrigingGrid::list(std::vector<Coordinate> targets) {
  if (targets.empty()) throw ArgumentError("kriging target list is empty");
  KrigingGrid g;
  g.targets = std::move(targets);
  return g;
}

KrigingGrid KrigingGrid::regular(double lat0, double lat1, double lat_step,
                                 double lon0, double lon1, double lon_step,
                                 Unit unit) {
  if (!(lat_step > 0.0) || !(lon_step > 0.0))
    throw ArgumentError("grid steps must be positive");
  KrigingGrid g;
  for (double lat = lat0; lat <= lat1 + 1e-12 * lat_step; lat += lat_step) {
    ++g.rows;
    g.cols = 0;
    for (double lon = lon0; lon <= lon1 + 1e-12 * lon_step; lon += lon_step) {
      ++g.cols;
      Coordinate c{lat, lon, unit};
      c.validate();
      g.targets.push_back(c);
    }
  }
  if (g.targets.empty()) throw ArgumentError("empty kriging grid");
  return g;
}

std::vector<int> nearest_neighbors(const std::vector<Coordinate>& sites,
                                   const Coordinate& target, int nn_size) {
  const int n = static_cast<int>(sites.size());
  if (nn_size < 1 || nn_size > n)
    throw ArgumentError("nn_size must lie in [1, n]");
  std::vector<std::pair<double, int>> by_dist;
  by_dist.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    by_dist.emplace_back(distance(sites[static_cast<std::size_t>(i)], target), i);
  std::sort(by_dist.begin(), by_dist.end());
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(nn_size));
  for (int i = 0; i < nn_size; ++i) out.push_back(by_dist[static_cast<std::size_t>(i)].second);
  return out;
}

KrigingResult krige_block(const FittedModel& model,
                          const std::vector<Coordinate>& targets,
                          const std::vector<int>& t_list,
                          const std::vector<double>& h_list,
                          const KrigingOptions& opts,
                          const TargetCovariates* covariates) {
  if (targets.empty()) throw ArgumentError("kriging block has no targets");
  for (const int t : t_list)
    if (t < 1 || t > model.data.T)
      throw ArgumentError("kriging time index " + std::to_string(t) + " outside [1, T]");
  if (covariates && covariates->size() != targets.size())
    throw ArgumentError("covariates must be given for every target");

  const TargetStates states = smooth_targets(model, targets, opts.nn_size);

  KrigingResult out;
  out.targets = targets;
  out.t_list = t_list;
  out.h_list = h_list;
  out.has_variance = opts.compute_variance;
  out.has_covariate_term = covariates != nullptr;
  out.f_hat.resize(targets.size());
  if (opts.compute_variance) out.var_f.resize(targets.size());
  out.z_hat.resize(targets.size());
  out.z_cov.resize(targets.size());

  for (std::size_t j = 0; j < targets.size(); ++j) {
    if (covariates &&
        ((*covariates)[j].size() != t_list.size() ||
         (!t_list.empty() && (*covariates)[j][0].size() != h_list.size())))
      throw ArgumentError("covariate array shape must be [targets][times][h points]");
    out.f_hat[j].resize(t_list.size());
    if (opts.compute_variance) out.var_f[j].resize(t_list.size());
    for (std::size_t ti = 0; ti < t_list.size(); ++ti) {
      const int t = t_list[ti];
      const Eigen::VectorXd& z = states.z[j][static_cast<std::size_t>(t) - 1];
      const Eigen::MatrixXd& P = states.P[j][static_cast<std::size_t>(t) - 1];
      out.z_hat[j].push_back(z);
      out.z_cov[j].push_back(P);
      out.f_hat[j][ti].resize(h_list.size());
      if (opts.compute_variance) out.var_f[j][ti].resize(h_list.size());
      for (std::size_t hi = 0; hi < h_list.size(); ++hi) {
        const double h = h_list[hi];
        const Eigen::VectorXd phi = model.basis.for_z.eval(h);
        double f = phi.dot(z);
        if (covariates) f += covariate_term(model, (*covariates)[j][ti][hi], h);
        out.f_hat[j][ti][hi] = f;
        if (opts.compute_variance)
          out.var_f[j][ti][hi] = std::max(0.0, phi.dot(P * phi));
      }
    }
  }
  return out;
}

KrigingResult krige(const FittedModel& model, const KrigingGrid& grid,
                    const std::vector<int>& t_list,
                    const std::vector<double>& h_list, const KrigingOptions& opts,
                    const TargetCovariates* covariates) {
  const std::size_t m = grid.size();
  const std::size_t block_size =
      opts.block_size <= 0 ? m : static_cast<std::size_t>(opts.block_size);
  const std::size_t u = (m + block_size - 1) / block_size;

  std::vector<KrigingResult> partial(u);
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto work = [&] {
    for (;;) {
      const std::size_t l = next.fetch_add(1);
      if (l >= u) return;
      try {
        const std::size_t lo = l * block_size;
        const std::size_t hi = std::min(lo + block_size, m);
        const std::vector<Coordinate> block_targets(grid.targets.begin() + static_cast<std::ptrdiff_t>(lo),
                                                    grid.targets.begin() + static_cast<std::ptrdiff_t>(hi));
        TargetCovariates block_cov;
        if (covariates)
          block_cov.assign(covariates->begin() + static_cast<std::ptrdiff_t>(lo),
                           covariates->begin() + static_cast<std::ptrdiff_t>(hi));
        partial[l] = krige_block(model, block_targets, t_list, h_list, opts,
                                 covariates ? &block_cov : nullptr);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    }
  };
  const int n_threads = std::max(1, std::min<int>(opts.workers, static_cast<int>(u)));
  if (n_threads == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < n_threads; ++w) pool.emplace_back(work);
    for (auto& th : pool) th.join();
  }
  if (error) std::rethrow_exception(error);

  KrigingResult out;
  out.targets = grid.targets;
  out.t_list = t_list;
  out.h_list = h_list;
  out.has_variance = opts.compute_variance;
  out.has_covariate_term = covariates != nullptr;
  for (auto& part : partial) {
    std::move(part.f_hat.begin(), part.f_hat.end(), std::back_inserter(out.f_hat));
    std::move(part.var_f.begin(), part.var_f.end(), std::back_inserter(out.var_f));
    std::move(part.z_hat.begin(), part.z_hat.end(), std::back_inserter(out.z_hat));
    std::move(part.z_cov.begin(), part.z_cov.end(), std::back_inserter(out.z_cov));
  }
  return out;
}

std::vector<std::vector<double>> predict_records(const FittedModel& model,
                                                 const ProfileDataset& val,
                                                 int nn_size, int workers) {
  (void)workers;
  if (val.T > model.data.T)
    throw ArgumentError("validation data extends past the model's time range");
  std::vector<Coordinate> targets = val.sites;
  const TargetStates states = smooth_targets(model, targets, nn_size);
  const int b = model.data.b();
  if (val.b() != b)
    throw ArgumentError("validation dataset covariates do not match the model");

  std::vector<std::vector<double>> yhat(val.records.size());
  for (std::size_t r = 0; r < val.records.size(); ++r) {
    const ProfileRecord& rec = val.records[r];
    yhat[r].resize(rec.q());
    const Eigen::VectorXd& z =
        states.z[static_cast<std::size_t>(rec.site)][static_cast<std::size_t>(rec.time) - 1];
    for (std::size_t i = 0; i < rec.q(); ++i) {
      const double h = rec.h_points[i];
      double f = model.basis.for_z.eval(h).dot(z);
      if (b > 0) {
        Eigen::VectorXd x(b);
        for (int c = 0; c < b; ++c) x(c) = rec.covariates[static_cast<std::size_t>(c)][i];
        f += covariate_term(model, x, h);
      }
      yhat[r][i] = f;
    }
  }
  return yhat;
}

ValidationReport validation_metrics(const ProfileDataset& val,
                                    const std::vector<std::vector<double>>& yhat,
                                    int bins) {
  if (bins < 1) throw ArgumentError("bin count must be >= 1");
  if (yhat.size() != val.records.size())
    throw ArgumentError("predictions are not aligned with the validation records");

  ValidationReport rep;
  rep.bins = bins;
  rep.val_sites = val.original_sites;
  const int T = val.T;
  const int n = val.n();
  rep.count_t.assign(static_cast<std::size_t>(T), 0);
  rep.count_s.assign(static_cast<std::size_t>(n), 0);
  rep.count_bin.assign(static_cast<std::size_t>(bins), 0);
  std::vector<double> sse_t(static_cast<std::size_t>(T), 0.0);
  std::vector<double> sse_s(static_cast<std::size_t>(n), 0.0);
  std::vector<double> sse_bin(static_cast<std::size_t>(bins), 0.0);
  std::vector<double> sum_h(static_cast<std::size_t>(bins), 0.0);
  // accumulate y sums per scope for the variance in the R^2 denominators
  std::vector<double> y1_t(static_cast<std::size_t>(T), 0.0), y2_t(static_cast<std::size_t>(T), 0.0);
  std::vector<double> y1_s(static_cast<std::size_t>(n), 0.0), y2_s(static_cast<std::size_t>(n), 0.0);
  std::vector<double> y1_b(static_cast<std::size_t>(bins), 0.0), y2_b(static_cast<std::size_t>(bins), 0.0);

  const double width = (val.h2 - val.h1) / bins;
  for (std::size_t r = 0; r < val.records.size(); ++r) {
    const ProfileRecord& rec = val.records[r];
    if (yhat[r].size() != rec.q())
      throw ArgumentError("prediction length mismatch at record " + std::to_string(r));
    for (std::size_t i = 0; i < rec.q(); ++i) {
      const double y = rec.y_values[i];
      if (is_missing(y)) continue;
      const double e = y - yhat[r][i];
      const double h = rec.h_points[i];
      int bin = width > 0.0 ? static_cast<int>((h - val.h1) / width) : 0;
      bin = std::clamp(bin, 0, bins - 1);
      const std::size_t ti = static_cast<std::size_t>(rec.time) - 1;
      const std::size_t si = static_cast<std::size_t>(rec.site);
      const std::size_t bi = static_cast<std::size_t>(bin);
      ++rep.count_t[ti];
      ++rep.count_s[si];
      ++rep.count_bin[bi];
      sse_t[ti] += e * e;
      sse_s[si] += e * e;
      sse_bin[bi] += e * e;
      sum_h[bi] += h;
      y1_t[ti] += y;
      y2_t[ti] += y * y;
      y1_s[si] += y;
      y2_s[si] += y * y;
      y1_b[bi] += y;
      y2_b[bi] += y * y;
      rep.total_sse += e * e;
      ++rep.total_count;
    }
  }

  auto finish = [](const std::vector<int>& count, const std::vector<double>& sse,
                   const std::vector<double>& y1, const std::vector<double>& y2,
                   std::vector<double>& mse, std::vector<double>& r2) {
    mse.assign(count.size(), std::numeric_limits<double>::quiet_NaN());
    r2.assign(count.size(), std::numeric_limits<double>::quiet_NaN());
    for (std::size_t i = 0; i < count.size(); ++i) {
      if (count[i] == 0) continue;
      mse[i] = sse[i] / count[i];
      const double ssvar = y2[i] - y1[i] * y1[i] / count[i];
      if (ssvar > 0.0)
        r2[i] = 1.0 - sse[i] / ssvar;
      else if (sse[i] == 0.0)
        r2[i] = 1.0;
    }
  };
  finish(rep.count_t, sse_t, y1_t, y2_t, rep.mse_t, rep.r2_t);
  finish(rep.count_s, sse_s, y1_s, y2_s, rep.mse_s, rep.r2_s);
  finish(rep.count_bin, sse_bin, y1_b, y2_b, rep.mse_bin, rep.r2_bin);
  rep.h_bar.assign(static_cast<std::size_t>(bins), std::numeric_limits<double>::quiet_NaN());
  for (int bnum = 0; bnum < bins; ++bnum)
    if (rep.count_bin[static_cast<std::size_t>(bnum)] > 0)
      rep.h_bar[static_cast<std::size_t>(bnum)] =
          sum_h[static_cast<std::size_t>(bnum)] / rep.count_bin[static_cast<std::size_t>(bnum)];
  return rep;
}

ValidationReport validate(const FittedModel& model, const ProfileDataset& val,
                          int bins, int nn_size, int workers) {
  for (const auto& vs : val.sites)
    for (const auto& es : model.data.sites)
      if (vs.same_location(es))
        throw ArgumentError("validation sites must be disjoint from estimation sites");
  const auto yhat = predict_records(model, val, nn_size, workers);
  return validation_metrics(val, yhat, bins);
}

}  // namespace fhdgm
