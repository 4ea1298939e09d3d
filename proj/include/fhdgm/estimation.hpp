#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fhdgm/basis.hpp"
#include "fhdgm/ingest.hpp"
#include "fhdgm/partition.hpp"
#include "fhdgm/spatial.hpp"
#include "fhdgm/statespace.hpp"

namespace fhdgm {

/// All estimable parameters psi = (c_eps, c_beta, g, v, theta).
struct ModelParams {
  Eigen::VectorXd c_eps;   // length p_sigma; log sigma^2_eps(h) = phi_sigma(h)^T c_eps
  Eigen::VectorXd c_beta;  // length b * p_beta, covariate-major
  Eigen::VectorXd g;       // length p, diagonal of G, |g_j| < 1
  SpatialParams sp;        // v, theta, length p each

  void validate() const;
};

/// Flattened parameter indexing for exit tests, scores and labels.
struct ParamLayout {
  int p_sigma = 0;
  int p_beta = 0;
  int n_cov = 0;
  int p = 0;

  int dim() const { return p_sigma + n_cov * p_beta + 3 * p; }
  int c_eps_offset() const { return 0; }
  int c_beta_offset() const { return p_sigma; }
  int g_offset() const { return p_sigma + n_cov * p_beta; }
  int v_offset() const { return g_offset() + p; }
  int theta_offset() const { return v_offset() + p; }

  static ParamLayout of(const ModelParams& params);
  /// Labels like ("c_eps", 0), ("c_beta_temp", 1), ("g", 0), ...
  std::vector<std::pair<std::string, int>> labels(
      const std::vector<std::string>& covariate_names) const;
};

Eigen::VectorXd flatten(const ModelParams& params);
ModelParams unflatten(const Eigen::VectorXd& psi, const ParamLayout& layout);

enum class ExitReason { par_toll, loglik_toll, max_iter };

std::string to_string(ExitReason r);

struct EmOptions {
  double exit_toll_par = 1e-4;
  double exit_toll_loglike = 1e-4;
  int max_iterations = 100;
  std::optional<Partitioning> partitions;
  int workers = 1;
  std::uint64_t seed = 0;
};

struct FitResult {
  ModelParams params;
  std::vector<double> loglik_trace;  // entry 0 = loglik at the initial params
  int iterations = 0;
  ExitReason exit_reason = ExitReason::max_iter;

  /// E-step output at the final parameters, one entry per partition block.
  std::vector<SmootherOutput> block_smoothers;
  /// Original site indices per block (identity for unpartitioned fits).
  std::vector<std::vector<int>> block_sites;

  double final_loglik() const { return loglik_trace.back(); }
  /// Smoothed p-vector of basis coefficients for an original site index.
  Eigen::VectorXd smoothed_state(int site, int t) const;
  /// Its p x p smoothed covariance.
  Eigen::MatrixXd smoothed_cov(int site, int t) const;
};

/// Everything needed to predict from an estimated model.
struct FittedModel {
  ProfileDataset data;
  BasisTriple basis;
  ModelParams params;
};

/// Assembles the matrix representation of the model over the dataset.
StateSpaceSystem build_system(const ProfileDataset& ds, const BasisTriple& bt,
                              const ModelParams& params);

/// Starting values: pooled OLS for c_beta, log-residual regression for
/// c_eps, g = 0.5, v = residual variance, theta = max distance / 4.
ModelParams initialize(const ProfileDataset& ds, const BasisTriple& bt);

/// EM maximum likelihood with Kalman-smoother E-step (per partition block,
/// possibly in parallel) and closed-form / profiled M-step updates.
FitResult em_fit(const ProfileDataset& ds, const BasisTriple& bt,
                 const ModelParams& init, const EmOptions& opts);

/// Samples y over the layout (sites, times, h points, covariates) of the
/// template dataset; deterministic per seed.
ProfileDataset simulate(const ProfileDataset& ds_template, const BasisTriple& bt,
                        const ModelParams& params, std::uint64_t seed);

}  // namespace fhdgm
