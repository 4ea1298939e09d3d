#pragma once

#include <Eigen/Core>
#include <optional>
#include <vector>

#include "fhdgm/estimation.hpp"

namespace fhdgm {

/// Prediction targets: an arbitrary coordinate list, or a regular grid
/// flattened row-major (outer loop over lat/y, inner over lon/x).
struct KrigingGrid {
  std::vector<Coordinate> targets;
  int rows = 0, cols = 0;  // zero when the target list is not a regular grid

  static KrigingGrid list(std::vector<Coordinate> targets);
  static KrigingGrid regular(double lat0, double lat1, double lat_step,
                             double lon0, double lon1, double lon_step, Unit unit);
  std::size_t size() const { return targets.size(); }
};

struct KrigingOptions {
  int nn_size = 0;     // 0 = condition on all sites
  int block_size = 0;  // 0 = all targets in one block
  int workers = 1;
  bool compute_variance = true;
};

/// Covariate values at prediction points, indexed [target][t][h] in the
/// order of the requested time and h lists.
using TargetCovariates = std::vector<std::vector<std::vector<Eigen::VectorXd>>>;

struct KrigingResult {
  std::vector<Coordinate> targets;
  std::vector<int> t_list;
  std::vector<double> h_list;
  bool has_variance = false;
  bool has_covariate_term = false;
  // indexed [target][t][h]
  std::vector<std::vector<std::vector<double>>> f_hat;
  std::vector<std::vector<std::vector<double>>> var_f;
  // latent summaries, indexed [target][t]
  std::vector<std::vector<Eigen::VectorXd>> z_hat;
  std::vector<std::vector<Eigen::MatrixXd>> z_cov;
};

struct ValidationReport {
  // per time t = 1..T
  std::vector<int> count_t;
  std::vector<double> mse_t, r2_t;
  // per validation site (original index order of the validation dataset)
  std::vector<int> val_sites;
  std::vector<int> count_s;
  std::vector<double> mse_s, r2_s;
  // binned over the functional domain
  int bins = 0;
  std::vector<int> count_bin;
  std::vector<double> h_bar, mse_bin, r2_bin;

  double total_sse = 0.0;
  std::size_t total_count = 0;
};

/// Indices of the nn_size sites nearest to the target, sorted by distance
/// then by index.
std::vector<int> nearest_neighbors(const std::vector<Coordinate>& sites,
                                   const Coordinate& target, int nn_size);

/// Kriging for one block of targets: conditions on the union of the targets'
/// nearest-neighbor sets, realized by smoothing an augmented state space in
/// which targets carry fully-missing observations.
KrigingResult krige_block(const FittedModel& model,
                          const std::vector<Coordinate>& targets,
                          const std::vector<int>& t_list,
                          const std::vector<double>& h_list,
                          const KrigingOptions& opts,
                          const TargetCovariates* covariates = nullptr);

/// Block-dispatched kriging over a grid; results are concatenated in block
/// order and independent of the worker count.
KrigingResult krige(const FittedModel& model, const KrigingGrid& grid,
                    const std::vector<int>& t_list,
                    const std::vector<double>& h_list, const KrigingOptions& opts,
                    const TargetCovariates* covariates = nullptr);

/// Predictions y_hat aligned with the records of a validation dataset
/// (covariates taken from the records themselves).
std::vector<std::vector<double>> predict_records(const FittedModel& model,
                                                 const ProfileDataset& val,
                                                 int nn_size, int workers = 1);

/// Out-of-sample validation: kriging predictions at the validation sites and
/// the MSE / R-squared summaries per time, site and h-bin.
ValidationReport validate(const FittedModel& model, const ProfileDataset& val,
                          int bins, int nn_size = 0, int workers = 1);

/// Metric computation alone, for predictions produced elsewhere; yhat must be
/// aligned with val.records.
ValidationReport validation_metrics(const ProfileDataset& val,
                                    const std::vector<std::vector<double>>& yhat,
                                    int bins);

}  // namespace fhdgm
