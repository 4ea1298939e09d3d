#pragma once

#include <Eigen/Core>
#include <optional>
#include <string>
#include <vector>

#include "fhdgm/estimation.hpp"

namespace fhdgm {

/// Parameter variance-covariance from (possibly truncated) observed
/// information.
struct VarCov {
  Eigen::MatrixXd matrix;  // |psi| x |psi|, symmetric
  int t_star = 0;
  double delta_used = 0.0;
  bool truncated = false;
  std::vector<std::pair<std::string, int>> labels;
  std::string warning;  // non-empty when late missing data may bias the truncation
};

struct Chi2Row {
  std::string covariate;
  double statistic = 0.0;
  int df = 0;
  double p_value = 1.0;
  std::string error;  // non-empty when the covariance block is singular
};

struct Chi2Report {
  std::vector<Chi2Row> rows;
};

/// One row of a functional confidence-band table.
struct BandRow {
  std::string function;  // covariate name or "sigma2_eps"
  double h = 0.0;
  double estimate = 0.0;
  std::vector<double> lo, hi;  // one entry per level
};

struct BandTable {
  std::vector<double> levels;
  std::vector<BandRow> rows;
};

/// Upper tail of the chi-squared distribution (regularized incomplete gamma).
double chi2_survival(double x, int df);

/// Standard normal quantile, accurate to ~1e-15.
double normal_quantile(double prob);

/// I_{t_max} = sum over time of the conditional information of the per-time
/// innovations density, with innovation sensitivities taken by central finite
/// differences (one full filter per perturbed parameter, advanced in
/// lockstep).
Eigen::MatrixXd observed_information(const FittedModel& model, int t_max);

/// Truncated variance-covariance per the Frobenius stopping rule: t* is the
/// first t >= 10 at which the scaled inverse stabilizes within delta.
VarCov varcov_truncated(const FittedModel& model, double delta);

/// Wald chi-squared tests for each covariate's functional coefficient.
Chi2Report beta_chi2_test(const VarCov& vc, const FittedModel& model);

/// Pointwise confidence bands for beta_j(h) and sigma2_eps(h) (the latter by
/// the delta method on the log scale).
BandTable beta_confidence_bands(const VarCov& vc, const FittedModel& model,
                                const std::vector<double>& h_grid,
                                const std::vector<double>& levels);

}  // namespace fhdgm
