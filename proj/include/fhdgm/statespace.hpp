#pragma once

#include <Eigen/Core>
#include <vector>

#include "fhdgm/types.hpp"

namespace fhdgm {

/// One scalar measurement within a time slice. The design row of the full
/// observation equation has entries phi(j) at state positions j*n + site
/// (basis-major state layout).
struct Observation {
  int site = 0;
  double h = 0.0;
  double y = kMissing;  // NaN = missing
  double offset = 0.0;  // x(s,h,t)^T beta(h)
  double meas_var = 1.0;
  Eigen::VectorXd phi;  // phi_z(h), length p

  bool missing() const { return is_missing(y); }
};

struct TimeSlice {
  std::vector<Observation> obs;
};

/// Linear-Gaussian state space for the f-HDGM matrix representation.
///
/// The state z_t stacks the p basis components basis-major, so the transition
/// is diagonal with g_j repeated per site and the innovation covariance is
/// block-diagonal with p blocks of size n x n.
struct StateSpaceSystem {
  int n_sites = 0;
  int p = 0;
  Eigen::VectorXd g;           // length p, |g_j| < 1
  Eigen::MatrixXd innov_cov;   // np x np
  Eigen::VectorXd mu0;         // np
  Eigen::MatrixXd P0;          // np x np
  std::vector<TimeSlice> times;

  int state_dim() const { return n_sites * p; }
  int T() const { return static_cast<int>(times.size()); }
  /// Diagonal of the transition matrix (g_j repeated n times per block).
  Eigen::VectorXd transition_diag() const;
  void validate() const;
};

struct FilterResult {
  std::vector<Eigen::VectorXd> z_pred, z_filt;  // index 0 = initial state
  std::vector<Eigen::MatrixXd> P_pred, P_filt;
  double loglik = 0.0;
  Eigen::VectorXd loglik_t;  // innovations loglik per time, length T
};

struct SmootherOutput {
  std::vector<Eigen::VectorXd> z_smooth;  // T+1 entries, index 0 = time 0
  std::vector<Eigen::MatrixXd> P_smooth;  // T+1 entries
  std::vector<Eigen::MatrixXd> P_lag;     // P_lag[t-1] = Cov(z_t, z_{t-1} | Y)
  double loglik = 0.0;
  Eigen::VectorXd loglik_t;
};

/// EM sufficient statistics of the latent process plus per-observation
/// expected squared residuals (NaN where y is missing).
struct SufficientStats {
  Eigen::MatrixXd S11, S10, S00;
  std::vector<std::vector<double>> residual_moments;  // [time][obs]
};

/// Forward pass with per-element missing-data deletion; the loglik is the
/// exact innovations log-density of the observed entries.
FilterResult kalman_filter(const StateSpaceSystem& sys);

/// Rauch-Tung-Striebel backward pass with lag-one covariances.
SmootherOutput kalman_smoother(const StateSpaceSystem& sys);

SufficientStats expected_sufficient_stats(const StateSpaceSystem& sys,
                                          const SmootherOutput& out);

/// Incremental filter used where per-time loglik contributions are consumed
/// as they are produced (truncated information accumulation).
class KalmanStepper {
 public:
  explicit KalmanStepper(const StateSpaceSystem& sys);
  /// Advances one time step; returns that step's innovations loglik. When
  /// given, `nu` and `f` receive the scalar innovations and their variances
  /// in observation order (observed rows only).
  double step(std::vector<double>* nu = nullptr, std::vector<double>* f = nullptr);
  int time() const { return t_; }

 private:
  const StateSpaceSystem* sys_;
  Eigen::VectorXd z_;
  Eigen::MatrixXd P_;
  Eigen::VectorXd gdiag_;
  int t_ = 0;
};

}  // namespace fhdgm
