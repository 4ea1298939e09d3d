#include "fhdgm/statespace.hpp"

#include <Eigen/Cholesky>
#include <cmath>
#include <numbers>
#include <string>

#include "fhdgm/error.hpp"

namespace fhdgm {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

void symmetrize(Eigen::MatrixXd& M) {
  M = 0.5 * (M + M.transpose()).eval();
}

// Advances (z, P) from filtered t-1 to predicted t.
void predict_step(const StateSpaceSystem& sys, const Eigen::VectorXd& gdiag,
                  Eigen::VectorXd& z, Eigen::MatrixXd& P) {
  z.array() *= gdiag.array();
  P.array().colwise() *= gdiag.array();
  P.array().rowwise() *= gdiag.transpose().array();
  P += sys.innov_cov;
}

// Sequential scalar measurement updates over the observed rows of slice t;
// equivalent to a batch update with the missing rows deleted. Returns the
// innovations loglik contribution of the slice; optionally records the
// scalar innovations and their variances.
double update_step(const StateSpaceSystem& sys, int t_index, Eigen::VectorXd& z,
                   Eigen::MatrixXd& P, std::vector<double>* nu_out = nullptr,
                   std::vector<double>* f_out = nullptr) {
  const int n = sys.n_sites;
  const int p = sys.p;
  const int dim = sys.state_dim();
  double ll = 0.0;
  Eigen::VectorXd w(dim), a_phi(dim), k(dim);
  for (const Observation& ob : sys.times[static_cast<std::size_t>(t_index)].obs) {
    if (ob.missing()) continue;
    // w = P * phi_row (phi_row has p nonzeros at j*n + site)
    w.setZero();
    double nu = ob.y - ob.offset;
    double quad = 0.0;
    for (int j = 0; j < p; ++j) {
      const int idx = j * n + ob.site;
      w.noalias() += ob.phi(j) * P.col(idx);
      nu -= ob.phi(j) * z(idx);
    }
    for (int j = 0; j < p; ++j) quad += ob.phi(j) * w(j * n + ob.site);
    const double f = quad + ob.meas_var;
    if (!std::isfinite(f) || f <= 0.0)
      throw NumericError("non-positive or non-finite innovation variance at time " +
                         std::to_string(t_index + 1));
    ll += -0.5 * (kLog2Pi + std::log(f) + nu * nu / f);
    if (nu_out) nu_out->push_back(nu);
    if (f_out) f_out->push_back(f);
    k = w / f;
    z.noalias() += k * nu;
    // Joseph form: P <- (I - k phi^T) P (I - k phi^T)^T + r k k^T
    a_phi = w - (f - ob.meas_var) * k;
    P.noalias() -= k * w.transpose();
    P.noalias() -= a_phi * k.transpose();
    P.noalias() += ob.meas_var * (k * k.transpose());
  }
  symmetrize(P);
  if (!std::isfinite(ll))
    throw NumericError("non-finite loglik contribution at time " +
                       std::to_string(t_index + 1));
  return ll;
}

}  // namespace

Eigen::VectorXd StateSpaceSystem::transition_diag() const {
  Eigen::VectorXd d(state_dim());
  for (int j = 0; j < p; ++j) d.segment(j * n_sites, n_sites).setConstant(g(j));
  return d;
}

void StateSpaceSystem::validate() const {
  const int dim = state_dim();
  if (n_sites < 1 || p < 1) throw ArgumentError("state space needs n >= 1, p >= 1");
  if (g.size() != p) throw ArgumentError("g must have length p");
  if (innov_cov.rows() != dim || innov_cov.cols() != dim)
    throw ArgumentError("innovation covariance must be np x np");
  if (mu0.size() != dim || P0.rows() != dim || P0.cols() != dim)
    throw ArgumentError("initial state dimensions inconsistent");
  for (const auto& slice : times)
    for (const auto& ob : slice.obs) {
      if (ob.site < 0 || ob.site >= n_sites)
        throw ArgumentError("observation site index out of range");
      if (ob.phi.size() != p) throw ArgumentError("observation phi must have length p");
      if (!(ob.meas_var > 0.0))
        throw ArgumentError("measurement variances must be positive");
    }
}

FilterResult kalman_filter(const StateSpaceSystem& sys) {
  const int T = sys.T();
  FilterResult out;
  out.z_pred.resize(static_cast<std::size_t>(T) + 1);
  out.z_filt.resize(static_cast<std::size_t>(T) + 1);
  out.P_pred.resize(static_cast<std::size_t>(T) + 1);
  out.P_filt.resize(static_cast<std::size_t>(T) + 1);
  out.loglik_t = Eigen::VectorXd::Zero(T);

  const Eigen::VectorXd gdiag = sys.transition_diag();
  out.z_pred[0] = sys.mu0;
  out.P_pred[0] = sys.P0;
  out.z_filt[0] = sys.mu0;
  out.P_filt[0] = sys.P0;

  Eigen::VectorXd z = sys.mu0;
  Eigen::MatrixXd P = sys.P0;
  double ll_sum = 0.0, ll_comp = 0.0;  // Kahan accumulation
  for (int t = 1; t <= T; ++t) {
    predict_step(sys, gdiag, z, P);
    out.z_pred[static_cast<std::size_t>(t)] = z;
    out.P_pred[static_cast<std::size_t>(t)] = P;
    const double ll = update_step(sys, t - 1, z, P);
    out.loglik_t(t - 1) = ll;
    const double yk = ll - ll_comp;
    const double tk = ll_sum + yk;
    ll_comp = (tk - ll_sum) - yk;
    ll_sum = tk;
    out.z_filt[static_cast<std::size_t>(t)] = z;
    out.P_filt[static_cast<std::size_t>(t)] = P;
  }
  out.loglik = ll_sum;
  return out;
}

SmootherOutput kalman_smoother(const StateSpaceSystem& sys) {
  const int T = sys.T();
  const int dim = sys.state_dim();
  const FilterResult f = kalman_filter(sys);

  SmootherOutput out;
  out.loglik = f.loglik;
  out.loglik_t = f.loglik_t;
  out.z_smooth.resize(static_cast<std::size_t>(T) + 1);
  out.P_smooth.resize(static_cast<std::size_t>(T) + 1);
  out.P_lag.resize(static_cast<std::size_t>(T));

  out.z_smooth[static_cast<std::size_t>(T)] = f.z_filt[static_cast<std::size_t>(T)];
  out.P_smooth[static_cast<std::size_t>(T)] = f.P_filt[static_cast<std::size_t>(T)];

  const Eigen::VectorXd gdiag = sys.transition_diag();
  Eigen::MatrixXd GP(dim, dim);
  for (int t = T - 1; t >= 0; --t) {
    // J_t = P_filt[t] G^T P_pred[t+1]^{-1}
    GP = f.P_filt[static_cast<std::size_t>(t)];
    GP.array().colwise() *= gdiag.array();  // G * P_filt (G diagonal)
    const auto ldlt = f.P_pred[static_cast<std::size_t>(t) + 1].ldlt();
    const Eigen::MatrixXd J = ldlt.solve(GP).transpose();

    out.z_smooth[static_cast<std::size_t>(t)] =
        f.z_filt[static_cast<std::size_t>(t)] +
        J * (out.z_smooth[static_cast<std::size_t>(t) + 1] -
             f.z_pred[static_cast<std::size_t>(t) + 1]);
    Eigen::MatrixXd Ps =
        f.P_filt[static_cast<std::size_t>(t)] +
        J *
            (out.P_smooth[static_cast<std::size_t>(t) + 1] -
             f.P_pred[static_cast<std::size_t>(t) + 1]) *
            J.transpose();
    symmetrize(Ps);
    out.P_smooth[static_cast<std::size_t>(t)] = std::move(Ps);
    // Cov(z_{t+1}, z_t | Y) = P_smooth[t+1] J_t^T
    out.P_lag[static_cast<std::size_t>(t)] =
        out.P_smooth[static_cast<std::size_t>(t) + 1] * J.transpose();
  }
  return out;
}

SufficientStats expected_sufficient_stats(const StateSpaceSystem& sys,
                                          const SmootherOutput& out) {
  const int T = sys.T();
  const int n = sys.n_sites;
  const int p = sys.p;
  const int dim = sys.state_dim();
  SufficientStats st;
  st.S11 = Eigen::MatrixXd::Zero(dim, dim);
  st.S10 = Eigen::MatrixXd::Zero(dim, dim);
  st.S00 = Eigen::MatrixXd::Zero(dim, dim);
  st.residual_moments.resize(static_cast<std::size_t>(T));
  for (int t = 1; t <= T; ++t) {
    const auto& z1 = out.z_smooth[static_cast<std::size_t>(t)];
    const auto& z0 = out.z_smooth[static_cast<std::size_t>(t) - 1];
    st.S11.noalias() += z1 * z1.transpose();
    st.S11 += out.P_smooth[static_cast<std::size_t>(t)];
    st.S10.noalias() += z1 * z0.transpose();
    st.S10 += out.P_lag[static_cast<std::size_t>(t) - 1];
    st.S00.noalias() += z0 * z0.transpose();
    st.S00 += out.P_smooth[static_cast<std::size_t>(t) - 1];

    const auto& slice = sys.times[static_cast<std::size_t>(t) - 1];
    auto& moments = st.residual_moments[static_cast<std::size_t>(t) - 1];
    moments.resize(slice.obs.size(), kMissing);
    const auto& P = out.P_smooth[static_cast<std::size_t>(t)];
    for (std::size_t o = 0; o < slice.obs.size(); ++o) {
      const Observation& ob = slice.obs[o];
      if (ob.missing()) continue;
      double mean = 0.0, quad = 0.0;
      for (int j = 0; j < p; ++j) {
        const int idx = j * n + ob.site;
        mean += ob.phi(j) * z1(idx);
        for (int l = 0; l < p; ++l)
          quad += ob.phi(j) * ob.phi(l) * P(idx, l * n + ob.site);
      }
      const double e = ob.y - ob.offset - mean;
      moments[o] = e * e + quad;
    }
  }
  return st;
}

KalmanStepper::KalmanStepper(const StateSpaceSystem& sys)
    : sys_(&sys), z_(sys.mu0), P_(sys.P0), gdiag_(sys.transition_diag()) {}

double KalmanStepper::step(std::vector<double>* nu, std::vector<double>* f) {
  if (t_ >= sys_->T()) throw ArgumentError("KalmanStepper stepped past T");
  if (nu) nu->clear();
  if (f) f->clear();
  predict_step(*sys_, gdiag_, z_, P_);
  return update_step(*sys_, t_++, z_, P_, nu, f);
}

}  // namespace fhdgm
