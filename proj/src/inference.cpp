#include "fhdgm/inference.hpp"

#include <Eigen/Eigenvalues>
#include <cmath>
#include <limits>

#include "fhdgm/error.hpp"

namespace fhdgm {

namespace {

constexpr double kFdRelStep = 1e-5;
constexpr int kTruncMinTime = 10;

// ---- special functions ---------------------------------------------------

// Regularized incomplete gamma P(a, x) by series, Q(a, x) by continued
// fraction (Lentz); standard numerical treatment, ~1e-15 accurate.
double gamma_p_series(double a, double x) {
  double ap = a;
  double sum = 1.0 / a;
  double del = sum;
  for (int i = 0; i < 500; ++i) {
    ap += 1.0;
    del *= x / ap;
    sum += del;
    if (std::abs(del) < std::abs(sum) * 1e-16) break;
  }
  return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

double gamma_q_contfrac(double a, double x) {
  constexpr double tiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double frac = d;
  for (int i = 1; i < 500; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    frac *= delta;
    if (std::abs(delta - 1.0) < 1e-16) break;
  }
  return frac * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

double gamma_q(double a, double x) {
  if (x < 0.0 || a <= 0.0) throw ArgumentError("gamma_q requires x >= 0, a > 0");
  if (x == 0.0) return 1.0;
  return (x < a + 1.0) ? 1.0 - gamma_p_series(a, x) : gamma_q_contfrac(a, x);
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

double normal_pdf(double x) {
  return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
}

// ---- finite-difference scores --------------------------------------------

struct PerturbedPair {
  StateSpaceSystem plus, minus;
  double denom = 1.0;
};

enum class ParamGroup { additive, multiplicative };

ParamGroup group_of(const ParamLayout& layout, int l) {
  return l >= layout.v_offset() ? ParamGroup::multiplicative : ParamGroup::additive;
}

std::vector<PerturbedPair> build_perturbed_systems(const FittedModel& model) {
  const ParamLayout layout = ParamLayout::of(model.params);
  const Eigen::VectorXd psi = flatten(model.params);
  std::vector<PerturbedPair> out;
  out.reserve(static_cast<std::size_t>(psi.size()));
  for (Eigen::Index l = 0; l < psi.size(); ++l) {
    Eigen::VectorXd plus = psi, minus = psi;
    double denom;
    if (group_of(layout, static_cast<int>(l)) == ParamGroup::multiplicative) {
      // v and theta stay positive under a multiplicative relative step
      plus(l) = psi(l) * (1.0 + kFdRelStep);
      minus(l) = psi(l) * (1.0 - kFdRelStep);
      denom = plus(l) - minus(l);
      if (denom == 0.0) denom = 1.0;  // degenerate parameter, score will be 0
    } else {
      double h = kFdRelStep * std::max(std::abs(psi(l)), 0.01);
      const bool is_g = static_cast<int>(l) >= layout.g_offset() &&
                        static_cast<int>(l) < layout.v_offset();
      if (is_g && std::abs(psi(l)) + h >= 1.0) h = (1.0 - std::abs(psi(l))) / 10.0;
      plus(l) = psi(l) + h;
      minus(l) = psi(l) - h;
      denom = 2.0 * h;
    }
    PerturbedPair pair;
    pair.plus = build_system(model.data, model.basis, unflatten(plus, layout));
    pair.minus = build_system(model.data, model.basis, unflatten(minus, layout));
    pair.denom = denom;
    out.push_back(std::move(pair));
  }
  return out;
}

// Advances the central and all perturbed filters in lockstep, producing the
// per-time conditional information i_t (and the score u_t) on demand, so the
// accumulation can stop at the truncation time. i_t is the expected
// information of the time-t innovations density,
//   i_t = sum_o [ (dnu_o)(dnu_o)^T / f_o + (df_o)(df_o)^T / (2 f_o^2) ],
// with the innovation sensitivities dnu, df taken by central finite
// differences. Unlike the raw score outer product this has full rank and the
// smooth behaviour the Frobenius truncation rule relies on.
class ScoreStream {
 public:
  explicit ScoreStream(const FittedModel& model)
      : central_sys_(build_system(model.data, model.basis, model.params)),
        pairs_(build_perturbed_systems(model)),
        central_(central_sys_) {
    steppers_.reserve(pairs_.size() * 2);
    for (auto& pr : pairs_) {
      steppers_.emplace_back(pr.plus);
      steppers_.emplace_back(pr.minus);
    }
    nu_plus_.resize(pairs_.size());
    nu_minus_.resize(pairs_.size());
    f_plus_.resize(pairs_.size());
    f_minus_.resize(pairs_.size());
  }

  int dim() const { return static_cast<int>(pairs_.size()); }

  // advances one time step; fills the score u_t and adds i_t into `info`
  void next(Eigen::VectorXd& u, Eigen::MatrixXd& info_t) {
    const int d = dim();
    central_.step(&nu0_, &f0_);
    u.resize(d);
    for (std::size_t l = 0; l < pairs_.size(); ++l) {
      const double ll_plus = steppers_[2 * l].step(&nu_plus_[l], &f_plus_[l]);
      const double ll_minus = steppers_[2 * l + 1].step(&nu_minus_[l], &f_minus_[l]);
      u(static_cast<Eigen::Index>(l)) = (ll_plus - ll_minus) / pairs_[l].denom;
      if (!std::isfinite(u(static_cast<Eigen::Index>(l))))
        throw NumericError("non-finite score for parameter index " + std::to_string(l) +
                           " at time " + std::to_string(steppers_[2 * l].time()));
    }
    info_t.setZero(d, d);
    Eigen::VectorXd dnu(d), df(d);
    for (std::size_t o = 0; o < nu0_.size(); ++o) {
      for (std::size_t l = 0; l < pairs_.size(); ++l) {
        dnu(static_cast<Eigen::Index>(l)) =
            (nu_plus_[l][o] - nu_minus_[l][o]) / pairs_[l].denom;
        df(static_cast<Eigen::Index>(l)) =
            (f_plus_[l][o] - f_minus_[l][o]) / pairs_[l].denom;
      }
      const double f0 = f0_[o];
      info_t.selfadjointView<Eigen::Lower>().rankUpdate(dnu, 1.0 / f0);
      info_t.selfadjointView<Eigen::Lower>().rankUpdate(df, 0.5 / (f0 * f0));
    }
    const Eigen::MatrixXd sym = info_t.selfadjointView<Eigen::Lower>();
    info_t = sym;
  }

 private:
  StateSpaceSystem central_sys_;
  std::vector<PerturbedPair> pairs_;
  KalmanStepper central_;
  std::vector<KalmanStepper> steppers_;
  std::vector<double> nu0_, f0_;
  std::vector<std::vector<double>> nu_plus_, nu_minus_, f_plus_, f_minus_;
};

bool invert_spd(const Eigen::MatrixXd& M, Eigen::MatrixXd& inv, double* min_eig) {
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(M);
  const Eigen::VectorXd ev = es.eigenvalues();
  if (min_eig) *min_eig = ev.minCoeff();
  if (ev.minCoeff() <= ev.maxCoeff() * 1e-12 || !(ev.maxCoeff() > 0.0)) return false;
  inv = es.eigenvectors() * ev.cwiseInverse().asDiagonal() * es.eigenvectors().transpose();
  return true;
}

std::string late_missing_warning(const ProfileDataset& ds) {
  if (ds.T < 10) return {};
  std::vector<int> missing(static_cast<std::size_t>(ds.T), 0);
  std::vector<int> total(static_cast<std::size_t>(ds.T), 0);
  for (const auto& rec : ds.records)
    for (const double y : rec.y_values) {
      ++total[static_cast<std::size_t>(rec.time) - 1];
      if (is_missing(y)) ++missing[static_cast<std::size_t>(rec.time) - 1];
    }
  double all_m = 0.0, all_n = 0.0, tail_m = 0.0, tail_n = 0.0;
  const int tail_start = ds.T - (ds.T + 9) / 10;
  for (int t = 0; t < ds.T; ++t) {
    all_m += missing[static_cast<std::size_t>(t)];
    all_n += total[static_cast<std::size_t>(t)];
    if (t >= tail_start) {
      tail_m += missing[static_cast<std::size_t>(t)];
      tail_n += total[static_cast<std::size_t>(t)];
    }
  }
  if (all_n == 0.0 || tail_n == 0.0) return {};
  const double overall = all_m / all_n;
  const double tail = tail_m / tail_n;
  if (overall > 0.0 && tail > 2.0 * overall)
    return "missing data concentrated near t = T (" + std::to_string(tail) +
           " vs average " + std::to_string(overall) +
           "); the truncated information may under-estimate variances";
  return {};
}

}  // namespace

double chi2_survival(double x, int df) {
  if (df < 1) throw ArgumentError("chi2 degrees of freedom must be >= 1");
  if (x < 0.0) throw ArgumentError("chi2 statistic must be >= 0");
  return gamma_q(0.5 * df, 0.5 * x);
}

double normal_quantile(double prob) {
  if (!(prob > 0.0 && prob < 1.0))
    throw ArgumentError("normal quantile requires probability in (0, 1)");
  // Acklam's rational approximation ...
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                             -2.759285104469687e+02, 1.383577518672690e+02,
                             -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                             -1.556989798598866e+02, 6.680131188771972e+01,
                             -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                             -2.400758277161838e+00, -2.549732539343734e+00,
                             4.374664141464968e+00,  2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                             2.445134137142996e+00, 3.754408661907416e+00};
  const double p_low = 0.02425;
  double x;
  if (prob < p_low) {
    const double q = std::sqrt(-2.0 * std::log(prob));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (prob <= 1.0 - p_low) {
    const double q = prob - 0.5;
    const double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    const double q = std::sqrt(-2.0 * std::log(1.0 - prob));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  // ... polished with one Halley step
  const double e = normal_cdf(x) - prob;
  const double u = e / normal_pdf(x);
  x -= u / (1.0 + 0.5 * x * u);
  return x;
}

Eigen::MatrixXd observed_information(const FittedModel& model, int t_max) {
  const int T = model.data.T;
  if (t_max < 0 || t_max > T)
    throw ArgumentError("t_max must lie in [0, T]");
  ScoreStream stream(model);
  Eigen::MatrixXd info = Eigen::MatrixXd::Zero(stream.dim(), stream.dim());
  Eigen::VectorXd u;
  Eigen::MatrixXd it;
  for (int t = 1; t <= t_max; ++t) {
    stream.next(u, it);
    info += it;
  }
  return info;
}

VarCov varcov_truncated(const FittedModel& model, double delta) {
  if (!(delta >= 0.0)) throw ArgumentError("delta must be >= 0");
  const int T = model.data.T;
  const ParamLayout layout = ParamLayout::of(model.params);

  VarCov out;
  out.delta_used = delta;
  out.labels = layout.labels(model.data.covariate_names);
  out.warning = late_missing_warning(model.data);

  ScoreStream stream(model);
  const int dim = stream.dim();
  Eigen::MatrixXd info = Eigen::MatrixXd::Zero(dim, dim);
  Eigen::MatrixXd prev_sigma;
  Eigen::VectorXd u;
  Eigen::MatrixXd it;
  bool have_prev = false;
  for (int t = 1; t <= T; ++t) {
    stream.next(u, it);
    info += it;
    if (t < kTruncMinTime - 1 || t >= T) continue;
    Eigen::MatrixXd sigma;
    if (!invert_spd((static_cast<double>(T) / t) * info, sigma, nullptr)) {
      have_prev = false;  // singular at this candidate: keep accumulating
      continue;
    }
    if (have_prev && t >= kTruncMinTime) {
      const double gap = (sigma - prev_sigma).norm() / sigma.norm();
      if (gap <= delta) {
        out.matrix = sigma;
        out.t_star = t;
        out.truncated = true;
        return out;
      }
    }
    prev_sigma = sigma;
    have_prev = true;
  }

  double min_eig = 0.0;
  if (!invert_spd(info, out.matrix, &min_eig))
    throw NumericError("observed information is singular at T (smallest eigenvalue " +
                       std::to_string(min_eig) + ")");
  out.t_star = T;
  out.truncated = false;
  return out;
}

Chi2Report beta_chi2_test(const VarCov& vc, const FittedModel& model) {
  const int b = model.data.b();
  const int p_beta = model.basis.for_beta.count();
  const int p_sigma = static_cast<int>(model.params.c_eps.size());
  if (vc.matrix.rows() < p_sigma + b * p_beta)
    throw ArgumentError("variance-covariance matrix does not cover the c_beta block");

  Chi2Report report;
  for (int j = 0; j < b; ++j) {
    Chi2Row row;
    row.covariate = model.data.covariate_names[static_cast<std::size_t>(j)];
    row.df = p_beta;
    const Eigen::VectorXd c = model.params.c_beta.segment(j * p_beta, p_beta);
    const Eigen::MatrixXd S =
        vc.matrix.block(p_sigma + j * p_beta, p_sigma + j * p_beta, p_beta, p_beta);
    Eigen::MatrixXd S_inv;
    if (!invert_spd(S, S_inv, nullptr)) {
      row.error = "covariance block is singular";
    } else {
      row.statistic = c.dot(S_inv * c);
      row.p_value = chi2_survival(row.statistic, row.df);
    }
    report.rows.push_back(std::move(row));
  }
  return report;
}

BandTable beta_confidence_bands(const VarCov& vc, const FittedModel& model,
                                const std::vector<double>& h_grid,
                                const std::vector<double>& levels) {
  for (const double level : levels)
    if (!(level > 0.0 && level < 1.0))
      throw ArgumentError("confidence levels must lie in (0, 1)");
  const int b = model.data.b();
  const int p_beta = model.basis.for_beta.count();
  const int p_sigma = static_cast<int>(model.params.c_eps.size());

  std::vector<double> z;
  z.reserve(levels.size());
  for (const double level : levels) z.push_back(normal_quantile(0.5 * (1.0 + level)));

  BandTable table;
  table.levels = levels;
  for (int j = 0; j < b; ++j) {
    const Eigen::VectorXd c = model.params.c_beta.segment(j * p_beta, p_beta);
    const Eigen::MatrixXd S =
        vc.matrix.block(p_sigma + j * p_beta, p_sigma + j * p_beta, p_beta, p_beta);
    for (const double h : h_grid) {
      const Eigen::VectorXd phi = model.basis.for_beta.eval(h);
      BandRow row;
      row.function = model.data.covariate_names[static_cast<std::size_t>(j)];
      row.h = h;
      row.estimate = phi.dot(c);
      const double se = std::sqrt(std::max(0.0, phi.dot(S * phi)));
      for (const double q : z) {
        row.lo.push_back(row.estimate - q * se);
        row.hi.push_back(row.estimate + q * se);
      }
      table.rows.push_back(std::move(row));
    }
  }
  // sigma2_eps(h): bands on the log scale mapped through exp
  const Eigen::MatrixXd S_eps = vc.matrix.block(0, 0, p_sigma, p_sigma);
  for (const double h : h_grid) {
    const Eigen::VectorXd phi = model.basis.for_sigma.eval(h);
    BandRow row;
    row.function = "sigma2_eps";
    row.h = h;
    const double log_est = phi.dot(model.params.c_eps);
    row.estimate = std::exp(log_est);
    const double se = std::sqrt(std::max(0.0, phi.dot(S_eps * phi)));
    for (const double q : z) {
      row.lo.push_back(std::exp(log_est - q * se));
      row.hi.push_back(std::exp(log_est + q * se));
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

}  // namespace fhdgm
