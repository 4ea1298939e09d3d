#include <doctest.h>

#include <cmath>

#include "fhdgm/error.hpp"
#include "fhdgm/inference.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using fhdgm::BasisTriple;
using fhdgm::FittedModel;
using fhdgm::ModelParams;
using fhdgm::ProfileDataset;
using fhdgm::VarCov;

namespace {

FittedModel small_fitted_model(std::uint64_t seed, int n = 6, int T = 40) {
  testsup::LayoutSpec spec;
  spec.n_sites = n;
  spec.T = T;
  spec.q = 2;
  spec.n_cov = 1;
  const BasisTriple bt = testsup::fourier_triple(2, 1, 1, spec.h1, spec.h2);
  ProfileDataset layout = testsup::make_layout(spec, seed);
  ModelParams truth;
  truth.c_eps = Eigen::VectorXd::Constant(1, std::log(0.5));
  truth.c_beta = Eigen::VectorXd::Constant(1, 1.5);
  truth.g = Eigen::Vector2d(0.7, 0.4);
  truth.sp.v = Eigen::Vector2d(3.0, 1.5);
  truth.sp.theta = Eigen::Vector2d(25.0, 35.0);
  return FittedModel{fhdgm::simulate(layout, bt, truth, seed + 1), bt, truth};
}

// model with b = 1 constant covariate == 1, so c_beta is an iid-Gaussian mean
FittedModel iid_mean_model(int T, std::uint64_t seed) {
  testsup::LayoutSpec spec;
  spec.n_sites = 1;
  spec.T = T;
  spec.q = 1;
  spec.n_cov = 1;
  const BasisTriple bt = testsup::fourier_triple(1, 1, 1, spec.h1, spec.h2);
  ProfileDataset ds = testsup::make_layout(spec, seed);
  fhdgm::Rng rng(seed + 4);
  for (auto& rec : ds.records) {
    rec.covariates[0][0] = 1.0;
    rec.y_values[0] = 0.7 + rng.normal();  // N(mu, 1)
  }
  ModelParams params;
  params.c_eps = Eigen::VectorXd::Zero(1);               // sigma^2 = 1
  params.c_beta = Eigen::VectorXd::Constant(1, 0.7);
  params.g = Eigen::VectorXd::Zero(1);
  params.sp.v = Eigen::VectorXd::Constant(1, 1e-12);     // no latent signal
  params.sp.theta = Eigen::VectorXd::Constant(1, 1.0);
  return FittedModel{ds, bt, params};
}

}  // namespace

TEST_CASE("chi-squared survival function") {
  SUBCASE("closed form for 2 degrees of freedom") {
    CHECK(fhdgm::chi2_survival(25.0, 2) == doctest::Approx(std::exp(-12.5)).epsilon(1e-12));
    CHECK(fhdgm::chi2_survival(0.0, 2) == doctest::Approx(1.0));
  }
  SUBCASE("matches adaptive quadrature to 1e-10 for df <= 20") {
    for (int df = 1; df <= 20; ++df)
      for (double x : {0.5, 1.0, 5.0, 10.0, 25.0, 60.0, 100.0}) {
        const double mine = fhdgm::chi2_survival(x, df);
        const double ref = oracle::chi2_upper_tail_quadrature(x, df);
        CHECK(std::abs(mine - ref) <= 1e-10);
      }
  }
}

TEST_CASE("normal quantile") {
  CHECK(fhdgm::normal_quantile(0.975) == doctest::Approx(1.959964).epsilon(1e-6));
  CHECK(fhdgm::normal_quantile(0.5) == doctest::Approx(0.0));
  CHECK(fhdgm::normal_quantile(0.95) == doctest::Approx(1.6448536269514722).epsilon(1e-12));
  // symmetric
  CHECK(fhdgm::normal_quantile(0.025) == doctest::Approx(-fhdgm::normal_quantile(0.975)));
  CHECK_THROWS_AS(fhdgm::normal_quantile(0.0), fhdgm::ArgumentError);
}

TEST_CASE("information for an iid Gaussian mean is approximately T") {
  const int T = 200;
  const FittedModel model = iid_mean_model(T, 9);
  const Eigen::MatrixXd info = fhdgm::observed_information(model, T);
  const fhdgm::ParamLayout layout = fhdgm::ParamLayout::of(model.params);
  const double i_mu = info(layout.c_beta_offset(), layout.c_beta_offset());
  CHECK(i_mu == doctest::Approx(static_cast<double>(T)).epsilon(0.01));
}

TEST_CASE("t_max = 0 gives the zero matrix") {
  const FittedModel model = small_fitted_model(77, 3, 10);
  const Eigen::MatrixXd info = fhdgm::observed_information(model, 0);
  CHECK(info.lpNorm<Eigen::Infinity>() == 0.0);
}

TEST_CASE("score sum is near zero at the ML estimate") {
  // scalar AR(1) plus noise, T = 50, tightly converged EM
  testsup::LayoutSpec spec;
  spec.n_sites = 1;
  spec.T = 50;
  spec.q = 1;
  spec.n_cov = 0;
  const BasisTriple bt = testsup::fourier_triple(1, 1, 1, spec.h1, spec.h2);
  ProfileDataset layout = testsup::make_layout(spec, 15);
  ModelParams truth;
  truth.c_eps = Eigen::VectorXd::Constant(1, std::log(0.5));
  truth.c_beta.resize(0);
  truth.g = Eigen::VectorXd::Constant(1, 0.6);
  truth.sp.v = Eigen::VectorXd::Constant(1, 2.0);
  truth.sp.theta = Eigen::VectorXd::Constant(1, 1.0);
  const ProfileDataset sim = fhdgm::simulate(layout, bt, truth, 16);

  fhdgm::EmOptions opts;
  opts.exit_toll_par = 1e-10;
  opts.exit_toll_loglike = 1e-12;
  opts.max_iterations = 2000;
  const auto fit = fhdgm::em_fit(sim, bt, fhdgm::initialize(sim, bt), opts);
  const FittedModel model{sim, bt, fit.params};

  // finite-difference score of the total loglik (independent of the
  // information computation; theta is unidentified with one site, so skip it)
  const fhdgm::ParamLayout layout_p = fhdgm::ParamLayout::of(fit.params);
  const Eigen::VectorXd psi = fhdgm::flatten(fit.params);
  Eigen::VectorXd score = Eigen::VectorXd::Zero(psi.size());
  for (Eigen::Index l = 0; l < psi.size(); ++l) {
    if (l == layout_p.theta_offset()) continue;
    const double h = 1e-5 * std::max(std::abs(psi(l)), 0.01);
    Eigen::VectorXd plus = psi, minus = psi;
    plus(l) += h;
    minus(l) -= h;
    const double lp = fhdgm::kalman_filter(fhdgm::build_system(
                          sim, bt, fhdgm::unflatten(plus, layout_p))).loglik;
    const double lm = fhdgm::kalman_filter(fhdgm::build_system(
                          sim, bt, fhdgm::unflatten(minus, layout_p))).loglik;
    score(l) = (lp - lm) / (2.0 * h);
  }
  const Eigen::MatrixXd info = fhdgm::observed_information(model, 50);
  CHECK(score.norm() <= 1e-2 * std::sqrt(info.norm()) + 1e-6);
}

TEST_CASE("truncated varcov") {
  const FittedModel model = small_fitted_model(21, 6, 60);

  SUBCASE("delta = +inf fires at t_min") {
    const VarCov vc =
        fhdgm::varcov_truncated(model, std::numeric_limits<double>::infinity());
    CHECK(vc.t_star == 10);
    CHECK(vc.truncated);
    const Eigen::MatrixXd expected =
        ((60.0 / 10.0) * fhdgm::observed_information(model, 10)).inverse();
    CHECK((vc.matrix - expected).lpNorm<Eigen::Infinity>() <=
          1e-8 * expected.lpNorm<Eigen::Infinity>());
  }

  SUBCASE("delta = 0 returns the exact full-T inverse") {
    const VarCov vc = fhdgm::varcov_truncated(model, 0.0);
    CHECK(vc.t_star == 60);
    CHECK(!vc.truncated);
    const Eigen::MatrixXd I_T = fhdgm::observed_information(model, 60);
    CHECK((vc.matrix * I_T - Eigen::MatrixXd::Identity(I_T.rows(), I_T.cols()))
              .lpNorm<Eigen::Infinity>() <= 1e-6);
  }

  SUBCASE("matrix is symmetric with non-negative diagonal") {
    const VarCov vc = fhdgm::varcov_truncated(model, 1e-3);
    CHECK((vc.matrix - vc.matrix.transpose()).lpNorm<Eigen::Infinity>() <= 1e-12);
    for (Eigen::Index i = 0; i < vc.matrix.rows(); ++i) CHECK(vc.matrix(i, i) >= 0.0);
    CHECK(vc.labels.size() == static_cast<std::size_t>(vc.matrix.rows()));
  }

  SUBCASE("late missing data raises the documented warning") {
    FittedModel m = small_fitted_model(22, 4, 50);
    // concentrate missing values in the last tenth of the series
    for (auto& rec : m.data.records)
      if (rec.time > 45)
        for (std::size_t i = 0; i + 1 < rec.q(); ++i) rec.y_values[i] = fhdgm::kMissing;
    const VarCov vc = fhdgm::varcov_truncated(m, 1e-3);
    CHECK(!vc.warning.empty());
  }
}

TEST_CASE("Wald chi-squared test for covariates") {
  SUBCASE("zero coefficient gives W = 0, p = 1") {
    FittedModel model = small_fitted_model(31, 4, 20);
    model.params.c_beta.setZero();
    VarCov vc;
    vc.matrix = Eigen::MatrixXd::Identity(7, 7);
    const auto report = fhdgm::beta_chi2_test(vc, model);
    REQUIRE(report.rows.size() == 1);
    CHECK(report.rows[0].statistic == 0.0);
    CHECK(report.rows[0].p_value == 1.0);
    CHECK(report.rows[0].df == 1);
  }

  SUBCASE("(3,4) with identity covariance: W = 25, p = exp(-12.5)") {
    // two-coefficient covariate block
    testsup::LayoutSpec spec;
    spec.n_sites = 3;
    spec.T = 4;
    spec.n_cov = 1;
    const BasisTriple bt = testsup::fourier_triple(2, 2, 1, spec.h1, spec.h2);
    ProfileDataset ds = testsup::make_layout(spec, 35);
    ModelParams params;
    params.c_eps = Eigen::VectorXd::Zero(1);
    params.c_beta = Eigen::Vector2d(3.0, 4.0);
    params.g = Eigen::Vector2d(0.5, 0.5);
    params.sp.v = Eigen::Vector2d(1.0, 1.0);
    params.sp.theta = Eigen::Vector2d(10.0, 10.0);
    const FittedModel model{ds, bt, params};
    VarCov vc;
    vc.matrix = Eigen::MatrixXd::Identity(9, 9);
    const auto report = fhdgm::beta_chi2_test(vc, model);
    REQUIRE(report.rows.size() == 1);
    CHECK(report.rows[0].statistic == doctest::Approx(25.0));
    CHECK(report.rows[0].df == 2);
    CHECK(report.rows[0].p_value == doctest::Approx(std::exp(-12.5)).epsilon(1e-10));
  }

  SUBCASE("Wald statistic is invariant to linear reparameterization") {
    fhdgm::Rng rng(77);
    for (int rep = 0; rep < 10; ++rep) {
      Eigen::Vector2d c(rng.normal(), rng.normal());
      Eigen::Matrix2d L;
      L << rng.uniform(0.5, 2.0), 0.0, rng.normal(), rng.uniform(0.5, 2.0);
      const Eigen::Matrix2d S = L * L.transpose();
      const double w = c.dot(S.inverse() * c);
      // random invertible A applied consistently
      Eigen::Matrix2d A;
      A << rng.normal(), rng.normal(), rng.normal(), rng.normal();
      if (std::abs(A.determinant()) < 0.1) continue;
      const Eigen::Vector2d c2 = A * c;
      const Eigen::Matrix2d S2 = A * S * A.transpose();
      const double w2 = c2.dot(S2.inverse() * c2);
      CHECK(w == doctest::Approx(w2).epsilon(1e-8));
    }
  }

  SUBCASE("singular block flags only that covariate") {
    FittedModel model = small_fitted_model(32, 4, 20);
    VarCov vc;
    vc.matrix = Eigen::MatrixXd::Identity(7, 7);
    vc.matrix(1, 1) = 0.0;  // c_beta block entry
    const auto report = fhdgm::beta_chi2_test(vc, model);
    REQUIRE(report.rows.size() == 1);
    CHECK(!report.rows[0].error.empty());
  }
}

TEST_CASE("confidence bands") {
  FittedModel model = small_fitted_model(41, 4, 20);
  const fhdgm::ParamLayout layout = fhdgm::ParamLayout::of(model.params);
  const std::vector<double> h_grid = {0.0, 6.0, 12.0, 18.0, 24.0};

  SUBCASE("zero covariance collapses the bands") {
    VarCov vc;
    vc.matrix = Eigen::MatrixXd::Zero(layout.dim(), layout.dim());
    const auto table =
        fhdgm::beta_confidence_bands(vc, model, h_grid, {0.90, 0.95, 0.99});
    for (const auto& row : table.rows)
      for (std::size_t l = 0; l < table.levels.size(); ++l) {
        CHECK(row.lo[l] == doctest::Approx(row.estimate));
        CHECK(row.hi[l] == doctest::Approx(row.estimate));
      }
  }

  SUBCASE("unit variance, P_beta = 1: half width is the normal quantile") {
    VarCov vc;
    vc.matrix = Eigen::MatrixXd::Zero(layout.dim(), layout.dim());
    vc.matrix(layout.c_beta_offset(), layout.c_beta_offset()) = 1.0;
    const auto table = fhdgm::beta_confidence_bands(vc, model, {12.0}, {0.95});
    REQUIRE(!table.rows.empty());
    const auto& row = table.rows.front();  // the covariate row
    CHECK(row.function == model.data.covariate_names[0]);
    CHECK(row.hi[0] - row.estimate == doctest::Approx(1.959964).epsilon(1e-6));
  }

  SUBCASE("bands nest across levels and sigma2 rows stay positive") {
    VarCov vc = fhdgm::varcov_truncated(model, 0.0);
    const auto table =
        fhdgm::beta_confidence_bands(vc, model, h_grid, {0.90, 0.95, 0.99});
    bool saw_sigma = false;
    for (const auto& row : table.rows) {
      CHECK(row.lo[2] <= row.lo[1]);
      CHECK(row.lo[1] <= row.lo[0]);
      CHECK(row.hi[0] <= row.hi[1]);
      CHECK(row.hi[1] <= row.hi[2]);
      if (row.function == "sigma2_eps") {
        saw_sigma = true;
        CHECK(row.estimate > 0.0);
        CHECK(row.lo[2] > 0.0);
      }
    }
    CHECK(saw_sigma);
  }
}
