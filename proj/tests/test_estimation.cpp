#include <doctest.h>

#include <cmath>

#include "fhdgm/error.hpp"
#include "fhdgm/estimation.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using fhdgm::BasisTriple;
using fhdgm::EmOptions;
using fhdgm::ModelParams;
using fhdgm::ProfileDataset;

namespace {

// medium simulated problem shared by several cases
struct SimCase {
  ProfileDataset data;
  BasisTriple basis;
  ModelParams truth;
};

SimCase make_sim(int n, int T, std::uint64_t seed, int n_cov = 1) {
  testsup::LayoutSpec spec;
  spec.n_sites = n;
  spec.T = T;
  spec.q = 3;
  spec.n_cov = n_cov;
  spec.area = 100.0;
  const BasisTriple bt = testsup::fourier_triple(2, 1, 1, spec.h1, spec.h2);
  ProfileDataset layout = testsup::make_layout(spec, seed);
  ModelParams truth;
  truth.c_eps = Eigen::VectorXd::Constant(1, std::log(0.25));
  truth.c_beta = Eigen::VectorXd::Constant(n_cov, 2.0);
  truth.g = Eigen::Vector2d(0.8, 0.5);
  truth.sp.v = Eigen::Vector2d(4.0, 2.0);
  truth.sp.theta = Eigen::Vector2d(20.0, 30.0);
  SimCase sc{fhdgm::simulate(layout, bt, truth, seed + 7), bt, truth};
  return sc;
}

}  // namespace

TEST_CASE("build_system assembles the matrix representation") {
  SUBCASE("no covariates means zero offsets") {
    testsup::LayoutSpec spec;
    spec.n_sites = 2;
    spec.T = 2;
    const BasisTriple bt = testsup::fourier_triple(3, 1, 1, spec.h1, spec.h2);
    const ProfileDataset ds = testsup::make_layout(spec, 3);
    ModelParams params = testsup::random_params(ds, bt, 4);
    const auto sys = fhdgm::build_system(ds, bt, params);
    for (const auto& slice : sys.times)
      for (const auto& ob : slice.obs) CHECK(ob.offset == 0.0);
  }

  SUBCASE("c_eps = 0 gives unit measurement variances") {
    testsup::LayoutSpec spec;
    spec.n_sites = 2;
    spec.T = 2;
    const BasisTriple bt = testsup::fourier_triple(3, 1, 1, spec.h1, spec.h2);
    const ProfileDataset ds = testsup::make_layout(spec, 5);
    ModelParams params = testsup::random_params(ds, bt, 6);
    params.c_eps.setZero();
    const auto sys = fhdgm::build_system(ds, bt, params);
    for (const auto& slice : sys.times)
      for (const auto& ob : slice.obs) CHECK(ob.meas_var == doctest::Approx(1.0));
  }

  SUBCASE("phi rows equal direct basis evaluation") {
    testsup::LayoutSpec spec;
    spec.n_sites = 1;
    spec.T = 1;
    spec.q = 2;
    const BasisTriple bt = testsup::fourier_triple(2, 1, 1, spec.h1, spec.h2);
    const ProfileDataset ds = testsup::make_layout(spec, 8);
    const ModelParams params = testsup::random_params(ds, bt, 9);
    const auto sys = fhdgm::build_system(ds, bt, params);
    REQUIRE(sys.times[0].obs.size() == 2);
    for (const auto& ob : sys.times[0].obs) {
      const Eigen::VectorXd expected = bt.for_z.eval(ob.h);
      CHECK((ob.phi - expected).lpNorm<Eigen::Infinity>() == 0.0);
    }
  }

  SUBCASE("transition and innovation structure") {
    testsup::LayoutSpec spec;
    spec.n_sites = 3;
    spec.T = 1;
    const BasisTriple bt = testsup::fourier_triple(2, 1, 1, spec.h1, spec.h2);
    const ProfileDataset ds = testsup::make_layout(spec, 10);
    const ModelParams params = testsup::random_params(ds, bt, 11);
    const auto sys = fhdgm::build_system(ds, bt, params);
    const Eigen::VectorXd gdiag = sys.transition_diag();
    for (int j = 0; j < 2; ++j)
      for (int i = 0; i < 3; ++i) CHECK(gdiag(j * 3 + i) == params.g(j));
    // off-diagonal blocks of the basis-major innovation covariance vanish
    CHECK(sys.innov_cov.block(0, 3, 3, 3).lpNorm<Eigen::Infinity>() == 0.0);
    CHECK((sys.P0 - sys.innov_cov).lpNorm<Eigen::Infinity>() == 0.0);
  }
}

TEST_CASE("initialize produces sensible starting values") {
  SUBCASE("constant y with intercept covariate recovers the constant") {
    testsup::LayoutSpec spec;
    spec.n_sites = 3;
    spec.T = 4;
    spec.n_cov = 1;
    const BasisTriple bt = testsup::fourier_triple(3, 1, 1, spec.h1, spec.h2);
    ProfileDataset ds = testsup::make_layout(spec, 21);
    for (auto& rec : ds.records) {
      for (auto& y : rec.y_values) y = 5.25;
      for (auto& x : rec.covariates[0]) x = 1.0;  // intercept
    }
    const ModelParams init = fhdgm::initialize(ds, bt);
    CHECK(init.c_beta(0) == doctest::Approx(5.25));
    CHECK(init.c_eps.allFinite());  // residuals are 0: the log floor applies
    CHECK(init.g(0) == 0.5);
  }

  SUBCASE("linear data recovers the slope within 3 standard errors") {
    testsup::LayoutSpec spec;
    spec.n_sites = 5;
    spec.T = 30;
    spec.q = 4;
    spec.n_cov = 1;
    const BasisTriple bt = testsup::fourier_triple(3, 1, 1, spec.h1, spec.h2);
    ProfileDataset ds = testsup::make_layout(spec, 33);
    fhdgm::Rng noise(34);
    std::size_t count = 0;
    for (auto& rec : ds.records)
      for (std::size_t i = 0; i < rec.q(); ++i) {
        rec.y_values[i] = 2.0 * rec.covariates[0][i] + noise.normal();
        ++count;
      }
    const ModelParams init = fhdgm::initialize(ds, bt);
    // independent OLS oracle: slope and its standard error
    double sxx = 0.0, sxy = 0.0;
    for (const auto& rec : ds.records)
      for (std::size_t i = 0; i < rec.q(); ++i) {
        sxx += rec.covariates[0][i] * rec.covariates[0][i];
        sxy += rec.covariates[0][i] * rec.y_values[i];
      }
    const double slope = sxy / sxx;
    double sse = 0.0;
    for (const auto& rec : ds.records)
      for (std::size_t i = 0; i < rec.q(); ++i) {
        const double e = rec.y_values[i] - slope * rec.covariates[0][i];
        sse += e * e;
      }
    const double se = std::sqrt(sse / (static_cast<double>(count) - 1) / sxx);
    CHECK(init.c_beta(0) == doctest::Approx(slope).epsilon(1e-10));
    CHECK(std::abs(init.c_beta(0) - 2.0) <= 3.0 * se);
  }

  SUBCASE("theta starts at a quarter of the maximum distance") {
    testsup::LayoutSpec spec;
    spec.n_sites = 4;
    const ProfileDataset ds = testsup::make_layout(spec, 40);
    const BasisTriple bt = testsup::fourier_triple(3, 1, 1, spec.h1, spec.h2);
    ModelParams init = fhdgm::initialize(ds, bt);
    const Eigen::MatrixXd D = fhdgm::distance_matrix(ds.sites);
    CHECK(init.sp.theta(0) == doctest::Approx(0.25 * D.maxCoeff()));
  }
}

TEST_CASE("simulate is deterministic and honors degenerate parameters") {
  testsup::LayoutSpec spec;
  spec.n_sites = 3;
  spec.T = 5;
  spec.n_cov = 1;
  const BasisTriple bt = testsup::fourier_triple(3, 1, 1, spec.h1, spec.h2);
  const ProfileDataset layout = testsup::make_layout(spec, 50);

  SUBCASE("same seed, bitwise identical output") {
    const ModelParams params = testsup::random_params(layout, bt, 51);
    const ProfileDataset a = fhdgm::simulate(layout, bt, params, 999);
    const ProfileDataset b = fhdgm::simulate(layout, bt, params, 999);
    for (std::size_t r = 0; r < a.records.size(); ++r)
      for (std::size_t i = 0; i < a.records[r].q(); ++i)
        CHECK(a.records[r].y_values[i] == b.records[r].y_values[i]);
  }

  SUBCASE("vanishing noise and coefficients produce y = 0") {
    ModelParams params;
    params.c_eps = Eigen::VectorXd::Constant(1, -80.0);
    params.c_beta = Eigen::VectorXd::Zero(1);
    params.g = Eigen::Vector3d(0.5, 0.5, 0.5);
    params.sp.v = Eigen::Vector3d::Constant(1e-30);
    params.sp.theta = Eigen::Vector3d::Constant(10.0);
    const ProfileDataset sim = fhdgm::simulate(layout, bt, params, 1);
    for (const auto& rec : sim.records)
      for (const double y : rec.y_values) CHECK(std::abs(y) <= 1e-12);
  }

  SUBCASE("g = 0 kills lag-one autocorrelation") {
    testsup::LayoutSpec big;
    big.n_sites = 1;
    big.T = 4000;
    big.q = 1;
    const BasisTriple bt1 = testsup::fourier_triple(1, 1, 1, big.h1, big.h2);
    const ProfileDataset layout1 = testsup::make_layout(big, 60);
    ModelParams params;
    params.c_eps = Eigen::VectorXd::Constant(1, -20.0);
    params.c_beta = Eigen::VectorXd::Zero(0);
    params.g = Eigen::VectorXd::Zero(1);
    params.sp.v = Eigen::VectorXd::Constant(1, 2.0);
    params.sp.theta = Eigen::VectorXd::Constant(1, 5.0);
    ProfileDataset layout_nocov = layout1;
    layout_nocov.covariate_names.clear();
    for (auto& rec : layout_nocov.records) rec.covariates.clear();
    const ProfileDataset sim = fhdgm::simulate(layout_nocov, bt1, params, 61);
    double c0 = 0.0, c1 = 0.0;
    for (std::size_t t = 0; t + 1 < sim.records.size(); ++t) {
      c0 += sim.records[t].y_values[0] * sim.records[t].y_values[0];
      c1 += sim.records[t].y_values[0] * sim.records[t + 1].y_values[0];
    }
    CHECK(std::abs(c1 / c0) <= 3.0 / std::sqrt(4000.0));
  }
}

TEST_CASE("em_fit: one iteration exits with max_iter") {
  const SimCase sc = make_sim(6, 10, 70);
  const ModelParams init = fhdgm::initialize(sc.data, sc.basis);
  EmOptions opts;
  opts.max_iterations = 1;
  const auto fit = fhdgm::em_fit(sc.data, sc.basis, init, opts);
  CHECK(fit.iterations == 1);
  CHECK(fit.exit_reason == fhdgm::ExitReason::max_iter);
  CHECK(fit.loglik_trace.size() == 2);
}

TEST_CASE("em_fit: loglik trace is monotone and improves on the start") {
  const SimCase sc = make_sim(8, 25, 80);
  const ModelParams init = fhdgm::initialize(sc.data, sc.basis);
  EmOptions opts;
  opts.max_iterations = 30;
  const auto fit = fhdgm::em_fit(sc.data, sc.basis, init, opts);
  for (std::size_t i = 1; i < fit.loglik_trace.size(); ++i)
    CHECK(fit.loglik_trace[i] >= fit.loglik_trace[i - 1] - 1e-8);
  CHECK(fit.final_loglik() > fit.loglik_trace.front());
}

TEST_CASE("em_fit: starting at the truth moves less than a distant start") {
  const SimCase sc = make_sim(8, 40, 90);
  EmOptions opts;
  opts.max_iterations = 1;
  const auto from_truth = fhdgm::em_fit(sc.data, sc.basis, sc.truth, opts);
  ModelParams far = sc.truth;
  far.c_beta.setZero();
  far.g.setConstant(0.05);
  far.sp.v.setConstant(40.0);
  const auto from_far = fhdgm::em_fit(sc.data, sc.basis, far, opts);
  const double near_move = (fhdgm::flatten(from_truth.params) - fhdgm::flatten(sc.truth)).norm();
  const double far_move = (fhdgm::flatten(from_far.params) - fhdgm::flatten(far)).norm();
  CHECK(near_move < far_move);
}

TEST_CASE("em_fit: k=1 partitioned path equals the unpartitioned path") {
  const SimCase sc = make_sim(6, 15, 100);
  const ModelParams init = fhdgm::initialize(sc.data, sc.basis);
  EmOptions plain;
  plain.max_iterations = 8;
  const auto fit_plain = fhdgm::em_fit(sc.data, sc.basis, init, plain);

  EmOptions part = plain;
  part.partitions = fhdgm::fit_kmeans(sc.data.sites, 1, 0.0, 1, 5);
  const auto fit_part = fhdgm::em_fit(sc.data, sc.basis, init, part);

  REQUIRE(fit_plain.loglik_trace.size() == fit_part.loglik_trace.size());
  for (std::size_t i = 0; i < fit_plain.loglik_trace.size(); ++i)
    CHECK(std::abs(fit_plain.loglik_trace[i] - fit_part.loglik_trace[i]) <=
          1e-10 * std::abs(fit_plain.loglik_trace[i]));
  CHECK((fhdgm::flatten(fit_plain.params) - fhdgm::flatten(fit_part.params))
            .lpNorm<Eigen::Infinity>() <= 1e-10);
}

TEST_CASE("em_fit: worker count does not change the partitioned result") {
  const SimCase sc = make_sim(8, 12, 110);
  const ModelParams init = fhdgm::initialize(sc.data, sc.basis);
  EmOptions one;
  one.max_iterations = 5;
  one.partitions = fhdgm::fit_kmeans(sc.data.sites, 2, 100.0, 4, 3);
  EmOptions four = one;
  four.workers = 4;
  const auto fit1 = fhdgm::em_fit(sc.data, sc.basis, init, one);
  const auto fit4 = fhdgm::em_fit(sc.data, sc.basis, init, four);
  CHECK(fit1.final_loglik() == fit4.final_loglik());
  CHECK((fhdgm::flatten(fit1.params) - fhdgm::flatten(fit4.params))
            .lpNorm<Eigen::Infinity>() == 0.0);
}

TEST_CASE("partitioned loglik is exact for block-diagonal truth") {
  // two site groups far apart relative to theta: cross correlation is
  // numerically zero, so the partitioned model is the full model
  testsup::LayoutSpec spec;
  spec.n_sites = 6;
  spec.T = 10;
  spec.q = 2;
  spec.n_cov = 0;
  const BasisTriple bt = testsup::fourier_triple(2, 1, 1, spec.h1, spec.h2);
  ProfileDataset layout = testsup::make_layout(spec, 120);
  for (int i = 0; i < 3; ++i) {
    layout.sites[static_cast<std::size_t>(i)].lat_or_y = 10.0 + i;
    layout.sites[static_cast<std::size_t>(i)].lon_or_x = 0.0;
  }
  for (int i = 3; i < 6; ++i) {
    layout.sites[static_cast<std::size_t>(i)].lat_or_y = 5000.0 + i;
    layout.sites[static_cast<std::size_t>(i)].lon_or_x = 0.0;
  }
  ModelParams truth;
  truth.c_eps = Eigen::VectorXd::Constant(1, std::log(0.3));
  truth.c_beta.resize(0);
  truth.g = Eigen::Vector2d(0.7, 0.4);
  truth.sp.v = Eigen::Vector2d(3.0, 1.5);
  truth.sp.theta = Eigen::Vector2d(2.0, 3.0);
  const ProfileDataset sim = fhdgm::simulate(layout, bt, truth, 121);

  const double joint = fhdgm::kalman_filter(fhdgm::build_system(sim, bt, truth)).loglik;
  fhdgm::Partitioning part;
  part.k = 2;
  part.assignment = {0, 0, 0, 1, 1, 1};
  part.sizes = {3, 3};
  part.centroids = {layout.sites[0], layout.sites[3]};
  double split = 0.0;
  for (const auto& block : fhdgm::partition_dataset(sim, part))
    split += fhdgm::kalman_filter(fhdgm::build_system(block, bt, truth)).loglik;
  CHECK(std::abs(joint - split) <= 1e-8 * std::abs(joint));
}

TEST_CASE("em_fit input validation") {
  const SimCase sc = make_sim(4, 5, 130);
  const ModelParams init = fhdgm::initialize(sc.data, sc.basis);
  EmOptions opts;
  opts.max_iterations = 0;
  CHECK_THROWS_AS(fhdgm::em_fit(sc.data, sc.basis, init, opts), fhdgm::ArgumentError);
  EmOptions opts2;
  opts2.partitions = fhdgm::Partitioning{};
  opts2.partitions->assignment = {0, 0};  // wrong n
  CHECK_THROWS_AS(fhdgm::em_fit(sc.data, sc.basis, init, opts2), fhdgm::ArgumentError);
}

TEST_CASE("parameter flattening round trip and labels") {
  const SimCase sc = make_sim(4, 5, 140);
  const fhdgm::ParamLayout layout = fhdgm::ParamLayout::of(sc.truth);
  const Eigen::VectorXd psi = fhdgm::flatten(sc.truth);
  CHECK(psi.size() == layout.dim());
  const ModelParams back = fhdgm::unflatten(psi, layout);
  CHECK((fhdgm::flatten(back) - psi).lpNorm<Eigen::Infinity>() == 0.0);
  const auto labels = layout.labels(sc.data.covariate_names);
  CHECK(labels.size() == static_cast<std::size_t>(layout.dim()));
  CHECK(labels.front().first == "c_eps");
  CHECK(labels.back().first == "theta");
}
