#pragma once
#include <algorithm>

// Shared builders for synthetic datasets and systems used across the tests.

#include <vector>

#include "fhdgm/basis.hpp"
#include "fhdgm/estimation.hpp"
#include "fhdgm/ingest.hpp"
#include "fhdgm/rng.hpp"
#include "fhdgm/statespace.hpp"

namespace testsup {

struct LayoutSpec {
  int n_sites = 4;
  int T = 5;
  int q = 3;                 // points per profile
  int n_cov = 0;             // covariates, values drawn N(0, 1)
  double h1 = 0.0, h2 = 24.0;
  fhdgm::Unit unit = fhdgm::Unit::km;
  double area = 100.0;       // sites uniform in [0, area]^2 (or degrees box)
  bool ragged_h = false;     // per-record jittered h points
};

// Layout-only dataset (y values zero) with seeded random sites/covariates.
inline fhdgm::ProfileDataset make_layout(const LayoutSpec& spec, std::uint64_t seed) {
  fhdgm::Rng rng(seed);
  fhdgm::ProfileDataset ds;
  ds.T = spec.T;
  ds.h1 = spec.h1;
  ds.h2 = spec.h2;
  for (int c = 0; c < spec.n_cov; ++c) ds.covariate_names.push_back("x" + std::to_string(c));
  for (int i = 0; i < spec.n_sites; ++i) {
    fhdgm::Coordinate c;
    c.unit = spec.unit;
    if (spec.unit == fhdgm::Unit::deg) {
      c.lat_or_y = rng.uniform(30.0, 30.0 + spec.area);
      c.lon_or_x = rng.uniform(100.0, 100.0 + spec.area);
    } else {
      c.lat_or_y = rng.uniform(0.0, spec.area);
      c.lon_or_x = rng.uniform(0.0, spec.area);
    }
    ds.sites.push_back(c);
    ds.original_sites.push_back(i);
  }
  for (int t = 1; t <= spec.T; ++t)
    for (int i = 0; i < spec.n_sites; ++i) {
      fhdgm::ProfileRecord rec;
      rec.site = i;
      rec.time = t;
      rec.covariates.resize(static_cast<std::size_t>(spec.n_cov));
      for (int k = 0; k < spec.q; ++k) {
        double h = spec.h1 + (spec.h2 - spec.h1) * (k + 0.5) / spec.q;
        if (spec.ragged_h)
          h += rng.uniform(-0.4, 0.4) * (spec.h2 - spec.h1) / (2.0 * spec.q);
        rec.h_points.push_back(h);
        rec.y_values.push_back(0.0);
        for (int c = 0; c < spec.n_cov; ++c)
          rec.covariates[static_cast<std::size_t>(c)].push_back(rng.normal());
      }
      ds.records.push_back(std::move(rec));
    }
  return ds;
}

// Marks a seeded random share of the y values missing.
inline void mask_missing(fhdgm::ProfileDataset& ds, double share, std::uint64_t seed) {
  fhdgm::Rng rng(seed);
  for (auto& rec : ds.records)
    for (auto& y : rec.y_values)
      if (rng.uniform() < share) y = fhdgm::kMissing;
  // drop all-missing records to keep the dataset invariant
  std::vector<fhdgm::ProfileRecord> kept;
  for (auto& rec : ds.records) {
    bool any = false;
    for (const double y : rec.y_values)
      if (!fhdgm::is_missing(y)) any = true;
    if (any) kept.push_back(std::move(rec));
  }
  ds.records = std::move(kept);
}

// Random valid parameters for a dataset/basis combination.
inline fhdgm::ModelParams random_params(const fhdgm::ProfileDataset& ds,
                                        const fhdgm::BasisTriple& bt,
                                        std::uint64_t seed) {
  fhdgm::Rng rng(seed);
  fhdgm::ModelParams params;
  params.c_eps = Eigen::VectorXd::Zero(bt.for_sigma.count());
  for (int i = 0; i < bt.for_sigma.count(); ++i)
    params.c_eps(i) = rng.uniform(-1.0, 0.5);
  params.c_beta = Eigen::VectorXd::Zero(ds.b() * bt.for_beta.count());
  for (Eigen::Index i = 0; i < params.c_beta.size(); ++i)
    params.c_beta(i) = rng.uniform(-2.0, 2.0);
  const int p = bt.for_z.count();
  params.g = Eigen::VectorXd::Zero(p);
  params.sp.v = Eigen::VectorXd::Zero(p);
  params.sp.theta = Eigen::VectorXd::Zero(p);
  for (int j = 0; j < p; ++j) {
    params.g(j) = rng.uniform(-0.8, 0.9);
    params.sp.v(j) = rng.uniform(0.5, 4.0);
    params.sp.theta(j) = rng.uniform(10.0, 60.0);
  }
  return params;
}

// Fourier for odd counts, quadratic B-spline with equally spaced knots for
// even counts (the Fourier count must be odd).
inline fhdgm::BasisSpec any_basis(int p, double h1, double h2) {
  if (p % 2 == 1) return fhdgm::BasisSpec::fourier(p, h1, h2);
  const int order = std::min(2, p);
  return fhdgm::BasisSpec::bspline(order, fhdgm::equally_spaced_knots(order, p, h1, h2));
}

inline fhdgm::BasisTriple fourier_triple(int p_z, int p_beta, int p_sigma,
                                         double h1, double h2) {
  return fhdgm::BasisTriple(any_basis(p_z, h1, h2), any_basis(p_beta, h1, h2),
                            any_basis(p_sigma, h1, h2));
}

}  // namespace testsup
