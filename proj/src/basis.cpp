#include "fhdgm/basis.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace fhdgm {

BasisSpec BasisSpec::fourier(int count, double h1, double h2) {
  if (count < 1 || count % 2 == 0)
    throw ArgumentError("Fourier basis count must be a positive odd number, got " +
                        std::to_string(count));
  if (!(h2 > h1)) throw ArgumentError("basis range must satisfy h1 < h2");
  BasisSpec s;
  s.kind_ = BasisKind::Fourier;
  s.count_ = count;
  s.h1_ = h1;
  s.h2_ = h2;
  return s;
}

BasisSpec BasisSpec::constant(double h1, double h2) {
  return fourier(1, h1, h2);
}

BasisSpec BasisSpec::bspline(int order, std::vector<double> knots) {
  if (order < 1) throw ArgumentError("B-spline order must be >= 1");
  if (knots.size() < 2) throw ArgumentError("B-spline needs at least 2 knots");
  if (!std::is_sorted(knots.begin(), knots.end()))
    throw ArgumentError("B-spline knots must be non-decreasing");
  const double h1 = knots.front(), h2 = knots.back();
  if (!(h2 > h1)) throw ArgumentError("basis range must satisfy h1 < h2");
  // interior knots may repeat up to multiplicity = order
  int run = 1;
  for (std::size_t i = 1; i + 1 < knots.size(); ++i) {
    run = (knots[i] == knots[i - 1]) ? run + 1 : 1;
    if (knots[i] == h1 || knots[i] == h2)
      throw ArgumentError("interior B-spline knots must lie strictly inside the range");
    if (run > order) throw ArgumentError("interior knot multiplicity exceeds the order");
  }

  BasisSpec s;
  s.kind_ = BasisKind::Bspline;
  s.order_ = order;
  s.h1_ = h1;
  s.h2_ = h2;
  s.count_ = order + static_cast<int>(knots.size()) - 2;
  s.knots_ = knots;
  // clamped sequence: endpoints repeated to full multiplicity
  s.full_knots_.assign(static_cast<std::size_t>(order), h1);
  s.full_knots_.insert(s.full_knots_.end(), knots.begin() + 1, knots.end() - 1);
  s.full_knots_.insert(s.full_knots_.end(), static_cast<std::size_t>(order), h2);
  return s;
}

Eigen::VectorXd BasisSpec::eval(double h) const {
  if (!(h >= h1_ && h <= h2_))
    throw DomainError("basis evaluation point " + std::to_string(h) +
                      " outside range [" + std::to_string(h1_) + ", " +
                      std::to_string(h2_) + "]");
  return kind_ == BasisKind::Fourier ? eval_fourier(h) : eval_bspline(h);
}

Eigen::VectorXd BasisSpec::eval_fourier(double h) const {
  Eigen::VectorXd phi(count_);
  phi(0) = 1.0;
  const double w = 2.0 * std::numbers::pi / (h2_ - h1_);
  const double hp = h - h1_;
  for (int k = 1; 2 * k < count_ + 1; ++k) {
    if (2 * k - 1 < count_) phi(2 * k - 1) = std::sin(k * w * hp);
    if (2 * k < count_) phi(2 * k) = std::cos(k * w * hp);
  }
  return phi;
}

Eigen::VectorXd BasisSpec::eval_bspline(double h) const {
  const int d = order_ - 1;  // polynomial degree
  const auto& t = full_knots_;

  // knot span mu with t[mu] <= h < t[mu+1]; evaluation at h2 is defined by
  // right-closure of the last non-empty span.
  int mu;
  if (h >= h2_) {
    mu = static_cast<int>(t.size()) - order_ - 1;
    while (mu > d && t[static_cast<std::size_t>(mu)] == t[static_cast<std::size_t>(mu) + 1]) --mu;
  } else {
    mu = static_cast<int>(std::upper_bound(t.begin(), t.end(), h) - t.begin()) - 1;
  }

  // Cox-de Boor, iterative form: N[r] = B_{mu-d+r}(h) for r = 0..d.
  std::vector<double> N(static_cast<std::size_t>(d) + 1, 0.0);
  std::vector<double> left(static_cast<std::size_t>(d) + 1, 0.0);
  std::vector<double> right(static_cast<std::size_t>(d) + 1, 0.0);
  N[0] = 1.0;
  for (int j = 1; j <= d; ++j) {
    left[static_cast<std::size_t>(j)] = h - t[static_cast<std::size_t>(mu + 1 - j)];
    right[static_cast<std::size_t>(j)] = t[static_cast<std::size_t>(mu + j)] - h;
    double saved = 0.0;
    for (int r = 0; r < j; ++r) {
      const double denom = right[static_cast<std::size_t>(r) + 1] +
                           left[static_cast<std::size_t>(j - r)];
      const double temp = N[static_cast<std::size_t>(r)] / denom;
      N[static_cast<std::size_t>(r)] = saved + right[static_cast<std::size_t>(r) + 1] * temp;
      saved = left[static_cast<std::size_t>(j - r)] * temp;
    }
    N[static_cast<std::size_t>(j)] = saved;
  }

  Eigen::VectorXd phi = Eigen::VectorXd::Zero(count_);
  for (int r = 0; r <= d; ++r) {
    const int i = mu - d + r;
    if (i >= 0 && i < count_) phi(i) = N[static_cast<std::size_t>(r)];
  }
  return phi;
}

BasisTriple::BasisTriple(BasisSpec z, BasisSpec beta, BasisSpec sigma)
    : for_z(std::move(z)), for_beta(std::move(beta)), for_sigma(std::move(sigma)) {
  if (for_z.h1() != for_beta.h1() || for_z.h2() != for_beta.h2() ||
      for_z.h1() != for_sigma.h1() || for_z.h2() != for_sigma.h2())
    throw ArgumentError("all three basis components must share the same range");
}

Eigen::MatrixXd basis_matrix(const BasisSpec& spec,
                             const std::vector<double>& h_points) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(h_points.size()), spec.count());
  for (std::size_t i = 0; i < h_points.size(); ++i)
    out.row(static_cast<Eigen::Index>(i)) = spec.eval(h_points[i]).transpose();
  return out;
}

std::vector<double> equally_spaced_knots(int order, int count, double h1, double h2) {
  const int n_knots = count - order + 2;
  if (n_knots < 2)
    throw ArgumentError("B-spline count too small for the order (needs count >= order)");
  std::vector<double> knots(static_cast<std::size_t>(n_knots));
  for (int i = 0; i < n_knots; ++i)
    knots[static_cast<std::size_t>(i)] = h1 + (h2 - h1) * i / (n_knots - 1);
  knots.front() = h1;
  knots.back() = h2;
  return knots;
}

}  // namespace fhdgm
