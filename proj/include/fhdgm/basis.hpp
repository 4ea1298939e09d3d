#pragma once

#include <Eigen/Core>
#include <vector>

#include "fhdgm/error.hpp"

namespace fhdgm {

enum class BasisKind { Fourier, Bspline };

/// A functional basis over the domain [h1, h2].
///
/// Fourier bases are ordered [1, sin(w h'), cos(w h'), sin(2w h'), ...] with
/// w = 2*pi/(h2 - h1) and h' = h - h1; the count must be a positive odd
/// number. B-spline bases use order m (polynomial degree m-1) on a
/// non-decreasing knot sequence whose first and last knots are the domain
/// endpoints; endpoint knots are clamped (repeated to multiplicity m), so
/// the basis count is m + (#knots - 2).
class BasisSpec {
 public:
  static BasisSpec fourier(int count, double h1, double h2);
  static BasisSpec bspline(int order, std::vector<double> knots);
  /// Degenerate basis phi(h) = 1, used for constant beta / sigma components.
  static BasisSpec constant(double h1, double h2);

  BasisKind kind() const { return kind_; }
  int count() const { return count_; }
  double h1() const { return h1_; }
  double h2() const { return h2_; }
  int order() const { return order_; }
  const std::vector<double>& knots() const { return knots_; }
  bool is_constant() const { return kind_ == BasisKind::Fourier && count_ == 1; }

  /// phi(h), length count(). h outside [h1, h2] is a DomainError.
  Eigen::VectorXd eval(double h) const;

 private:
  BasisSpec() = default;

  BasisKind kind_ = BasisKind::Fourier;
  int count_ = 0;
  double h1_ = 0.0, h2_ = 0.0;
  int order_ = 0;                 // B-spline only
  std::vector<double> knots_;     // B-spline only, user knots (not clamped)
  std::vector<double> full_knots_;  // B-spline only, clamped sequence

  Eigen::VectorXd eval_fourier(double h) const;
  Eigen::VectorXd eval_bspline(double h) const;
};

/// Basis choices for the three model components. All share the same range.
struct BasisTriple {
  BasisSpec for_z;
  BasisSpec for_beta;
  BasisSpec for_sigma;

  BasisTriple(BasisSpec z, BasisSpec beta, BasisSpec sigma);
};

/// Rows are phi(h_i)^T for the given evaluation points.
Eigen::MatrixXd basis_matrix(const BasisSpec& spec,
                             const std::vector<double>& h_points);

/// Convenience: p as defined by the spec's invariants.
inline int basis_count(const BasisSpec& spec) { return spec.count(); }

/// Equally spaced B-spline knots over [h1, h2] so that the basis has `count`
/// functions at the given order (count = order + #knots - 2).
std::vector<double> equally_spaced_knots(int order, int count, double h1, double h2);

}  // namespace fhdgm
