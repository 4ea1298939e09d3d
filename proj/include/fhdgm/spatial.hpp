#pragma once

#include <Eigen/Core>
#include <vector>

#include "fhdgm/types.hpp"

namespace fhdgm {

/// Used only when a km-geodesic conversion is explicitly requested.
inline constexpr double kEarthRadiusKm = 6371.0;

/// Parameters of the innovation process: per-basis-component variances v_j
/// and correlation ranges theta_j (both strictly positive).
struct SpatialParams {
  Eigen::VectorXd v;
  Eigen::VectorXd theta;

  void validate() const;
};

/// Geodesic central angle in degrees of arc (haversine) for unit=deg,
/// planar Euclidean distance in the coordinate unit otherwise.
double distance(const Coordinate& a, const Coordinate& b);

/// exp(-d / theta_j); requires d >= 0 and theta_j > 0.
double exp_correlation(double d, double theta_j);

/// Symmetric pairwise distance matrix with zero diagonal.
Eigen::MatrixXd distance_matrix(const std::vector<Coordinate>& sites);

/// The p innovation covariance blocks v_j * exp(-D / theta_j), one n x n
/// matrix per basis component (basis-major block-diagonal structure of the
/// full np x np covariance). Requires strictly positive off-diagonal
/// distances (distinct sites).
std::vector<Eigen::MatrixXd> innovation_covariance(const Eigen::MatrixXd& D,
                                                   const SpatialParams& sp);

}  // namespace fhdgm
