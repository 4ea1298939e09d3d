#include "fhdgm/spatial.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "fhdgm/error.hpp"

namespace fhdgm {

namespace {
constexpr double kDegToRad = std::numbers::pi / 180.0;
constexpr double kRadToDeg = 180.0 / std::numbers::pi;
}  // namespace

void SpatialParams::validate() const {
  if (v.size() != theta.size())
    throw ArgumentError("spatial params: v and theta must have equal length");
  for (Eigen::Index j = 0; j < v.size(); ++j) {
    if (!(v(j) > 0.0) || !std::isfinite(v(j)))
      throw ArgumentError("spatial variance v[" + std::to_string(j) + "] must be positive");
    if (!(theta(j) > 0.0) || !std::isfinite(theta(j)))
      throw ArgumentError("spatial range theta[" + std::to_string(j) + "] must be positive");
  }
}

double distance(const Coordinate& a, const Coordinate& b) {
  if (a.unit != b.unit)
    throw ArgumentError("distance between coordinates with different units (" +
                        to_string(a.unit) + " vs " + to_string(b.unit) + ")");
  if (a.unit == Unit::deg) {
    const double lat1 = a.lat_or_y * kDegToRad;
    const double lat2 = b.lat_or_y * kDegToRad;
    const double dlat = (b.lat_or_y - a.lat_or_y) * kDegToRad;
    const double dlon = (b.lon_or_x - a.lon_or_x) * kDegToRad;
    const double sa = std::sin(dlat / 2.0);
    const double sb = std::sin(dlon / 2.0);
    double c = sa * sa + std::cos(lat1) * std::cos(lat2) * sb * sb;
    if (c > 1.0) c = 1.0;
    if (c < 0.0) c = 0.0;
    return 2.0 * std::asin(std::sqrt(c)) * kRadToDeg;
  }
  const double dy = a.lat_or_y - b.lat_or_y;
  const double dx = a.lon_or_x - b.lon_or_x;
  return std::hypot(dy, dx);
}

double exp_correlation(double d, double theta_j) {
  if (d < 0.0) throw ArgumentError("distance must be non-negative");
  if (!(theta_j > 0.0)) throw ArgumentError("theta must be positive");
  return std::exp(-d / theta_j);
}

Eigen::MatrixXd distance_matrix(const std::vector<Coordinate>& sites) {
  const Eigen::Index n = static_cast<Eigen::Index>(sites.size());
  Eigen::MatrixXd D = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double d = distance(sites[static_cast<std::size_t>(i)],
                                sites[static_cast<std::size_t>(j)]);
      D(i, j) = d;
      D(j, i) = d;
    }
  return D;
}

std::vector<Eigen::MatrixXd> innovation_covariance(const Eigen::MatrixXd& D,
                                                   const SpatialParams& sp) {
  sp.validate();
  const Eigen::Index n = D.rows();
  if (D.cols() != n) throw ArgumentError("distance matrix must be square");
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j)
      if (!(D(i, j) > 0.0))
        throw NumericError("duplicate sites: zero off-diagonal distance at (" +
                           std::to_string(i) + ", " + std::to_string(j) + ")");
  std::vector<Eigen::MatrixXd> blocks;
  blocks.reserve(static_cast<std::size_t>(sp.v.size()));
  for (Eigen::Index j = 0; j < sp.v.size(); ++j)
    blocks.push_back(sp.v(j) * (-D / sp.theta(j)).array().exp().matrix());
  return blocks;
}

}  // namespace fhdgm
