#pragma once

#include <cmath>
#include <limits>
#include <string>

#include "fhdgm/error.hpp"

namespace fhdgm {

/// Unit of the spatial coordinates. Distances are geodesic (degrees of arc)
/// for `deg` and planar Euclidean for `km`/`m`.
enum class Unit { deg, km, m };

inline std::string to_string(Unit u) {
  switch (u) {
    case Unit::deg: return "deg";
    case Unit::km: return "km";
    case Unit::m: return "m";
  }
  return "?";
}

inline Unit unit_from_string(const std::string& s) {
  if (s == "deg") return Unit::deg;
  if (s == "km") return Unit::km;
  if (s == "m") return Unit::m;
  throw ArgumentError("unknown coordinate unit '" + s + "' (expected deg, km or m)");
}

/// A spatial location: (latitude, longitude) for unit=deg, (y, x) otherwise.
struct Coordinate {
  double lat_or_y = 0.0;
  double lon_or_x = 0.0;
  Unit unit = Unit::deg;

  /// Site identity is exact equality of the coordinate values.
  bool same_location(const Coordinate& other) const {
    return lat_or_y == other.lat_or_y && lon_or_x == other.lon_or_x &&
           unit == other.unit;
  }

  void validate() const {
    if (!std::isfinite(lat_or_y) || !std::isfinite(lon_or_x))
      throw DomainError("coordinate has non-finite component");
    if (unit == Unit::deg) {
      if (lat_or_y < -90.0 || lat_or_y > 90.0)
        throw DomainError("latitude outside [-90, 90]");
      if (lon_or_x < -180.0 || lon_or_x > 180.0)
        throw DomainError("longitude outside [-180, 180]");
    }
  }
};

/// Missing observations are carried as quiet NaN.
inline constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();

inline bool is_missing(double v) { return std::isnan(v); }

}  // namespace fhdgm
