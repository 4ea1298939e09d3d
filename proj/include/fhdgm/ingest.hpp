#pragma once

#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fhdgm/types.hpp"

namespace fhdgm {

/// Column name mapping for the long CSV format (one measurement per row).
struct CsvSchema {
  std::string y_col = "y";
  std::string h_col = "h";
  std::string time_col = "time";
  std::string coord_y_col = "coord_y";
  std::string coord_x_col = "coord_x";
  std::string covariate_prefix = "x_beta_";
  Unit unit = Unit::deg;
  /// Declared functional domain [h1, h2]; when absent, the observed range.
  std::optional<std::pair<double, double>> domain;
};

/// All measurements taken at one site and time: points h, values y (possibly
/// missing) and covariates, all of length q.
struct ProfileRecord {
  int site = 0;        // index into ProfileDataset::sites
  int time = 1;        // 1-based time index
  std::vector<double> h_points;
  std::vector<double> y_values;                 // NaN marks missing
  std::vector<std::vector<double>> covariates;  // [covariate][point]

  std::size_t q() const { return h_points.size(); }
};

struct ParseReport {
  int dropped_all_missing_groups = 0;
};

/// Immutable observed-profile dataset; safe to read concurrently.
struct ProfileDataset {
  std::vector<ProfileRecord> records;  // sorted by (time, site)
  std::vector<Coordinate> sites;       // deduplicated, first-appearance order
  int T = 0;
  double h1 = 0.0, h2 = 0.0;
  std::vector<std::string> covariate_names;
  std::map<std::string, std::string> units;  // per-column end-user metadata
  /// When this dataset is a subset of another, the original site indices.
  std::vector<int> original_sites;

  int n() const { return static_cast<int>(sites.size()); }
  int b() const { return static_cast<int>(covariate_names.size()); }
  std::size_t observation_count() const;
  void validate() const;
};

/// Parses the long CSV format. Rows are grouped by (coordinate pair, time)
/// into ProfileRecords; groups whose y is entirely missing are dropped and
/// counted in the report.
ProfileDataset parse_csv(const std::string& path, const CsvSchema& schema,
                         ParseReport* report = nullptr);

/// Canonical long-format writer; parse_csv(write_csv(ds)) == ds.
void write_csv(const ProfileDataset& ds, const std::string& path,
               const CsvSchema& schema = {});

/// Index of a coordinate that appears exactly (bitwise) in ds.sites.
int site_index(const ProfileDataset& ds, const Coordinate& c);

/// Dataset restricted to the given (distinct) site indices; site indices are
/// re-based and the original indices retained in `original_sites`.
ProfileDataset subset_sites(const ProfileDataset& ds,
                            const std::vector<int>& site_indices);

/// Splits into estimation and validation parts by validation site indices.
std::pair<ProfileDataset, ProfileDataset> split_validation(
    const ProfileDataset& ds, const std::vector<int>& val_sites);

}  // namespace fhdgm
