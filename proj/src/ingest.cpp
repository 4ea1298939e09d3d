#include "fhdgm/ingest.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>

#include "fhdgm/error.hpp"

namespace fhdgm {

namespace {

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (const char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

bool is_nan_literal(const std::string& s) {
  if (s.size() != 3) return false;
  return std::tolower(static_cast<unsigned char>(s[0])) == 'n' &&
         std::tolower(static_cast<unsigned char>(s[1])) == 'a' &&
         std::tolower(static_cast<unsigned char>(s[2])) == 'n';
}

double parse_number(const std::string& field, int line_no, const std::string& col) {
  const std::string s = trim(field);
  double value = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw ParseError("line " + std::to_string(line_no) + ": malformed numeric cell '" +
                     field + "' in column '" + col + "'");
  return value;
}

bool parse_integer(const std::string& s, long long& out) {
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

// YYYY-MM-DD with optional 'T' or ' ' HH:MM[:SS] suffix.
bool looks_like_iso_date(const std::string& s) {
  auto digit = [&](std::size_t i) {
    return i < s.size() && std::isdigit(static_cast<unsigned char>(s[i]));
  };
  if (s.size() < 10) return false;
  if (!(digit(0) && digit(1) && digit(2) && digit(3) && s[4] == '-' && digit(5) &&
        digit(6) && s[7] == '-' && digit(8) && digit(9)))
    return false;
  if (s.size() == 10) return true;
  if (s[10] != 'T' && s[10] != ' ') return false;
  if (!(s.size() >= 16 && digit(11) && digit(12) && s[13] == ':' && digit(14) && digit(15)))
    return false;
  if (s.size() == 16) return true;
  return s.size() == 19 && s[16] == ':' && digit(17) && digit(18);
}

struct RawRow {
  int line_no;
  double coord_y, coord_x;
  std::string time_raw;
  double h;
  double y;  // NaN = missing
  std::vector<double> covariates;
};

void format_number(std::string& out, double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  out += buf;
}

}  // namespace

std::size_t ProfileDataset::observation_count() const {
  std::size_t total = 0;
  for (const auto& r : records) total += r.q();
  return total;
}

void ProfileDataset::validate() const {
  for (const auto& r : records) {
    if (r.site < 0 || r.site >= n()) throw ArgumentError("record site index out of range");
    if (r.time < 1 || r.time > T) throw ArgumentError("record time index out of range");
    if (r.y_values.size() != r.q())
      throw ArgumentError("record y/h length mismatch");
    if (r.covariates.size() != static_cast<std::size_t>(b()))
      throw ArgumentError("record covariate count mismatch");
    for (const auto& cov : r.covariates)
      if (cov.size() != r.q()) throw ArgumentError("record covariate length mismatch");
  }
}

ProfileDataset parse_csv(const std::string& path, const CsvSchema& schema,
                         ParseReport* report) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open data file '" + path + "'");

  std::string line;
  if (!std::getline(in, line)) throw ParseError("empty data file '" + path + "'");
  const std::vector<std::string> header = split_fields(line);

  auto column = [&](const std::string& name) {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (trim(header[i]) == name) return static_cast<int>(i);
    throw ParseError("header of '" + path + "' has no column '" + name + "'");
  };
  const int ci_y = column(schema.y_col);
  const int ci_h = column(schema.h_col);
  const int ci_time = column(schema.time_col);
  const int ci_cy = column(schema.coord_y_col);
  const int ci_cx = column(schema.coord_x_col);

  std::vector<std::string> covariate_names;
  std::vector<int> ci_cov;
  for (std::size_t i = 0; i < header.size(); ++i) {
    const std::string name = trim(header[i]);
    if (name.rfind(schema.covariate_prefix, 0) == 0 &&
        name.size() > schema.covariate_prefix.size()) {
      covariate_names.push_back(name.substr(schema.covariate_prefix.size()));
      ci_cov.push_back(static_cast<int>(i));
    }
  }

  std::vector<RawRow> rows;
  bool all_times_integer = true;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const std::vector<std::string> f = split_fields(line);
    if (f.size() < header.size())
      throw ParseError("line " + std::to_string(line_no) + ": expected " +
                       std::to_string(header.size()) + " fields, got " +
                       std::to_string(f.size()));
    RawRow r;
    r.line_no = line_no;
    r.coord_y = parse_number(f[static_cast<std::size_t>(ci_cy)], line_no, schema.coord_y_col);
    r.coord_x = parse_number(f[static_cast<std::size_t>(ci_cx)], line_no, schema.coord_x_col);
    r.time_raw = trim(f[static_cast<std::size_t>(ci_time)]);
    if (r.time_raw.empty())
      throw ParseError("line " + std::to_string(line_no) + ": empty time cell");
    long long dummy;
    if (!parse_integer(r.time_raw, dummy)) all_times_integer = false;
    r.h = parse_number(f[static_cast<std::size_t>(ci_h)], line_no, schema.h_col);
    const std::string y_field = trim(f[static_cast<std::size_t>(ci_y)]);
    r.y = (y_field.empty() || is_nan_literal(y_field))
              ? kMissing
              : parse_number(y_field, line_no, schema.y_col);
    r.covariates.reserve(ci_cov.size());
    for (std::size_t c = 0; c < ci_cov.size(); ++c) {
      const std::string cell = trim(f[static_cast<std::size_t>(ci_cov[c])]);
      if (cell.empty() || is_nan_literal(cell))
        throw ParseError("line " + std::to_string(line_no) + ": missing covariate '" +
                         covariate_names[c] + "' (covariates must be fully observed)");
      r.covariates.push_back(parse_number(cell, line_no, covariate_names[c]));
    }
    rows.push_back(std::move(r));
  }

  // time mapping: literal positive integers, or ISO-8601 dates mapped to
  // consecutive integers by sorted unique value
  std::unordered_map<std::string, int> time_of;
  if (all_times_integer) {
    for (const auto& r : rows) {
      long long t = 0;
      parse_integer(r.time_raw, t);
      if (t < 1)
        throw ParseError("line " + std::to_string(r.line_no) +
                         ": integer time index must be >= 1, got " + r.time_raw);
      time_of[r.time_raw] = static_cast<int>(t);
    }
  } else {
    std::set<std::string> uniq;
    for (const auto& r : rows) {
      if (!looks_like_iso_date(r.time_raw))
        throw ParseError("line " + std::to_string(r.line_no) + ": time cell '" +
                         r.time_raw + "' is neither an integer nor an ISO-8601 date");
      uniq.insert(r.time_raw);
    }
    int t = 0;
    for (const auto& s : uniq) time_of[s] = ++t;
  }

  ProfileDataset ds;
  ds.covariate_names = covariate_names;
  if (schema.domain) {
    ds.h1 = schema.domain->first;
    ds.h2 = schema.domain->second;
  } else if (!rows.empty()) {
    ds.h1 = ds.h2 = rows.front().h;
    for (const auto& r : rows) {
      ds.h1 = std::min(ds.h1, r.h);
      ds.h2 = std::max(ds.h2, r.h);
    }
  }

  std::map<std::pair<double, double>, int> site_of;
  auto site_index_of = [&](const RawRow& r) {
    const auto key = std::make_pair(r.coord_y, r.coord_x);
    const auto it = site_of.find(key);
    if (it != site_of.end()) return it->second;
    Coordinate c{r.coord_y, r.coord_x, schema.unit};
    c.validate();
    const int idx = static_cast<int>(ds.sites.size());
    ds.sites.push_back(c);
    site_of.emplace(key, idx);
    return idx;
  };

  std::map<std::pair<int, int>, ProfileRecord> groups;  // (time, site) -> record
  std::set<std::tuple<int, int, double>> seen;
  for (const auto& r : rows) {
    if (schema.domain && (r.h < ds.h1 || r.h > ds.h2))
      throw DomainError("line " + std::to_string(r.line_no) + ": h=" +
                        std::to_string(r.h) + " outside the declared domain [" +
                        std::to_string(ds.h1) + ", " + std::to_string(ds.h2) + "]");
    const int site = site_index_of(r);
    const int t = time_of.at(r.time_raw);
    if (!seen.insert({site, t, r.h}).second)
      throw ParseError("line " + std::to_string(r.line_no) +
                       ": duplicate (site, time, h) measurement");
    auto& rec = groups[{t, site}];
    if (rec.h_points.empty()) {
      rec.site = site;
      rec.time = t;
      rec.covariates.resize(covariate_names.size());
    }
    rec.h_points.push_back(r.h);
    rec.y_values.push_back(r.y);
    for (std::size_t c = 0; c < r.covariates.size(); ++c)
      rec.covariates[c].push_back(r.covariates[c]);
  }

  int dropped = 0;
  for (auto& [key, rec] : groups) {
    const bool any_observed =
        std::any_of(rec.y_values.begin(), rec.y_values.end(),
                    [](double v) { return !is_missing(v); });
    if (!any_observed) {
      ++dropped;
      continue;
    }
    ds.records.push_back(std::move(rec));
    ds.T = std::max(ds.T, key.first);
  }
  if (report) report->dropped_all_missing_groups = dropped;

  // all-missing groups may leave orphan sites: drop and re-index them so that
  // n counts sites that actually carry data
  std::vector<bool> used(ds.sites.size(), false);
  for (const auto& rec : ds.records) used[static_cast<std::size_t>(rec.site)] = true;
  if (std::find(used.begin(), used.end(), false) != used.end()) {
    std::vector<int> remap(ds.sites.size(), -1);
    std::vector<Coordinate> kept;
    for (std::size_t i = 0; i < ds.sites.size(); ++i)
      if (used[i]) {
        remap[i] = static_cast<int>(kept.size());
        kept.push_back(ds.sites[i]);
      }
    ds.sites = std::move(kept);
    for (auto& rec : ds.records) rec.site = remap[static_cast<std::size_t>(rec.site)];
  }

  ds.units["coord"] = to_string(schema.unit);
  ds.original_sites.resize(ds.sites.size());
  for (std::size_t i = 0; i < ds.sites.size(); ++i)
    ds.original_sites[i] = static_cast<int>(i);
  ds.validate();
  return ds;
}

void write_csv(const ProfileDataset& ds, const std::string& path,
               const CsvSchema& schema) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot open '" + path + "' for writing");
  std::string buf;
  buf += schema.coord_y_col + "," + schema.coord_x_col + "," + schema.time_col +
         "," + schema.h_col + "," + schema.y_col;
  for (const auto& name : ds.covariate_names)
    buf += "," + schema.covariate_prefix + name;
  buf += "\n";
  for (const auto& rec : ds.records) {
    const Coordinate& c = ds.sites[static_cast<std::size_t>(rec.site)];
    for (std::size_t i = 0; i < rec.q(); ++i) {
      format_number(buf, c.lat_or_y);
      buf += ',';
      format_number(buf, c.lon_or_x);
      buf += ',';
      buf += std::to_string(rec.time);
      buf += ',';
      format_number(buf, rec.h_points[i]);
      buf += ',';
      if (!is_missing(rec.y_values[i])) format_number(buf, rec.y_values[i]);
      for (const auto& cov : rec.covariates) {
        buf += ',';
        format_number(buf, cov[i]);
      }
      buf += '\n';
    }
  }
  out << buf;
}

int site_index(const ProfileDataset& ds, const Coordinate& c) {
  for (std::size_t i = 0; i < ds.sites.size(); ++i)
    if (ds.sites[i].same_location(c)) return static_cast<int>(i);
  throw ArgumentError("coordinate not found among dataset sites (exact match required)");
}

ProfileDataset subset_sites(const ProfileDataset& ds,
                            const std::vector<int>& site_indices) {
  std::vector<int> remap(ds.sites.size(), -1);
  ProfileDataset out;
  for (const int s : site_indices) {
    if (s < 0 || s >= ds.n()) throw ArgumentError("site index out of range");
    if (remap[static_cast<std::size_t>(s)] != -1)
      throw ArgumentError("duplicate site index in subset");
    remap[static_cast<std::size_t>(s)] = static_cast<int>(out.sites.size());
    out.sites.push_back(ds.sites[static_cast<std::size_t>(s)]);
    out.original_sites.push_back(
        ds.original_sites.empty() ? s : ds.original_sites[static_cast<std::size_t>(s)]);
  }
  out.T = ds.T;
  out.h1 = ds.h1;
  out.h2 = ds.h2;
  out.covariate_names = ds.covariate_names;
  out.units = ds.units;
  for (const auto& rec : ds.records) {
    const int mapped = remap[static_cast<std::size_t>(rec.site)];
    if (mapped == -1) continue;
    ProfileRecord r = rec;
    r.site = mapped;
    out.records.push_back(std::move(r));
  }
  std::stable_sort(out.records.begin(), out.records.end(),
                   [](const ProfileRecord& a, const ProfileRecord& b) {
                     return std::tie(a.time, a.site) < std::tie(b.time, b.site);
                   });
  out.validate();
  return out;
}

std::pair<ProfileDataset, ProfileDataset> split_validation(
    const ProfileDataset& ds, const std::vector<int>& val_sites) {
  if (val_sites.empty()) throw ArgumentError("validation site list is empty");
  std::vector<bool> in_val(ds.sites.size(), false);
  for (const int s : val_sites) {
    if (s < 0 || s >= ds.n())
      throw ArgumentError("validation site index " + std::to_string(s) + " out of range");
    if (in_val[static_cast<std::size_t>(s)])
      throw ArgumentError("validation site index " + std::to_string(s) + " repeated");
    in_val[static_cast<std::size_t>(s)] = true;
  }
  std::vector<int> est_sites;
  for (int s = 0; s < ds.n(); ++s)
    if (!in_val[static_cast<std::size_t>(s)]) est_sites.push_back(s);
  if (est_sites.empty())
    throw ArgumentError("validation set must leave at least one estimation site");
  return {subset_sites(ds, est_sites), subset_sites(ds, val_sites)};
}

}  // namespace fhdgm
