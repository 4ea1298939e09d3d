// Command-line driver: simulate | partition | fit | validate | krige | report.
// Every flag has a config-file equivalent; flags override the config, and the
// merged effective values are recorded in the run manifest.

#include <CLI11.hpp>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "fhdgm/basis.hpp"
#include "fhdgm/config.hpp"
#include "fhdgm/error.hpp"
#include "fhdgm/estimation.hpp"
#include "fhdgm/inference.hpp"
#include "fhdgm/ingest.hpp"
#include "fhdgm/partition.hpp"
#include "fhdgm/predict.hpp"
#include "fhdgm/rng.hpp"
#include "fhdgm/spatial.hpp"

namespace fs = std::filesystem;
using namespace fhdgm;

namespace {

constexpr const char* kVersion = "fhdgm 1.0.0";

std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string g6(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

void write_file(const fs::path& path, const std::string& contents) {
  std::ofstream out(path);
  if (!out) throw ArgumentError("cannot write '" + path.string() + "'");
  out << contents;
}

struct PhaseTimer {
  std::map<std::string, double> seconds;
  std::chrono::steady_clock::time_point mark = std::chrono::steady_clock::now();
  void lap(const std::string& phase) {
    const auto now = std::chrono::steady_clock::now();
    seconds[phase] = std::chrono::duration<double>(now - mark).count();
    mark = now;
  }
};

// ---- config-driven builders -----------------------------------------------

CsvSchema schema_from(const Config& cfg) {
  CsvSchema s;
  s.y_col = cfg.get_string("schema.y", "y");
  s.h_col = cfg.get_string("schema.h", "h");
  s.time_col = cfg.get_string("schema.time", "time");
  s.coord_y_col = cfg.get_string("schema.coord_y", "coord_y");
  s.coord_x_col = cfg.get_string("schema.coord_x", "coord_x");
  s.covariate_prefix = cfg.get_string("schema.covariate_prefix", "x_beta_");
  s.unit = unit_from_string(cfg.get_string("data.unit", "deg"));
  if (cfg.has("basis.range")) {
    const auto range = cfg.get_double_list("basis.range");
    if (range.size() != 2) throw ArgumentError("basis.range must be 'h1,h2'");
    s.domain = {range[0], range[1]};
  }
  return s;
}

BasisSpec component_basis(const Config& cfg, const std::string& count_key,
                          double h1, double h2, const std::string& kind) {
  const std::string raw = cfg.get_string(count_key, "constant");
  if (raw == "constant") return BasisSpec::constant(h1, h2);
  const int count = static_cast<int>(cfg.get_int(count_key));
  if (kind == "fourier") return BasisSpec::fourier(count, h1, h2);
  const int order = static_cast<int>(cfg.get_int("basis.order", 4));
  return BasisSpec::bspline(order, equally_spaced_knots(order, count, h1, h2));
}

BasisTriple basis_from(const Config& cfg) {
  const auto range = cfg.get_double_list("basis.range");
  if (range.size() != 2) throw ArgumentError("basis.range must be 'h1,h2'");
  const double h1 = range[0], h2 = range[1];
  const std::string kind = cfg.get_string("basis.kind", "fourier");
  if (kind != "fourier" && kind != "bspline")
    throw ArgumentError("basis.kind must be fourier or bspline");

  BasisSpec z = [&] {
    if (kind == "fourier")
      return BasisSpec::fourier(static_cast<int>(cfg.get_int("basis.p_z")), h1, h2);
    const int order = static_cast<int>(cfg.get_int("basis.order", 4));
    if (cfg.has("basis.knots"))
      return BasisSpec::bspline(order, cfg.get_double_list("basis.knots"));
    return BasisSpec::bspline(
        order, equally_spaced_knots(order, static_cast<int>(cfg.get_int("basis.p_z")),
                                    h1, h2));
  }();
  BasisSpec beta = component_basis(cfg, "basis.p_beta", h1, h2, kind);
  BasisSpec sigma = component_basis(cfg, "basis.p_sigma", h1, h2, kind);
  return BasisTriple(std::move(z), std::move(beta), std::move(sigma));
}

Eigen::VectorXd vector_from(const Config& cfg, const std::string& key) {
  const auto values = cfg.get_double_list(key);
  Eigen::VectorXd out(static_cast<Eigen::Index>(values.size()));
  for (std::size_t i = 0; i < values.size(); ++i)
    out(static_cast<Eigen::Index>(i)) = values[i];
  return out;
}

ModelParams params_from(const Config& cfg) {
  ModelParams params;
  params.c_eps = vector_from(cfg, "params.c_eps");
  params.c_beta = cfg.has("params.c_beta") && !cfg.get_string("params.c_beta").empty()
                      ? vector_from(cfg, "params.c_beta")
                      : Eigen::VectorXd(0);
  params.g = vector_from(cfg, "params.g");
  params.sp.v = vector_from(cfg, "params.v");
  params.sp.theta = vector_from(cfg, "params.theta");
  params.validate();
  return params;
}

void params_into(const ModelParams& params, Config& cfg) {
  auto join = [](const Eigen::VectorXd& v) {
    std::string out;
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      if (i) out += ",";
      out += g17(v(i));
    }
    return out;
  };
  cfg.set("params.c_eps", join(params.c_eps));
  cfg.set("params.c_beta", join(params.c_beta));
  cfg.set("params.g", join(params.g));
  cfg.set("params.v", join(params.sp.v));
  cfg.set("params.theta", join(params.sp.theta));
}

ProfileDataset data_from(const Config& cfg, ParseReport* report = nullptr) {
  return parse_csv(cfg.get_string("data.path"), schema_from(cfg), report);
}

int workers_from(const Config& cfg) {
  if (cfg.has("workers")) return static_cast<int>(cfg.get_int("workers"));
  if (const char* env = std::getenv("FHDGM_WORKERS")) return std::atoi(env);
  return 1;
}

std::optional<Partitioning> partitioning_from(const Config& cfg,
                                              const ProfileDataset& ds,
                                              std::uint64_t seed, int workers) {
  if (!cfg.has("partition.k")) return std::nullopt;
  const int k = static_cast<int>(cfg.get_int("partition.k"));
  if (k > 1 && !cfg.has("partition.lambda"))
    throw ArgumentError("partition.lambda is required when partition.k > 1 "
                        "(the penalty weight has no default)");
  const double lambda = cfg.get_double("partition.lambda", 0.0);
  const int trials = static_cast<int>(cfg.get_int("partition.trials", 10));
  return fit_kmeans(ds.sites, k, lambda, trials, derive_seed(seed, "kmeans"), workers);
}

// ---- artifacts -------------------------------------------------------------

void write_manifest(const fs::path& dir, const Config& cfg, const PhaseTimer& timer,
                    const std::map<std::string, std::string>& extra) {
  std::string text;
  char hash[32];
  std::snprintf(hash, sizeof(hash), "%016llx",
                static_cast<unsigned long long>(cfg.hash()));
  text += "config_hash=" + std::string(hash) + "\n";
  text += "version=" + std::string(kVersion) + "\n";
  for (const auto& [key, value] : extra) text += key + "=" + value + "\n";
  for (const auto& [phase, secs] : timer.seconds)
    text += "wall_" + phase + "_s=" + g6(secs) + "\n";
  text += "---- effective config ----\n";
  text += cfg.render();
  write_file(dir / "run_manifest.txt", text);
}

void write_params_csv(const fs::path& dir, const ModelParams& params,
                      const std::vector<std::string>& covariate_names) {
  const ParamLayout layout = ParamLayout::of(params);
  const auto labels = layout.labels(covariate_names);
  const Eigen::VectorXd psi = flatten(params);
  std::string text = "name,index,estimate\n";
  for (Eigen::Index i = 0; i < psi.size(); ++i)
    text += labels[static_cast<std::size_t>(i)].first + "," +
            std::to_string(labels[static_cast<std::size_t>(i)].second) + "," +
            g17(psi(i)) + "\n";
  write_file(dir / "params.csv", text);
}

void write_varcov_outputs(const fs::path& dir, const VarCov& vc,
                          const FittedModel& model, const Config& cfg) {
  std::string text = "param";
  auto tag = [](const std::pair<std::string, int>& label) {
    return label.first + "[" + std::to_string(label.second) + "]";
  };
  for (const auto& label : vc.labels) text += "," + tag(label);
  text += "\n";
  for (Eigen::Index i = 0; i < vc.matrix.rows(); ++i) {
    text += tag(vc.labels[static_cast<std::size_t>(i)]);
    for (Eigen::Index j = 0; j < vc.matrix.cols(); ++j) text += "," + g17(vc.matrix(i, j));
    text += "\n";
  }
  write_file(dir / "varcov.csv", text);

  if (model.data.b() > 0) {
    const Chi2Report report = beta_chi2_test(vc, model);
    std::string chi2 = "covariate,statistic,df,p_value\n";
    for (const auto& row : report.rows) {
      if (row.error.empty())
        chi2 += row.covariate + "," + g17(row.statistic) + "," + std::to_string(row.df) +
                "," + g17(row.p_value) + "\n";
      else
        chi2 += row.covariate + ",error,,\n";
    }
    write_file(dir / "chi2.csv", chi2);
  }

  std::vector<double> levels = {0.90, 0.95, 0.99};
  if (cfg.has("bands.levels")) levels = cfg.get_double_list("bands.levels");
  const int grid_points = static_cast<int>(cfg.get_int("bands.h_points", 25));
  std::vector<double> h_grid;
  const double h1 = model.basis.for_z.h1(), h2 = model.basis.for_z.h2();
  for (int i = 0; i < grid_points; ++i)
    h_grid.push_back(h1 + (h2 - h1) * i / (grid_points - 1));
  const BandTable table = beta_confidence_bands(vc, model, h_grid, levels);
  std::string bands = "function,h,estimate";
  for (const double level : levels) {
    const int pct = static_cast<int>(std::lround(level * 100));
    bands += ",lo_" + std::to_string(pct) + ",hi_" + std::to_string(pct);
  }
  bands += "\n";
  for (const auto& row : table.rows) {
    bands += row.function + "," + g17(row.h) + "," + g17(row.estimate);
    for (std::size_t l = 0; l < levels.size(); ++l)
      bands += "," + g17(row.lo[l]) + "," + g17(row.hi[l]);
    bands += "\n";
  }
  write_file(dir / "beta_bands.csv", bands);
}

// self-contained model description so krige/validate/report can reload a fit;
// run-environment keys (output paths) are not part of the model
void write_model_file(const fs::path& dir, const Config& cfg, const ModelParams& params) {
  Config model_cfg;
  for (const auto& [key, value] : cfg.entries())
    if (key != "out" && key != "model") model_cfg.set(key, value);
  params_into(params, model_cfg);
  write_file(dir / "model.txt", model_cfg.render());
}

FittedModel load_model(const std::string& model_path) {
  fs::path path(model_path);
  if (fs::is_directory(path)) path /= "model.txt";
  const Config cfg = Config::load(path.string());
  return FittedModel{data_from(cfg), basis_from(cfg), params_from(cfg)};
}

// ---- subcommands ------------------------------------------------------------

int cmd_simulate(const Config& cfg, const fs::path& out_dir) {
  PhaseTimer timer;
  const std::uint64_t seed = static_cast<std::uint64_t>(cfg.get_int("seed", 1));
  const auto range = cfg.get_double_list("basis.range");
  const auto area = cfg.get_double_list("sim.area");
  if (area.size() != 4) throw ArgumentError("sim.area must be 'y0,y1,x0,x1'");
  const int n = static_cast<int>(cfg.get_int("sim.n_sites"));
  const int T = static_cast<int>(cfg.get_int("sim.t"));
  const auto h_points = cfg.get_double_list("sim.h");
  const Unit unit = unit_from_string(cfg.get_string("data.unit", "deg"));

  std::vector<std::string> cov_names;
  if (cfg.has("sim.covariates") && !cfg.get_string("sim.covariates").empty()) {
    std::istringstream in(cfg.get_string("sim.covariates"));
    std::string item;
    while (std::getline(in, item, ',')) cov_names.push_back(item);
  }

  Rng rng(derive_seed(seed, "simulate-layout"));
  ProfileDataset layout;
  layout.T = T;
  layout.h1 = range[0];
  layout.h2 = range[1];
  layout.covariate_names = cov_names;
  for (int i = 0; i < n; ++i) {
    Coordinate c{rng.uniform(area[0], area[1]), rng.uniform(area[2], area[3]), unit};
    c.validate();
    layout.sites.push_back(c);
    layout.original_sites.push_back(i);
  }
  for (int t = 1; t <= T; ++t)
    for (int i = 0; i < n; ++i) {
      ProfileRecord rec;
      rec.site = i;
      rec.time = t;
      rec.h_points = h_points;
      rec.y_values.assign(h_points.size(), 0.0);
      rec.covariates.resize(cov_names.size());
      for (auto& cov : rec.covariates)
        for (std::size_t j = 0; j < h_points.size(); ++j) cov.push_back(rng.normal());
      layout.records.push_back(std::move(rec));
    }

  const BasisTriple bt = basis_from(cfg);
  const ModelParams params = params_from(cfg);
  const ProfileDataset sim = simulate(layout, bt, params, derive_seed(seed, "simulate"));
  timer.lap("simulate");
  write_csv(sim, (out_dir / "dataset.csv").string(), schema_from(cfg));
  timer.lap("write");
  write_manifest(out_dir, cfg, timer, {{"seed", std::to_string(seed)}});
  std::cout << "wrote " << (out_dir / "dataset.csv").string() << " (" << sim.n()
            << " sites, T=" << sim.T << ")\n";
  return 0;
}

int cmd_partition(const Config& cfg, const std::optional<fs::path>& out_dir) {
  PhaseTimer timer;
  const std::uint64_t seed = static_cast<std::uint64_t>(cfg.get_int("seed", 1));
  const ProfileDataset ds = data_from(cfg);
  const int k = static_cast<int>(cfg.get_int("partition.k"));
  if (k > 1 && !cfg.has("partition.lambda"))
    throw ArgumentError("partition.lambda is required when partition.k > 1 "
                        "(the penalty weight has no default)");
  const double lambda = cfg.get_double("partition.lambda", 0.0);
  const int trials = static_cast<int>(cfg.get_int("partition.trials", 10));
  const Partitioning part = fit_kmeans(ds.sites, k, lambda, trials,
                                       derive_seed(seed, "kmeans"), workers_from(cfg));
  timer.lap("partition");

  std::cout << "site_index,cluster,centroid_lat,centroid_lon\n";
  for (int i = 0; i < ds.n(); ++i) {
    const int j = part.assignment[static_cast<std::size_t>(i)];
    std::cout << i << "," << j << ","
              << g17(part.centroids[static_cast<std::size_t>(j)].lat_or_y) << ","
              << g17(part.centroids[static_cast<std::size_t>(j)].lon_or_x) << "\n";
  }
  std::cout << "objective=" << g17(part.objective) << "\n";
  if (out_dir)
    write_manifest(*out_dir, cfg, timer,
                   {{"seed", std::to_string(seed)}, {"objective", g17(part.objective)}});
  return 0;
}

EmOptions em_options_from(const Config& cfg, const ProfileDataset& ds,
                          std::uint64_t seed) {
  EmOptions opts;
  opts.exit_toll_par = cfg.get_double("em.exit_toll_par", 1e-4);
  opts.exit_toll_loglike = cfg.get_double("em.exit_toll_loglike", 1e-4);
  opts.max_iterations = static_cast<int>(cfg.get_int("em.max_iterations", 100));
  opts.workers = workers_from(cfg);
  opts.seed = seed;
  opts.partitions = partitioning_from(cfg, ds, seed, opts.workers);
  return opts;
}

int cmd_fit(const Config& cfg, const fs::path& out_dir) {
  PhaseTimer timer;
  const std::uint64_t seed = static_cast<std::uint64_t>(cfg.get_int("seed", 1));
  ParseReport report;
  const ProfileDataset ds = data_from(cfg, &report);
  if (report.dropped_all_missing_groups > 0)
    std::cerr << "note: dropped " << report.dropped_all_missing_groups
              << " all-missing profile(s)\n";
  const BasisTriple bt = basis_from(cfg);
  timer.lap("load");

  const EmOptions opts = em_options_from(cfg, ds, seed);
  const ModelParams init = initialize(ds, bt);
  timer.lap("initialize");
  const FitResult fit = em_fit(ds, bt, init, opts);
  timer.lap("em");

  write_params_csv(out_dir, fit.params, ds.covariate_names);
  std::string trace = "iteration,loglik\n";
  for (std::size_t i = 0; i < fit.loglik_trace.size(); ++i)
    trace += std::to_string(i) + "," + g17(fit.loglik_trace[i]) + "\n";
  write_file(out_dir / "loglik_trace.csv", trace);

  std::map<std::string, std::string> meta = {
      {"iterations", std::to_string(fit.iterations)},
      {"exit_reason", to_string(fit.exit_reason)},
      {"final_loglik", g17(fit.final_loglik())},
      {"seed", std::to_string(seed)},
  };

  const FittedModel model{ds, bt, fit.params};
  if (cfg.get_bool("varcov", false)) {
    const double delta = cfg.get_double("varcov.delta", 1e-3);
    const VarCov vc = varcov_truncated(model, delta);
    if (!vc.warning.empty()) std::cerr << "warning: " << vc.warning << "\n";
    timer.lap("varcov");
    write_varcov_outputs(out_dir, vc, model, cfg);
    meta["t_star"] = std::to_string(vc.t_star);
    meta["varcov_truncated"] = vc.truncated ? "yes" : "no";
    meta["delta"] = g17(vc.delta_used);
  }
  write_model_file(out_dir, cfg, fit.params);

  std::string meta_text;
  for (const auto& [key, value] : meta) meta_text += key + "=" + value + "\n";
  write_file(out_dir / "fit_meta.txt", meta_text);
  write_manifest(out_dir, cfg, timer, meta);
  std::cout << "fit: " << fit.iterations << " iterations, exit "
            << to_string(fit.exit_reason) << ", loglik " << g6(fit.final_loglik())
            << "\n";
  return 0;
}

int cmd_validate(const Config& cfg, const fs::path& out_dir) {
  PhaseTimer timer;
  const std::uint64_t seed = static_cast<std::uint64_t>(cfg.get_int("seed", 1));
  const ProfileDataset ds = data_from(cfg);
  const BasisTriple bt = basis_from(cfg);
  const auto val_sites = cfg.get_int_list("validate.val_sites");
  const auto [est, val] = split_validation(ds, val_sites);
  timer.lap("load");

  const EmOptions opts = em_options_from(cfg, est, seed);
  const FitResult fit = em_fit(est, bt, initialize(est, bt), opts);
  timer.lap("em");

  const FittedModel model{est, bt, fit.params};
  const int bins = static_cast<int>(cfg.get_int("validate.bins", 10));
  const int nn_size = static_cast<int>(cfg.get_int("validate.nn_size", 0));
  const ValidationReport rep = validate(model, val, bins, nn_size, opts.workers);
  timer.lap("validate");

  std::string mse_t = "t,count,mse\n";
  for (std::size_t t = 0; t < rep.mse_t.size(); ++t)
    mse_t += std::to_string(t + 1) + "," + std::to_string(rep.count_t[t]) + "," +
             (rep.count_t[t] > 0 ? g17(rep.mse_t[t]) : "") + "\n";
  write_file(out_dir / "mse_t.csv", mse_t);

  std::string mse_s = "site,count,mse\n";
  for (std::size_t s = 0; s < rep.mse_s.size(); ++s)
    mse_s += std::to_string(rep.val_sites[s]) + "," + std::to_string(rep.count_s[s]) +
             "," + (rep.count_s[s] > 0 ? g17(rep.mse_s[s]) : "") + "\n";
  write_file(out_dir / "mse_s.csv", mse_s);

  std::string mse_h = "bin,h_bar,count,mse\n";
  for (std::size_t r = 0; r < rep.mse_bin.size(); ++r)
    mse_h += std::to_string(r) + "," + (rep.count_bin[r] > 0 ? g17(rep.h_bar[r]) : "") +
             "," + std::to_string(rep.count_bin[r]) + "," +
             (rep.count_bin[r] > 0 ? g17(rep.mse_bin[r]) : "") + "\n";
  write_file(out_dir / "mse_h.csv", mse_h);

  std::string r2 = "scope,key,r2\n";
  for (std::size_t t = 0; t < rep.r2_t.size(); ++t)
    if (rep.count_t[t] > 0)
      r2 += "t," + std::to_string(t + 1) + "," + g17(rep.r2_t[t]) + "\n";
  for (std::size_t s = 0; s < rep.r2_s.size(); ++s)
    if (rep.count_s[s] > 0)
      r2 += "site," + std::to_string(rep.val_sites[s]) + "," + g17(rep.r2_s[s]) + "\n";
  for (std::size_t r = 0; r < rep.r2_bin.size(); ++r)
    if (rep.count_bin[r] > 0)
      r2 += "bin," + std::to_string(r) + "," + g17(rep.r2_bin[r]) + "\n";
  write_file(out_dir / "r2.csv", r2);

  write_model_file(out_dir, cfg, fit.params);
  write_manifest(out_dir, cfg, timer,
                 {{"iterations", std::to_string(fit.iterations)},
                  {"exit_reason", to_string(fit.exit_reason)},
                  {"seed", std::to_string(seed)}});
  std::cout << "validate: " << val.n() << " validation sites, total mse "
            << g6(rep.total_count > 0 ? rep.total_sse / static_cast<double>(rep.total_count)
                                      : 0.0)
            << "\n";
  return 0;
}

int cmd_krige(const Config& cfg, const fs::path& out_dir) {
  PhaseTimer timer;
  const FittedModel model = load_model(cfg.get_string("model"));
  timer.lap("load");

  KrigingGrid grid = [&] {
    if (cfg.has("krige.grid")) {
      // lat0:lat1:step,lon0:lon1:step
      const std::string raw = cfg.get_string("krige.grid");
      const std::size_t comma = raw.find(',');
      if (comma == std::string::npos)
        throw ArgumentError("krige.grid must be 'lat0:lat1:step,lon0:lon1:step'");
      auto axis = [](const std::string& part) {
        std::istringstream in(part);
        std::string a, b, c;
        if (!std::getline(in, a, ':') || !std::getline(in, b, ':') ||
            !std::getline(in, c, ':'))
          throw ArgumentError("grid axis must be 'start:stop:step'");
        return std::array<double, 3>{std::stod(a), std::stod(b), std::stod(c)};
      };
      const auto lat = axis(raw.substr(0, comma));
      const auto lon = axis(raw.substr(comma + 1));
      return KrigingGrid::regular(lat[0], lat[1], lat[2], lon[0], lon[1], lon[2],
                                  model.data.sites.front().unit);
    }
    if (!cfg.has("krige.targets"))
      throw ArgumentError("krige needs krige.grid or krige.targets");
    std::ifstream in(cfg.get_string("krige.targets"));
    if (!in) throw ArgumentError("cannot open targets file");
    std::string line;
    std::getline(in, line);  // header coord_y,coord_x
    std::vector<Coordinate> targets;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const std::size_t comma = line.find(',');
      if (comma == std::string::npos)
        throw ParseError("targets file rows must be 'coord_y,coord_x'");
      targets.push_back(Coordinate{std::stod(line.substr(0, comma)),
                                   std::stod(line.substr(comma + 1)),
                                   model.data.sites.front().unit});
    }
    return KrigingGrid::list(std::move(targets));
  }();

  std::vector<int> t_list;
  if (cfg.has("krige.t")) {
    t_list = cfg.get_int_list("krige.t");
  } else {
    for (int t = 1; t <= model.data.T; ++t) t_list.push_back(t);
  }
  const std::vector<double> h_list = cfg.get_double_list("krige.h");

  KrigingOptions opts;
  opts.nn_size = static_cast<int>(cfg.get_int("krige.nn_size", 0));
  opts.block_size = static_cast<int>(cfg.get_int("krige.block_size", 0));
  opts.workers = workers_from(cfg);
  opts.compute_variance = !cfg.get_bool("krige.no_varcov", false);

  // optional covariates at the prediction points:
  // CSV columns coord_y,coord_x,t,h,<one column per covariate>
  std::optional<TargetCovariates> covariates;
  if (cfg.has("krige.covariates")) {
    std::ifstream in(cfg.get_string("krige.covariates"));
    if (!in) throw ArgumentError("cannot open covariates file");
    std::string line;
    std::getline(in, line);
    std::map<std::tuple<std::string, std::string, int, std::string>, Eigen::VectorXd> cells;
    const int b = model.data.b();
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::istringstream ls(line);
      std::string cy, cx, ts, hs, cell;
      std::getline(ls, cy, ',');
      std::getline(ls, cx, ',');
      std::getline(ls, ts, ',');
      std::getline(ls, hs, ',');
      Eigen::VectorXd x(b);
      for (int c = 0; c < b; ++c) {
        if (!std::getline(ls, cell, ','))
          throw ParseError("covariates file: expected " + std::to_string(b) +
                           " covariate columns");
        x(c) = std::stod(cell);
      }
      cells[{g17(std::stod(cy)), g17(std::stod(cx)), std::stoi(ts), g17(std::stod(hs))}] = x;
    }
    covariates.emplace(grid.size());
    for (std::size_t j = 0; j < grid.size(); ++j) {
      (*covariates)[j].resize(t_list.size());
      for (std::size_t ti = 0; ti < t_list.size(); ++ti)
        for (const double h : h_list) {
          const auto key =
              std::make_tuple(g17(grid.targets[j].lat_or_y),
                              g17(grid.targets[j].lon_or_x), t_list[ti], g17(h));
          const auto it = cells.find(key);
          if (it == cells.end())
            throw ArgumentError("covariates file is missing a row for a prediction point");
          (*covariates)[j][ti].push_back(it->second);
        }
    }
  }

  const KrigingResult result =
      krige(model, grid, t_list, h_list, opts, covariates ? &*covariates : nullptr);
  timer.lap("krige");

  std::string text = opts.compute_variance ? "lat,lon,t,h,f_hat,var_f\n"
                                           : "lat,lon,t,h,f_hat\n";
  for (std::size_t j = 0; j < grid.size(); ++j)
    for (std::size_t ti = 0; ti < t_list.size(); ++ti)
      for (std::size_t hi = 0; hi < h_list.size(); ++hi) {
        text += g17(grid.targets[j].lat_or_y) + "," + g17(grid.targets[j].lon_or_x) +
                "," + std::to_string(t_list[ti]) + "," + g17(h_list[hi]) + "," +
                g17(result.f_hat[j][ti][hi]);
        if (opts.compute_variance) text += "," + g17(result.var_f[j][ti][hi]);
        text += "\n";
      }
  write_file(out_dir / "kriging.csv", text);
  write_manifest(out_dir, cfg, timer,
                 {{"targets", std::to_string(grid.size())},
                  {"times", std::to_string(t_list.size())},
                  {"h_points", std::to_string(h_list.size())}});
  std::cout << "krige: " << grid.size() * t_list.size() * h_list.size()
            << " predictions written\n";
  return 0;
}

int cmd_report(const Config& cfg) {
  fs::path dir(cfg.get_string("model"));
  if (!fs::is_directory(dir)) dir = dir.parent_path();
  const fs::path params_path = dir / "params.csv";
  if (!fs::exists(params_path))
    throw ArgumentError("no fit artifacts at '" + dir.string() + "' (params.csv missing)");

  std::ifstream params_in(params_path);
  std::string line;
  std::getline(params_in, line);
  struct Row {
    std::string name;
    int index;
    double estimate;
  };
  std::vector<Row> rows;
  while (std::getline(params_in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string name, idx, est;
    std::getline(ls, name, ',');
    std::getline(ls, idx, ',');
    std::getline(ls, est, ',');
    rows.push_back({name, std::stoi(idx), std::stod(est)});
  }

  // standard errors from the varcov diagonal, when present
  std::vector<double> se;
  const fs::path varcov_path = dir / "varcov.csv";
  if (fs::exists(varcov_path)) {
    std::ifstream vc_in(varcov_path);
    std::getline(vc_in, line);
    int row_idx = 0;
    while (std::getline(vc_in, line)) {
      std::istringstream ls(line);
      std::string cell;
      std::getline(ls, cell, ',');  // label
      for (int j = 0; std::getline(ls, cell, ','); ++j)
        if (j == row_idx) se.push_back(std::sqrt(std::max(0.0, std::stod(cell))));
      ++row_idx;
    }
  }

  std::printf("f-HDGM model report\n");
  std::printf("===================\n");
  const fs::path meta_path = dir / "fit_meta.txt";
  if (fs::exists(meta_path)) {
    std::ifstream meta_in(meta_path);
    while (std::getline(meta_in, line)) std::printf("%s\n", line.c_str());
  }
  std::printf("\n%-16s %5s %14s %14s\n", "parameter", "index", "estimate", "std_error");
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (i < se.size())
      std::printf("%-16s %5d %14.6g %14.6g\n", rows[i].name.c_str(), rows[i].index,
                  rows[i].estimate, se[i]);
    else
      std::printf("%-16s %5d %14.6g %14s\n", rows[i].name.c_str(), rows[i].index,
                  rows[i].estimate, "--");
  }

  const fs::path chi2_path = dir / "chi2.csv";
  if (fs::exists(chi2_path)) {
    std::printf("\nchi2 tests\n");
    std::printf("%-16s %14s %5s %14s\n", "covariate", "statistic", "df", "p_value");
    std::ifstream chi2_in(chi2_path);
    std::getline(chi2_in, line);
    while (std::getline(chi2_in, line)) {
      if (line.empty()) continue;
      std::istringstream ls(line);
      std::string name, stat, df, p;
      std::getline(ls, name, ',');
      std::getline(ls, stat, ',');
      std::getline(ls, df, ',');
      std::getline(ls, p, ',');
      if (stat == "error")
        std::printf("%-16s %14s\n", name.c_str(), "singular");
      else
        std::printf("%-16s %14.6g %5s %14.6g\n", name.c_str(), std::stod(stat),
                    df.c_str(), std::stod(p));
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{std::string(kVersion) +
               " - functional hidden dynamic geostatistical models"};
  app.set_help_flag("--help", "print help");
  app.require_subcommand(1);

  std::string config_path, data_path, out_dir, model_path, grid_spec, targets_path;
  std::string h_spec, t_spec, val_sites_spec, covariates_path, unit_spec;
  long long k = -1, trials = -1, workers = -1, seed = -1, max_iter = -1;
  long long nn_size = -1, block_size = -1, bins = -1;
  double lambda = std::numeric_limits<double>::quiet_NaN();
  double delta = std::numeric_limits<double>::quiet_NaN();
  bool varcov_flag = false, no_varcov = false;

  auto add_common = [&](CLI::App* cmd, bool needs_out) {
    cmd->set_help_flag("--help", "print help");
    cmd->add_option("--config", config_path, "config file (key=value lines)");
    if (needs_out) cmd->add_option("--out", out_dir, "output directory");
    cmd->add_option("--seed", seed, "master seed");
    cmd->add_option("--workers", workers, "worker threads");
  };

  CLI::App* sim = app.add_subcommand("simulate", "sample a dataset from the model");
  add_common(sim, true);

  CLI::App* part = app.add_subcommand("partition", "balanced k-means site partitioning");
  add_common(part, true);
  part->add_option("--data", data_path, "dataset CSV");
  part->add_option("--k", k, "number of partitions");
  part->add_option("--lambda", lambda, "size-balance penalty weight");
  part->add_option("--trials", trials, "random restarts");
  part->add_option("--unit", unit_spec, "coordinate unit (deg|km|m)");

  CLI::App* fit = app.add_subcommand("fit", "EM maximum-likelihood estimation");
  add_common(fit, true);
  fit->add_option("--data", data_path, "dataset CSV");
  fit->add_option("--k", k, "number of partitions");
  fit->add_option("--lambda", lambda, "size-balance penalty weight");
  fit->add_option("--trials", trials, "k-means restarts");
  fit->add_option("--max-iterations", max_iter, "EM iteration cap");
  fit->add_flag("--varcov", varcov_flag, "compute the parameter varcov");
  fit->add_option("--delta", delta, "truncation tolerance for the varcov");
  fit->add_option("--unit", unit_spec, "coordinate unit (deg|km|m)");

  CLI::App* val = app.add_subcommand("validate", "out-of-sample validation");
  add_common(val, true);
  val->add_option("--data", data_path, "dataset CSV");
  val->add_option("--val-sites", val_sites_spec, "validation site indices, e.g. 0,6,9");
  val->add_option("--bins", bins, "number of h bins");
  val->add_option("--nn-size", nn_size, "nearest neighbors for prediction");
  val->add_option("--unit", unit_spec, "coordinate unit (deg|km|m)");
  val->add_option("--k", k, "number of partitions");
  val->add_option("--lambda", lambda, "size-balance penalty weight");
  val->add_option("--trials", trials, "k-means restarts");
  val->add_option("--max-iterations", max_iter, "EM iteration cap");

  CLI::App* krg =
      app.add_subcommand("krige", "dynamic kriging over a grid or target list");
  add_common(krg, true);
  krg->add_option("--model", model_path, "fit output directory (model.txt)");
  krg->add_option("--grid", grid_spec, "lat0:lat1:step,lon0:lon1:step");
  krg->add_option("--targets", targets_path, "targets CSV (coord_y,coord_x)");
  krg->add_option("--h", h_spec, "h evaluation points, comma separated");
  krg->add_option("--t", t_spec, "time indices, comma separated (default all)");
  krg->add_option("--nn-size", nn_size, "nearest neighbors per target");
  krg->add_option("--block-size", block_size, "targets per kriging block");
  krg->add_flag("--no-varcov", no_varcov, "skip the kriging variance");
  krg->add_option("--covariates", covariates_path, "covariates at prediction points");

  CLI::App* rep = app.add_subcommand("report", "print a fitted-model summary");
  rep->set_help_flag("--help", "print help");
  rep->add_option("--model", model_path, "fit output directory");
  rep->add_option("--config", config_path, "config file");

  CLI11_PARSE(app, argc, argv);

  try {
    Config cfg = config_path.empty() ? Config() : Config::load(config_path);
    // flags override config
    if (!data_path.empty()) cfg.set("data.path", data_path);
    if (!unit_spec.empty()) cfg.set("data.unit", unit_spec);
    if (!model_path.empty()) cfg.set("model", model_path);
    if (!out_dir.empty()) cfg.set("out", out_dir);
    if (cfg.has("out") && out_dir.empty()) out_dir = cfg.get_string("out");
    if (k >= 0) cfg.set("partition.k", std::to_string(k));
    if (!std::isnan(lambda)) cfg.set("partition.lambda", g17(lambda));
    if (trials >= 0) cfg.set("partition.trials", std::to_string(trials));
    if (workers >= 0) cfg.set("workers", std::to_string(workers));
    if (seed >= 0) cfg.set("seed", std::to_string(seed));
    if (max_iter >= 0) cfg.set("em.max_iterations", std::to_string(max_iter));
    if (varcov_flag) cfg.set("varcov", "1");
    if (!std::isnan(delta)) cfg.set("varcov.delta", g17(delta));
    if (!val_sites_spec.empty()) cfg.set("validate.val_sites", val_sites_spec);
    if (bins >= 0) cfg.set("validate.bins", std::to_string(bins));
    if (nn_size >= 0) {
      cfg.set("validate.nn_size", std::to_string(nn_size));
      cfg.set("krige.nn_size", std::to_string(nn_size));
    }
    if (!grid_spec.empty()) cfg.set("krige.grid", grid_spec);
    if (!targets_path.empty()) cfg.set("krige.targets", targets_path);
    if (!h_spec.empty()) cfg.set("krige.h", h_spec);
    if (!t_spec.empty()) cfg.set("krige.t", t_spec);
    if (block_size >= 0) cfg.set("krige.block_size", std::to_string(block_size));
    if (no_varcov) cfg.set("krige.no_varcov", "1");
    if (!covariates_path.empty()) cfg.set("krige.covariates", covariates_path);

    auto ensure_out = [&]() {
      if (out_dir.empty()) throw ArgumentError("--out (or an `out` config key) is required");
      fs::create_directories(out_dir);
      return fs::path(out_dir);
    };

    if (sim->parsed()) return cmd_simulate(cfg, ensure_out());
    if (part->parsed())
      return cmd_partition(
          cfg, out_dir.empty() ? std::nullopt : std::optional<fs::path>(ensure_out()));
    if (fit->parsed()) return cmd_fit(cfg, ensure_out());
    if (val->parsed()) return cmd_validate(cfg, ensure_out());
    if (krg->parsed()) return cmd_krige(cfg, ensure_out());
    if (rep->parsed()) return cmd_report(cfg);
    throw ArgumentError("unknown subcommand");
  } catch (const NumericError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
