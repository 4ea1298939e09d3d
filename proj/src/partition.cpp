#include "fhdgm/partition.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <limits>
#include <numbers>
#include <thread>

#include "fhdgm/error.hpp"
#include "fhdgm/rng.hpp"
#include "fhdgm/spatial.hpp"

namespace fhdgm {

namespace {

Coordinate mean_coordinate(const std::vector<Coordinate>& sites,
                           const std::vector<int>& members,
                           const Coordinate& fallback) {
  if (members.empty()) return fallback;
  const Unit unit = sites.front().unit;
  if (unit == Unit::deg) {
    // chord mean projected back to the sphere
    constexpr double d2r = std::numbers::pi / 180.0;
    double x = 0.0, y = 0.0, z = 0.0;
    for (const int i : members) {
      const double lat = sites[static_cast<std::size_t>(i)].lat_or_y * d2r;
      const double lon = sites[static_cast<std::size_t>(i)].lon_or_x * d2r;
      x += std::cos(lat) * std::cos(lon);
      y += std::cos(lat) * std::sin(lon);
      z += std::sin(lat);
    }
    const double norm = std::sqrt(x * x + y * y + z * z);
    if (norm < 1e-12) return fallback;
    x /= norm;
    y /= norm;
    z /= norm;
    Coordinate c;
    c.unit = unit;
    c.lat_or_y = std::asin(std::clamp(z, -1.0, 1.0)) / d2r;
    c.lon_or_x = std::atan2(y, x) / d2r;
    return c;
  }
  Coordinate c;
  c.unit = unit;
  for (const int i : members) {
    c.lat_or_y += sites[static_cast<std::size_t>(i)].lat_or_y;
    c.lon_or_x += sites[static_cast<std::size_t>(i)].lon_or_x;
  }
  c.lat_or_y /= static_cast<double>(members.size());
  c.lon_or_x /= static_cast<double>(members.size());
  return c;
}

std::vector<Coordinate> recompute_centroids(const std::vector<Coordinate>& sites,
                                            const std::vector<int>& assignment,
                                            const std::vector<Coordinate>& previous,
                                            int k) {
  std::vector<std::vector<int>> members(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < assignment.size(); ++i)
    members[static_cast<std::size_t>(assignment[i])].push_back(static_cast<int>(i));
  std::vector<Coordinate> out(static_cast<std::size_t>(k));
  for (int j = 0; j < k; ++j)
    out[static_cast<std::size_t>(j)] =
        mean_coordinate(sites, members[static_cast<std::size_t>(j)],
                        previous[static_cast<std::size_t>(j)]);
  return out;
}

struct TrialState {
  std::vector<int> assignment;
  std::vector<Coordinate> centroids;
  std::vector<int> sizes;
  double objective = std::numeric_limits<double>::infinity();
};

// One greedy assignment pass: sites in index order, each placed in the
// cluster minimizing d(s, c_j) + lambda * (size-penalty change of joining j).
void assign_pass(const std::vector<Coordinate>& sites,
                 const std::vector<Coordinate>& centroids, double lambda,
                 double target, std::vector<int>& assignment,
                 std::vector<int>& sizes) {
  const int k = static_cast<int>(centroids.size());
  for (std::size_t i = 0; i < sites.size(); ++i) {
    const int old = assignment[i];
    if (old >= 0) --sizes[static_cast<std::size_t>(old)];
    int best = 0;
    double best_cost = std::numeric_limits<double>::infinity();
    for (int j = 0; j < k; ++j) {
      const double r = static_cast<double>(sizes[static_cast<std::size_t>(j)]);
      const double dpen = (r + 1.0 - target) * (r + 1.0 - target) -
                          (r - target) * (r - target);
      const double cost =
          distance(sites[i], centroids[static_cast<std::size_t>(j)]) + lambda * dpen;
      if (cost < best_cost) {
        best_cost = cost;
        best = j;
      }
    }
    assignment[i] = best;
    ++sizes[static_cast<std::size_t>(best)];
  }
}

// Empty clusters steal the member farthest from the centroid of the largest
// cluster.
void repair_empty(const std::vector<Coordinate>& sites,
                  const std::vector<Coordinate>& centroids,
                  std::vector<int>& assignment, std::vector<int>& sizes) {
  const int k = static_cast<int>(sizes.size());
  for (int j = 0; j < k; ++j) {
    if (sizes[static_cast<std::size_t>(j)] > 0) continue;
    int donor = 0;
    for (int l = 1; l < k; ++l)
      if (sizes[static_cast<std::size_t>(l)] > sizes[static_cast<std::size_t>(donor)])
        donor = l;
    if (sizes[static_cast<std::size_t>(donor)] <= 1) continue;
    int victim = -1;
    double worst = -1.0;
    for (std::size_t i = 0; i < sites.size(); ++i) {
      if (assignment[i] != donor) continue;
      const double d = distance(sites[i], centroids[static_cast<std::size_t>(donor)]);
      if (d > worst) {
        worst = d;
        victim = static_cast<int>(i);
      }
    }
    assignment[static_cast<std::size_t>(victim)] = j;
    --sizes[static_cast<std::size_t>(donor)];
    ++sizes[static_cast<std::size_t>(j)];
  }
}

TrialState run_trial(const std::vector<Coordinate>& sites, int k, double lambda,
                     std::uint64_t trial_seed) {
  const int n = static_cast<int>(sites.size());
  const double target = static_cast<double>(n) / k;
  Rng rng(trial_seed);

  TrialState cur;
  cur.centroids.reserve(static_cast<std::size_t>(k));
  for (const int idx : rng.sample_without_replacement(n, k))
    cur.centroids.push_back(sites[static_cast<std::size_t>(idx)]);
  cur.assignment.assign(static_cast<std::size_t>(n), -1);
  cur.sizes.assign(static_cast<std::size_t>(k), 0);
  // cold start by nearest centroid only: with no assignment yet the size
  // penalty carries no geometric information and would dominate the fill
  assign_pass(sites, cur.centroids, 0.0, target, cur.assignment, cur.sizes);
  repair_empty(sites, cur.centroids, cur.assignment, cur.sizes);
  cur.centroids = recompute_centroids(sites, cur.assignment, cur.centroids, k);
  cur.objective = partition_objective(sites, cur.assignment, cur.centroids, lambda);

  constexpr int kMaxSweeps = 100;
  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    TrialState next = cur;
    assign_pass(sites, next.centroids, lambda, target, next.assignment, next.sizes);
    repair_empty(sites, next.centroids, next.assignment, next.sizes);
    next.centroids = recompute_centroids(sites, next.assignment, next.centroids, k);
    next.objective = partition_objective(sites, next.assignment, next.centroids, lambda);
    // accept only non-worsening sweeps so the per-trial objective trace is
    // monotone; a worsening sweep means the alternation started to cycle
    if (next.objective > cur.objective) break;
    const bool converged =
        next.assignment == cur.assignment && next.objective == cur.objective;
    cur = std::move(next);
    if (converged) break;
  }
  return cur;
}

}  // namespace

double partition_objective(const std::vector<Coordinate>& sites,
                           const std::vector<int>& assignment,
                           const std::vector<Coordinate>& centroids,
                           double lambda) {
  if (assignment.size() != sites.size())
    throw ArgumentError("assignment length must equal the number of sites");
  const int k = static_cast<int>(centroids.size());
  std::vector<int> sizes(static_cast<std::size_t>(k), 0);
  double dist_term = 0.0;
  for (std::size_t i = 0; i < sites.size(); ++i) {
    const int j = assignment[i];
    if (j < 0 || j >= k) throw ArgumentError("assignment value out of range");
    dist_term += distance(sites[i], centroids[static_cast<std::size_t>(j)]);
    ++sizes[static_cast<std::size_t>(j)];
  }
  const double target = static_cast<double>(sites.size()) / k;
  double penalty = 0.0;
  for (const int r : sizes) penalty += (r - target) * (r - target);
  return dist_term + lambda * penalty;
}

Partitioning fit_kmeans(const std::vector<Coordinate>& sites, int k,
                        double lambda, int trials, std::uint64_t seed,
                        int workers) {
  const int n = static_cast<int>(sites.size());
  if (k < 1 || k > n)
    throw ArgumentError("k must be in [1, n], got k=" + std::to_string(k) +
                        " with n=" + std::to_string(n));
  if (trials < 1) throw ArgumentError("trials must be >= 1");
  if (lambda < 0.0) throw ArgumentError("lambda must be >= 0");

  std::vector<TrialState> results(static_cast<std::size_t>(trials));
  const int n_threads = std::max(1, std::min(workers, trials));
  if (n_threads == 1) {
    for (int t = 0; t < trials; ++t)
      results[static_cast<std::size_t>(t)] = run_trial(sites, k, lambda, seed + static_cast<std::uint64_t>(t));
  } else {
    std::vector<std::thread> pool;
    std::atomic<int> counter{0};
    for (int w = 0; w < n_threads; ++w)
      pool.emplace_back([&] {
        for (;;) {
          const int t = counter.fetch_add(1);
          if (t >= trials) return;
          results[static_cast<std::size_t>(t)] =
              run_trial(sites, k, lambda, seed + static_cast<std::uint64_t>(t));
        }
      });
    for (auto& th : pool) th.join();
  }

  // lowest objective wins; ties go to the lowest trial index
  std::size_t best = 0;
  for (std::size_t t = 1; t < results.size(); ++t)
    if (results[t].objective < results[best].objective) best = t;

  Partitioning out;
  out.k = k;
  out.assignment = std::move(results[best].assignment);
  out.centroids = std::move(results[best].centroids);
  out.sizes = std::move(results[best].sizes);
  out.objective = results[best].objective;
  return out;
}

std::vector<ProfileDataset> partition_dataset(const ProfileDataset& ds,
                                              const Partitioning& part) {
  if (static_cast<int>(part.assignment.size()) != ds.n())
    throw ArgumentError("partitioning was built for a different site count");
  std::vector<ProfileDataset> out;
  out.reserve(static_cast<std::size_t>(part.k));
  for (int j = 0; j < part.k; ++j) {
    std::vector<int> members;
    for (int i = 0; i < ds.n(); ++i)
      if (part.assignment[static_cast<std::size_t>(i)] == j) members.push_back(i);
    out.push_back(subset_sites(ds, members));
  }
  return out;
}

}  // namespace fhdgm
