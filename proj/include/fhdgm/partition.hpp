#pragma once

#include <cstdint>
#include <vector>

#include "fhdgm/ingest.hpp"
#include "fhdgm/types.hpp"

namespace fhdgm {

/// A balanced geographical partitioning of sites into k groups.
struct Partitioning {
  int k = 1;
  std::vector<int> assignment;        // length n, values in [0, k)
  std::vector<Coordinate> centroids;  // length k
  std::vector<int> sizes;             // r_1..r_k
  double objective = 0.0;
};

/// Size-penalized k-means objective:
///   sum_j sum_{s in S_j} d(s, c_j) + lambda * sum_j (r_j - n/k)^2.
/// The distance is geodesic (deg) or planar per the coordinate unit.
double partition_objective(const std::vector<Coordinate>& sites,
                           const std::vector<int>& assignment,
                           const std::vector<Coordinate>& centroids,
                           double lambda);

/// Lloyd-style alternation with a greedy per-site size penalty in the
/// assignment step; best of `trials` seeded random restarts (trial i uses
/// seed + i). lambda = 0 gives the classic k-means sweep.
Partitioning fit_kmeans(const std::vector<Coordinate>& sites, int k,
                        double lambda, int trials, std::uint64_t seed,
                        int workers = 1);

/// Site-disjoint sub-datasets, one per cluster, preserving time indexing;
/// the original site indices are retained in each block's `original_sites`.
std::vector<ProfileDataset> partition_dataset(const ProfileDataset& ds,
                                              const Partitioning& part);

}  // namespace fhdgm
