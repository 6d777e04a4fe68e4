#pragma once

// Semi-supervised k-means, linear assignment and clustering accuracy.

#include <cstdint>
#include <set>
#include <span>
#include <vector>

#include "hilo/tensor.hpp"

namespace hilo {

struct KMeansOptions {
  std::size_t max_iter = 100;
  double tol = 1e-8;  // stop once no centroid moves farther than this
  std::uint64_t seed = 0;
};

struct ClusterResult {
  std::vector<std::size_t> assignments;
  Tensor centroids;          // [k, dim]
  Tensor initial_centroids;  // [k, dim], before the first Lloyd step
  double inertia = 0.0;
  std::size_t iterations = 0;
  std::vector<double> inertia_trace;  // after each centroid update
};

// Lloyd iterations on points [N, dim]. forced[i] >= 0 pins point i to that
// cluster; -1 leaves it free. Forced clusters start at their members' mean,
// the others by greedy farthest-point selection over free points (the first
// one drawn uniformly when no cluster is forced). Ties go to the lowest
// cluster index; an emptied cluster is re-seeded at the free point farthest
// from its centroid, or left empty when every point sits on its centroid.
ClusterResult ss_kmeans(const Tensor& points, std::size_t k, std::span<const int> forced,
                        const KMeansOptions& opts = {});

struct Assignment {
  std::vector<std::size_t> row_to_col;  // for each row of the original matrix
  double cost = 0.0;
};

// Minimum-cost assignment on cost [rows, cols]; rectangular input is padded
// with zeros to a square matrix.
Assignment hungarian(const Tensor& cost);

struct AccReport {
  double acc_all = 0.0;
  double acc_old = 0.0;
  double acc_new = 0.0;
  std::size_t count_all = 0, count_old = 0, count_new = 0;
  std::vector<std::size_t> permutation;  // predicted cluster -> class
};

// One optimal matching on all points, then restricted to old / new classes.
// Empty subsets report accuracy 0.
AccReport cluster_acc(std::span<const std::size_t> y_true, std::span<const std::size_t> y_pred,
                      const std::set<std::size_t>& old_classes);

}  // namespace hilo
