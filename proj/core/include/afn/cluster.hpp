#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <vector>

namespace afn::cluster {

struct KMeansResult {
  Eigen::MatrixXd centroids;  // k x dim
  std::vector<int> labels;
  double inertia = 0.0;
};

/// Lloyd's algorithm with k-means++ seeding. Ties go to the lowest index.
/// Throws ClusteringError when fewer than k distinct points exist.
KMeansResult kmeans(const Eigen::MatrixXd& points, int k, std::uint64_t seed, int max_iter = 100);

/// Index of the nearest row of `centroids` to `x` (lowest index on ties).
int nearest(const Eigen::MatrixXd& centroids, const Eigen::RowVectorXd& x);

}  // namespace afn::cluster
