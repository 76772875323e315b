#include "afn/cluster.hpp"

#include "afn/error.hpp"

#include <limits>
#include <random>

namespace afn::cluster {

int nearest(const Eigen::MatrixXd& centroids, const Eigen::RowVectorXd& x) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index k = 0; k < centroids.rows(); ++k) {
    const double d = (centroids.row(k) - x).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(k);
    }
  }
  return best;
}

KMeansResult kmeans(const Eigen::MatrixXd& points, int k, std::uint64_t seed, int max_iter) {
  const Eigen::Index n = points.rows();
  if (k < 1) throw PreconditionError("kmeans: k must be >= 1");
  if (n < k) throw ClusteringError("kmeans: fewer points than clusters");
  std::mt19937_64 rng(seed);

  KMeansResult res;
  res.centroids.resize(k, points.cols());
  std::uniform_int_distribution<Eigen::Index> first(0, n - 1);
  res.centroids.row(0) = points.row(first(rng));
  Eigen::VectorXd d2(n);
  for (Eigen::Index i = 0; i < n; ++i) d2(i) = (points.row(i) - res.centroids.row(0)).squaredNorm();
  for (int c = 1; c < k; ++c) {
    const double total = d2.sum();
    if (!(total > 0.0)) throw ClusteringError("kmeans: data has fewer distinct points than clusters");
    std::uniform_real_distribution<double> u(0.0, total);
    double r = u(rng);
    Eigen::Index pick = n - 1;
    for (Eigen::Index i = 0; i < n; ++i) {
      r -= d2(i);
      if (r <= 0.0 && d2(i) > 0.0) {
        pick = i;
        break;
      }
    }
    res.centroids.row(c) = points.row(pick);
    for (Eigen::Index i = 0; i < n; ++i) {
      d2(i) = std::min(d2(i), (points.row(i) - res.centroids.row(c)).squaredNorm());
    }
  }

  res.labels.assign(static_cast<size_t>(n), 0);
  for (int it = 0; it < max_iter; ++it) {
    bool changed = it == 0;
    // squared distances via the expansion |x|^2 - 2 x.c + |c|^2
    Eigen::MatrixXd dist = -2.0 * points * res.centroids.transpose();
    dist.colwise() += points.rowwise().squaredNorm();
    dist.rowwise() += res.centroids.rowwise().squaredNorm().transpose();
    for (Eigen::Index i = 0; i < n; ++i) {
      Eigen::Index best = 0;
      dist.row(i).minCoeff(&best);
      if (res.labels[static_cast<size_t>(i)] != static_cast<int>(best)) {
        res.labels[static_cast<size_t>(i)] = static_cast<int>(best);
        changed = true;
      }
    }
    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(k, points.cols());
    Eigen::VectorXd counts = Eigen::VectorXd::Zero(k);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(res.labels[static_cast<size_t>(i)]) += points.row(i);
      counts(res.labels[static_cast<size_t>(i)]) += 1.0;
    }
    for (int c = 0; c < k; ++c) {
      if (counts(c) > 0) res.centroids.row(c) = sums.row(c) / counts(c);
    }
    if (!changed) break;
  }
  res.inertia = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    res.inertia += (points.row(i) - res.centroids.row(res.labels[static_cast<size_t>(i)])).squaredNorm();
  }
  return res;
}

}  // namespace afn::cluster
