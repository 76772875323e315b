#pragma once

#include <Eigen/Dense>

#include <optional>
#include <span>

namespace afn::metrics {

/// Adjusted mutual information with arithmetic-mean normalization and the
/// hypergeometric expected mutual information. Labels are non-negative ints.
double adjusted_mutual_information(std::span<const int> a, std::span<const int> b);

double mutual_information(std::span<const int> a, std::span<const int> b);

/// Pearson correlation; nullopt when either input has zero variance.
std::optional<double> pearson(std::span<const double> x, std::span<const double> y);

double mse(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

}  // namespace afn::metrics
