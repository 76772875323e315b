#include "afn/metrics.hpp"

#include "afn/error.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace afn::metrics {

namespace {

struct Contingency {
  std::vector<std::vector<double>> table;
  std::vector<double> rows;
  std::vector<double> cols;
  double n = 0.0;
};

Contingency contingency(std::span<const int> a, std::span<const int> b) {
  if (a.size() != b.size() || a.empty()) throw PreconditionError("labelings must be non-empty and equal length");
  const int ka = *std::max_element(a.begin(), a.end()) + 1;
  const int kb = *std::max_element(b.begin(), b.end()) + 1;
  if (*std::min_element(a.begin(), a.end()) < 0 || *std::min_element(b.begin(), b.end()) < 0) {
    throw PreconditionError("labels must be non-negative");
  }
  Contingency c;
  c.table.assign(static_cast<size_t>(ka), std::vector<double>(static_cast<size_t>(kb), 0.0));
  c.rows.assign(static_cast<size_t>(ka), 0.0);
  c.cols.assign(static_cast<size_t>(kb), 0.0);
  for (size_t i = 0; i < a.size(); ++i) {
    c.table[static_cast<size_t>(a[i])][static_cast<size_t>(b[i])] += 1.0;
    c.rows[static_cast<size_t>(a[i])] += 1.0;
    c.cols[static_cast<size_t>(b[i])] += 1.0;
  }
  c.n = static_cast<double>(a.size());
  return c;
}

double entropy(const std::vector<double>& counts, double n) {
  double h = 0.0;
  for (double c : counts) {
    if (c > 0) h -= (c / n) * std::log(c / n);
  }
  return h;
}

double mi_from(const Contingency& c) {
  double mi = 0.0;
  for (size_t i = 0; i < c.rows.size(); ++i) {
    for (size_t j = 0; j < c.cols.size(); ++j) {
      const double nij = c.table[i][j];
      if (nij > 0) mi += (nij / c.n) * std::log(c.n * nij / (c.rows[i] * c.cols[j]));
    }
  }
  return mi;
}

double expected_mi(const Contingency& c) {
  const double n = c.n;
  double emi = 0.0;
  for (double ai : c.rows) {
    if (ai == 0) continue;
    for (double bj : c.cols) {
      if (bj == 0) continue;
      const double lo = std::max(1.0, ai + bj - n);
      const double hi = std::min(ai, bj);
      for (double nij = lo; nij <= hi; nij += 1.0) {
        const double term = (nij / n) * std::log(n * nij / (ai * bj));
        const double logp = std::lgamma(ai + 1) + std::lgamma(bj + 1) + std::lgamma(n - ai + 1) +
                            std::lgamma(n - bj + 1) - std::lgamma(n + 1) - std::lgamma(nij + 1) -
                            std::lgamma(ai - nij + 1) - std::lgamma(bj - nij + 1) -
                            std::lgamma(n - ai - bj + nij + 1);
        emi += term * std::exp(logp);
      }
    }
  }
  return emi;
}

}  // namespace

double mutual_information(std::span<const int> a, std::span<const int> b) {
  return mi_from(contingency(a, b));
}

double adjusted_mutual_information(std::span<const int> a, std::span<const int> b) {
  const Contingency c = contingency(a, b);
  const double ha = entropy(c.rows, c.n);
  const double hb = entropy(c.cols, c.n);
  // both labelings constant, or identical single clusters
  if (ha == 0.0 && hb == 0.0) return 1.0;
  const double mi = mi_from(c);
  const double emi = expected_mi(c);
  const double denom = 0.5 * (ha + hb) - emi;
  if (std::abs(denom) < 1e-15) return 0.0;
  return (mi - emi) / denom;
}

std::optional<double> pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw PreconditionError("pearson: need equal lengths >= 2");
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx <= 0.0 || syy <= 0.0) return std::nullopt;
  return sxy / std::sqrt(sxx * syy);
}

double mse(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw PreconditionError("mse: shape mismatch");
  return (a - b).squaredNorm() / static_cast<double>(a.size());
}

}  // namespace afn::metrics
