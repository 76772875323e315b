// Randomness battery for panels: Wald-Wolfowitz runs test, autocorrelation
// significance ratio and classical trend/seasonal/residual decomposition.

#pragma once

#include "afn/data.hpp"

#include <json.hpp>

#include <cstdint>
#include <span>
#include <vector>

namespace afn::audit {

/// Two-sided runs test p-value from the normal approximation.
/// Values are dichotomized above/below the median; ties are dropped.
/// Requires at least 10 values and a non-constant series.
double runs_test(std::span<const double> series);

/// Runs test on an already dichotomized sequence (any length >= 2 with both
/// symbols present). Returns 1 when the run-count variance is zero.
double runs_test_binary(std::span<const int> bits);

/// Fraction of lags 1..max_lags whose biased sample autocorrelation falls
/// outside +-2/sqrt(T).
double acf_ratio(std::span<const double> series, int max_lags);

/// Biased sample autocorrelation for lags 0..max_lags.
std::vector<double> acf(std::span<const double> series, int max_lags);

enum class DecompositionModel { kAdditive, kMultiplicative };

struct Components {
  std::vector<double> trend;
  std::vector<double> seasonal;
  std::vector<double> residual;
};

/// Classical decomposition: centred moving-average trend (2 x period MA for
/// even periods), phase means of the detrended series as seasonal component.
/// The first and last half-window of the trend are linear extrapolations of
/// the adjacent `period` interior trend values. For the additive model
/// trend + seasonal + residual reproduces the input at every point.
Components decompose(std::span<const double> series, int period,
                     DecompositionModel model = DecompositionModel::kAdditive);

struct ExplainedVariance {
  double trend = 0.0;     // percent
  double seasonal = 0.0;  // percent
  double residual = 0.0;  // percent
  double residual_std = 0.0;
};

/// Sum of squares of each component over the sum of squares of the original.
ExplainedVariance explained_variance(const Components& c, std::span<const double> original);

struct AuditConfig {
  int n = 30;              // samples per repeat
  int sample_length = 13;  // slice length
  int repeats = 1000;
  int max_lags = 6;        // acf lags per slice
  int period = 7;          // decomposition period
  std::uint64_t seed = 0;
};

struct AuditReport {
  double runs_p_mean = 0.0;
  double runs_p_std = 0.0;
  double acf_ratio_mean = 0.0;
  double acf_ratio_std = 0.0;
  ExplainedVariance explained_variance;
  int n_samples = 0;
  int sample_length = 0;
  int repeats = 0;
  int skipped = 0;  // slices where a statistic was undefined

  nlohmann::json to_json() const;
};

/// Each repeat draws `n` series with uniform random slice offsets; each slice
/// contributes the feature-averaged runs-test p-value and ACF ratio, and the
/// repeat statistic is their mean. Reported mean/std are across repeats.
/// Explained variance is averaged over every (series, feature) at full length.
AuditReport audit_dataset(const TimeSeriesSet& set, const AuditConfig& cfg);

}  // namespace afn::audit
