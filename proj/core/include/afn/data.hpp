// Multivariate panel data: ingestion, z-score normalization, per-series
// splitting and a seeded regime-switching generator.

#pragma once

#include <Eigen/Dense>
#include <json.hpp>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace afn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// N series, each T x d, all sharing T and d.
struct TimeSeriesSet {
  std::vector<std::string> series_ids;
  std::vector<Matrix> values;
  std::vector<std::string> feature_names;
  /// Hidden regime per (series, step); present only for synthetic data.
  std::optional<std::vector<std::vector<int>>> regime_labels;
  std::string sampling_period = "1d";

  size_t size() const { return values.size(); }
  Eigen::Index length() const { return values.empty() ? 0 : values.front().rows(); }
  Eigen::Index dims() const { return static_cast<Eigen::Index>(feature_names.size()); }
  int feature_index(const std::string& name) const;  // -1 if absent
  /// Subset by series index, preserving order of `idx`.
  TimeSeriesSet subset(const std::vector<size_t>& idx) const;
  /// Throws PreconditionError if the shape invariants do not hold.
  void validate() const;
};

/// Names of the eight sample game-play features, used as default schema.
std::vector<std::string> default_feature_names(int d);

struct NormStats {
  Vector mean;
  Vector std;

  /// (x - mean) / std, row-wise on a T x d block.
  Matrix apply(const Matrix& x) const;
  Matrix invert(const Matrix& z) const;
  TimeSeriesSet apply(const TimeSeriesSet& set) const;
  TimeSeriesSet invert(const TimeSeriesSet& set) const;

  nlohmann::json to_json() const;
  static NormStats from_json(const nlohmann::json& j);
};

/// Fits per-feature mean/std over every step of every series (population std).
/// Constant features get std = 1 and a warning on stderr.
NormStats fit_zscore(const TimeSeriesSet& set);
std::pair<TimeSeriesSet, NormStats> zscore_fit_apply(const TimeSeriesSet& set);

enum class LengthPolicy { kTruncate, kPad };

struct CsvOptions {
  bool impute = true;  // forward fill then back fill
  LengthPolicy length_policy = LengthPolicy::kTruncate;
};

/// Reads `series_id,timestamp,<features...>`. Only the schema columns are kept,
/// in schema order. Rows are sorted by timestamp within each series
/// (numerically when every timestamp parses as a number, else lexically).
TimeSeriesSet load_csv(const std::string& path, const std::vector<std::string>& schema,
                       const CsvOptions& opts = {});
TimeSeriesSet parse_csv(std::istream& in, const std::vector<std::string>& schema,
                        const CsvOptions& opts = {});
void write_csv(const TimeSeriesSet& set, const std::string& path);

struct Split {
  TimeSeriesSet train;
  TimeSeriesSet test;
};

/// Random partition across series; |train| = round(ratio * N) clamped to [1, N-1].
Split split(const TimeSeriesSet& set, double ratio, std::uint64_t seed);

struct RegimeParams {
  std::vector<double> mean;  // length d
  double noise_scale = 1.0;  // multiplies SynthConfig::noise_std
  double trend = 0.0;        // per-step slope added to every feature
  double seasonal_amplitude = 0.0;
  int seasonal_period = 7;
};

struct SynthConfig {
  int N = 100;
  int T = 91;
  int d = 8;
  int R = 2;
  std::vector<std::vector<double>> transition;  // R x R, row-stochastic
  std::vector<RegimeParams> regimes;            // size R
  double noise_std = 0.5;
  std::uint64_t seed = 0;
  std::vector<std::string> feature_names;       // defaults when empty
  /// Features emitted as regime-0 mean + noise regardless of regime.
  std::vector<int> null_features;

  /// Throws ConfigError when the invariants do not hold.
  void validate() const;
  nlohmann::json to_json() const;
  static SynthConfig from_json(const nlohmann::json& j);
};

SynthConfig load_synth_config(const std::string& path);

/// Regime paths follow the Markov chain from a uniform initial regime;
/// emission = mean + trend * t + amplitude * sin(2 pi t / period) + noise.
TimeSeriesSet generate_synthetic(const SynthConfig& cfg);

/// Regime-switching benchmark family used throughout the tests.
///
/// `stay` is the diagonal of the transition matrix (off-diagonal mass is
/// spread uniformly). Regime r has mean vector shifted along a fixed
/// per-regime direction; the last regime is the high-indulgence one with
/// elevated levels on the money/desperation features. When `null_feature`
/// is set the last feature is pure noise with identical law in every regime.
SynthConfig benchmark_synth_config(int N, int T, int d, int R, double stay, std::uint64_t seed,
                                   bool null_feature = true);

}  // namespace afn
