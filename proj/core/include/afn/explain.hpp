// Shapley attributions on SOM nodes, attention points and the blended
// feature ranking.

#pragma once

#include "afn/ifm.hpp"

#include <json.hpp>

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace afn::explain {

using ad::Matrix;
using ad::RowVector;
using ad::Vector;

/// Batched value function: one output per input row.
using BatchFn = std::function<Vector(const Matrix&)>;

/// Exact interventional Shapley values of `f` at `x` against `background`
/// (v(S) = mean over background rows with features in S taken from x).
/// Enumerates all 2^d coalitions; d <= 20.
Vector exact_shapley(const BatchFn& f, const RowVector& x, const Matrix& background);

/// Permutation-sampling estimate with antithetic pairs. Every sampled
/// permutation telescopes to f(x) - E[f], so efficiency holds exactly.
Vector sampled_shapley(const BatchFn& f, const RowVector& x, const Matrix& background, int permutations,
                       std::uint64_t seed);

struct ShapEntry {
  std::string feature;
  double value = 0.0;
};

struct NodeShap {
  std::vector<ShapEntry> top;  // <= 5, |value| descending
  RowVector representative;    // raw feature scale
  bool decoded = false;        // representative came from decode(centroid)
};

struct ShapTable {
  int height = 0;
  int width = 0;
  std::vector<std::string> feature_names;
  std::vector<NodeShap> nodes;  // height * width, row-major

  const NodeShap& at(int row, int col) const { return nodes.at(static_cast<size_t>(row * width + col)); }
  nlohmann::json to_json() const;
  static ShapTable from_json(const nlohmann::json& j);
};

struct ShapOptions {
  int background_size = 100;
  int top_k = 5;
  /// Exact enumeration up to this many features, permutation sampling above.
  int exact_max_d = 10;
  int permutations = 200;
  /// Training rows scanned for representatives (deterministic subsample).
  int max_points = 20000;
  std::uint64_t seed = 0;
};

/// Keeps the `k` largest |value| entries, ties broken by feature order.
std::vector<ShapEntry> top_entries(const Vector& values, const std::vector<std::string>& names, int k);

/// Per-node Shapley table of the one-vs-rest soft membership q_k(encode(x, c)).
ShapTable fit_som_shap(const ifm::AfnModel& model, const TimeSeriesSet& train_raw, const ShapOptions& opts = {});

/// Steps whose attention, averaged over the horizon rows, exceeds the
/// `quantile` of those averages. quantile <= 0 returns every step; an empty
/// selection falls back to the earliest argmax.
std::vector<int> attention_points(const ifm::Forecast& f, double quantile);
std::vector<int> attention_points(const Vector& aggregated, double quantile);

struct RankedFeature {
  std::string feature;
  double mean_shap = 0.0;
  double acceleration = 0.0;
};

using FeatureRanking = std::vector<RankedFeature>;

/// Union of the top features of the nodes visited at `attentive_steps`,
/// ranked by mean |shap| (absent = 0) and then by acceleration, the mean
/// absolute first difference of the raw feature within +-1 step of each
/// attentive step. Remaining ties fall back to feature name.
FeatureRanking rank_features(const ifm::Forecast& f, const Matrix& raw_history, const ShapTable& table,
                             std::span<const int> attentive_steps);

/// Sort used by rank_features, exposed for fixtures.
void sort_ranking(FeatureRanking& r);

/// First entry of each node's list ("" for a node without entries).
std::vector<std::string> dominant_feature_map(const ShapTable& table);

nlohmann::json ranking_to_json(const FeatureRanking& r);

}  // namespace afn::explain
