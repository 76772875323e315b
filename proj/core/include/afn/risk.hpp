// Node risk map, burst-based SR/SH classification, what-if interventions
// and the jump/condition diagnostic.

#pragma once

#include "afn/ifm.hpp"

#include <json.hpp>

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace afn::risk {

using ad::Matrix;
using ad::RowVector;

/// Score in [0,1] per grid node; a node is dark when its score is > 0.
struct RiskMap {
  int height = 0;
  int width = 0;
  std::vector<double> scores;

  bool dark(int node) const { return scores.at(static_cast<size_t>(node)) > 0.0; }
  /// Throws DomainError for a wrong size or a score outside [0,1].
  void validate() const;
  nlohmann::json to_json() const;  // keyed "i,j"
  static RiskMap from_json(const nlohmann::json& j);
};

/// Maps (node, raw representative features) to a score in [0,1].
using NodeScorer = std::function<double(int node, const RowVector& representative)>;

/// Applies `scorer` to every node; `representatives` holds one raw row per node.
RiskMap score_nodes(int height, int width, const Matrix& representatives, const NodeScorer& scorer);

/// Default synthetic scorer. With p_k the share of node-k training points
/// whose hidden regime is `risky_regime` and p the overall share, the score
/// is max(0, p_k - p) / (1 - p). Nodes without points score 0.
RiskMap regime_risk_map(const ifm::AfnModel& model, const TimeSeriesSet& train_raw, int risky_regime);

/// Index of the first dark run longer than `threshold`, if any.
std::optional<int> first_burst(const std::vector<bool>& dark, int threshold);

struct RiskAssessment {
  bool sr = false;
  std::optional<int> burst_start;  // absolute step on history + horizon
  std::optional<int> tts;
  std::vector<bool> dark_sequence;
  int present = 0;  // history length T

  std::string label() const { return sr ? "SR" : "SH"; }
  nlohmann::json to_json() const;
};

/// SR iff the dark-flag sequence over `nodes` contains a run of more than
/// `threshold` dark nodes; the earliest such run sets burst_start.
RiskAssessment classify(std::span<const int> nodes, const RiskMap& map, int present, int threshold = 2);
RiskAssessment classify(const ifm::Forecast& f, const RiskMap& map, int threshold = 2);

/// max(0, burst_start - present); warns on stderr when clamping.
int tts(const RiskAssessment& a, int present);

struct CohortMetrics {
  double verbosity = 0.0;
  std::optional<double> precision;
  std::optional<double> recall;

  nlohmann::json to_json() const;
};

CohortMetrics cohort_metrics(std::span<const RiskAssessment> assessments,
                             const std::optional<std::vector<bool>>& truth = std::nullopt);

struct PlayerIntervention {
  RiskAssessment before;
  RiskAssessment after;
  std::vector<int> steps;
};

struct InterventionResult {
  std::string feature;
  double reduction_pct = 0.0;
  double delta_sr_volume = 0.0;  // percent change in SR count
  double delta_tts = 0.0;        // percent change in mean TTS over players SR before and after
  std::vector<PlayerIntervention> players;

  nlohmann::json to_json() const;
};

/// Steps to modify: explicit list, or "auto" = attentive steps at `quantile`
/// (last history step when attention is ablated).
struct StepPolicy {
  bool automatic = true;
  std::vector<int> steps;
  double quantile = 0.9;
};

/// Scales `feature` at `steps` by (1 - pct/100) in raw space; other features untouched.
Matrix apply_reduction(const Matrix& raw_history, int feature, double pct, std::span<const int> steps);

InterventionResult intervene(const ifm::AfnModel& model, const RiskMap& map, const Matrix& raw_history,
                             const std::string& feature, double pct, const StepPolicy& steps, int horizon,
                             int threshold = 2);
InterventionResult intervene_cohort(const ifm::AfnModel& model, const RiskMap& map,
                                    const std::vector<Matrix>& histories, const std::string& feature, double pct,
                                    const StepPolicy& steps, int horizon, int threshold = 2);

struct JumpCorrelation {
  std::vector<double> values;  // |r| per usable trajectory
  int skipped = 0;
  double mean = 0.0;
  double median = 0.0;

  nlohmann::json to_json() const;
};

/// Per trajectory |pearson| between the Manhattan grid distance of
/// successive nodes and the condition-switch indicator.
JumpCorrelation jump_condition_correlation(std::span<const ifm::Forecast> forecasts);
std::optional<double> jump_condition_r(std::span<const int> nodes, std::span<const int> conditions, int width);

}  // namespace afn::risk
