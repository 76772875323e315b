#include "afn/risk.hpp"

#include "afn/error.hpp"
#include "afn/explain.hpp"
#include "afn/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

namespace afn::risk {

namespace {

std::string node_key(int k, int width) { return std::to_string(k / width) + "," + std::to_string(k % width); }

nlohmann::json opt(const std::optional<int>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }
nlohmann::json opt(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

}  // namespace

void RiskMap::validate() const {
  if (height < 1 || width < 1 || scores.size() != static_cast<size_t>(height * width)) {
    throw DomainError("risk map: expected one score per grid node");
  }
  for (double s : scores) {
    if (!(s >= 0.0 && s <= 1.0)) throw DomainError("risk map: score outside [0,1]");
  }
}

nlohmann::json RiskMap::to_json() const {
  nlohmann::json nodes = nlohmann::json::object();
  for (int k = 0; k < height * width; ++k) nodes[node_key(k, width)] = scores[static_cast<size_t>(k)];
  return {{"height", height}, {"width", width}, {"scores", nodes}};
}

RiskMap RiskMap::from_json(const nlohmann::json& j) {
  RiskMap m;
  m.height = j.at("height").get<int>();
  m.width = j.at("width").get<int>();
  if (m.height < 1 || m.width < 1) throw DomainError("risk map: empty grid");
  for (int k = 0; k < m.height * m.width; ++k) m.scores.push_back(j.at("scores").at(node_key(k, m.width)).get<double>());
  m.validate();
  return m;
}

RiskMap score_nodes(int height, int width, const Matrix& representatives, const NodeScorer& scorer) {
  if (representatives.rows() != height * width) throw PreconditionError("score_nodes: one representative per node");
  RiskMap m{height, width, {}};
  for (int k = 0; k < height * width; ++k) {
    const double s = scorer(k, representatives.row(k));
    if (!(s >= 0.0 && s <= 1.0)) {
      throw DomainError("scorer returned " + std::to_string(s) + " for node " + node_key(k, width) +
                        "; scores must lie in [0,1]");
    }
    m.scores.push_back(s);
  }
  return m;
}

RiskMap regime_risk_map(const ifm::AfnModel& model, const TimeSeriesSet& train_raw, int risky_regime) {
  if (!train_raw.regime_labels) throw PreconditionError("regime_risk_map: training data has no regime labels");
  const som::SomGrid grid = model.convae().grid();
  std::vector<double> risky(static_cast<size_t>(grid.size()), 0.0), total(static_cast<size_t>(grid.size()), 0.0);
  double all_risky = 0.0, all = 0.0;
  for (size_t i = 0; i < train_raw.size(); ++i) {
    const Matrix x = model.norm_stats().apply(train_raw.values[i]);
    const ifm::ConditionTrack track = model.condition_track(x);
    const auto nodes = som::som_assign_rows(model.convae().encode_mean(x, track.onehot), grid.centroids);
    const auto& labels = (*train_raw.regime_labels)[i];
    for (size_t s = 0; s < nodes.size(); ++s) {
      const bool r = labels[s] == risky_regime;
      risky[static_cast<size_t>(nodes[s])] += r;
      total[static_cast<size_t>(nodes[s])] += 1.0;
      all_risky += r;
      all += 1.0;
    }
  }
  const double base = all > 0 ? all_risky / all : 0.0;
  RiskMap m{grid.height, grid.width, std::vector<double>(static_cast<size_t>(grid.size()), 0.0)};
  if (base >= 1.0) {
    std::fill(m.scores.begin(), m.scores.end(), 1.0);
    return m;
  }
  for (size_t k = 0; k < m.scores.size(); ++k) {
    if (total[k] > 0) m.scores[k] = std::clamp((risky[k] / total[k] - base) / (1.0 - base), 0.0, 1.0);
  }
  return m;
}

std::optional<int> first_burst(const std::vector<bool>& dark, int threshold) {
  if (threshold < 1) throw PreconditionError("burst threshold must be >= 1");
  int run = 0;
  for (size_t t = 0; t < dark.size(); ++t) {
    run = dark[t] ? run + 1 : 0;
    if (run > threshold) return static_cast<int>(t) - threshold;
  }
  return std::nullopt;
}

nlohmann::json RiskAssessment::to_json() const {
  return {{"label", label()}, {"burst_start", opt(burst_start)}, {"tts", opt(tts)},
          {"dark_sequence", dark_sequence}, {"present", present}};
}

RiskAssessment classify(std::span<const int> nodes, const RiskMap& map, int present, int threshold) {
  if (nodes.empty()) throw PreconditionError("classify: empty node path");
  RiskAssessment a;
  a.present = present;
  for (int k : nodes) {
    if (k < 0 || k >= map.height * map.width) throw PreconditionError("classify: node outside the grid");
    a.dark_sequence.push_back(map.dark(k));
  }
  a.burst_start = first_burst(a.dark_sequence, threshold);
  a.sr = a.burst_start.has_value();
  if (a.sr) a.tts = tts(a, present);
  return a;
}

RiskAssessment classify(const ifm::Forecast& f, const RiskMap& map, int threshold) {
  return classify(f.node_path, map, f.history_length, threshold);
}

int tts(const RiskAssessment& a, int present) {
  if (!a.sr || !a.burst_start) throw UnsupportedError("tts: assessment is SH");
  const int d = *a.burst_start - present;
  if (d < 0) {
    std::cerr << "warning: burst starts inside the history; tts clamped to 0\n";
    return 0;
  }
  return d;
}

nlohmann::json CohortMetrics::to_json() const {
  return {{"verbosity", verbosity}, {"precision", opt(precision)}, {"recall", opt(recall)}};
}

CohortMetrics cohort_metrics(std::span<const RiskAssessment> assessments, const std::optional<std::vector<bool>>& truth) {
  if (assessments.empty()) throw PreconditionError("cohort_metrics: empty cohort");
  CohortMetrics m;
  double sr = 0.0;
  for (const auto& a : assessments) sr += a.sr;
  m.verbosity = sr / static_cast<double>(assessments.size());
  if (truth) {
    if (truth->size() != assessments.size()) throw PreconditionError("cohort_metrics: truth size mismatch");
    double tp = 0.0, pos = 0.0;
    for (size_t i = 0; i < assessments.size(); ++i) {
      tp += assessments[i].sr && (*truth)[i];
      pos += (*truth)[i];
    }
    if (sr > 0) m.precision = tp / sr;
    if (pos > 0) m.recall = tp / pos;
  }
  return m;
}

Matrix apply_reduction(const Matrix& raw_history, int feature, double pct, std::span<const int> steps) {
  if (!(pct > 0.0 && pct < 100.0)) throw PreconditionError("intervene: reduction must lie in (0, 100)");
  if (feature < 0 || feature >= raw_history.cols()) throw PreconditionError("intervene: feature index out of range");
  Matrix out = raw_history;
  for (int t : steps) {
    if (t < 0 || t >= raw_history.rows()) throw PreconditionError("intervene: step outside the history");
    out(t, feature) *= 1.0 - pct / 100.0;
  }
  return out;
}

nlohmann::json InterventionResult::to_json() const {
  nlohmann::json ps = nlohmann::json::array();
  for (const auto& p : players) {
    ps.push_back({{"before", p.before.to_json()}, {"after", p.after.to_json()}, {"steps", p.steps}});
  }
  return {{"feature", feature},
          {"reduction_pct", reduction_pct},
          {"delta_sr_volume", delta_sr_volume},
          {"delta_tts", delta_tts},
          {"players", ps}};
}

InterventionResult intervene_cohort(const ifm::AfnModel& model, const RiskMap& map,
                                    const std::vector<Matrix>& histories, const std::string& feature, double pct,
                                    const StepPolicy& policy, int horizon, int threshold) {
  const auto& names = model.feature_names();
  const auto it = std::find(names.begin(), names.end(), feature);
  if (it == names.end()) throw PreconditionError("intervene: unknown feature '" + feature + "'");
  if (!(pct > 0.0 && pct < 100.0)) throw PreconditionError("intervene: reduction must lie in (0, 100)");
  if (histories.empty()) throw PreconditionError("intervene: empty cohort");
  const int j = static_cast<int>(it - names.begin());

  InterventionResult res;
  res.feature = feature;
  res.reduction_pct = pct;
  double sr_before = 0, sr_after = 0, tts_before = 0, tts_after = 0;
  int both = 0;
  for (const Matrix& h : histories) {
    const ifm::Forecast base = ifm::forecast(model, h, horizon);
    PlayerIntervention p;
    p.before = classify(base, map, threshold);
    if (!policy.automatic) {
      p.steps = policy.steps;
    } else if (base.has_attention) {
      p.steps = explain::attention_points(base, policy.quantile);
    } else {
      p.steps = {static_cast<int>(h.rows()) - 1};
    }
    const ifm::Forecast alt = ifm::forecast(model, apply_reduction(h, j, pct, p.steps), horizon);
    p.after = classify(alt, map, threshold);
    sr_before += p.before.sr;
    sr_after += p.after.sr;
    if (p.before.sr && p.after.sr) {
      tts_before += *p.before.tts;
      tts_after += *p.after.tts;
      ++both;
    }
    res.players.push_back(std::move(p));
  }
  res.delta_sr_volume = sr_before > 0 ? 100.0 * (sr_after - sr_before) / sr_before : 0.0;
  res.delta_tts = both > 0 && tts_before > 0 ? 100.0 * (tts_after - tts_before) / tts_before : 0.0;
  return res;
}

InterventionResult intervene(const ifm::AfnModel& model, const RiskMap& map, const Matrix& raw_history,
                             const std::string& feature, double pct, const StepPolicy& steps, int horizon,
                             int threshold) {
  return intervene_cohort(model, map, {raw_history}, feature, pct, steps, horizon, threshold);
}

std::optional<double> jump_condition_r(std::span<const int> nodes, std::span<const int> conditions, int width) {
  if (nodes.size() != conditions.size() || nodes.size() < 2) {
    throw PreconditionError("jump_condition_r: need equal-length paths of >= 2 steps");
  }
  std::vector<double> jump, sw;
  for (size_t t = 1; t < nodes.size(); ++t) {
    jump.push_back(std::abs(nodes[t] / width - nodes[t - 1] / width) + std::abs(nodes[t] % width - nodes[t - 1] % width));
    sw.push_back(conditions[t] != conditions[t - 1] ? 1.0 : 0.0);
  }
  if (jump.size() < 2) return std::nullopt;
  const auto r = metrics::pearson(jump, sw);
  if (!r) return std::nullopt;
  return std::abs(*r);
}

nlohmann::json JumpCorrelation::to_json() const {
  return {{"mean", mean}, {"median", median}, {"used", values.size()}, {"skipped", skipped}};
}

JumpCorrelation jump_condition_correlation(std::span<const ifm::Forecast> forecasts) {
  if (forecasts.size() < 10) throw PreconditionError("jump_condition_correlation: need >= 10 forecasts");
  JumpCorrelation out;
  for (const auto& f : forecasts) {
    if (f.node_path.size() < 5) throw PreconditionError("jump_condition_correlation: need >= 5 steps per forecast");
    std::vector<int> conds;
    for (const auto& c : f.conditions) conds.push_back(c.discrete);
    const auto r = jump_condition_r(f.node_path, conds, f.grid_width);
    if (r) {
      out.values.push_back(*r);
    } else {
      ++out.skipped;
    }
  }
  if (!out.values.empty()) {
    double s = 0;
    for (double v : out.values) s += v;
    out.mean = s / static_cast<double>(out.values.size());
    std::vector<double> sorted = out.values;
    std::sort(sorted.begin(), sorted.end());
    const size_t n = sorted.size();
    out.median = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  }
  return out;
}

}  // namespace afn::risk
