// afn: command-line front end for data generation, training, inference and serving.

#include "afn/audit.hpp"
#include "afn/bundle.hpp"
#include "afn/error.hpp"
#include "afn/explain.hpp"
#include "afn/ifm.hpp"
#include "afn/risk.hpp"
#include "afn/service.hpp"
#include "afn/transition.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

using namespace afn;
using nlohmann::json;

namespace {

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

void emit(const json& j, const std::string& out) {
  if (out.empty() || out == "-") {
    std::cout << j.dump(2) << "\n";
    return;
  }
  std::ofstream f(out);
  if (!f) throw ConfigError("cannot write " + out);
  f << j.dump(2) << "\n";
}

const Matrix& series_by_id(const TimeSeriesSet& set, const std::string& id) {
  for (size_t i = 0; i < set.size(); ++i) {
    if (set.series_ids[i] == id) return set.values[i];
  }
  throw PreconditionError("series '" + id + "' not found");
}

// series_id,timestamp,regime
void write_labels(const TimeSeriesSet& set, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path);
  out << "series_id,timestamp,regime\n";
  for (size_t i = 0; i < set.size(); ++i) {
    const auto& l = (*set.regime_labels)[i];
    for (size_t t = 0; t < l.size(); ++t) out << set.series_ids[i] << ',' << t << ',' << l[t] << '\n';
  }
}

void attach_labels(TimeSeriesSet& set, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  std::map<std::string, std::vector<int>> by_id;
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string id, ts, r;
    std::getline(ss, id, ',');
    std::getline(ss, ts, ',');
    std::getline(ss, r, ',');
    by_id[id].push_back(std::stoi(r));
  }
  set.regime_labels.emplace();
  for (const auto& id : set.series_ids) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw SchemaError("labels: no rows for series " + id);
    std::vector<int> l = it->second;
    l.resize(static_cast<size_t>(set.length()), l.empty() ? 0 : l.back());
    set.regime_labels->push_back(std::move(l));
  }
}

std::vector<std::string> schema_of(const Bundle& b) { return b.model.feature_names(); }

std::vector<std::string> read_header(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw SchemaError("csv: cannot open " + path);
  std::string line;
  std::getline(in, line);
  std::vector<std::string> cols;
  std::stringstream ss(line);
  std::string c;
  while (std::getline(ss, c, ',')) {
    if (!c.empty() && c.back() == '\r') c.pop_back();
    cols.push_back(c);
  }
  if (cols.size() < 3 || cols[0] != "series_id" || cols[1] != "timestamp") {
    throw SchemaError("csv: header must start with series_id,timestamp");
  }
  return {cols.begin() + 2, cols.end()};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Actionable forecasting network"};
  app.require_subcommand(1);

  // generate
  auto* gen = app.add_subcommand("generate", "Write a synthetic regime-switching panel");
  std::string gen_config, gen_out, gen_labels;
  int gen_n = 1000, gen_t = 91, gen_d = 8, gen_r = 3;
  double gen_stay = 0.95;
  std::uint64_t gen_seed = 0;
  gen->add_option("--config", gen_config, "SynthConfig JSON (overrides the benchmark family)");
  gen->add_option("--N", gen_n);
  gen->add_option("--T", gen_t);
  gen->add_option("--d", gen_d);
  gen->add_option("--R", gen_r);
  gen->add_option("--stay", gen_stay, "Diagonal of the regime transition matrix");
  gen->add_option("--seed", gen_seed);
  gen->add_option("--out", gen_out, "Output CSV")->required();
  gen->add_option("--labels", gen_labels, "Also write hidden regime labels to this CSV");

  // audit
  auto* aud = app.add_subcommand("audit", "Randomness audit of a dataset");
  std::string aud_data, aud_out;
  audit::AuditConfig aud_cfg;
  aud->add_option("--data", aud_data)->required();
  aud->add_option("--n", aud_cfg.n);
  aud->add_option("--length", aud_cfg.sample_length);
  aud->add_option("--repeats", aud_cfg.repeats);
  aud->add_option("--max-lags", aud_cfg.max_lags);
  aud->add_option("--period", aud_cfg.period);
  aud->add_option("--seed", aud_cfg.seed);
  aud->add_option("--out", aud_out);

  // pretrain-tm
  auto* ptm = app.add_subcommand("pretrain-tm", "Fit the transition module");
  std::string ptm_data, ptm_out;
  tm::TmConfig ptm_cfg;
  ptm->add_option("--data", ptm_data)->required();
  ptm->add_option("--K", ptm_cfg.K);
  ptm->add_option("--rho", ptm_cfg.rho);
  ptm->add_option("--C", ptm_cfg.C);
  ptm->add_option("--M", ptm_cfg.M);
  ptm->add_option("--epochs", ptm_cfg.epochs);
  ptm->add_option("--seed", ptm_cfg.seed);
  ptm->add_option("--out", ptm_out)->required();

  // train
  auto* trn = app.add_subcommand("train", "Train a model bundle");
  std::string trn_data, trn_config, trn_ablate = "none", trn_tm, trn_out;
  bool trn_desk = false, trn_no_shap = false;
  std::uint64_t trn_seed = 0;
  trn->add_option("--data", trn_data)->required();
  trn->add_option("--config", trn_config, "ModelConfig JSON");
  trn->add_flag("--desk", trn_desk, "Use the reduced desk-scale architecture");
  trn->add_option("--ablate", trn_ablate, "none|tm|al|df|fft");
  trn->add_option("--tm", trn_tm, "Pretrained transition module JSON");
  trn->add_option("--seed", trn_seed);
  trn->add_flag("--no-shap", trn_no_shap, "Skip fitting the Shapley table");
  trn->add_option("--out", trn_out)->required();

  // forecast
  auto* fc = app.add_subcommand("forecast", "Forecast one series");
  std::string fc_model, fc_data, fc_series, fc_out;
  int fc_h = 6;
  fc->add_option("--model", fc_model)->required();
  fc->add_option("--data", fc_data)->required();
  fc->add_option("--series", fc_series)->required();
  fc->add_option("--horizon", fc_h);
  fc->add_option("--out", fc_out);

  // explain
  auto* ex = app.add_subcommand("explain", "Attentive steps and feature ranking for one series");
  std::string ex_model, ex_data, ex_series, ex_out, ex_fit;
  int ex_h = 6;
  double ex_q = 0.9;
  ex->add_option("--model", ex_model)->required();
  ex->add_option("--data", ex_data);
  ex->add_option("--series", ex_series);
  ex->add_option("--horizon", ex_h);
  ex->add_option("--quantile", ex_q);
  ex->add_option("--fit", ex_fit, "Fit the Shapley table on this training CSV and store it in the bundle");
  ex->add_option("--out", ex_out);

  // classify
  auto* cl = app.add_subcommand("classify", "SR/SH assessment for a cohort");
  std::string cl_model, cl_cohort, cl_out;
  int cl_h = 6, cl_thr = 2;
  cl->add_option("--model", cl_model)->required();
  cl->add_option("--cohort", cl_cohort)->required();
  cl->add_option("--horizon", cl_h);
  cl->add_option("--threshold", cl_thr);
  cl->add_option("--out", cl_out);

  // intervene
  auto* iv = app.add_subcommand("intervene", "What-if reduction of one feature");
  std::string iv_model, iv_data, iv_series, iv_feature, iv_steps = "auto", iv_out;
  double iv_pct = 20.0;
  int iv_h = 6;
  iv->add_option("--model", iv_model)->required();
  iv->add_option("--data", iv_data)->required();
  iv->add_option("--series", iv_series, "Series id (whole cohort when omitted)");
  iv->add_option("--feature", iv_feature)->required();
  iv->add_option("--pct", iv_pct);
  iv->add_option("--steps", iv_steps, "auto or comma-separated step indices");
  iv->add_option("--horizon", iv_h);
  iv->add_option("--out", iv_out);

  // set-risk-map
  auto* rm = app.add_subcommand("set-risk-map", "Store a node risk map in the bundle");
  std::string rm_model, rm_data, rm_labels, rm_scores;
  int rm_regime = -1;
  rm->add_option("--model", rm_model)->required();
  rm->add_option("--data", rm_data, "Training CSV for the regime scorer");
  rm->add_option("--labels", rm_labels, "Regime label CSV for the regime scorer");
  rm->add_option("--risky-regime", rm_regime, "Regime treated as risky (default: last)");
  rm->add_option("--scores", rm_scores, "JSON risk map keyed \"i,j\" from an external scorer");

  // serve
  auto* sv = app.add_subcommand("serve", "HTTP service");
  std::string sv_config;
  sv->add_option("--config", sv_config, std::string("Service config JSON (default $") + service::kConfigEnv + ")");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      SynthConfig sc = gen_config.empty() ? benchmark_synth_config(gen_n, gen_t, gen_d, gen_r, gen_stay, gen_seed)
                                          : load_synth_config(gen_config);
      const TimeSeriesSet set = generate_synthetic(sc);
      write_csv(set, gen_out);
      if (!gen_labels.empty()) write_labels(set, gen_labels);
    } else if (*aud) {
      const TimeSeriesSet set = load_csv(aud_data, read_header(aud_data));
      emit(audit::audit_dataset(set, aud_cfg).to_json(), aud_out);
    } else if (*ptm) {
      const TimeSeriesSet set = load_csv(ptm_data, read_header(ptm_data));
      const auto [norm, stats] = zscore_fit_apply(set);
      tm::PretrainReport rep;
      const tm::TransitionModel model = tm::pretrain_tm(norm, ptm_cfg, &rep);
      std::ofstream(ptm_out) << model.to_json().dump();
      std::cerr << "transition loss per epoch:";
      for (double l : rep.epoch_loss) std::cerr << ' ' << l;
      std::cerr << '\n';
    } else if (*trn) {
      const TimeSeriesSet set = load_csv(trn_data, read_header(trn_data));
      const int d = static_cast<int>(set.dims());
      ifm::ModelConfig cfg = trn_config.empty() ? (trn_desk ? ifm::ModelConfig::desk(d) : ifm::ModelConfig::defaults(d))
                                                : ifm::ModelConfig::from_json(read_json(trn_config));
      cfg.ablation = ifm::Ablation::from_name(trn_ablate);
      if (trn->count("--seed")) cfg.train.seed = trn_seed;
      std::optional<tm::TransitionModel> pre;
      if (!trn_tm.empty()) pre = tm::TransitionModel::from_json(read_json(trn_tm));
      auto res = ifm::train_afn(set, cfg, std::move(pre), [](const ifm::StageLog& l) {
        std::cerr << "stage " << l.stage << " epoch " << l.epoch << " " << l.mean_loss.to_json().dump() << "\n";
      });
      Bundle b{std::move(res.model), std::nullopt, std::nullopt};
      if (!trn_no_shap) {
        explain::ShapOptions so;
        so.seed = cfg.train.seed;
        b.shap_table = explain::fit_som_shap(b.model, set, so);
      }
      save_bundle(b, trn_out);
    } else if (*fc) {
      const Bundle b = load_bundle(fc_model);
      const TimeSeriesSet set = load_csv(fc_data, schema_of(b));
      emit(ifm::forecast(b.model, series_by_id(set, fc_series), fc_h).to_json(), fc_out);
    } else if (*ex) {
      Bundle b = load_bundle(ex_model);
      if (!ex_fit.empty()) {
        explain::ShapOptions so;
        so.seed = b.model.config().train.seed;
        b.shap_table = explain::fit_som_shap(b.model, load_csv(ex_fit, schema_of(b)), so);
        save_bundle(b, ex_model);
      }
      if (!ex_series.empty()) {
        if (ex_data.empty()) throw PreconditionError("explain: --series needs --data");
        const TimeSeriesSet set = load_csv(ex_data, schema_of(b));
        emit(service::explain_payload(b, series_by_id(set, ex_series), ex_h, ex_q), ex_out);
      }
    } else if (*cl) {
      const Bundle b = load_bundle(cl_model);
      if (!b.risk_map) throw UnsupportedError("bundle has no risk map; run `afn set-risk-map` first");
      const TimeSeriesSet set = load_csv(cl_cohort, schema_of(b));
      std::vector<risk::RiskAssessment> as;
      json rows = json::array();
      for (size_t i = 0; i < set.size(); ++i) {
        as.push_back(risk::classify(ifm::forecast(b.model, set.values[i], cl_h), *b.risk_map, cl_thr));
        json r = as.back().to_json();
        r["series_id"] = set.series_ids[i];
        rows.push_back(r);
      }
      emit({{"assessments", rows}, {"metrics", risk::cohort_metrics(as).to_json()}}, cl_out);
    } else if (*iv) {
      const Bundle b = load_bundle(iv_model);
      if (!b.risk_map) throw UnsupportedError("bundle has no risk map; run `afn set-risk-map` first");
      const TimeSeriesSet set = load_csv(iv_data, schema_of(b));
      risk::StepPolicy policy;
      if (iv_steps != "auto") {
        policy.automatic = false;
        std::stringstream ss(iv_steps);
        std::string tok;
        while (std::getline(ss, tok, ',')) policy.steps.push_back(std::stoi(tok));
      }
      std::vector<Matrix> hs;
      if (iv_series.empty()) {
        hs = set.values;
      } else {
        hs.push_back(series_by_id(set, iv_series));
      }
      emit(risk::intervene_cohort(b.model, *b.risk_map, hs, iv_feature, iv_pct, policy, iv_h).to_json(), iv_out);
    } else if (*rm) {
      Bundle b = load_bundle(rm_model);
      if (!rm_scores.empty()) {
        b.risk_map = risk::RiskMap::from_json(read_json(rm_scores));
      } else {
        if (rm_data.empty() || rm_labels.empty()) throw PreconditionError("set-risk-map: need --scores or --data with --labels");
        TimeSeriesSet set = load_csv(rm_data, schema_of(b));
        attach_labels(set, rm_labels);
        int regime = rm_regime;
        if (regime < 0) {
          for (const auto& l : *set.regime_labels) regime = std::max(regime, *std::max_element(l.begin(), l.end()));
        }
        b.risk_map = risk::regime_risk_map(b.model, set, regime);
      }
      save_bundle(b, rm_model);
    } else if (*sv) {
      std::string path = sv_config;
      if (path.empty()) {
        const char* env = std::getenv(service::kConfigEnv);
        if (!env) throw ConfigError(std::string("serve: pass --config or set ") + service::kConfigEnv);
        path = env;
      }
      const auto cfg = service::ServiceConfig::load(path);
      service::ModelRegistry reg;
      reg.load(cfg);
      service::serve(reg, cfg.host, cfg.port);
    }
  } catch (const std::exception& e) {
    std::cerr << "afn: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
