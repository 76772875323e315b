#include "afn/service.hpp"

#include "afn/error.hpp"

#include <httplib.h>

#include <fstream>
#include <iostream>

namespace afn::service {

namespace {

struct HttpError {
  int status;
  std::string field;
  std::string message;
};

Response error_response(const HttpError& e) {
  nlohmann::json body = {{"error", e.message}};
  if (!e.field.empty()) body["field"] = e.field;
  return {e.status, body};
}

std::shared_ptr<const ModelEntry> find_model(const ModelRegistry& reg, const nlohmann::json& req) {
  if (!req.is_object()) throw HttpError{422, "", "request body must be a JSON object"};
  std::string id;
  if (req.contains("model")) {
    if (!req.at("model").is_string()) throw HttpError{422, "model", "model must be a string"};
    id = req.at("model").get<std::string>();
  } else {
    const auto ids = reg.ids();
    if (ids.size() != 1) throw HttpError{422, "model", "model id is required"};
    id = ids.front();
  }
  auto entry = reg.get(id);
  if (!entry) throw HttpError{404, "model", "unknown model '" + id + "'"};
  return entry;
}

Matrix history_of(const ModelEntry& e, const nlohmann::json& req) {
  const int d = e.bundle->model.d();
  if (req.contains("values")) {
    const auto& v = req.at("values");
    if (!v.is_array() || v.empty()) throw HttpError{422, "values", "values must be a non-empty [T, d] array"};
    Matrix x(static_cast<Eigen::Index>(v.size()), d);
    for (size_t t = 0; t < v.size(); ++t) {
      if (!v[t].is_array() || static_cast<int>(v[t].size()) != d) {
        throw HttpError{422, "values", "row " + std::to_string(t) + " must have " + std::to_string(d) + " numbers"};
      }
      for (int j = 0; j < d; ++j) {
        if (!v[t][static_cast<size_t>(j)].is_number()) throw HttpError{422, "values", "values must be numbers"};
        x(static_cast<Eigen::Index>(t), j) = v[t][static_cast<size_t>(j)].get<double>();
      }
    }
    return x;
  }
  if (req.contains("series_id")) {
    if (!e.data) throw HttpError{422, "series_id", "model has no stored series"};
    const std::string sid = req.at("series_id").is_string() ? req.at("series_id").get<std::string>() : std::string();
    const auto& ids = e.data->series_ids;
    const auto it = std::find(ids.begin(), ids.end(), sid);
    if (it == ids.end()) throw HttpError{404, "series_id", "unknown series '" + sid + "'"};
    return e.data->values[static_cast<size_t>(it - ids.begin())];
  }
  throw HttpError{422, "values", "provide values or series_id"};
}

int horizon_of(const nlohmann::json& req) {
  if (!req.contains("horizon")) throw HttpError{422, "horizon", "horizon is required"};
  if (!req.at("horizon").is_number_integer()) throw HttpError{422, "horizon", "horizon must be an integer"};
  const int h = req.at("horizon").get<int>();
  if (h < 1) throw HttpError{422, "horizon", "horizon must be >= 1"};
  return h;
}

// Library preconditions surface as 422 against the offending payload.
template <class F>
Response guarded(F&& f) {
  try {
    return f();
  } catch (const HttpError& e) {
    return error_response(e);
  } catch (const UnsupportedError& e) {
    return {409, {{"error", e.what()}}};
  } catch (const PreconditionError& e) {
    return {422, {{"error", e.what()}}};
  } catch (const DomainError& e) {
    return {422, {{"error", e.what()}}};
  } catch (const nlohmann::json::exception& e) {
    return {422, {{"error", std::string("malformed request: ") + e.what()}}};
  }
}

std::string key(int k, int width) { return std::to_string(k / width) + "," + std::to_string(k % width); }

}  // namespace

ServiceConfig ServiceConfig::from_json(const nlohmann::json& j) {
  ServiceConfig c;
  for (const auto& m : j.at("models")) {
    c.models.push_back({m.at("id").get<std::string>(), m.at("bundle_path").get<std::string>(),
                        m.value("data_path", std::string())});
  }
  c.host = j.value("host", c.host);
  c.port = j.value("port", c.port);
  if (c.port < 0 || c.port > 65535) throw ConfigError("service: port out of range");
  return c;
}

ServiceConfig ServiceConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open service config " + path);
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("service config " + path + ": " + e.what());
  }
}

void ModelRegistry::put(std::shared_ptr<const ModelEntry> entry) {
  std::lock_guard lock(mu_);
  models_[entry->id] = std::move(entry);
}

std::shared_ptr<const ModelEntry> ModelRegistry::get(const std::string& id) const {
  std::lock_guard lock(mu_);
  const auto it = models_.find(id);
  return it == models_.end() ? nullptr : it->second;
}

std::vector<std::string> ModelRegistry::ids() const {
  std::lock_guard lock(mu_);
  std::vector<std::string> out;
  for (const auto& [id, _] : models_) out.push_back(id);
  return out;
}

void ModelRegistry::load(const ServiceConfig& cfg) {
  for (const auto& spec : cfg.models) {
    auto e = std::make_shared<ModelEntry>();
    e->id = spec.id;
    e->bundle = std::make_shared<const Bundle>(load_bundle(spec.bundle_path));
    if (!spec.data_path.empty()) {
      e->data = std::make_shared<const TimeSeriesSet>(load_csv(spec.data_path, e->bundle->model.feature_names()));
    }
    put(std::move(e));
  }
}

nlohmann::json explain_payload(const Bundle& b, const Matrix& raw_history, int horizon, double quantile) {
  if (!b.model.ablation().attention) throw UnsupportedError("explain: attention layer is ablated in this model");
  if (!b.shap_table) throw UnsupportedError("explain: bundle has no Shapley table; fit it with `afn explain --fit`");
  const ifm::Forecast f = ifm::forecast(b.model, raw_history, horizon);
  const std::vector<int> steps = explain::attention_points(f, quantile);
  const explain::FeatureRanking ranking = explain::rank_features(f, raw_history, *b.shap_table, steps);
  nlohmann::json nodes = nlohmann::json::object();
  const int w = b.shap_table->width;
  for (int t : steps) {
    const int k = f.node_path[static_cast<size_t>(t)];
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& e : b.shap_table->nodes[static_cast<size_t>(k)].top) {
      entries.push_back({{"feature", e.feature}, {"value", e.value}});
    }
    nodes[key(k, w)] = entries;
  }
  return {{"attentive_steps", steps}, {"feature_ranking", explain::ranking_to_json(ranking)}, {"shap", nodes}};
}

nlohmann::json grid_payload(const Bundle& b) {
  if (!b.risk_map) throw UnsupportedError("grid: bundle has no risk map; run `afn set-risk-map` first");
  const som::SomGrid g = b.model.convae().grid();
  nlohmann::json centroids = nlohmann::json::object();
  for (int k = 0; k < g.size(); ++k) {
    const ad::RowVector c = g.centroids.row(k);
    centroids[key(k, g.width)] = std::vector<double>(c.data(), c.data() + c.size());
  }
  nlohmann::json dominant(nullptr);
  if (b.shap_table) {
    dominant = nlohmann::json::object();
    const auto names = explain::dominant_feature_map(*b.shap_table);
    for (int k = 0; k < g.size(); ++k) dominant[key(k, g.width)] = names[static_cast<size_t>(k)];
  }
  return {{"height", g.height},
          {"width", g.width},
          {"risk_map", b.risk_map->to_json().at("scores")},
          {"dominant_features", dominant},
          {"centroids", centroids}};
}

Response handle_forecast(const ModelRegistry& reg, const nlohmann::json& req) {
  return guarded([&] {
    const auto e = find_model(reg, req);
    const int h = horizon_of(req);
    const Matrix x = history_of(*e, req);
    return Response{200, ifm::forecast(e->bundle->model, x, h).to_json()};
  });
}

Response handle_explain(const ModelRegistry& reg, const nlohmann::json& req) {
  return guarded([&] {
    const auto e = find_model(reg, req);
    const int h = horizon_of(req);
    const Matrix x = history_of(*e, req);
    const double q = req.value("quantile", 0.9);
    return Response{200, explain_payload(*e->bundle, x, h, q)};
  });
}

Response handle_intervene(const ModelRegistry& reg, const nlohmann::json& req) {
  return guarded([&] {
    const auto e = find_model(reg, req);
    const Bundle& b = *e->bundle;
    const int h = horizon_of(req);
    const Matrix x = history_of(*e, req);
    if (!req.contains("feature") || !req.at("feature").is_string()) throw HttpError{422, "feature", "feature is required"};
    const std::string feature = req.at("feature").get<std::string>();
    const auto& names = b.model.feature_names();
    if (std::find(names.begin(), names.end(), feature) == names.end()) {
      throw HttpError{422, "feature", "unknown feature '" + feature + "'"};
    }
    if (!req.contains("reduction_pct") || !req.at("reduction_pct").is_number()) {
      throw HttpError{422, "reduction_pct", "reduction_pct is required"};
    }
    const double pct = req.at("reduction_pct").get<double>();
    if (!(pct > 0.0 && pct < 100.0)) throw HttpError{422, "reduction_pct", "reduction_pct must lie in (0, 100)"};
    risk::StepPolicy policy;
    if (req.contains("steps") && !(req.at("steps").is_string() && req.at("steps").get<std::string>() == "auto")) {
      if (!req.at("steps").is_array()) throw HttpError{422, "steps", "steps must be \"auto\" or a list of indices"};
      policy.automatic = false;
      for (const auto& s : req.at("steps")) {
        if (!s.is_number_integer() || s.get<int>() < 0 || s.get<int>() >= x.rows()) {
          throw HttpError{422, "steps", "steps must index the history"};
        }
        policy.steps.push_back(s.get<int>());
      }
    }
    if (!b.risk_map) throw UnsupportedError("intervene: bundle has no risk map; run `afn set-risk-map` first");
    return Response{200, risk::intervene(b.model, *b.risk_map, x, feature, pct, policy, h).to_json()};
  });
}

Response handle_grid(const ModelRegistry& reg, const std::string& model_id) {
  return guarded([&] {
    nlohmann::json req = nlohmann::json::object();
    if (!model_id.empty()) req["model"] = model_id;
    const auto e = find_model(reg, req);
    return Response{200, grid_payload(*e->bundle)};
  });
}

void serve(const ModelRegistry& reg, const std::string& host, int port, std::stop_token stop,
           const std::function<void(int port)>& on_ready) {
  httplib::Server srv;
  auto post = [&](const char* path, Response (*handler)(const ModelRegistry&, const nlohmann::json&)) {
    srv.Post(path, [&reg, handler](const httplib::Request& rq, httplib::Response& rs) {
      Response r;
      try {
        r = handler(reg, nlohmann::json::parse(rq.body));
      } catch (const nlohmann::json::parse_error& e) {
        r = {422, {{"error", std::string("body is not valid JSON: ") + e.what()}}};
      }
      rs.status = r.status;
      rs.set_content(r.body.dump(), "application/json");
    });
  };
  post("/forecast", &handle_forecast);
  post("/explain", &handle_explain);
  post("/intervene", &handle_intervene);
  srv.Get("/grid", [&reg](const httplib::Request& rq, httplib::Response& rs) {
    const Response r = handle_grid(reg, rq.has_param("model") ? rq.get_param_value("model") : std::string());
    rs.status = r.status;
    rs.set_content(r.body.dump(), "application/json");
  });
  const int bound = port == 0 ? srv.bind_to_any_port(host) : (srv.bind_to_port(host, port) ? port : -1);
  if (bound < 0) throw ConfigError("service: cannot bind " + host + ":" + std::to_string(port));
  std::stop_callback on_stop(stop, [&srv] { srv.stop(); });
  std::cerr << "afn: listening on " << host << ":" << bound << "\n";
  if (on_ready) on_ready(bound);
  if (!stop.stop_requested()) srv.listen_after_bind();
}

}  // namespace afn::service
