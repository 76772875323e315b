// JSON request handlers and the HTTP front end. Handlers are pure functions
// of (registry snapshot, request) so the CLI and the server share them.

#pragma once

#include "afn/bundle.hpp"
#include "afn/data.hpp"

#include <json.hpp>

#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <stop_token>
#include <string>
#include <vector>

namespace afn::service {

inline constexpr const char* kConfigEnv = "AFN_SERVICE_CONFIG";

struct ModelSpec {
  std::string id;
  std::string bundle_path;
  std::string data_path;  // optional CSV for requests by series id
};

struct ServiceConfig {
  std::vector<ModelSpec> models;
  std::string host = "127.0.0.1";
  int port = 8080;

  static ServiceConfig from_json(const nlohmann::json& j);
  static ServiceConfig load(const std::string& path);
};

/// Immutable snapshot served to requests.
struct ModelEntry {
  std::string id;
  std::shared_ptr<const Bundle> bundle;
  std::shared_ptr<const TimeSeriesSet> data;  // may be null
};

class ModelRegistry {
 public:
  /// Inserts or atomically replaces a model.
  void put(std::shared_ptr<const ModelEntry> entry);
  std::shared_ptr<const ModelEntry> get(const std::string& id) const;
  std::vector<std::string> ids() const;
  /// Loads every bundle (and data file) listed in `cfg`.
  void load(const ServiceConfig& cfg);

 private:
  mutable std::mutex mu_;
  std::map<std::string, std::shared_ptr<const ModelEntry>> models_;
};

struct Response {
  int status = 200;
  nlohmann::json body;
};

Response handle_forecast(const ModelRegistry& reg, const nlohmann::json& req);
Response handle_explain(const ModelRegistry& reg, const nlohmann::json& req);
Response handle_intervene(const ModelRegistry& reg, const nlohmann::json& req);
/// `model_id` may be empty when exactly one model is loaded.
Response handle_grid(const ModelRegistry& reg, const std::string& model_id);

/// Payload builders shared with the command-line tool.
nlohmann::json explain_payload(const Bundle& b, const Matrix& raw_history, int horizon, double quantile);
nlohmann::json grid_payload(const Bundle& b);

/// Blocks serving /forecast, /explain, /intervene and /grid until `stop`
/// is requested. `on_ready` runs once the socket is bound.
void serve(const ModelRegistry& reg, const std::string& host, int port, std::stop_token stop = {},
           const std::function<void(int port)>& on_ready = {});

}  // namespace afn::service
