#include "afn/bundle.hpp"

#include "afn/error.hpp"

#include <fstream>
#include <sstream>

namespace afn {

nlohmann::json weight_manifest(const ifm::AfnModel& model) {
  auto& self = const_cast<ifm::AfnModel&>(model);
  nlohmann::json m = nlohmann::json::object();
  for (const ad::Parameter* p : self.params()) m[p->name] = {p->value.rows(), p->value.cols()};
  return m;
}

nlohmann::json Bundle::to_json() const {
  return {{"format", "afn-bundle"},
          {"version", kBundleVersion},
          {"manifest", weight_manifest(model)},
          {"model", model.to_json()},
          {"risk_map", risk_map ? risk_map->to_json() : nlohmann::json(nullptr)},
          {"shap_table", shap_table ? shap_table->to_json() : nlohmann::json(nullptr)}};
}

Bundle Bundle::from_json(const nlohmann::json& j) {
  if (j.value("format", std::string()) != "afn-bundle") throw ConfigError("bundle: not an afn model bundle");
  const int version = j.at("version").get<int>();
  if (version != kBundleVersion) {
    throw ConfigError("bundle: version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kBundleVersion) + ")");
  }
  Bundle b{ifm::AfnModel::from_json(j.at("model")), std::nullopt, std::nullopt};
  if (weight_manifest(b.model) != j.at("manifest")) throw ConfigError("bundle: weight manifest does not match the model");
  if (!j.at("risk_map").is_null()) b.risk_map = risk::RiskMap::from_json(j.at("risk_map"));
  if (!j.at("shap_table").is_null()) b.shap_table = explain::ShapTable::from_json(j.at("shap_table"));
  return b;
}

std::string Bundle::dump() const { return to_json().dump(); }

void save_bundle(const Bundle& b, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write bundle to " + path);
  out << b.dump();
  if (!out) throw ConfigError("failed writing bundle " + path);
}

Bundle load_bundle(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open bundle " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(ss.str());
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("bundle " + path + " is not valid JSON: " + e.what());
  }
  return Bundle::from_json(j);
}

}  // namespace afn
