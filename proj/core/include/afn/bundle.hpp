// Versioned single-file model archive.

#pragma once

#include "afn/explain.hpp"
#include "afn/ifm.hpp"
#include "afn/risk.hpp"

#include <json.hpp>

#include <optional>
#include <string>

namespace afn {

inline constexpr int kBundleVersion = 1;

/// {format, version, manifest, model, risk_map, shap_table}. The manifest
/// lists every weight tensor with its shape and is checked on load.
struct Bundle {
  ifm::AfnModel model;
  std::optional<risk::RiskMap> risk_map;
  std::optional<explain::ShapTable> shap_table;

  nlohmann::json to_json() const;
  static Bundle from_json(const nlohmann::json& j);
  /// Compact serialization; identical bundles give identical bytes.
  std::string dump() const;
};

nlohmann::json weight_manifest(const ifm::AfnModel& model);

void save_bundle(const Bundle& b, const std::string& path);
Bundle load_bundle(const std::string& path);

}  // namespace afn
