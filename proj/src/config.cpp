#include "mthd/config.hpp"

#include <fstream>

namespace mthd {

using nlohmann::json;

void to_json(json& j, TrainPhase phase) { j = std::string(to_string(phase)); }

void from_json(const json& j, TrainPhase& phase) {
  const auto text = j.get<std::string>();
  if (text == "supervised")
    phase = TrainPhase::supervised;
  else if (text == "ssl")
    phase = TrainPhase::ssl;
  else
    throw ConfigError("unknown train phase: " + text);
}

void to_json(json& j, SensitivityMode mode) {
  j = mode == SensitivityMode::lesion_pooled ? "lesion_pooled" : "per_study_mean";
}

void from_json(const json& j, SensitivityMode& mode) {
  const auto text = j.get<std::string>();
  if (text == "lesion_pooled")
    mode = SensitivityMode::lesion_pooled;
  else if (text == "per_study_mean")
    mode = SensitivityMode::per_study_mean;
  else
    throw ConfigError("unknown sensitivity mode: " + text);
}

void propagate_seed(ExperimentConfig& config, std::uint64_t seed) {
  config.seed = seed;
  config.data.seed = seed;
  config.model.seed = seed;
  config.train.seed = seed;
  config.split.seed = seed;
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override must look like key.path=value: " + assignment);
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);

  std::string pointer;
  for (std::size_t start = 0; start <= key.size();) {
    const auto dot = std::min(key.find('.', start), key.size());
    pointer += "/" + key.substr(start, dot - start);
    start = dot + 1;
  }
  const json::json_pointer ptr(pointer);
  if (!doc.contains(ptr)) throw ConfigError("unknown config key: " + key);

  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  doc[ptr] = value;
}

void reject_unknown_keys(const json& doc, const json& reference, const std::string& prefix) {
  if (!doc.is_object() || !reference.is_object()) return;
  for (const auto& [key, value] : doc.items()) {
    if (!reference.contains(key)) throw ConfigError("unknown config key: " + prefix + key);
    reject_unknown_keys(value, reference.at(key), prefix + key + ".");
  }
}

ExperimentConfig parse_experiment_config(const json& doc_in, const std::vector<std::string>& overrides) {
  const json reference = ExperimentConfig{};
  reject_unknown_keys(doc_in, reference);
  json doc = reference;
  doc.merge_patch(doc_in);
  for (const auto& o : overrides) apply_override(doc, o);
  try {
    return doc.get<ExperimentConfig>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid config value: ") + e.what());
  }
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path,
                                        const std::vector<std::string>& overrides) {
  json doc = json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file: " + path.string());
    try {
      doc = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
    }
  }
  return parse_experiment_config(doc, overrides);
}

}  // namespace mthd
