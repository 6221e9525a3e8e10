#include "ccbm/dataset.hpp"

#include <fstream>
#include <json.hpp>
#include <unordered_set>

#include "ccbm/errors.hpp"

namespace ccbm {

using json = nlohmann::json;

Dataset::Dataset(std::vector<Observation> observations) : observations_(std::move(observations)) {
  std::unordered_set<std::string> ids;
  for (const auto& obs : observations_) {
    if (!ids.insert(obs.id).second) throw ConfigError("duplicate observation id: " + obs.id);
    if (obs.label && *obs.label != 0 && *obs.label != 1) {
      throw ConfigError("label must be 0 or 1 for observation " + obs.id);
    }
  }
}

Dataset Dataset::load_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open dataset " + path.string());
  std::vector<Observation> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      Observation obs;
      obs.id = j.at("id").get<std::string>();
      obs.text = j.value("text", std::string{});
      if (j.contains("label") && !j.at("label").is_null()) obs.label = j.at("label").get<int>();
      out.push_back(std::move(obs));
    } catch (const json::exception& e) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return Dataset(std::move(out));
}

void Dataset::save_jsonl(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write dataset " + path.string());
  for (const auto& obs : observations_) {
    json j = {{"id", obs.id}, {"text", obs.text}};
    if (obs.label) j["label"] = *obs.label;
    out << j.dump() << '\n';
  }
}

bool Dataset::has_labels() const {
  for (const auto& obs : observations_) {
    if (!obs.label) return false;
  }
  return !observations_.empty();
}

Eigen::VectorXd Dataset::labels() const {
  Eigen::VectorXd y(static_cast<Eigen::Index>(observations_.size()));
  for (std::size_t i = 0; i < observations_.size(); ++i) {
    if (!observations_[i].label) {
      throw ConfigError("observation " + observations_[i].id + " has no label");
    }
    y[static_cast<Eigen::Index>(i)] = *observations_[i].label;
  }
  return y;
}

}  // namespace ccbm
