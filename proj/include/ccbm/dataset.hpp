#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace ccbm {

struct Observation {
  std::string id;
  std::string text;  // text body, or an opaque content reference for other modalities
  std::optional<int> label;
};

/// Newline-delimited JSON, one {"id", "text", "label"} object per line.
class Dataset {
 public:
  Dataset() = default;
  explicit Dataset(std::vector<Observation> observations);

  static Dataset load_jsonl(const std::filesystem::path& path);
  void save_jsonl(const std::filesystem::path& path) const;

  const std::vector<Observation>& observations() const { return observations_; }
  std::size_t size() const { return observations_.size(); }
  bool has_labels() const;
  /// 0/1 labels as doubles; throws ConfigError if any label is missing.
  Eigen::VectorXd labels() const;

 private:
  std::vector<Observation> observations_;
};

}  // namespace ccbm
