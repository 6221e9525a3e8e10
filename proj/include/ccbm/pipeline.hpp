#pragma once

// Run lifecycle: configuration, run directories, keyphrase extraction,
// initialization, the chain, checkpoints, prediction and reports.

#include <filesystem>
#include <json.hpp>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ccbm/annotation_cache.hpp"
#include "ccbm/dataset.hpp"
#include "ccbm/eval.hpp"
#include "ccbm/keyphrase_model.hpp"
#include "ccbm/llm_oracle.hpp"
#include "ccbm/pool_oracle.hpp"
#include "ccbm/sampler.hpp"

namespace ccbm {

inline constexpr const char* kSoftwareVersion = "0.1.0";

enum class InitRule { kKeyphrase, kRandom };

struct RunConfig {
  std::filesystem::path dataset;
  std::filesystem::path output_dir;
  std::filesystem::path test_dataset;  // optional: held-out metrics and matching panel
  std::filesystem::path truth;         // optional: {"concepts": [questions]}
  std::filesystem::path cache_dir;     // default: <output_dir>/cache

  std::string oracle_kind = "pool";  // pool | llm
  nlohmann::json pool;               // inline definition or {"path": ...}
  LlmConfig llm;

  SamplerConfig sampler;
  ModelConfig model;
  KeyphraseModelConfig keyphrase;
  InitRule init = InitRule::kKeyphrase;
  double match_threshold = 0.5;

  /// Relative paths are resolved against `base`. Throws ConfigError.
  static RunConfig from_json(const nlohmann::json& j, const std::filesystem::path& base = {});
  nlohmann::json to_json() const;
  void validate() const;
};

struct RunOptions {
  bool resume = false;
  int halt_after_epoch = -1;
  /// Replaces the HTTP transport for the LLM oracle (tests).
  std::shared_ptr<ChatTransport> transport;
  LlmOracle::Sleeper sleeper;
};

struct RunResult {
  std::filesystem::path run_dir;
  std::string status;  // complete | halted | aborted
  nlohmann::json manifest;
};

/// Builds the oracle described by `cfg`; `training` feeds the pool oracle.
std::unique_ptr<ConceptOracle> make_oracle(const RunConfig& cfg, const std::vector<Observation>& training,
                                           const RunOptions& opts);

/// Keyphrases, initialization, warm start, sampling and reports. Any failure
/// propagates after a partial manifest is written; the last checkpoint stays resumable.
RunResult cmd_run(const RunConfig& cfg, const RunOptions& opts = {});

struct PredictionRow {
  std::string id;
  std::optional<double> probability;  // absent when the row could not be annotated
  std::optional<int> label;
  nlohmann::json breakdown;
};

/// Ensemble predictions for `observations` from the samples in `run_dir`.
std::vector<PredictionRow> cmd_predict(const std::filesystem::path& run_dir,
                                       const std::vector<Observation>& observations,
                                       const RunOptions& opts = {});

/// Metrics on `test` (if it has labels) and a recovery report against `truth`
/// (if given). Writes reports/eval.json, reports/recovery.json and the CSV.
nlohmann::json cmd_eval(const std::filesystem::path& run_dir, const std::filesystem::path& test,
                        const std::filesystem::path& truth, const RunOptions& opts = {});

struct SimulateOptions {
  std::size_t n_train = 800;
  std::size_t n_test = 500;
  std::uint64_t seed = 0;
  std::string proposal = "uniform";
  double feature_copy_probability = 0.0;
  std::optional<double> intercept;
};

/// Writes train.jsonl, test.jsonl, pool.json and truth.json into `out_dir`.
nlohmann::json cmd_simulate(const std::filesystem::path& out_dir, const SimulateOptions& opts);

/// Exact posterior over k-subsets of a pool on a labelled dataset.
EnumeratedPosterior cmd_enumerate(const std::filesystem::path& dataset, const std::filesystem::path& pool,
                                  std::size_t k, double gamma);

/// Keyphrase pass plus the all-rows keyphrase-model summary; cached under the run's cache dir.
nlohmann::json cmd_extract_keyphrases(const RunConfig& cfg, const RunOptions& opts = {});

/// Writes `text` to `path` through a temporary file and rename.
void write_atomic(const std::filesystem::path& path, const std::string& text);

}  // namespace ccbm
