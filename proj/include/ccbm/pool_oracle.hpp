#pragma once

#include <filesystem>
#include <json.hpp>
#include <string>
#include <vector>

#include "ccbm/model.hpp"
#include "ccbm/oracle.hpp"

namespace ccbm {

enum class PoolProposalRule {
  kExact,         // top-M of the enumerated conditional partial posterior, exact weights
  kExactSampled,  // M independent draws from that posterior (repeats kept), exact weights
  kUniform,       // M eligible concepts uniformly without replacement, equal weights
};

std::string to_string(PoolProposalRule rule);
PoolProposalRule pool_rule_from_string(const std::string& name);

struct PoolEntry {
  std::string question;
  std::string feature;  // phrase whose presence in the text defines the concept value
};

struct PoolDefinition {
  std::vector<PoolEntry> entries;
  PoolProposalRule rule = PoolProposalRule::kExact;

  static PoolDefinition load_json(const std::filesystem::path& path);
  static PoolDefinition from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

/// Whole-token phrase containment after keyphrase-style normalization:
/// "Findings: drug use; asthma." contains "drug use" and "asthma" but not "drugs".
bool text_mentions(const std::string& text, const std::string& phrase);

/// Finite concept pool with deterministic annotation functions. Proposals are
/// pure functions of (request, pool, training data): exact mode enumerates
/// p(C_k | c_{-k}, y_rows, X) under a uniform prior, uniform mode samples
/// with the request seed.
class PoolOracle : public ConceptOracle {
 public:
  /// `training` must be labelled for exact proposals; ProposalRequest::rows index into it.
  PoolOracle(PoolDefinition pool, ModelConfig model, std::vector<Observation> training);

  std::vector<KeyphraseBag> extract_keyphrases(std::span<const Observation> observations) override;
  ConceptSet initialize_concepts(const KeyphraseSummary& summary, std::size_t k) override;
  OracleProposal propose(const ProposalRequest& request) override;
  std::vector<AnnotationRecord> annotate(std::span<const Observation> observations,
                                         std::span<const Concept> concepts) override;
  bool uses_keyphrase_summary() const override { return false; }
  nlohmann::json describe() const override;

  const std::vector<Concept>& concepts() const { return concepts_; }
  const PoolDefinition& definition() const { return pool_; }
  /// Index of `c` in the pool, or -1.
  int index_of(const Concept& c) const;
  /// Column of pool concept `j` over the training observations.
  const std::vector<double>& training_column(std::size_t j) const { return training_columns_[j]; }
  double value(const Observation& obs, std::size_t j) const;

  /// Exact conditional partial posterior over pool concepts not in `context`.
  /// Returns (pool index, probability) pairs in pool order.
  std::vector<std::pair<std::size_t, double>> conditional_posterior(
      std::span<const Concept> context, std::span<const std::size_t> rows) const;

 private:
  PoolDefinition pool_;
  ModelConfig model_;
  std::vector<Observation> training_;
  Eigen::VectorXd labels_;
  std::vector<Concept> concepts_;
  std::vector<std::vector<double>> training_columns_;
};

}  // namespace ccbm
