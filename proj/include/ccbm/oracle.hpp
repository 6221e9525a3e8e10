#pragma once

// Concept-oracle contract. An oracle extracts keyphrases, proposes and scores
// candidate concepts for one Gibbs slot, and annotates observations with
// concept values. Two implementations exist: PoolOracle (finite, deterministic,
// used for testing and enumeration) and LlmOracle (chat-completions endpoint).

#include <cstdint>
#include <json.hpp>
#include <span>
#include <string>
#include <vector>

#include "ccbm/concept.hpp"
#include "ccbm/dataset.hpp"
#include "ccbm/keyphrase.hpp"

namespace ccbm {

/// What the proposal is allowed to see: nothing (prior), the subset S
/// (partial posterior, the default) or every row (full posterior).
enum class OracleMode { kPriorOnly, kPartialPosterior, kFullPosterior };

std::string to_string(OracleMode mode);
OracleMode oracle_mode_from_string(const std::string& name);

enum class AnnotationSource { kLlm, kPool, kHumanOverride };

std::string to_string(AnnotationSource source);
AnnotationSource annotation_source_from_string(const std::string& name);

struct AnnotationRecord {
  std::string observation_id;
  std::string concept_id;
  double value = 0.5;
  AnnotationSource source = AnnotationSource::kPool;
  bool imputed = false;  // parse failure; value is the 0.5 fallback
};

/// Candidates for one slot with their proposal weights Q. `q_current` is the
/// weight the same proposal distribution gives the incumbent concept.
struct OracleProposal {
  std::vector<Concept> candidates;
  std::vector<double> q_weights;
  double q_current = 0.0;
  std::vector<std::string> flags;  // fallbacks applied while parsing, for the run log
};

struct ProposalRequest {
  std::vector<Concept> context;  // c_{-k}
  Concept incumbent;
  std::size_t slot = 0;
  std::size_t k = 1;
  std::size_t m = 1;
  const KeyphraseSummary* summary = nullptr;  // null when the oracle does not use one
  std::span<const std::size_t> rows;          // training rows the proposal may condition on
  std::uint64_t seed = 0;                     // drawn from the chain RNG
};

class ConceptOracle {
 public:
  virtual ~ConceptOracle() = default;

  virtual std::vector<KeyphraseBag> extract_keyphrases(std::span<const Observation> observations) = 0;
  virtual ConceptSet initialize_concepts(const KeyphraseSummary& summary, std::size_t k) = 0;
  virtual OracleProposal propose(const ProposalRequest& request) = 0;
  /// One record per (observation, concept), observation-major.
  virtual std::vector<AnnotationRecord> annotate(std::span<const Observation> observations,
                                                 std::span<const Concept> concepts) = 0;

  /// Whether propose() reads request.summary (the sampler skips the keyphrase fit otherwise).
  virtual bool uses_keyphrase_summary() const = 0;
  virtual nlohmann::json describe() const = 0;
};

}  // namespace ccbm
