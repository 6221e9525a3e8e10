#pragma once

// Metrics, concept matching and recovery, the brute-force posterior over a
// finite pool, and the synthetic data generator.

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <json.hpp>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "ccbm/concept.hpp"
#include "ccbm/dataset.hpp"
#include "ccbm/keyphrase.hpp"
#include "ccbm/model.hpp"
#include "ccbm/pool_oracle.hpp"

namespace ccbm {

/// Mann-Whitney AUC with midranks. Throws UndefinedMetricError unless both classes occur.
double auc(std::span<const double> scores, std::span<const int> labels);
double brier(std::span<const double> scores, std::span<const int> labels);
double accuracy(std::span<const double> scores, std::span<const int> labels, double threshold = 0.5);
/// -sum p log p; probabilities must sum to 1 within 1e-9.
double predictive_entropy(std::span<const double> class_probs);

/// Pearson correlation; nullopt when either column is constant.
std::optional<double> pearson(std::span<const double> a, std::span<const double> b);

struct ConceptMatchRule {
  double threshold = 0.5;
  std::size_t min_shared = 10;
  double borderline_low = 0.45;
  double borderline_high = 0.55;

  void validate() const;
};

/// |corr| > threshold. Constant columns never match. Throws InconclusiveMatch
/// when fewer than rule.min_shared observations are available.
bool concepts_match(std::span<const double> a, std::span<const double> b, const ConceptMatchRule& rule);

/// Annotation column of a concept over a fixed evaluation panel.
using PanelLookup = std::function<std::vector<double>(const Concept&)>;

struct MatchedPair {
  std::string sampled_id;
  std::string sampled_question;
  std::string true_id;
  std::string true_question;
  double correlation = 0.0;  // signed; NaN-free (constant columns are reported as 0)
};

struct ConceptFrequency {
  std::string id;
  std::string question;
  double frequency = 0.0;  // fraction of samples containing the concept
};

struct RecoveryReport {
  double concept_precision = 0.0;
  double concept_recall = 0.0;
  std::vector<double> per_truth_recall;
  std::vector<ConceptFrequency> frequencies;  // descending, ties by id
  std::vector<MatchedPair> matched;           // distinct sampled concept x true concept pairs that match
  std::vector<MatchedPair> borderline;        // |corr| inside the review band
  std::vector<std::string> warnings;

  nlohmann::json to_json() const;
  std::string frequencies_csv() const;
};

RecoveryReport recovery_report(std::span<const ConceptSet> samples, std::span<const Concept> truth,
                               const ConceptMatchRule& rule, const PanelLookup& panel);

struct EnumeratedSupport {
  std::vector<std::size_t> pool_indices;  // ascending
  std::string key;                        // ConceptSet::support_key of the support
  double log_marginal = 0.0;
  double probability = 0.0;
};

struct EnumeratedPosterior {
  std::vector<EnumeratedSupport> supports;  // lexicographic in pool indices

  std::map<std::string, double> by_key() const;
  nlohmann::json to_json() const;
};

/// p(c | y, X) over all unordered k-subsets of `pool` under a uniform prior.
/// `columns[j]` is pool concept j over the labelled rows. Refuses with
/// CombinatorialBudgetExceeded when C(|pool|, k) > max_supports.
EnumeratedPosterior enumerate_posterior(std::span<const Concept> pool, std::size_t k,
                                        const Eigen::VectorXd& y,
                                        std::span<const std::vector<double>> columns, double gamma,
                                        double max_supports = 1e5);

/// Empirical frequencies of unordered supports in a list of concept sets.
std::map<std::string, double> support_frequencies(std::span<const ConceptSet> samples);
double total_variation(const std::map<std::string, double>& p, const std::map<std::string, double>& q);

struct SyntheticFeature {
  std::string question;
  std::string feature;  // normalized phrase written into the note when active
  double prevalence = 0.3;
};

struct SyntheticSpec {
  std::size_t n = 100;
  std::vector<SyntheticFeature> pool;
  std::vector<std::size_t> true_support;
  std::vector<double> coefficients;
  double intercept = 0.0;
  /// Each feature copies a shared Bernoulli draw with this probability, so two
  /// features with equal prevalence correlate at feature_copy_probability^2.
  double feature_copy_probability = 0.0;
  std::uint64_t seed = 0;
  std::string id_prefix = "obs";

  void validate() const;
};

/// Five social-history features with the (+4, +4, +4, -4, +5) pattern, 25
/// distractors, no intercept. Pool order: true features first.
SyntheticSpec default_synthetic_spec(std::size_t n, std::uint64_t seed);

struct SyntheticData {
  std::vector<Observation> observations;
  std::vector<KeyphraseBag> keyphrases;
  Eigen::MatrixXd features;  // n x |pool|, 0/1
  PoolDefinition pool;
  std::vector<Concept> truth;
  Eigen::VectorXd logits;
};

SyntheticData generate_synthetic(const SyntheticSpec& spec);

/// "Patient note. Findings: a; b." or "Patient note. No notable findings."
std::string synthetic_note(const std::vector<std::string>& active_features);

}  // namespace ccbm
