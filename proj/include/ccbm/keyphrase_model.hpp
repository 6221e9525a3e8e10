#pragma once

// Keyphrase residual model: bag-of-words over keyphrase bags plus the annotated
// concepts c_{-k}, ridge-penalized on the keyphrase block only, with the
// penalty picked by K-fold cross-validation. Its top coefficients become the
// summary the oracle sees when proposing replacements.

#include <Eigen/Dense>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ccbm/keyphrase.hpp"

namespace ccbm {

struct Vocabulary {
  std::vector<std::string> phrases;  // column order
  std::unordered_map<std::string, std::size_t> index;
  std::vector<std::size_t> document_frequency;

  std::size_t size() const { return phrases.size(); }
};

/// Binary presence matrix stored by row.
struct BowMatrix {
  std::size_t cols = 0;
  std::vector<std::vector<std::size_t>> row_columns;  // sorted column indices per row
  std::vector<std::string> row_ids;

  std::size_t rows() const { return row_columns.size(); }
  Eigen::MatrixXd dense() const;
};

/// Builds the vocabulary from `bags` (the active subset only). Phrases with
/// document frequency below `min_df` are dropped; `max_vocab` (0 = no cap)
/// keeps the most frequent ones, ties by phrase. Throws EmptyVocabularyError.
std::pair<Vocabulary, BowMatrix> build_bow(std::span<const KeyphraseBag> bags, std::size_t min_df,
                                           std::size_t max_vocab = 0);

/// 10 points log-spaced over [1e-3, 1e3].
std::vector<double> default_lambda_grid();

struct KeyphraseModelConfig {
  std::vector<double> lambda_grid = default_lambda_grid();
  int folds = 5;
  std::uint64_t fold_seed = 17;
  double concept_ridge = 1e-6;  // conditioning only; concepts and intercept stay effectively free
  std::size_t min_df = 2;
  std::size_t max_vocab = 500;
  std::size_t top_n = 50;
  bool force_multinomial = false;
};

struct KeyphraseModelFit {
  int num_classes = 2;
  bool multinomial = false;
  Eigen::MatrixXd beta_w;     // V x C (C = 1 for the binary fit)
  Eigen::MatrixXd beta_c;     // K_c x C
  Eigen::RowVectorXd intercept;  // C
  double lambda = 0.0;
  std::vector<double> cv_scores;  // mean held-out log loss per grid entry
  std::vector<std::string> phrases;
};

/// Minimizes (1/n) sum logistic-loss + lambda |beta_W|^2 for a fixed lambda.
KeyphraseModelFit fit_keyphrase_model_fixed(const BowMatrix& bow, const Eigen::MatrixXd& concepts,
                                            std::span<const int> labels, double lambda,
                                            const KeyphraseModelConfig& cfg,
                                            const Vocabulary* vocab = nullptr);

/// CV over cfg.lambda_grid (argmin, first occurrence on ties), then refit on all rows.
/// Folds are assigned from a seeded hash of the row ids, so row order does not matter.
KeyphraseModelFit fit_keyphrase_model(const BowMatrix& bow, const Eigen::MatrixXd& concepts,
                                      std::span<const int> labels,
                                      const KeyphraseModelConfig& cfg,
                                      const Vocabulary* vocab = nullptr);

/// Top phrases by |beta_W| (per phrase, its largest-magnitude class entry);
/// zero coefficients are left out.
KeyphraseSummary summarize_top_keyphrases(const KeyphraseModelFit& fit, std::size_t top_n);
/// Same, restricted to one class column of a multinomial fit.
KeyphraseSummary summarize_class(const KeyphraseModelFit& fit, int label_class,
                                 std::size_t top_n);

/// Convenience for the pipeline: vocabulary, CV fit and summary in one call.
/// Returns an empty summary when the vocabulary is empty.
KeyphraseSummary keyphrase_summary_for(std::span<const KeyphraseBag> bags,
                                       const Eigen::MatrixXd& concepts,
                                       std::span<const int> labels,
                                       const KeyphraseModelConfig& cfg);

}  // namespace ccbm
