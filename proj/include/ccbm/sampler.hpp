#pragma once

// Metropolis-within-Gibbs over concept sets. Each slot update draws a fresh
// split S, asks the oracle for replacement candidates, and accepts using the
// partial Bayes factor of the held-out rows. Warm-start epochs replace the
// accept step with a greedy argmax.

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <json.hpp>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "ccbm/annotation_cache.hpp"
#include "ccbm/concept.hpp"
#include "ccbm/model.hpp"
#include "ccbm/oracle.hpp"
#include "ccbm/rng.hpp"

namespace ccbm {

enum class UpdateMode { kSingleTry, kMultiTry };

std::string to_string(UpdateMode mode);
UpdateMode update_mode_from_string(const std::string& name);

struct SamplerConfig {
  std::size_t k = 1;
  int t_epochs = 5;
  std::size_t m_candidates = 10;
  double omega = 0.5;
  double gamma = 2.0;
  std::uint64_t seed = 0;
  int warm_start_epochs = 1;
  std::size_t keep_last = 20;
  UpdateMode mode = UpdateMode::kMultiTry;
  OracleMode oracle_mode = OracleMode::kPartialPosterior;

  void validate() const;
  ModelConfig model() const;
  nlohmann::json to_json() const;
  static SamplerConfig from_json(const nlohmann::json& j);
};

/// Uniform subset of {0..n-1} without replacement, of size floor(omega n), sorted.
std::vector<std::size_t> draw_subset(std::size_t n, double omega, Rng& rng);

/// Full-data fits memoized by ordered concept ids, plus fits on arbitrary row subsets.
class LikelihoodEvaluator {
 public:
  LikelihoodEvaluator(ColumnSource& columns, Eigen::VectorXd y, ModelConfig model);

  const LogMarginal& full(std::span<const Concept> concepts);
  double on_rows(std::span<const Concept> concepts, std::span<const std::size_t> rows);
  /// log p(y_{S^c} | y_S, c, X).
  double log_partial_bayes(std::span<const Concept> concepts, std::span<const std::size_t> rows);

  ColumnSource& columns() { return columns_; }
  const Eigen::VectorXd& labels() const { return y_; }
  std::size_t rows() const { return static_cast<std::size_t>(y_.size()); }
  const ModelConfig& model() const { return model_; }

 private:
  Eigen::MatrixXd design(std::span<const Concept> concepts, std::span<const std::size_t> rows,
                         bool all_rows);

  ColumnSource& columns_;
  Eigen::VectorXd y_;
  ModelConfig model_;
  std::unordered_map<std::string, LogMarginal> full_cache_;
};

/// Audit record for one slot update.
struct UpdateRecord {
  int epoch = 0;
  int slot = 0;
  bool warm_start = false;
  std::size_t subset_size = 0;
  std::string incumbent;                // concept id
  std::vector<std::string> candidates;  // concept ids, after dropping
  std::vector<std::string> candidate_questions;
  std::vector<double> log_weights;      // log w_m (greedy/multi) or log partial Bayes factor (single)
  double log_weight_incumbent = 0.0;
  int chosen = -1;                      // index into candidates, -1 if none
  double alpha = 0.0;                   // acceptance probability (1 or 0 for greedy)
  bool accepted = false;
  std::vector<std::string> dropped;     // candidates removed (duplicates, failed annotation)
  std::vector<std::string> flags;

  nlohmann::json to_json() const;
  static UpdateRecord from_json(const nlohmann::json& j);
};

struct UpdateOutcome {
  ConceptSet state;
  bool accepted = false;
  double alpha = 0.0;
  UpdateRecord record;
};

/// Keyphrase summary for a proposal, given c_{-k} and the rows the oracle may see.
using SummaryProvider =
    std::function<KeyphraseSummary(std::span<const Concept> context, std::span<const std::size_t> rows)>;

struct UpdateContext {
  LikelihoodEvaluator& eval;
  ConceptOracle& oracle;
  const SamplerConfig& cfg;
  SummaryProvider summary;  // may be empty
};

/// log alpha for the single-try update: min(lpb_candidate - lpb_current, 0).
double single_try_log_alpha(double lpb_candidate, double lpb_current);

/// log alpha for the multiple-try update with candidate `chosen` in [0, M).
/// Both sums are taken relative to their Q factor so that M=1 reduces
/// bit-for-bit to single_try_log_alpha.
double multi_try_log_alpha(std::span<const double> lpb, std::span<const double> q, double lpb_current,
                           double q_current, std::size_t chosen);

// Each update draws the proposal seed, then its candidate/Gumbel variates, then
// the accept variate from `rng`, in that order.
UpdateOutcome ss_mh_update(const ConceptSet& state, std::size_t slot,
                           std::span<const std::size_t> subset_s, UpdateContext& ctx, Rng& rng);
UpdateOutcome multi_ss_mh_update(const ConceptSet& state, std::size_t slot,
                                 std::span<const std::size_t> subset_s, UpdateContext& ctx, Rng& rng);
UpdateOutcome greedy_warm_start_update(const ConceptSet& state, std::size_t slot,
                                       std::span<const std::size_t> subset_s, UpdateContext& ctx,
                                       Rng& rng);

struct ChainTrace {
  std::vector<PosteriorSample> samples;  // every slot-state, warm-start included
  std::vector<UpdateRecord> updates;
  std::size_t acceptance_count = 0;      // sampling epochs only
  std::size_t proposal_count = 0;
  std::vector<std::string> rng_state_checkpoints;  // state at the start of each epoch
  std::vector<double> epoch_log_marginal;          // full-data log marginal at each epoch end
  ConceptSet state;
  std::string rng_state;
  int next_epoch = 0;
  bool complete = false;

  /// Posterior draws: the last min(K * warm_start_epochs, keep_last) warm-start
  /// states followed by every sampling-epoch state.
  std::vector<PosteriorSample> posterior(const SamplerConfig& cfg) const;
  double acceptance_rate() const;

  nlohmann::json to_json() const;
  static ChainTrace from_json(const nlohmann::json& j);
};

nlohmann::json sample_to_json(const PosteriorSample& s);
PosteriorSample sample_from_json(const nlohmann::json& j);

struct GibbsHooks {
  SummaryProvider summary;
  std::function<void(const ChainTrace&)> on_epoch_end;
  int halt_after_epoch = -1;  // stop (incomplete) once this epoch index has finished
};

/// Starts a chain at `initial` and runs warm-start then sampling epochs.
ChainTrace run_gibbs(LikelihoodEvaluator& eval, ConceptOracle& oracle, const SamplerConfig& cfg,
                     const ConceptSet& initial, const GibbsHooks& hooks = {});
/// Continues a trace saved at an epoch boundary.
ChainTrace resume_gibbs(LikelihoodEvaluator& eval, ConceptOracle& oracle, const SamplerConfig& cfg,
                        ChainTrace trace, const GibbsHooks& hooks = {});

}  // namespace ccbm
