#include "ccbm/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>

#include "ccbm/errors.hpp"

namespace ccbm {

using json = nlohmann::json;

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kQFloor = 1e-3;

double log_sum_exp(const std::vector<double>& v) {
  double mx = kNegInf;
  for (double x : v) mx = std::max(mx, x);
  if (mx == kNegInf) return kNegInf;
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

std::string ordered_key(std::span<const Concept> concepts) {
  std::string key;
  for (const auto& c : concepts) {
    if (!key.empty()) key.push_back(',');
    key += c.id();
  }
  return key;
}

std::vector<Concept> replaced(const ConceptSet& state, std::size_t slot, const Concept& c) {
  std::vector<Concept> out(state.concepts().begin(), state.concepts().end());
  out[slot] = c;
  return out;
}

std::vector<std::size_t> all_rows(std::size_t n) {
  std::vector<std::size_t> r(n);
  std::iota(r.begin(), r.end(), std::size_t{0});
  return r;
}

// Oracle call plus the bookkeeping shared by all three updates.
struct Proposed {
  std::vector<Concept> candidates;
  std::vector<double> q;
  double q_current = 0.0;
};

// Returns nullopt when the oracle's reply could not be parsed; the caller then
// keeps the incumbent.
std::optional<OracleProposal> ask_oracle(const ConceptSet& state, std::size_t slot,
                          std::span<const std::size_t> subset_s, UpdateContext& ctx, Rng& rng,
                          UpdateRecord& rec, std::vector<std::size_t>& full_rows) {
  if (slot >= state.size()) throw ContractViolation("slot out of range");
  ProposalRequest req;
  req.context = state.without(slot);
  req.incumbent = state[slot];
  req.slot = slot;
  req.k = state.size();
  req.m = ctx.cfg.m_candidates;
  req.seed = rng.next_u64();
  switch (ctx.cfg.oracle_mode) {
    case OracleMode::kPriorOnly:
      req.rows = {};
      break;
    case OracleMode::kPartialPosterior:
      req.rows = subset_s;
      break;
    case OracleMode::kFullPosterior:
      full_rows = all_rows(ctx.eval.rows());
      req.rows = full_rows;
      break;
  }
  KeyphraseSummary summary;
  if (ctx.oracle.uses_keyphrase_summary() && ctx.summary) {
    summary = ctx.summary(req.context, req.rows);
    req.summary = &summary;
  }
  OracleProposal p;
  try {
    p = ctx.oracle.propose(req);
  } catch (const OracleParseError& e) {
    rec.flags.push_back(std::string("proposal failed; incumbent retained: ") + e.what());
    return std::nullopt;
  }
  if (p.candidates.empty()) throw ContractViolation("oracle returned no candidates");
  if (p.q_weights.size() != p.candidates.size()) {
    throw ContractViolation("q_weights do not align with candidates");
  }
  double mass = 0.0;
  for (double q : p.q_weights) {
    if (!std::isfinite(q) || q < 0.0) throw ContractViolation("proposal weights must be finite and nonnegative");
    mass += q;
  }
  if (mass <= 0.0) throw ContractViolation("all proposal weights are zero");
  if (!std::isfinite(p.q_current) || p.q_current <= 0.0) {
    p.q_current = kQFloor * mass;
    p.flags.emplace_back("q_current missing or zero; floored");
  }
  rec.flags.insert(rec.flags.end(), p.flags.begin(), p.flags.end());
  return p;
}

// Drops candidates that duplicate c_{-k}, then those the annotator could not
// label. Repeated candidates stay: independent draws from Q may coincide.
Proposed screen(const ConceptSet& state, std::size_t slot, const OracleProposal& p,
                UpdateContext& ctx, UpdateRecord& rec) {
  const auto context = state.without(slot);
  Proposed out;
  out.q_current = p.q_current;
  for (std::size_t m = 0; m < p.candidates.size(); ++m) {
    const Concept& c = p.candidates[m];
    if (std::find(context.begin(), context.end(), c) != context.end()) {
      rec.dropped.push_back(c.id());
      continue;
    }
    out.candidates.push_back(c);
    out.q.push_back(p.q_weights[m]);
  }
  std::vector<Concept> need = out.candidates;
  need.push_back(state[slot]);
  const auto failed = ctx.eval.columns().prefetch(need);
  if (!failed.empty()) {
    if (std::find(failed.begin(), failed.end(), state[slot].id()) != failed.end()) {
      throw OracleError("incumbent concept has no annotation column: " + state[slot].question());
    }
    Proposed kept;
    kept.q_current = out.q_current;
    for (std::size_t m = 0; m < out.candidates.size(); ++m) {
      if (std::find(failed.begin(), failed.end(), out.candidates[m].id()) != failed.end()) {
        rec.dropped.push_back(out.candidates[m].id());
        rec.flags.push_back("annotation failed: " + out.candidates[m].id());
      } else {
        kept.candidates.push_back(out.candidates[m]);
        kept.q.push_back(out.q[m]);
      }
    }
    out = std::move(kept);
  }
  for (const auto& c : out.candidates) {
    rec.candidates.push_back(c.id());
    rec.candidate_questions.push_back(c.question());
  }
  return out;
}

UpdateRecord start_record(const ConceptSet& state, std::size_t slot, std::size_t subset_size) {
  UpdateRecord rec;
  rec.slot = static_cast<int>(slot);
  rec.subset_size = subset_size;
  rec.incumbent = state[slot].id();
  return rec;
}

// Log weights lpb_m + log q_m for the screened candidates and the incumbent.
struct Weighted {
  std::vector<double> lpb;
  std::vector<double> log_w;
  double lpb_current = 0.0;
  double log_w_current = 0.0;
};

Weighted weigh(const ConceptSet& state, std::size_t slot, const Proposed& p,
               std::span<const std::size_t> subset_s, UpdateContext& ctx) {
  Weighted w;
  w.lpb_current = ctx.eval.log_partial_bayes(state.concepts(), subset_s);
  w.log_w_current = w.lpb_current + std::log(p.q_current);
  for (std::size_t m = 0; m < p.candidates.size(); ++m) {
    double lpb;
    if (p.candidates[m] == state[slot]) {
      lpb = w.lpb_current;
    } else {
      const auto set = replaced(state, slot, p.candidates[m]);
      lpb = ctx.eval.log_partial_bayes(set, subset_s);
    }
    w.lpb.push_back(lpb);
    w.log_w.push_back(p.q[m] > 0.0 ? lpb + std::log(p.q[m]) : kNegInf);
  }
  return w;
}

}  // namespace

std::string to_string(UpdateMode mode) {
  return mode == UpdateMode::kSingleTry ? "single_try" : "multi_try";
}

UpdateMode update_mode_from_string(const std::string& name) {
  if (name == "single_try") return UpdateMode::kSingleTry;
  if (name == "multi_try") return UpdateMode::kMultiTry;
  throw ConfigError("unknown sampler mode: " + name);
}

void SamplerConfig::validate() const {
  if (!(omega > 0.0 && omega < 1.0)) throw ConfigError("omega must lie in (0, 1)");
  if (m_candidates < 1) throw ConfigError("m_candidates must be at least 1");
  if (t_epochs < 1) throw ConfigError("t_epochs must be at least 1");
  if (k < 1) throw ConfigError("k must be at least 1");
  if (warm_start_epochs < 0) throw ConfigError("warm_start_epochs must be nonnegative");
  if (!(gamma > 0.0) || !std::isfinite(gamma)) throw ConfigError("gamma must be positive");
}

ModelConfig SamplerConfig::model() const {
  ModelConfig m;
  m.gamma = gamma;
  m.k = static_cast<int>(k);
  return m;
}

json SamplerConfig::to_json() const {
  return {{"k", k},
          {"t_epochs", t_epochs},
          {"m_candidates", m_candidates},
          {"omega", omega},
          {"gamma", gamma},
          {"seed", seed},
          {"warm_start_epochs", warm_start_epochs},
          {"keep_last", keep_last},
          {"mode", ccbm::to_string(mode)},
          {"oracle_mode", ccbm::to_string(oracle_mode)}};
}

SamplerConfig SamplerConfig::from_json(const json& j) {
  SamplerConfig c;
  try {
    c.k = j.value("k", c.k);
    c.t_epochs = j.value("t_epochs", c.t_epochs);
    c.m_candidates = j.value("m_candidates", c.m_candidates);
    c.omega = j.value("omega", c.omega);
    c.gamma = j.value("gamma", c.gamma);
    c.seed = j.value("seed", c.seed);
    c.warm_start_epochs = j.value("warm_start_epochs", c.warm_start_epochs);
    c.keep_last = j.value("keep_last", c.keep_last);
    if (j.contains("mode")) c.mode = update_mode_from_string(j.at("mode").get<std::string>());
    if (j.contains("oracle_mode")) {
      c.oracle_mode = oracle_mode_from_string(j.at("oracle_mode").get<std::string>());
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad sampler config: ") + e.what());
  }
  c.validate();
  return c;
}

std::vector<std::size_t> draw_subset(std::size_t n, double omega, Rng& rng) {
  const double raw = std::floor(omega * static_cast<double>(n));
  if (!(omega > 0.0 && omega < 1.0) || raw < 1.0 || raw > static_cast<double>(n) - 1.0) {
    throw ContractViolation("split size floor(omega*n) must lie in [1, n-1]; got omega=" +
                            std::to_string(omega) + ", n=" + std::to_string(n));
  }
  const auto size = static_cast<std::size_t>(raw);
  std::vector<std::size_t> idx = all_rows(n);
  for (std::size_t a = 0; a < size; ++a) {
    std::swap(idx[a], idx[a + rng.below(n - a)]);
  }
  idx.resize(size);
  std::sort(idx.begin(), idx.end());
  return idx;
}

LikelihoodEvaluator::LikelihoodEvaluator(ColumnSource& columns, Eigen::VectorXd y, ModelConfig model)
    : columns_(columns), y_(std::move(y)), model_(model) {
  model_.validate();
  require_binary_labels(y_, static_cast<Eigen::Index>(columns_.rows()));
}

Eigen::MatrixXd LikelihoodEvaluator::design(std::span<const Concept> concepts,
                                            std::span<const std::size_t> rows, bool all) {
  const auto n = static_cast<Eigen::Index>(all ? y_.size() : static_cast<Eigen::Index>(rows.size()));
  const auto k = static_cast<Eigen::Index>(concepts.size());
  Eigen::MatrixXd x(n, k + (model_.include_intercept ? 1 : 0));
  for (Eigen::Index j = 0; j < k; ++j) {
    const auto& col = columns_.column(concepts[static_cast<std::size_t>(j)]);
    for (Eigen::Index r = 0; r < n; ++r) {
      x(r, j) = col[all ? static_cast<std::size_t>(r) : rows[static_cast<std::size_t>(r)]];
    }
  }
  if (model_.include_intercept) x.col(k).setOnes();
  return x;
}

const LogMarginal& LikelihoodEvaluator::full(std::span<const Concept> concepts) {
  const std::string key = ordered_key(concepts);
  if (auto it = full_cache_.find(key); it != full_cache_.end()) return it->second;
  const auto x = design(concepts, {}, true);
  return full_cache_.emplace(key, log_marginal_design(x, y_, model_)).first->second;
}

double LikelihoodEvaluator::on_rows(std::span<const Concept> concepts,
                                    std::span<const std::size_t> rows) {
  const auto x = design(concepts, rows, false);
  Eigen::VectorXd ys(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) ys[static_cast<Eigen::Index>(r)] = y_[static_cast<Eigen::Index>(rows[r])];
  return log_marginal_design(x, ys, model_).value;
}

double LikelihoodEvaluator::log_partial_bayes(std::span<const Concept> concepts,
                                              std::span<const std::size_t> rows) {
  const std::size_t n = this->rows();
  if (rows.size() >= n) return 0.0;
  const double full_value = full(concepts).value;
  if (rows.empty()) return full_value;
  return full_value - on_rows(concepts, rows);
}

double single_try_log_alpha(double lpb_candidate, double lpb_current) {
  return std::min(lpb_candidate - lpb_current, 0.0);
}

double multi_try_log_alpha(std::span<const double> lpb, std::span<const double> q, double lpb_current,
                           double q_current, std::size_t chosen) {
  if (lpb.size() != q.size() || chosen >= lpb.size()) throw ContractViolation("bad multi-try inputs");
  if (!(q[chosen] > 0.0) || !(q_current > 0.0)) throw ContractViolation("chosen and incumbent need positive Q");
  const double log_q_chosen = std::log(q[chosen]);
  const double log_q_current = std::log(q_current);
  // numerator: sum_m w_m / Q(chosen); denominator: sum_{m != chosen, incl. incumbent} w_m / Q(incumbent).
  // The chosen and incumbent terms lead their sums, so a one-term sum returns it unchanged.
  std::vector<double> num{lpb[chosen]};
  std::vector<double> den{lpb_current};
  for (std::size_t m = 0; m < lpb.size(); ++m) {
    if (m == chosen || q[m] <= 0.0) continue;
    const double log_q = std::log(q[m]);
    num.push_back(lpb[m] + (log_q - log_q_chosen));
    den.push_back(lpb[m] + (log_q - log_q_current));
  }
  const double la = log_sum_exp(num) - log_sum_exp(den);
  if (std::isnan(la)) throw NumericalError("multi-try acceptance ratio is NaN");
  return std::min(la, 0.0);
}

UpdateOutcome ss_mh_update(const ConceptSet& state, std::size_t slot,
                           std::span<const std::size_t> subset_s, UpdateContext& ctx, Rng& rng) {
  UpdateOutcome out{state, false, 0.0, start_record(state, slot, subset_s.size())};
  UpdateRecord& rec = out.record;
  std::vector<std::size_t> full_rows;
  const auto asked = ask_oracle(state, slot, subset_s, ctx, rng, rec, full_rows);
  if (!asked) return out;
  const OracleProposal& p = *asked;

  // one candidate with probability proportional to its Q weight
  double mass = std::accumulate(p.q_weights.begin(), p.q_weights.end(), 0.0);
  double u = rng.uniform() * mass;
  std::size_t pick = 0;
  for (; pick + 1 < p.candidates.size(); ++pick) {
    if (u < p.q_weights[pick]) break;
    u -= p.q_weights[pick];
  }
  while (p.q_weights[pick] <= 0.0 && pick > 0) --pick;
  const Concept& cand = p.candidates[pick];
  rec.candidates.push_back(cand.id());
  rec.candidate_questions.push_back(cand.question());

  const auto context = state.without(slot);
  if (std::find(context.begin(), context.end(), cand) != context.end()) {
    rec.flags.emplace_back("candidate duplicates the conditioning set; rejected");
    rec.chosen = 0;
    return out;
  }
  const Concept need[] = {cand, state[slot]};
  const auto failed = ctx.eval.columns().prefetch(need);
  if (std::find(failed.begin(), failed.end(), cand.id()) != failed.end()) {
    rec.flags.push_back("annotation failed: " + cand.id());
    rec.chosen = 0;
    return out;
  }
  const double lpb_current = ctx.eval.log_partial_bayes(state.concepts(), subset_s);
  const double lpb_cand = cand == state[slot]
                              ? lpb_current
                              : ctx.eval.log_partial_bayes(replaced(state, slot, cand), subset_s);
  rec.log_weights = {lpb_cand};
  rec.log_weight_incumbent = lpb_current;
  rec.chosen = 0;
  const double log_alpha = single_try_log_alpha(lpb_cand, lpb_current);
  out.alpha = std::exp(log_alpha);
  rec.alpha = out.alpha;
  if (rng.uniform() < out.alpha) {
    out.accepted = true;
    out.state = state.with_replaced(slot, cand);
  }
  rec.accepted = out.accepted;
  return out;
}

UpdateOutcome multi_ss_mh_update(const ConceptSet& state, std::size_t slot,
                                 std::span<const std::size_t> subset_s, UpdateContext& ctx, Rng& rng) {
  UpdateOutcome out{state, false, 0.0, start_record(state, slot, subset_s.size())};
  UpdateRecord& rec = out.record;
  std::vector<std::size_t> full_rows;
  const auto raw = ask_oracle(state, slot, subset_s, ctx, rng, rec, full_rows);
  if (!raw) return out;
  const Proposed p = screen(state, slot, *raw, ctx, rec);
  if (p.candidates.empty()) {
    rec.flags.emplace_back("no usable candidates; rejected");
    return out;
  }
  if (std::all_of(p.q.begin(), p.q.end(), [](double q) { return q <= 0.0; })) {
    throw ContractViolation("all proposal weights are zero after screening");
  }
  const Weighted w = weigh(state, slot, p, subset_s, ctx);
  rec.log_weights = w.log_w;
  rec.log_weight_incumbent = w.log_w_current;

  // Gumbel-max draw over m = 1..M; one variate per candidate regardless of weight.
  std::size_t chosen = 0;
  double best = kNegInf;
  for (std::size_t m = 0; m < p.candidates.size(); ++m) {
    const double g = rng.gumbel();
    const double score = w.log_w[m] + g;
    if (w.log_w[m] != kNegInf && score > best) {
      best = score;
      chosen = m;
    }
  }
  rec.chosen = static_cast<int>(chosen);
  const double log_alpha = multi_try_log_alpha(w.lpb, p.q, w.lpb_current, p.q_current, chosen);
  out.alpha = std::exp(log_alpha);
  rec.alpha = out.alpha;
  if (rng.uniform() < out.alpha) {
    out.accepted = true;
    out.state = state.with_replaced(slot, p.candidates[chosen]);
  }
  rec.accepted = out.accepted;
  return out;
}

UpdateOutcome greedy_warm_start_update(const ConceptSet& state, std::size_t slot,
                                       std::span<const std::size_t> subset_s, UpdateContext& ctx,
                                       Rng& rng) {
  UpdateOutcome out{state, false, 1.0, start_record(state, slot, subset_s.size())};
  UpdateRecord& rec = out.record;
  rec.warm_start = true;
  std::vector<std::size_t> full_rows;
  const auto raw = ask_oracle(state, slot, subset_s, ctx, rng, rec, full_rows);
  if (!raw) {
    rec.alpha = 1.0;
    return out;
  }
  const Proposed p = screen(state, slot, *raw, ctx, rec);
  if (p.candidates.empty()) {
    rec.flags.emplace_back("no usable candidates; incumbent kept");
    rec.alpha = 1.0;
    return out;
  }
  const Weighted w = weigh(state, slot, p, subset_s, ctx);
  rec.log_weights = w.log_w;
  rec.log_weight_incumbent = w.log_w_current;
  int chosen = -1;
  double best = w.log_w_current;
  for (std::size_t m = 0; m < p.candidates.size(); ++m) {
    if (w.log_w[m] > best) {
      best = w.log_w[m];
      chosen = static_cast<int>(m);
    }
  }
  rec.chosen = chosen;
  rec.alpha = 1.0;
  if (chosen >= 0 && !(p.candidates[static_cast<std::size_t>(chosen)] == state[slot])) {
    out.state = state.with_replaced(slot, p.candidates[static_cast<std::size_t>(chosen)]);
    out.accepted = true;
  }
  rec.accepted = out.accepted;
  return out;
}

json UpdateRecord::to_json() const {
  json lw = json::array();
  for (double v : log_weights) lw.push_back(std::isfinite(v) ? json(v) : json(nullptr));
  return {{"epoch", epoch},
          {"slot", slot},
          {"warm_start", warm_start},
          {"subset_size", subset_size},
          {"incumbent", incumbent},
          {"candidates", candidates},
          {"candidate_questions", candidate_questions},
          {"log_weights", lw},
          {"log_weight_incumbent", log_weight_incumbent},
          {"chosen", chosen},
          {"alpha", alpha},
          {"accepted", accepted},
          {"dropped", dropped},
          {"flags", flags}};
}

UpdateRecord UpdateRecord::from_json(const json& j) {
  UpdateRecord r;
  r.epoch = j.at("epoch").get<int>();
  r.slot = j.at("slot").get<int>();
  r.warm_start = j.at("warm_start").get<bool>();
  r.subset_size = j.at("subset_size").get<std::size_t>();
  r.incumbent = j.at("incumbent").get<std::string>();
  r.candidates = j.at("candidates").get<std::vector<std::string>>();
  r.candidate_questions = j.at("candidate_questions").get<std::vector<std::string>>();
  for (const auto& v : j.at("log_weights")) r.log_weights.push_back(v.is_null() ? kNegInf : v.get<double>());
  r.log_weight_incumbent = j.at("log_weight_incumbent").get<double>();
  r.chosen = j.at("chosen").get<int>();
  r.alpha = j.at("alpha").get<double>();
  r.accepted = j.at("accepted").get<bool>();
  r.dropped = j.at("dropped").get<std::vector<std::string>>();
  r.flags = j.at("flags").get<std::vector<std::string>>();
  return r;
}

json sample_to_json(const PosteriorSample& s) {
  json concepts = json::array();
  for (const auto& c : s.concept_set.concepts()) concepts.push_back({{"id", c.id()}, {"question", c.question()}});
  std::vector<double> theta(s.theta.theta.data(), s.theta.theta.data() + s.theta.theta.size());
  return {{"epoch", s.epoch},
          {"slot", s.slot},
          {"warm_start", s.warm_start},
          {"accepted", s.accepted},
          {"concepts", concepts},
          {"theta", theta},
          {"log_marginal_full", s.log_marginal_full}};
}

PosteriorSample sample_from_json(const json& j) {
  PosteriorSample s;
  std::vector<Concept> concepts;
  for (const auto& c : j.at("concepts")) {
    Concept concept_value(c.at("question").get<std::string>());
    if (concept_value.id() != c.at("id").get<std::string>()) {
      throw ConfigError("sample concept id does not match its question");
    }
    concepts.push_back(std::move(concept_value));
  }
  s.concept_set = ConceptSet(std::move(concepts));
  const auto theta = j.at("theta").get<std::vector<double>>();
  s.theta.theta = Eigen::Map<const Eigen::VectorXd>(theta.data(), static_cast<Eigen::Index>(theta.size()));
  s.log_marginal_full = j.at("log_marginal_full").get<double>();
  s.epoch = j.at("epoch").get<int>();
  s.slot = j.at("slot").get<int>();
  s.accepted = j.at("accepted").get<bool>();
  s.warm_start = j.at("warm_start").get<bool>();
  return s;
}

std::vector<PosteriorSample> ChainTrace::posterior(const SamplerConfig& cfg) const {
  std::vector<PosteriorSample> warm, out;
  for (const auto& s : samples) {
    if (s.warm_start) warm.push_back(s);
  }
  const std::size_t keep = std::min<std::size_t>(
      {cfg.k * static_cast<std::size_t>(cfg.warm_start_epochs), cfg.keep_last, warm.size()});
  out.insert(out.end(), warm.end() - static_cast<std::ptrdiff_t>(keep), warm.end());
  for (const auto& s : samples) {
    if (!s.warm_start) out.push_back(s);
  }
  return out;
}

double ChainTrace::acceptance_rate() const {
  return proposal_count == 0 ? 0.0
                             : static_cast<double>(acceptance_count) / static_cast<double>(proposal_count);
}

json ChainTrace::to_json() const {
  json js = json::array();
  for (const auto& s : samples) js.push_back(sample_to_json(s));
  json ju = json::array();
  for (const auto& u : updates) ju.push_back(u.to_json());
  json state_json = json::array();
  for (const auto& c : state.concepts()) state_json.push_back({{"id", c.id()}, {"question", c.question()}});
  return {{"samples", js},
          {"updates", ju},
          {"acceptance_count", acceptance_count},
          {"proposal_count", proposal_count},
          {"rng_state_checkpoints", rng_state_checkpoints},
          {"epoch_log_marginal", epoch_log_marginal},
          {"state", state_json},
          {"rng_state", rng_state},
          {"next_epoch", next_epoch},
          {"complete", complete}};
}

ChainTrace ChainTrace::from_json(const json& j) {
  ChainTrace t;
  for (const auto& s : j.at("samples")) t.samples.push_back(sample_from_json(s));
  for (const auto& u : j.at("updates")) t.updates.push_back(UpdateRecord::from_json(u));
  t.acceptance_count = j.at("acceptance_count").get<std::size_t>();
  t.proposal_count = j.at("proposal_count").get<std::size_t>();
  t.rng_state_checkpoints = j.at("rng_state_checkpoints").get<std::vector<std::string>>();
  t.epoch_log_marginal = j.at("epoch_log_marginal").get<std::vector<double>>();
  std::vector<Concept> state;
  for (const auto& c : j.at("state")) state.emplace_back(c.at("question").get<std::string>());
  t.state = ConceptSet(std::move(state));
  t.rng_state = j.at("rng_state").get<std::string>();
  t.next_epoch = j.at("next_epoch").get<int>();
  t.complete = j.at("complete").get<bool>();
  if (t.acceptance_count > t.proposal_count) throw ConfigError("corrupt trace: more acceptances than proposals");
  return t;
}

ChainTrace run_gibbs(LikelihoodEvaluator& eval, ConceptOracle& oracle, const SamplerConfig& cfg,
                     const ConceptSet& initial, const GibbsHooks& hooks) {
  cfg.validate();
  if (initial.size() != cfg.k) {
    throw ContractViolation("initial concept set has " + std::to_string(initial.size()) +
                            " concepts, expected k=" + std::to_string(cfg.k));
  }
  ChainTrace trace;
  trace.state = initial;
  trace.rng_state = Rng(cfg.seed).state();
  return resume_gibbs(eval, oracle, cfg, std::move(trace), hooks);
}

ChainTrace resume_gibbs(LikelihoodEvaluator& eval, ConceptOracle& oracle, const SamplerConfig& cfg,
                        ChainTrace trace, const GibbsHooks& hooks) {
  cfg.validate();
  if (trace.state.size() != cfg.k) throw ContractViolation("trace state does not have k concepts");
  Rng rng;
  rng.restore(trace.rng_state);
  UpdateContext ctx{eval, oracle, cfg, hooks.summary};
  const int total = cfg.warm_start_epochs + cfg.t_epochs;

  const auto initial_missing = eval.columns().prefetch(trace.state.concepts());
  if (!initial_missing.empty()) throw OracleError("initial concepts could not be annotated");

  ConceptSet state = trace.state;
  for (int epoch = trace.next_epoch; epoch < total; ++epoch) {
    trace.rng_state_checkpoints.push_back(rng.state());
    const bool warm = epoch < cfg.warm_start_epochs;
    for (std::size_t slot = 0; slot < cfg.k; ++slot) {
      const auto subset = draw_subset(eval.rows(), cfg.omega, rng);
      UpdateOutcome outcome = warm ? greedy_warm_start_update(state, slot, subset, ctx, rng)
                              : cfg.mode == UpdateMode::kSingleTry
                                  ? ss_mh_update(state, slot, subset, ctx, rng)
                                  : multi_ss_mh_update(state, slot, subset, ctx, rng);
      state = outcome.state;
      if (!warm) {
        ++trace.proposal_count;
        if (outcome.accepted) ++trace.acceptance_count;
      }
      const LogMarginal& fit = eval.full(state.concepts());
      PosteriorSample s;
      s.concept_set = state;
      s.theta = fit.theta_map;
      s.log_marginal_full = fit.value;
      s.epoch = epoch;
      s.slot = static_cast<int>(slot);
      s.accepted = outcome.accepted;
      s.warm_start = warm;
      trace.samples.push_back(std::move(s));
      outcome.record.epoch = epoch;
      trace.updates.push_back(std::move(outcome.record));
    }
    trace.epoch_log_marginal.push_back(eval.full(state.concepts()).value);
    trace.state = state;
    trace.rng_state = rng.state();
    trace.next_epoch = epoch + 1;
    trace.complete = trace.next_epoch >= total;
    if (hooks.on_epoch_end) hooks.on_epoch_end(trace);
    if (hooks.halt_after_epoch == epoch && !trace.complete) return trace;
  }
  trace.complete = true;
  return trace;
}

}  // namespace ccbm
