#include <doctest.h>

#include <cmath>
#include <map>
#include <random>
#include <set>

#include "ccbm/errors.hpp"
#include "ccbm/sampler.hpp"
#include "test_support.hpp"

using namespace ccbm;
using ccbm::testing::PoolProblem;
using ccbm::testing::small_spec;

namespace {

// Proposes a fixed list, or fails to parse, for exercising the update plumbing.
class ScriptedOracle : public ConceptOracle {
 public:
  OracleProposal reply;
  bool fail_parse = false;
  ProposalRequest last;

  std::vector<KeyphraseBag> extract_keyphrases(std::span<const Observation>) override { return {}; }
  ConceptSet initialize_concepts(const KeyphraseSummary&, std::size_t) override { return {}; }
  OracleProposal propose(const ProposalRequest& request) override {
    last = request;
    if (fail_parse) throw OracleParseError("garbled reply");
    return reply;
  }
  std::vector<AnnotationRecord> annotate(std::span<const Observation>, std::span<const Concept>) override {
    return {};
  }
  bool uses_keyphrase_summary() const override { return false; }
  nlohmann::json describe() const override { return {{"kind", "scripted"}}; }
};

struct ScriptedProblem {
  std::vector<Concept> concepts;
  std::unique_ptr<FixedColumns> columns;
  std::unique_ptr<LikelihoodEvaluator> eval;
  ScriptedOracle oracle;
  SamplerConfig cfg;

  ScriptedProblem() {
    std::mt19937_64 gen(4);
    std::uniform_int_distribution<int> bit(0, 1);
    const std::size_t n = 30;
    std::unordered_map<std::string, std::vector<double>> cols;
    for (int j = 0; j < 5; ++j) {
      concepts.emplace_back("Question " + std::to_string(j) + "?");
      std::vector<double> col(n);
      for (auto& v : col) v = bit(gen);
      cols[concepts.back().id()] = col;
    }
    Eigen::VectorXd y(static_cast<Eigen::Index>(n));
    for (Eigen::Index i = 0; i < y.size(); ++i) y[i] = cols[concepts[0].id()][static_cast<std::size_t>(i)];
    columns = std::make_unique<FixedColumns>(n, std::move(cols));
    eval = std::make_unique<LikelihoodEvaluator>(*columns, y, cfg.model());
  }
};

std::vector<std::size_t> first_half(std::size_t n) {
  std::vector<std::size_t> s(n / 2);
  std::iota(s.begin(), s.end(), std::size_t{0});
  return s;
}

}  // namespace

TEST_CASE("draw_subset returns a sorted uniform subset of size floor(omega n)") {
  Rng rng(1);
  std::vector<int> hits(20, 0);
  const int draws = 20000;
  for (int d = 0; d < draws; ++d) {
    const auto s = draw_subset(20, 0.35, rng);
    REQUIRE(s.size() == 7);
    CHECK(std::is_sorted(s.begin(), s.end()));
    CHECK(std::set<std::size_t>(s.begin(), s.end()).size() == 7);
    for (auto i : s) ++hits[i];
  }
  const double p = 0.35;
  const double se = std::sqrt(p * (1 - p) / draws);
  for (int h : hits) CHECK(std::abs(h / double(draws) - p) < 5 * se);
  CHECK_THROWS_AS(draw_subset(3, 0.2, rng), ContractViolation);
  CHECK_THROWS_AS(draw_subset(1, 0.99, rng), ContractViolation);
}

TEST_CASE("multi-try ratio with one candidate is the single-try ratio bit for bit") {
  std::mt19937_64 gen(2);
  std::normal_distribution<double> lpb(0.0, 5.0);
  std::uniform_real_distribution<double> q(1e-4, 1.0);
  for (int rep = 0; rep < 1000; ++rep) {
    const double a = lpb(gen), b = lpb(gen);
    const double qa = q(gen), qb = q(gen);
    const double one[] = {a};
    const double qs[] = {qa};
    CHECK(multi_try_log_alpha(one, qs, b, qb, 0) == single_try_log_alpha(a, b));
  }
}

TEST_CASE("multi-try ratio matches the direct weighted-sum formula") {
  const std::vector<double> lpb = {-1.5, 0.25, -3.0};
  const std::vector<double> q = {0.2, 0.5, 0.1};
  const double lpb_cur = -0.75, q_cur = 0.3;
  for (std::size_t chosen = 0; chosen < 3; ++chosen) {
    double num = 0.0, den = std::exp(lpb_cur) * q_cur;
    for (std::size_t m = 0; m < 3; ++m) {
      num += std::exp(lpb[m]) * q[m];
      if (m != chosen) den += std::exp(lpb[m]) * q[m];
    }
    const double expected = std::min(0.0, std::log((num / q[chosen]) / (den / q_cur)));
    CHECK(multi_try_log_alpha(lpb, q, lpb_cur, q_cur, chosen) == doctest::Approx(expected).epsilon(1e-12));
  }
}

TEST_CASE("single-try kernel with exact proposals is reversible for the full posterior (K=1)") {
  PoolProblem prob(small_spec(40, 5, 1, 2.5, 8), PoolProposalRule::kExact, 2.0);
  const auto post = enumerate_posterior(prob.oracle->concepts(), 1, prob.y, prob.pool_columns(), 2.0);
  const auto s = first_half(40);
  const auto q = prob.oracle->conditional_posterior({}, s);
  const auto& pool = prob.oracle->concepts();
  auto lpb = [&](std::size_t j) {
    const Concept c[] = {pool[j]};
    return prob.eval->log_partial_bayes(c, s);
  };
  auto kernel = [&](std::size_t a, std::size_t b) {
    return q[b].second * std::exp(single_try_log_alpha(lpb(b), lpb(a)));
  };
  for (std::size_t a = 0; a < pool.size(); ++a) {
    for (std::size_t b = 0; b < pool.size(); ++b) {
      if (a == b) continue;
      const double lhs = post.supports[a].probability * kernel(a, b);
      const double rhs = post.supports[b].probability * kernel(b, a);
      CHECK(lhs == doctest::Approx(rhs).epsilon(1e-9));
    }
  }

  // the update reports exactly this acceptance probability for whatever it draws
  SamplerConfig cfg;
  cfg.mode = UpdateMode::kSingleTry;
  cfg.m_candidates = pool.size();
  UpdateContext ctx{*prob.eval, *prob.oracle, cfg, {}};
  Rng rng(3);
  for (int rep = 0; rep < 30; ++rep) {
    const ConceptSet state({pool[rep % pool.size()]});
    const auto out = ss_mh_update(state, 0, s, ctx, rng);
    const std::size_t b = static_cast<std::size_t>(prob.oracle->index_of(Concept(out.record.candidate_questions[0])));
    const std::size_t a = rep % pool.size();
    CHECK(out.alpha == doctest::Approx(std::exp(single_try_log_alpha(lpb(b), lpb(a)))).epsilon(1e-12));
  }
}

TEST_CASE("chains with exact proposals sample the enumerated posterior (K=1)") {
  // single-try needs the whole eligible pool as its proposal; multi-try needs
  // independent draws from the partial posterior
  const std::vector<std::tuple<UpdateMode, PoolProposalRule, std::size_t>> variants = {
      {UpdateMode::kSingleTry, PoolProposalRule::kExact, 6},
      {UpdateMode::kMultiTry, PoolProposalRule::kExactSampled, 3},
  };
  for (const auto& [mode, rule, m] : variants) {
    PoolProblem prob(small_spec(50, 6, 1, 2.0, 21), rule, 2.0);
    const auto post = enumerate_posterior(prob.oracle->concepts(), 1, prob.y, prob.pool_columns(), 2.0);
    SamplerConfig cfg;
    cfg.k = 1;
    cfg.mode = mode;
    cfg.m_candidates = m;
    cfg.warm_start_epochs = 0;
    cfg.t_epochs = 6000;
    cfg.seed = 77;
    const ConceptSet init({prob.oracle->concepts()[5]});
    const ChainTrace trace = run_gibbs(*prob.eval, *prob.oracle, cfg, init);
    std::vector<ConceptSet> sets;
    for (std::size_t i = 200; i < trace.samples.size(); ++i) sets.push_back(trace.samples[i].concept_set);
    CHECK(total_variation(support_frequencies(sets), post.by_key()) <= 0.05);
  }
}

TEST_CASE("update plumbing: parse failures, duplicates, failed annotations, floors") {
  ScriptedProblem p;
  UpdateContext ctx{*p.eval, p.oracle, p.cfg, {}};
  const ConceptSet state({p.concepts[0], p.concepts[1]});
  const auto s = first_half(30);
  Rng rng(5);

  SUBCASE("a parse failure keeps the incumbent and is flagged") {
    p.oracle.fail_parse = true;
    for (auto* fn : {&ss_mh_update, &multi_ss_mh_update, &greedy_warm_start_update}) {
      const auto out = fn(state, 1, s, ctx, rng);
      CHECK(out.state == state);
      CHECK_FALSE(out.accepted);
      REQUIRE(out.record.flags.size() == 1);
      CHECK(out.record.flags[0].find("proposal failed") != std::string::npos);
    }
  }

  SUBCASE("multi-try drops context duplicates and unannotatable candidates but keeps repeats") {
    const Concept unknown("Not in the column table?");
    p.oracle.reply.candidates = {p.concepts[0], p.concepts[2], p.concepts[2], unknown, p.concepts[3]};
    p.oracle.reply.q_weights = {0.2, 0.2, 0.2, 0.2, 0.2};
    p.oracle.reply.q_current = 0.2;
    const auto out = multi_ss_mh_update(state, 1, s, ctx, rng);
    CHECK(out.record.candidates ==
          std::vector<std::string>{p.concepts[2].id(), p.concepts[2].id(), p.concepts[3].id()});
    CHECK(out.record.dropped.size() == 2);
    CHECK_FALSE(out.state.contains(unknown));
  }

  SUBCASE("single-try rejects a candidate already in the conditioning set") {
    p.oracle.reply.candidates = {p.concepts[0]};
    p.oracle.reply.q_weights = {1.0};
    p.oracle.reply.q_current = 0.5;
    const auto out = ss_mh_update(state, 1, s, ctx, rng);
    CHECK(out.state == state);
    CHECK_FALSE(out.accepted);
    CHECK(out.alpha == 0.0);
  }

  SUBCASE("a missing incumbent weight is floored and flagged") {
    p.oracle.reply.candidates = {p.concepts[2], p.concepts[3]};
    p.oracle.reply.q_weights = {0.6, 0.4};
    p.oracle.reply.q_current = 0.0;
    const auto out = multi_ss_mh_update(state, 1, s, ctx, rng);
    bool flagged = false;
    for (const auto& f : out.record.flags) flagged = flagged || f.find("floored") != std::string::npos;
    CHECK(flagged);
    CHECK(out.record.log_weight_incumbent ==
          doctest::Approx(p.eval->log_partial_bayes(state.concepts(), s) + std::log(1e-3)));
  }

  SUBCASE("greedy keeps the incumbent on ties and otherwise takes the argmax") {
    p.oracle.reply.candidates = {p.concepts[1]};
    p.oracle.reply.q_weights = {1.0};
    p.oracle.reply.q_current = 1.0;
    auto out = greedy_warm_start_update(state, 1, s, ctx, rng);
    CHECK(out.record.chosen == -1);
    CHECK(out.state == state);

    // concept 0 drives y, so swapping it back into slot 0 is the argmax
    const ConceptSet weak({p.concepts[3], p.concepts[1]});
    p.oracle.reply.candidates = {p.concepts[2], p.concepts[0], p.concepts[4]};
    p.oracle.reply.q_weights = {1.0, 1.0, 1.0};
    out = greedy_warm_start_update(weak, 0, s, ctx, rng);
    CHECK(out.record.chosen == 1);
    CHECK(out.state[0] == p.concepts[0]);
    CHECK(out.alpha == 1.0);
  }

  SUBCASE("the oracle sees only the rows its mode allows") {
    p.oracle.reply.candidates = {p.concepts[2]};
    p.oracle.reply.q_weights = {1.0};
    p.oracle.reply.q_current = 1.0;
    SamplerConfig cfg = p.cfg;
    UpdateContext local{*p.eval, p.oracle, cfg, {}};
    cfg.oracle_mode = OracleMode::kPriorOnly;
    multi_ss_mh_update(state, 1, s, local, rng);
    CHECK(p.oracle.last.rows.empty());
    cfg.oracle_mode = OracleMode::kPartialPosterior;
    multi_ss_mh_update(state, 1, s, local, rng);
    CHECK(p.oracle.last.rows.size() == s.size());
    cfg.oracle_mode = OracleMode::kFullPosterior;
    multi_ss_mh_update(state, 1, s, local, rng);
    CHECK(p.oracle.last.rows.size() == 30);
  }
}

TEST_CASE("one-candidate multi-try and single-try updates agree on acceptance probability") {
  PoolProblem prob(small_spec(40, 8, 2, 2.0, 13), PoolProposalRule::kUniform, 2.0);
  SamplerConfig cfg;
  cfg.m_candidates = 1;
  UpdateContext ctx{*prob.eval, *prob.oracle, cfg, {}};
  const auto& pool = prob.oracle->concepts();
  Rng pick(9);
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t a = pick.below(8);
    std::size_t b = pick.below(7);
    if (b >= a) ++b;
    const ConceptSet state({pool[a], pool[b]});
    const auto s = draw_subset(40, 0.5, pick);
    const std::uint64_t seed = pick.next_u64();
    Rng r1(seed), r2(seed);
    const auto single = ss_mh_update(state, rep % 2, s, ctx, r1);
    const auto multi = multi_ss_mh_update(state, rep % 2, s, ctx, r2);
    if (multi.record.candidates.empty()) continue;  // context duplicate, rejected by both
    CHECK(single.record.candidates == multi.record.candidates);
    CHECK(std::abs(single.alpha - multi.alpha) <= 1e-12);
  }
}

TEST_CASE("one greedy epoch finds the true support at least as often as one sampling epoch") {
  int greedy_hits = 0, mcmc_hits = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    PoolProblem prob(small_spec(80, 10, 2, 3.0, 100 + seed), PoolProposalRule::kExact, 2.0);
    const auto& pool = prob.oracle->concepts();
    const std::string truth = ConceptSet({pool[0], pool[1]}).support_key();
    Rng init_rng(seed);
    const std::size_t a = init_rng.below(10);
    std::size_t b = init_rng.below(9);
    if (b >= a) ++b;
    const ConceptSet init({pool[a], pool[b]});
    SamplerConfig cfg;
    cfg.k = 2;
    cfg.seed = seed;
    cfg.t_epochs = 1;
    cfg.warm_start_epochs = 1;
    GibbsHooks stop_after_first;
    stop_after_first.halt_after_epoch = 0;
    const ChainTrace g = run_gibbs(*prob.eval, *prob.oracle, cfg, init, stop_after_first);
    cfg.warm_start_epochs = 0;
    const ChainTrace m = run_gibbs(*prob.eval, *prob.oracle, cfg, init);
    greedy_hits += g.state.support_key() == truth;
    mcmc_hits += m.state.support_key() == truth;
  }
  MESSAGE("greedy " << greedy_hits << "/50, sampling " << mcmc_hits << "/50");
  CHECK(greedy_hits >= mcmc_hits);
}

TEST_CASE("chain bookkeeping, serialization and resume") {
  PoolProblem prob(small_spec(60, 10, 2, 2.5, 3), PoolProposalRule::kUniform, 2.0);
  SamplerConfig cfg;
  cfg.k = 2;
  cfg.t_epochs = 4;
  cfg.warm_start_epochs = 2;
  cfg.keep_last = 3;
  cfg.m_candidates = 4;
  cfg.seed = 42;
  const ConceptSet init({prob.oracle->concepts()[4], prob.oracle->concepts()[7]});
  const ChainTrace full = run_gibbs(*prob.eval, *prob.oracle, cfg, init);

  CHECK(full.complete);
  CHECK(full.samples.size() == 12);
  CHECK(full.updates.size() == 12);
  CHECK(full.proposal_count == 8);
  CHECK(full.epoch_log_marginal.size() == 6);
  const auto post = full.posterior(cfg);
  CHECK(post.size() == 3 + 8);
  CHECK(post[0].warm_start);
  CHECK_FALSE(post[3].warm_start);

  const ChainTrace back = ChainTrace::from_json(full.to_json());
  CHECK(back.to_json() == full.to_json());

  GibbsHooks hooks;
  hooks.halt_after_epoch = 1;
  const ChainTrace halted = run_gibbs(*prob.eval, *prob.oracle, cfg, init, hooks);
  CHECK_FALSE(halted.complete);
  CHECK(halted.next_epoch == 2);
  const ChainTrace resumed =
      resume_gibbs(*prob.eval, *prob.oracle, cfg, ChainTrace::from_json(halted.to_json()));
  CHECK(resumed.to_json() == full.to_json());

  SamplerConfig wrong = cfg;
  wrong.k = 3;
  CHECK_THROWS_AS(run_gibbs(*prob.eval, *prob.oracle, wrong, init), ContractViolation);
}

TEST_CASE("sampler config validation and round trip") {
  SamplerConfig cfg;
  cfg.mode = UpdateMode::kSingleTry;
  cfg.oracle_mode = OracleMode::kFullPosterior;
  const SamplerConfig back = SamplerConfig::from_json(cfg.to_json());
  CHECK(back.to_json() == cfg.to_json());
  cfg.omega = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK_THROWS_AS(update_mode_from_string("triple_try"), ConfigError);
}
