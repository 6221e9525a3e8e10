#include <doctest.h>

#include <fstream>
#include <map>
#include <numeric>
#include <set>

#include "ccbm/annotation_cache.hpp"
#include "ccbm/errors.hpp"
#include "ccbm/pool_oracle.hpp"
#include "test_support.hpp"

using namespace ccbm;
using ccbm::testing::PoolProblem;
using ccbm::testing::small_spec;
using ccbm::testing::TempDir;
using nlohmann::json;

namespace {

// Counts calls and can mark a chosen concept's answers as imputed.
class CountingOracle : public ConceptOracle {
 public:
  std::size_t annotate_calls = 0;
  std::size_t keyphrase_calls = 0;
  std::string impute_concept;

  std::vector<KeyphraseBag> extract_keyphrases(std::span<const Observation> obs) override {
    ++keyphrase_calls;
    std::vector<KeyphraseBag> out;
    for (const auto& o : obs) out.push_back(KeyphraseBag::from_raw(o.id, {o.text}));
    return out;
  }
  ConceptSet initialize_concepts(const KeyphraseSummary&, std::size_t) override { return {}; }
  OracleProposal propose(const ProposalRequest&) override { return {}; }
  std::vector<AnnotationRecord> annotate(std::span<const Observation> obs,
                                         std::span<const Concept> concepts) override {
    ++annotate_calls;
    std::vector<AnnotationRecord> out;
    for (const auto& o : obs) {
      for (const auto& c : concepts) {
        AnnotationRecord r{o.id, c.id(), o.text.size() % 2 == 0 ? 1.0 : 0.0, AnnotationSource::kLlm, false};
        if (c.id() == impute_concept) {
          r.value = 0.5;
          r.imputed = true;
        }
        if (c.question() == "Out of range?") r.value = 1.7;
        out.push_back(r);
      }
    }
    return out;
  }
  bool uses_keyphrase_summary() const override { return false; }
  json describe() const override { return {{"kind", "counting"}}; }
};

std::vector<Observation> notes() {
  return {{"a", "ab", 1}, {"b", "abc", 0}, {"c", "abcd", 1}};
}

}  // namespace

TEST_CASE("text_mentions matches whole token sequences") {
  CHECK(text_mentions("Findings: drug use; asthma.", "drug use"));
  CHECK(text_mentions("Findings: drug use; asthma.", "asthma"));
  CHECK(text_mentions("Findings: Drug  Use.", "drug use"));
  CHECK_FALSE(text_mentions("Findings: drug use; asthma.", "drugs"));
  CHECK_FALSE(text_mentions("Findings: use drug.", "drug use"));
  CHECK_FALSE(text_mentions("Findings: hypertension.", "tension"));
}

TEST_CASE("pool definitions validate features and proposal rules") {
  const json good = {{"concepts", {{{"question", "Smokes?"}, {"feature", "smoking"}}}}, {"proposal", "uniform"}};
  const auto pool = PoolDefinition::from_json(good);
  CHECK(pool.rule == PoolProposalRule::kUniform);
  CHECK(PoolDefinition::from_json(pool.to_json()).to_json() == pool.to_json());
  json bad = good;
  bad["concepts"][0]["feature"] = "Smoking History Now";
  CHECK_THROWS_AS(PoolDefinition::from_json(bad), ConfigError);
  bad = good;
  bad["proposal"] = "psychic";
  CHECK_THROWS_AS(PoolDefinition::from_json(bad), ConfigError);
  CHECK_THROWS_AS(PoolDefinition::from_json(json{{"concepts", json::array()}}), ConfigError);
  CHECK(pool_rule_from_string("exact_sampled") == PoolProposalRule::kExactSampled);
}

TEST_CASE("exact proposals equal the enumerated conditional partial posterior") {
  PoolProblem prob(small_spec(60, 7, 2, 2.0, 5), PoolProposalRule::kExact, 2.0);
  const auto& pool = prob.oracle->concepts();
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < 60; i += 2) rows.push_back(i);

  // brute force over unordered pairs on the subset rows, conditioned on containing pool[3]
  Eigen::VectorXd ys(static_cast<Eigen::Index>(rows.size()));
  std::vector<std::vector<double>> cols(pool.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    ys[static_cast<Eigen::Index>(r)] = prob.y[static_cast<Eigen::Index>(rows[r])];
    for (std::size_t j = 0; j < pool.size(); ++j) cols[j].push_back(prob.oracle->training_column(j)[rows[r]]);
  }
  const auto joint = enumerate_posterior(pool, 2, ys, cols, 2.0);
  std::map<std::size_t, double> expected;
  double mass = 0.0;
  for (const auto& s : joint.supports) {
    const auto& ix = s.pool_indices;
    if (ix[0] == 3 || ix[1] == 3) {
      expected[ix[0] == 3 ? ix[1] : ix[0]] = s.probability;
      mass += s.probability;
    }
  }

  ProposalRequest req;
  req.context = {pool[3]};
  req.incumbent = pool[0];
  req.k = 2;
  req.m = 6;
  req.rows = rows;
  const auto proposal = prob.oracle->propose(req);
  REQUIRE(proposal.candidates.size() == 6);
  double total = 0.0;
  for (std::size_t m = 0; m < 6; ++m) {
    const auto j = static_cast<std::size_t>(prob.oracle->index_of(proposal.candidates[m]));
    CHECK(j != 3);
    CHECK(proposal.q_weights[m] == doctest::Approx(expected.at(j) / mass).epsilon(1e-10));
    if (m > 0) CHECK(proposal.q_weights[m] <= proposal.q_weights[m - 1]);
    total += proposal.q_weights[m];
  }
  CHECK(total == doctest::Approx(1.0));
  CHECK(proposal.q_current == doctest::Approx(expected.at(0) / mass).epsilon(1e-10));

  req.m = 2;
  const auto top2 = prob.oracle->propose(req);
  CHECK(top2.candidates.size() == 2);
  CHECK(top2.candidates[0] == proposal.candidates[0]);
}

TEST_CASE("exact_sampled proposals are independent draws from the partial posterior") {
  PoolProblem prob(small_spec(60, 5, 1, 2.0, 6), PoolProposalRule::kExactSampled, 2.0);
  std::vector<std::size_t> rows(30);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  const auto q = prob.oracle->conditional_posterior({}, rows);
  ProposalRequest req;
  req.incumbent = prob.oracle->concepts()[0];
  req.m = 20000;
  req.rows = rows;
  req.seed = 99;
  const auto proposal = prob.oracle->propose(req);
  std::vector<double> freq(5, 0.0);
  for (const auto& c : proposal.candidates) freq[static_cast<std::size_t>(prob.oracle->index_of(c))] += 1.0 / 20000;
  for (std::size_t j = 0; j < 5; ++j) {
    const double se = std::sqrt(q[j].second * (1 - q[j].second) / 20000);
    CHECK(std::abs(freq[j] - q[j].second) < 5 * se + 1e-12);
  }
  CHECK(proposal.q_current == doctest::Approx(q[0].second));
}

TEST_CASE("uniform proposals are distinct, exclude the context and depend only on the seed") {
  PoolProblem prob(small_spec(30, 8, 2, 2.0, 7), PoolProposalRule::kUniform, 2.0);
  const auto& pool = prob.oracle->concepts();
  ProposalRequest req;
  req.context = {pool[1], pool[4]};
  req.incumbent = pool[2];
  req.k = 3;
  req.m = 4;
  req.seed = 12345;
  const auto a = prob.oracle->propose(req);
  const auto b = prob.oracle->propose(req);
  REQUIRE(a.candidates.size() == 4);
  CHECK(a.candidates == b.candidates);
  std::set<std::string> ids;
  for (std::size_t m = 0; m < 4; ++m) {
    ids.insert(a.candidates[m].id());
    CHECK_FALSE(a.candidates[m] == pool[1]);
    CHECK_FALSE(a.candidates[m] == pool[4]);
    CHECK(a.q_weights[m] == doctest::Approx(1.0 / 6));
  }
  CHECK(ids.size() == 4);
  CHECK(a.q_current == doctest::Approx(1.0 / 6));
  req.m = 50;
  CHECK(prob.oracle->propose(req).candidates.size() == 6);
}

TEST_CASE("pool annotation, keyphrases and initialization") {
  PoolProblem prob(small_spec(50, 6, 2, 3.0, 9), PoolProposalRule::kExact, 2.0);
  const auto& pool = prob.oracle->concepts();
  const auto& obs = prob.data.observations;

  const auto records = prob.oracle->annotate(obs, pool);
  REQUIRE(records.size() == obs.size() * pool.size());
  for (std::size_t i = 0; i < obs.size(); ++i) {
    for (std::size_t j = 0; j < pool.size(); ++j) {
      CHECK(records[i * pool.size() + j].value == prob.oracle->training_column(j)[i]);
      CHECK(records[i * pool.size() + j].source == AnnotationSource::kPool);
    }
  }
  const Concept stranger("Is this question unknown to the pool?");
  const Concept one[] = {stranger};
  CHECK_THROWS_AS(prob.oracle->annotate(obs, one), OracleError);

  const auto bags = prob.oracle->extract_keyphrases(obs);
  for (std::size_t i = 0; i < obs.size(); ++i) CHECK(bags[i].phrases == prob.data.keyphrases[i].phrases);
  const Observation empty{"e", "", std::nullopt};
  CHECK(prob.oracle->extract_keyphrases(std::span(&empty, 1))[0].phrases.empty());

  KeyphraseSummary summary;
  summary.phrases = {{"feature b", -2.0, -1, 1}, {"feature a", 1.5, 1, 1}};
  const ConceptSet init = prob.oracle->initialize_concepts(summary, 3);
  REQUIRE(init.size() == 3);
  CHECK(init[0] == pool[1]);
  CHECK(init[1] == pool[0]);
  CHECK(init[2] == pool[2]);
  CHECK_THROWS_AS(prob.oracle->initialize_concepts(summary, 7), InitializationError);
}

TEST_CASE("annotation cache persists, compacts and keeps the last value") {
  TempDir dir("cache");
  const auto file = dir.path / "annotations.jsonl";
  {
    AnnotationCache cache(file);
    cache.put({"o1", "c1", 1.0, AnnotationSource::kLlm, false});
    cache.put({"o1", "c2", 0.0, AnnotationSource::kLlm, false});
    cache.put({"o1", "c1", 0.25, AnnotationSource::kHumanOverride, false});
    CHECK(cache.size() == 2);
    CHECK_THROWS_AS(cache.put({"o1", "c3", 1.5, AnnotationSource::kLlm, false}), ContractViolation);
  }
  {
    std::ofstream torn(file, std::ios::app);
    torn << R"({"observation_id":"o2","concept_id")";
  }
  AnnotationCache reopened(file);
  CHECK(reopened.size() == 2);
  CHECK(reopened.get("o1", "c1") == 0.25);
  CHECK(reopened.get("o1", "c2") == 0.0);
  CHECK_FALSE(reopened.get("o2", "c1").has_value());

  AnnotationCache memory;
  memory.put({"x", "y", 1.0, AnnotationSource::kPool, false});
  CHECK(memory.get("x", "y") == 1.0);
}

TEST_CASE("annotation service queries only cache misses") {
  CountingOracle oracle;
  AnnotationCache cache;
  KeyphraseCache kp;
  AnnotationService service(oracle, cache, kp);
  const auto obs = notes();
  const std::vector<Concept> concepts = {Concept("Even length?"), Concept("Other?")};

  const auto first = service.annotate(obs, concepts);
  CHECK(first[0] == std::vector<double>{1.0, 0.0, 1.0});
  CHECK(service.counters().annotation_values == 6);
  CHECK(service.counters().annotation_queries == 3);
  CHECK(oracle.annotate_calls == 1);

  const auto second = service.annotate(obs, concepts);
  CHECK(second == first);
  CHECK(oracle.annotate_calls == 1);
  CHECK(service.counters().annotation_cache_hits == 6);

  SUBCASE("imputed values are returned and flagged but never cached") {
    const Concept shaky("Shaky?");
    oracle.impute_concept = shaky.id();
    std::vector<bool> fully;
    std::vector<std::vector<bool>> imputed;
    const Concept one[] = {shaky};
    const auto cols = service.annotate(obs, one, fully, imputed);
    CHECK(cols[0] == std::vector<double>{0.5, 0.5, 0.5});
    CHECK(fully[0]);
    CHECK(imputed[0] == std::vector<bool>{true, true, true});
    CHECK_FALSE(cache.get("a", shaky.id()).has_value());
    CHECK(service.counters().imputed == 3);
  }

  SUBCASE("out-of-range values are clamped and counted") {
    const Concept wild("Out of range?");
    const Concept one[] = {wild};
    const auto cols = service.annotate(obs, one);
    CHECK(cols[0] == std::vector<double>{1.0, 1.0, 1.0});
    CHECK(service.counters().clamped == 3);
  }

  SUBCASE("keyphrase bags are cached per observation") {
    const auto bags = service.keyphrases(obs);
    CHECK(bags.size() == 3);
    service.keyphrases(obs);
    CHECK(oracle.keyphrase_calls == 1);
    CHECK(service.counters().keyphrase_cache_hits == 3);
  }
}

TEST_CASE("annotated columns drop concepts whose annotation failed everywhere") {
  CountingOracle oracle;
  AnnotationCache cache;
  KeyphraseCache kp;
  AnnotationService service(oracle, cache, kp);
  AnnotatedColumns columns(service, notes());
  const Concept shaky("Shaky?"), fine("Fine?");
  oracle.impute_concept = shaky.id();
  const Concept both[] = {shaky, fine};
  const auto dropped = columns.prefetch(both);
  CHECK(dropped == std::vector<std::string>{shaky.id()});
  CHECK(columns.column(fine).size() == 3);
}
