#include <doctest.h>

#include <algorithm>
#include <random>

#include "ccbm/errors.hpp"
#include "ccbm/keyphrase_model.hpp"

using namespace ccbm;

namespace {

struct Corpus {
  std::vector<KeyphraseBag> bags;
  std::vector<int> labels;
};

// "signal" tracks the label exactly; the rest is noise.
Corpus make_corpus(int n, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::bernoulli_distribution coin(0.5), rare(0.3);
  const std::vector<std::string> noise = {"cough", "fever", "headache", "nausea", "rash"};
  Corpus c;
  for (int i = 0; i < n; ++i) {
    const int y = coin(gen) ? 1 : 0;
    std::vector<std::string> raw;
    if (y == 1) raw.push_back("Signal!");
    for (const auto& w : noise)
      if (rare(gen)) raw.push_back(w);
    raw.push_back(i % 7 == 0 ? "once only " + std::to_string(i) : "common");
    c.bags.push_back(KeyphraseBag::from_raw("r" + std::to_string(i), raw));
    c.labels.push_back(y);
  }
  return c;
}

}  // namespace

TEST_CASE("keyphrase normalization") {
  CHECK(normalize_keyphrase("  Chronic   Back-Pain, severe ") == "chronic back");
  CHECK(normalize_keyphrase("Drug/Alcohol") == "drug alcohol");
  CHECK(normalize_keyphrase("ASTHMA.") == "asthma");
  CHECK(normalize_keyphrase("?!") == "");
  const auto bag = KeyphraseBag::from_raw("x", {"Asthma", "asthma!", "", "b", "a"});
  CHECK(bag.phrases == std::vector<std::string>{"a", "asthma", "b"});
  CHECK(bag.contains("asthma"));
  CHECK_FALSE(bag.contains("c"));
}

TEST_CASE("bag-of-words vocabulary respects min_df and max_vocab") {
  const std::vector<KeyphraseBag> bags = {KeyphraseBag::from_raw("1", {"a", "b"}),
                                          KeyphraseBag::from_raw("2", {"a", "c"}),
                                          KeyphraseBag::from_raw("3", {"a", "b", "d"})};
  auto [vocab, bow] = build_bow(bags, 2);
  CHECK(vocab.phrases == std::vector<std::string>{"a", "b"});
  CHECK(vocab.document_frequency == std::vector<std::size_t>{3, 2});
  CHECK(bow.rows() == 3);
  const Eigen::MatrixXd d = bow.dense();
  CHECK(d(1, 0) == 1.0);
  CHECK(d(1, 1) == 0.0);
  CHECK(d(2, 1) == 1.0);

  auto [capped, unused] = build_bow(bags, 1, 2);
  CHECK(capped.phrases.size() == 2);
  CHECK(capped.index.count("a") == 1);
  CHECK(capped.index.count("b") == 1);

  CHECK_THROWS_AS(build_bow(bags, 4), EmptyVocabularyError);
  const auto summary = keyphrase_summary_for(bags, Eigen::MatrixXd(3, 0), std::vector<int>{0, 1, 0},
                                             [] {
                                               KeyphraseModelConfig cfg;
                                               cfg.min_df = 4;
                                               return cfg;
                                             }());
  CHECK(summary.empty());
}

TEST_CASE("a phrase equal to the label ranks first") {
  const Corpus c = make_corpus(200, 4);
  KeyphraseModelConfig cfg;
  const auto summary = keyphrase_summary_for(c.bags, Eigen::MatrixXd(200, 0), c.labels, cfg);
  REQUIRE_FALSE(summary.empty());
  CHECK(summary.phrases[0].phrase == "signal");
  CHECK(summary.phrases[0].sign == 1);
  for (std::size_t i = 1; i < summary.phrases.size(); ++i)
    CHECK(std::abs(summary.phrases[i].coefficient) <= std::abs(summary.phrases[i - 1].coefficient));
  CHECK(summary.render().find("signal") != std::string::npos);
}

TEST_CASE("an annotated concept explains the label away") {
  const Corpus c = make_corpus(200, 8);
  Eigen::MatrixXd concepts(200, 1);
  for (int i = 0; i < 200; ++i) concepts(i, 0) = c.labels[static_cast<std::size_t>(i)];
  auto [vocab, bow] = build_bow(c.bags, 2);
  KeyphraseModelConfig cfg;
  const auto with = fit_keyphrase_model_fixed(bow, concepts, c.labels, 0.01, cfg, &vocab);
  const auto without = fit_keyphrase_model_fixed(bow, Eigen::MatrixXd(200, 0), c.labels, 0.01, cfg, &vocab);
  const auto col = static_cast<Eigen::Index>(vocab.index.at("signal"));
  CHECK(std::abs(with.beta_w(col, 0)) < 0.5 * std::abs(without.beta_w(col, 0)));
  CHECK(with.beta_c(0, 0) > 0.0);
}

TEST_CASE("cross-validation picks the grid argmin and ignores row order") {
  const Corpus c = make_corpus(150, 21);
  auto [vocab, bow] = build_bow(c.bags, 2);
  KeyphraseModelConfig cfg;
  const auto fit = fit_keyphrase_model(bow, Eigen::MatrixXd(150, 0), c.labels, cfg, &vocab);
  REQUIRE(fit.cv_scores.size() == cfg.lambda_grid.size());
  const auto best = std::min_element(fit.cv_scores.begin(), fit.cv_scores.end()) - fit.cv_scores.begin();
  CHECK(fit.lambda == cfg.lambda_grid[static_cast<std::size_t>(best)]);

  Corpus rev = c;
  std::reverse(rev.bags.begin(), rev.bags.end());
  std::reverse(rev.labels.begin(), rev.labels.end());
  auto [vocab2, bow2] = build_bow(rev.bags, 2);
  const auto fit2 = fit_keyphrase_model(bow2, Eigen::MatrixXd(150, 0), rev.labels, cfg, &vocab2);
  CHECK(fit2.lambda == fit.lambda);
  for (std::size_t i = 0; i < fit.cv_scores.size(); ++i)
    CHECK(fit2.cv_scores[i] == doctest::Approx(fit.cv_scores[i]).epsilon(1e-6));
}

TEST_CASE("lambda grid") {
  const auto grid = default_lambda_grid();
  REQUIRE(grid.size() == 10);
  CHECK(grid.front() == doctest::Approx(1e-3));
  CHECK(grid.back() == doctest::Approx(1e3));
  for (std::size_t i = 1; i < grid.size(); ++i) CHECK(grid[i] / grid[i - 1] == doctest::Approx(grid[1] / grid[0]));
}

TEST_CASE("multiclass labels fit one column per class") {
  Corpus c = make_corpus(120, 33);
  for (std::size_t i = 0; i < c.labels.size(); ++i)
    if (c.labels[i] == 0 && i % 2 == 0) c.labels[i] = 2;
  auto [vocab, bow] = build_bow(c.bags, 2);
  KeyphraseModelConfig cfg;
  const auto fit = fit_keyphrase_model_fixed(bow, Eigen::MatrixXd(120, 0), c.labels, 0.01, cfg, &vocab);
  CHECK(fit.multinomial);
  CHECK(fit.beta_w.cols() == 3);
  const auto top = summarize_class(fit, 1, 3);
  REQUIRE_FALSE(top.empty());
  CHECK(top.phrases[0].phrase == "signal");
  CHECK(top.phrases[0].label_class == 1);
}
