#include "ccbm/keyphrase_model.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>

#include "ccbm/errors.hpp"
#include "ccbm/model.hpp"

namespace ccbm {

Eigen::MatrixXd BowMatrix::dense() const {
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(rows()),
                                            static_cast<Eigen::Index>(cols));
  for (std::size_t i = 0; i < row_columns.size(); ++i) {
    for (std::size_t j : row_columns[i]) {
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = 1.0;
    }
  }
  return m;
}

std::pair<Vocabulary, BowMatrix> build_bow(std::span<const KeyphraseBag> bags, std::size_t min_df,
                                           std::size_t max_vocab) {
  std::unordered_map<std::string, std::size_t> df;
  for (const auto& bag : bags) {
    for (const auto& p : bag.phrases) ++df[p];  // bags are deduplicated
  }
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (auto& [phrase, count] : df) {
    if (count >= min_df) kept.emplace_back(phrase, count);
  }
  if (max_vocab > 0 && kept.size() > max_vocab) {
    std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
      return a.second != b.second ? a.second > b.second : a.first < b.first;
    });
    kept.resize(max_vocab);
  }
  if (kept.empty()) {
    throw EmptyVocabularyError("keyphrase vocabulary is empty at min_df=" +
                               std::to_string(min_df) + " over " + std::to_string(bags.size()) +
                               " bags");
  }
  std::sort(kept.begin(), kept.end());

  Vocabulary vocab;
  for (const auto& [phrase, count] : kept) {
    vocab.index.emplace(phrase, vocab.phrases.size());
    vocab.phrases.push_back(phrase);
    vocab.document_frequency.push_back(count);
  }
  BowMatrix bow;
  bow.cols = vocab.size();
  for (const auto& bag : bags) {
    std::vector<std::size_t> cols;
    for (const auto& p : bag.phrases) {
      if (auto it = vocab.index.find(p); it != vocab.index.end()) cols.push_back(it->second);
    }
    std::sort(cols.begin(), cols.end());
    bow.row_columns.push_back(std::move(cols));
    bow.row_ids.push_back(bag.observation_id);
  }
  return {std::move(vocab), std::move(bow)};
}

std::vector<double> default_lambda_grid() {
  std::vector<double> grid(10);
  for (int i = 0; i < 10; ++i) grid[static_cast<std::size_t>(i)] = std::pow(10.0, -3.0 + 6.0 * i / 9.0);
  return grid;
}

namespace {

struct Problem {
  Eigen::MatrixXd x;        // n x p: [bow | concepts | 1]
  std::vector<int> labels;
  int num_classes = 2;
  Eigen::VectorXd penalty;  // per-feature ridge weight (length p)
};

Problem make_problem(const BowMatrix& bow, const Eigen::MatrixXd& concepts,
                     std::span<const int> labels, double lambda, double concept_ridge) {
  const auto n = static_cast<Eigen::Index>(bow.rows());
  if (concepts.rows() != n && !(concepts.size() == 0 && concepts.cols() == 0)) {
    throw ContractViolation("concept annotations do not align with keyphrase rows");
  }
  if (static_cast<Eigen::Index>(labels.size()) != n) {
    throw ContractViolation("labels do not align with keyphrase rows");
  }
  const auto v = static_cast<Eigen::Index>(bow.cols);
  const Eigen::Index kc = concepts.cols();
  Problem p;
  p.x.resize(n, v + kc + 1);
  p.x.leftCols(v) = bow.dense();
  if (kc > 0) p.x.middleCols(v, kc) = concepts;
  p.x.col(v + kc).setOnes();
  p.labels.assign(labels.begin(), labels.end());
  int max_label = 1;
  for (int y : p.labels) {
    if (y < 0) throw ContractViolation("labels must be non-negative class indices");
    max_label = std::max(max_label, y);
  }
  p.num_classes = max_label + 1;
  p.penalty = Eigen::VectorXd::Constant(v + kc + 1, concept_ridge);
  p.penalty.head(v).setConstant(lambda);
  return p;
}

Problem take_rows(const Problem& full, const std::vector<std::size_t>& rows) {
  Problem p;
  p.x.resize(static_cast<Eigen::Index>(rows.size()), full.x.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    p.x.row(static_cast<Eigen::Index>(r)) = full.x.row(static_cast<Eigen::Index>(rows[r]));
    p.labels.push_back(full.labels[rows[r]]);
  }
  p.num_classes = full.num_classes;
  p.penalty = full.penalty;
  return p;
}

using Objective = std::function<double(const Eigen::VectorXd&)>;
using Gradient = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;
using Hessian = std::function<Eigen::MatrixXd(const Eigen::VectorXd&)>;

Eigen::VectorXd newton_minimize(Eigen::VectorXd w, const Objective& f, const Gradient& grad,
                                const Hessian& hess) {
  constexpr int kMaxIter = 200;
  constexpr double kTol = 1e-10;
  double fw = f(w);
  for (int iter = 0; iter < kMaxIter; ++iter) {
    const Eigen::VectorXd g = grad(w);
    if (g.lpNorm<Eigen::Infinity>() <= kTol) return w;
    const Eigen::MatrixXd h = hess(w);
    Eigen::LDLT<Eigen::MatrixXd> ldlt(h);
    if (ldlt.info() != Eigen::Success) throw NumericalError("keyphrase model Hessian is singular");
    const Eigen::VectorXd step = ldlt.solve(g);
    const double slope = g.dot(step);
    double t = 1.0;
    Eigen::VectorXd next = w - step;
    double fn = f(next);
    const double noise = 1e-14 * (1.0 + std::abs(fw));
    while (fn > fw - 1e-4 * t * slope + noise && t > 1e-12) {
      t *= 0.5;
      next = w - t * step;
      fn = f(next);
    }
    w = next;
    fw = fn;
  }
  const double gnorm = grad(w).lpNorm<Eigen::Infinity>();
  if (gnorm > 1e-6) {
    throw OptimizationFailure("keyphrase model solver did not converge",
                              std::vector<double>(w.data(), w.data() + w.size()), gnorm);
  }
  return w;
}

// Binary: one coefficient vector, class 1 vs rest.
Eigen::VectorXd solve_binary(const Problem& p) {
  const Eigen::Index n = p.x.rows();
  const double inv_n = n > 0 ? 1.0 / static_cast<double>(n) : 0.0;
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) y[i] = p.labels[static_cast<std::size_t>(i)] == 1 ? 1.0 : 0.0;
  auto f = [&](const Eigen::VectorXd& w) {
    const Eigen::VectorXd z = p.x * w;
    double loss = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) loss += log1p_exp(z[i]) - y[i] * z[i];
    return inv_n * loss + w.dot(p.penalty.cwiseProduct(w));
  };
  auto g = [&](const Eigen::VectorXd& w) -> Eigen::VectorXd {
    Eigen::VectorXd r = p.x * w;
    for (Eigen::Index i = 0; i < n; ++i) r[i] = sigmoid(r[i]) - y[i];
    return inv_n * (p.x.transpose() * r) + 2.0 * p.penalty.cwiseProduct(w);
  };
  auto h = [&](const Eigen::VectorXd& w) -> Eigen::MatrixXd {
    Eigen::VectorXd s = p.x * w;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double q = sigmoid(s[i]);
      s[i] = q * (1.0 - q);
    }
    Eigen::MatrixXd hm = inv_n * (p.x.transpose() * s.asDiagonal() * p.x);
    hm.diagonal() += 2.0 * p.penalty;
    return hm;
  };
  return newton_minimize(Eigen::VectorXd::Zero(p.x.cols()), f, g, h);
}

Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& z) {
  Eigen::MatrixXd out(z.rows(), z.cols());
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const double mx = z.row(i).maxCoeff();
    out.row(i) = (z.row(i).array() - mx).exp();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

// Multinomial, full parametrization (one column per class); the ridge makes it identifiable.
Eigen::MatrixXd solve_multinomial(const Problem& p) {
  const Eigen::Index n = p.x.rows();
  const Eigen::Index d = p.x.cols();
  const Eigen::Index r = p.num_classes;
  const double inv_n = n > 0 ? 1.0 / static_cast<double>(n) : 0.0;
  Eigen::MatrixXd onehot = Eigen::MatrixXd::Zero(n, r);
  for (Eigen::Index i = 0; i < n; ++i) onehot(i, p.labels[static_cast<std::size_t>(i)]) = 1.0;
  auto unpack = [&](const Eigen::VectorXd& w) {
    return Eigen::Map<const Eigen::MatrixXd>(w.data(), d, r);
  };
  auto f = [&](const Eigen::VectorXd& w) {
    const Eigen::MatrixXd z = p.x * unpack(w);
    double loss = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double mx = z.row(i).maxCoeff();
      const double lse = mx + std::log((z.row(i).array() - mx).exp().sum());
      loss += lse - z.row(i).dot(onehot.row(i));
    }
    double pen = 0.0;
    const auto b = unpack(w);
    for (Eigen::Index c = 0; c < r; ++c) pen += b.col(c).dot(p.penalty.cwiseProduct(b.col(c)));
    return inv_n * loss + pen;
  };
  auto g = [&](const Eigen::VectorXd& w) -> Eigen::VectorXd {
    const auto b = unpack(w);
    const Eigen::MatrixXd prob = softmax_rows(p.x * b);
    Eigen::MatrixXd gm = inv_n * (p.x.transpose() * (prob - onehot));
    for (Eigen::Index c = 0; c < r; ++c) gm.col(c) += 2.0 * p.penalty.cwiseProduct(b.col(c));
    return Eigen::Map<const Eigen::VectorXd>(gm.data(), d * r);
  };
  auto h = [&](const Eigen::VectorXd& w) -> Eigen::MatrixXd {
    const Eigen::MatrixXd prob = softmax_rows(p.x * unpack(w));
    Eigen::MatrixXd hm = Eigen::MatrixXd::Zero(d * r, d * r);
    for (Eigen::Index a = 0; a < r; ++a) {
      for (Eigen::Index c = a; c < r; ++c) {
        Eigen::VectorXd wt(n);
        for (Eigen::Index i = 0; i < n; ++i) {
          wt[i] = prob(i, a) * ((a == c ? 1.0 : 0.0) - prob(i, c));
        }
        const Eigen::MatrixXd block = inv_n * (p.x.transpose() * wt.asDiagonal() * p.x);
        hm.block(a * d, c * d, d, d) = block;
        if (a != c) hm.block(c * d, a * d, d, d) = block.transpose();
      }
      hm.block(a * d, a * d, d, d).diagonal() += 2.0 * p.penalty;
    }
    return hm;
  };
  const Eigen::VectorXd w = newton_minimize(Eigen::VectorXd::Zero(d * r), f, g, h);
  return Eigen::Map<const Eigen::MatrixXd>(w.data(), d, r);
}

// d x C coefficient matrix (C = 1 for binary).
Eigen::MatrixXd solve(const Problem& p, bool multinomial) {
  if (multinomial) return solve_multinomial(p);
  return solve_binary(p);
}

double mean_log_loss(const Problem& p, const Eigen::MatrixXd& coef, bool multinomial,
                     const std::vector<std::size_t>& rows) {
  double loss = 0.0;
  for (std::size_t row : rows) {
    const auto i = static_cast<Eigen::Index>(row);
    const int y = p.labels[row];
    if (multinomial) {
      const Eigen::RowVectorXd z = p.x.row(i) * coef;
      const double mx = z.maxCoeff();
      loss += mx + std::log((z.array() - mx).exp().sum()) - z[y];
    } else {
      const double z = p.x.row(i).dot(coef.col(0));
      loss += log1p_exp(z) - (y == 1 ? z : 0.0);
    }
  }
  return rows.empty() ? 0.0 : loss / static_cast<double>(rows.size());
}

KeyphraseModelFit unpack_fit(const Eigen::MatrixXd& coef, std::size_t v, Eigen::Index kc,
                             int num_classes, bool multinomial, double lambda) {
  KeyphraseModelFit fit;
  fit.num_classes = num_classes;
  fit.multinomial = multinomial;
  const auto vi = static_cast<Eigen::Index>(v);
  fit.beta_w = coef.topRows(vi);
  fit.beta_c = coef.middleRows(vi, kc);
  fit.intercept = coef.row(vi + kc);
  fit.lambda = lambda;
  return fit;
}

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t hash_id(const std::string& id, std::uint64_t seed) {
  std::uint64_t h = 0xcbf29ce484222325ULL ^ mix64(seed);
  for (unsigned char ch : id) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return mix64(h);
}

std::vector<int> assign_folds(const BowMatrix& bow, int folds, std::uint64_t seed) {
  const std::size_t n = bow.rows();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::vector<std::uint64_t> keys(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::string id = i < bow.row_ids.size() ? bow.row_ids[i] : std::to_string(i);
    keys[i] = hash_id(id, seed);
  }
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (keys[a] != keys[b]) return keys[a] < keys[b];
    if (bow.row_ids.size() == n) return bow.row_ids[a] < bow.row_ids[b];
    return a < b;
  });
  std::vector<int> fold(n);
  for (std::size_t r = 0; r < n; ++r) fold[order[r]] = static_cast<int>(r % static_cast<std::size_t>(folds));
  return fold;
}

}  // namespace

KeyphraseModelFit fit_keyphrase_model_fixed(const BowMatrix& bow, const Eigen::MatrixXd& concepts,
                                            std::span<const int> labels, double lambda,
                                            const KeyphraseModelConfig& cfg,
                                            const Vocabulary* vocab) {
  if (!(lambda >= 0.0)) throw ContractViolation("lambda must be non-negative");
  const Problem p = make_problem(bow, concepts, labels, lambda, cfg.concept_ridge);
  const bool multinomial = cfg.force_multinomial || p.num_classes > 2;
  KeyphraseModelFit fit =
      unpack_fit(solve(p, multinomial), bow.cols, concepts.cols(), p.num_classes, multinomial, lambda);
  if (vocab) fit.phrases = vocab->phrases;
  return fit;
}

KeyphraseModelFit fit_keyphrase_model(const BowMatrix& bow, const Eigen::MatrixXd& concepts,
                                      std::span<const int> labels,
                                      const KeyphraseModelConfig& cfg, const Vocabulary* vocab) {
  if (cfg.folds < 2) throw ContractViolation("cross-validation needs at least 2 folds");
  if (cfg.lambda_grid.empty()) throw ContractViolation("lambda grid is empty");
  if (bow.rows() < static_cast<std::size_t>(cfg.folds)) {
    throw ContractViolation("fewer rows than cross-validation folds");
  }
  const Problem base = make_problem(bow, concepts, labels, 0.0, cfg.concept_ridge);
  const bool multinomial = cfg.force_multinomial || base.num_classes > 2;
  const std::vector<int> fold = assign_folds(bow, cfg.folds, cfg.fold_seed);
  const auto v = static_cast<Eigen::Index>(bow.cols);

  std::vector<double> scores;
  scores.reserve(cfg.lambda_grid.size());
  for (double lambda : cfg.lambda_grid) {
    if (!(lambda >= 0.0)) throw ContractViolation("lambda grid entries must be non-negative");
    Problem p = base;
    p.penalty.head(v).setConstant(lambda);
    double total = 0.0;
    for (int f = 0; f < cfg.folds; ++f) {
      std::vector<std::size_t> train, held;
      for (std::size_t i = 0; i < fold.size(); ++i) (fold[i] == f ? held : train).push_back(i);
      const Eigen::MatrixXd coef = solve(take_rows(p, train), multinomial);
      total += mean_log_loss(p, coef, multinomial, held) * static_cast<double>(held.size());
    }
    const double score = total / static_cast<double>(fold.size());
    if (!std::isfinite(score)) throw NumericalError("non-finite cross-validation loss");
    scores.push_back(score);
  }
  const auto best = static_cast<std::size_t>(
      std::min_element(scores.begin(), scores.end()) - scores.begin());
  KeyphraseModelConfig refit_cfg = cfg;
  refit_cfg.force_multinomial = multinomial;
  KeyphraseModelFit fit =
      fit_keyphrase_model_fixed(bow, concepts, labels, cfg.lambda_grid[best], refit_cfg, vocab);
  fit.cv_scores = std::move(scores);
  return fit;
}

namespace {

KeyphraseSummary rank(std::vector<RankedPhrase> entries, std::size_t top_n) {
  std::erase_if(entries, [](const RankedPhrase& r) { return r.coefficient == 0.0; });
  std::sort(entries.begin(), entries.end(), [](const RankedPhrase& a, const RankedPhrase& b) {
    const double ma = std::abs(a.coefficient), mb = std::abs(b.coefficient);
    if (ma != mb) return ma > mb;
    return a.phrase < b.phrase;
  });
  if (entries.size() > top_n) entries.resize(top_n);
  return KeyphraseSummary{std::move(entries)};
}

std::string phrase_name(const KeyphraseModelFit& fit, Eigen::Index j) {
  if (static_cast<std::size_t>(j) < fit.phrases.size()) return fit.phrases[static_cast<std::size_t>(j)];
  return "phrase_" + std::to_string(j);
}

int sign_of(double x) { return (x > 0.0) - (x < 0.0); }

}  // namespace

KeyphraseSummary summarize_top_keyphrases(const KeyphraseModelFit& fit, std::size_t top_n) {
  std::vector<RankedPhrase> entries;
  for (Eigen::Index j = 0; j < fit.beta_w.rows(); ++j) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < fit.beta_w.cols(); ++c) {
      if (std::abs(fit.beta_w(j, c)) > std::abs(fit.beta_w(j, best))) best = c;
    }
    const double coef = fit.beta_w(j, best);
    const int label_class = fit.multinomial ? static_cast<int>(best) : 1;
    entries.push_back({phrase_name(fit, j), coef, sign_of(coef), label_class});
  }
  return rank(std::move(entries), top_n);
}

KeyphraseSummary summarize_class(const KeyphraseModelFit& fit, int label_class,
                                 std::size_t top_n) {
  const Eigen::Index col = fit.multinomial ? label_class : 0;
  if (col < 0 || col >= fit.beta_w.cols() || (!fit.multinomial && label_class != 1)) {
    throw ContractViolation("no coefficient column for class " + std::to_string(label_class));
  }
  std::vector<RankedPhrase> entries;
  for (Eigen::Index j = 0; j < fit.beta_w.rows(); ++j) {
    const double coef = fit.beta_w(j, col);
    entries.push_back({phrase_name(fit, j), coef, sign_of(coef), label_class});
  }
  return rank(std::move(entries), top_n);
}

KeyphraseSummary keyphrase_summary_for(std::span<const KeyphraseBag> bags,
                                       const Eigen::MatrixXd& concepts,
                                       std::span<const int> labels,
                                       const KeyphraseModelConfig& cfg) {
  try {
    auto [vocab, bow] = build_bow(bags, cfg.min_df, cfg.max_vocab);
    if (bow.rows() < static_cast<std::size_t>(cfg.folds)) return {};
    const KeyphraseModelFit fit = fit_keyphrase_model(bow, concepts, labels, cfg, &vocab);
    return summarize_top_keyphrases(fit, cfg.top_n);
  } catch (const EmptyVocabularyError&) {
    return {};
  }
}

}  // namespace ccbm
