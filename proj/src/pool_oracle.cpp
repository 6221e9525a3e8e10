#include "ccbm/pool_oracle.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "ccbm/errors.hpp"
#include "ccbm/rng.hpp"

namespace ccbm {

using json = nlohmann::json;

std::string to_string(PoolProposalRule rule) {
  switch (rule) {
    case PoolProposalRule::kExact:
      return "exact";
    case PoolProposalRule::kExactSampled:
      return "exact_sampled";
    case PoolProposalRule::kUniform:
      break;
  }
  return "uniform";
}

PoolProposalRule pool_rule_from_string(const std::string& name) {
  if (name == "exact") return PoolProposalRule::kExact;
  if (name == "exact_sampled") return PoolProposalRule::kExactSampled;
  if (name == "uniform") return PoolProposalRule::kUniform;
  throw ConfigError("unknown pool proposal rule: " + name);
}

PoolDefinition PoolDefinition::from_json(const json& j) {
  PoolDefinition pool;
  for (const auto& e : j.at("concepts")) {
    PoolEntry entry{e.at("question").get<std::string>(), e.at("feature").get<std::string>()};
    // Features double as keyphrases, so they must survive normalization unchanged.
    if (entry.feature.empty() || normalize_keyphrase(entry.feature) != entry.feature) {
      throw ConfigError("pool feature must be a normalized phrase of at most two words: '" +
                        entry.feature + "'");
    }
    pool.entries.push_back(std::move(entry));
  }
  if (pool.entries.empty()) throw ConfigError("pool has no concepts");
  pool.rule = pool_rule_from_string(j.value("proposal", std::string("exact")));
  return pool;
}

PoolDefinition PoolDefinition::load_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open pool definition " + path.string());
  try {
    return from_json(json::parse(in));
  } catch (const json::exception& e) {
    throw ConfigError("bad pool definition " + path.string() + ": " + e.what());
  }
}

json PoolDefinition::to_json() const {
  json concepts = json::array();
  for (const auto& e : entries) concepts.push_back({{"question", e.question}, {"feature", e.feature}});
  return {{"concepts", concepts}, {"proposal", ccbm::to_string(rule)}};
}

namespace {

std::vector<std::string> tokens_of(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char ch : text) {
    if (std::isalnum(ch) || ch >= 0x80) {
      cur.push_back(static_cast<char>(std::tolower(ch)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

bool contains_sequence(const std::vector<std::string>& hay, const std::vector<std::string>& needle) {
  if (needle.empty() || needle.size() > hay.size()) return false;
  for (std::size_t i = 0; i + needle.size() <= hay.size(); ++i) {
    if (std::equal(needle.begin(), needle.end(), hay.begin() + static_cast<std::ptrdiff_t>(i))) {
      return true;
    }
  }
  return false;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const auto n = static_cast<double>(a.size());
  if (a.empty()) return 0.0;
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa <= 0.0 || sbb <= 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

}  // namespace

bool text_mentions(const std::string& text, const std::string& phrase) {
  return contains_sequence(tokens_of(text), tokens_of(phrase));
}

PoolOracle::PoolOracle(PoolDefinition pool, ModelConfig model, std::vector<Observation> training)
    : pool_(std::move(pool)), model_(model), training_(std::move(training)) {
  model_.validate();
  for (const auto& e : pool_.entries) concepts_.emplace_back(e.question);
  ConceptSet distinct(concepts_);  // throws on duplicate questions
  (void)distinct;

  std::vector<std::vector<std::string>> features;
  for (const auto& e : pool_.entries) features.push_back(tokens_of(e.feature));
  training_columns_.assign(concepts_.size(), std::vector<double>(training_.size(), 0.0));
  for (std::size_t i = 0; i < training_.size(); ++i) {
    const auto toks = tokens_of(training_[i].text);
    for (std::size_t j = 0; j < features.size(); ++j) {
      training_columns_[j][i] = contains_sequence(toks, features[j]) ? 1.0 : 0.0;
    }
  }
  const bool labelled = std::all_of(training_.begin(), training_.end(),
                                    [](const Observation& o) { return o.label.has_value(); });
  if (labelled) {
    labels_.resize(static_cast<Eigen::Index>(training_.size()));
    for (std::size_t i = 0; i < training_.size(); ++i) {
      labels_[static_cast<Eigen::Index>(i)] = *training_[i].label;
    }
  }
}

double PoolOracle::value(const Observation& obs, std::size_t j) const {
  return text_mentions(obs.text, pool_.entries.at(j).feature) ? 1.0 : 0.0;
}

int PoolOracle::index_of(const Concept& c) const {
  auto it = std::find(concepts_.begin(), concepts_.end(), c);
  return it == concepts_.end() ? -1 : static_cast<int>(it - concepts_.begin());
}

std::vector<KeyphraseBag> PoolOracle::extract_keyphrases(std::span<const Observation> observations) {
  std::vector<KeyphraseBag> out;
  out.reserve(observations.size());
  for (const auto& obs : observations) {
    std::vector<std::string> present;
    for (std::size_t j = 0; j < pool_.entries.size(); ++j) {
      if (value(obs, j) > 0.0) present.push_back(pool_.entries[j].feature);
    }
    out.push_back(KeyphraseBag::from_raw(obs.id, present));
  }
  return out;
}

ConceptSet PoolOracle::initialize_concepts(const KeyphraseSummary& summary, std::size_t k) {
  if (summary.empty()) throw ContractViolation("initialization needs a non-empty keyphrase summary");
  if (k == 0 || k > concepts_.size()) {
    throw InitializationError("pool cannot supply " + std::to_string(k) + " distinct concepts");
  }
  // Walk the ranked phrases; each claims the unused pool concept whose column
  // correlates most (in absolute value) with the phrase's presence indicator.
  const auto bags = extract_keyphrases(training_);
  std::vector<bool> used(concepts_.size(), false);
  std::vector<Concept> chosen;
  for (const auto& ranked : summary.phrases) {
    if (chosen.size() == k) break;
    std::vector<double> indicator(training_.size());
    for (std::size_t i = 0; i < bags.size(); ++i) indicator[i] = bags[i].contains(ranked.phrase) ? 1.0 : 0.0;
    int best = -1;
    double best_corr = 0.0;
    for (std::size_t j = 0; j < concepts_.size(); ++j) {
      if (used[j]) continue;
      const double r = std::abs(pearson(training_columns_[j], indicator));
      if (r > best_corr) {
        best_corr = r;
        best = static_cast<int>(j);
      }
    }
    if (best >= 0) {
      used[static_cast<std::size_t>(best)] = true;
      chosen.push_back(concepts_[static_cast<std::size_t>(best)]);
    }
  }
  for (std::size_t j = 0; j < concepts_.size() && chosen.size() < k; ++j) {
    if (!used[j]) {
      used[j] = true;
      chosen.push_back(concepts_[j]);
    }
  }
  return ConceptSet(std::move(chosen));
}

std::vector<std::pair<std::size_t, double>> PoolOracle::conditional_posterior(
    std::span<const Concept> context, std::span<const std::size_t> rows) const {
  std::vector<std::size_t> context_idx;
  for (const auto& c : context) {
    const int j = index_of(c);
    if (j < 0) throw ContractViolation("exact proposals need every context concept in the pool");
    context_idx.push_back(static_cast<std::size_t>(j));
  }
  if (!rows.empty() && labels_.size() != static_cast<Eigen::Index>(training_.size())) {
    throw ContractViolation("exact proposals need labelled training observations");
  }
  const auto n = static_cast<Eigen::Index>(rows.size());
  const auto kc = static_cast<Eigen::Index>(context_idx.size());
  Eigen::MatrixXd x(n, kc + 2);
  Eigen::VectorXd y(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const std::size_t i = rows[static_cast<std::size_t>(r)];
    if (i >= training_.size()) throw ContractViolation("proposal row out of range");
    for (Eigen::Index c = 0; c < kc; ++c) x(r, c) = training_columns_[context_idx[static_cast<std::size_t>(c)]][i];
    x(r, kc + 1) = 1.0;
    y[r] = labels_[static_cast<Eigen::Index>(i)];
  }
  ModelConfig cfg = model_;
  if (!cfg.include_intercept) throw ContractViolation("pool oracle assumes an intercept column");

  std::vector<std::pair<std::size_t, double>> out;
  for (std::size_t j = 0; j < concepts_.size(); ++j) {
    if (std::find(context_idx.begin(), context_idx.end(), j) != context_idx.end()) continue;
    for (Eigen::Index r = 0; r < n; ++r) x(r, kc) = training_columns_[j][rows[static_cast<std::size_t>(r)]];
    out.emplace_back(j, log_marginal_design(x, y, cfg).value);
  }
  if (out.empty()) throw ContractViolation("no eligible pool concepts outside the context");
  double mx = -std::numeric_limits<double>::infinity();
  for (const auto& [j, lv] : out) mx = std::max(mx, lv);
  double total = 0.0;
  for (auto& [j, lv] : out) {
    lv = std::exp(lv - mx);
    total += lv;
  }
  for (auto& [j, p] : out) p /= total;
  return out;
}

OracleProposal PoolOracle::propose(const ProposalRequest& request) {
  if (request.m == 0) throw ContractViolation("proposal size m must be at least 1");
  OracleProposal proposal;
  constexpr double kFloor = 1e-3;

  if (pool_.rule != PoolProposalRule::kUniform) {
    auto post = conditional_posterior(request.context, request.rows);
    double q_current = -1.0;
    const int inc = index_of(request.incumbent);
    for (const auto& [j, p] : post) {
      if (static_cast<int>(j) == inc) q_current = p;
    }
    if (q_current < 0.0) {
      proposal.flags.emplace_back("incumbent outside pool; q_current floored");
    }
    if (pool_.rule == PoolProposalRule::kExactSampled) {
      Rng rng(request.seed);
      for (std::size_t m = 0; m < request.m; ++m) {
        double u = rng.uniform();
        std::size_t pick = 0;
        for (; pick + 1 < post.size(); ++pick) {
          if (u < post[pick].second) break;
          u -= post[pick].second;
        }
        proposal.candidates.push_back(concepts_[post[pick].first]);
        proposal.q_weights.push_back(post[pick].second);
      }
      proposal.q_current = q_current < 0.0 ? kFloor : q_current;
      return proposal;
    }
    std::stable_sort(post.begin(), post.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    if (post.size() > request.m) post.resize(request.m);
    double mass = 0.0;
    for (const auto& [j, p] : post) {
      proposal.candidates.push_back(concepts_[j]);
      proposal.q_weights.push_back(p);
      mass += p;
    }
    if (q_current < 0.0) q_current = kFloor * mass;
    proposal.q_current = q_current;
    return proposal;
  }

  std::vector<std::size_t> eligible;
  for (std::size_t j = 0; j < concepts_.size(); ++j) {
    if (std::find(request.context.begin(), request.context.end(), concepts_[j]) == request.context.end()) {
      eligible.push_back(j);
    }
  }
  if (eligible.empty()) throw ContractViolation("no eligible pool concepts outside the context");
  const double q = 1.0 / static_cast<double>(eligible.size());
  Rng rng(request.seed);
  const std::size_t m = std::min(request.m, eligible.size());
  for (std::size_t a = 0; a < m; ++a) {
    const std::size_t b = a + rng.below(eligible.size() - a);
    std::swap(eligible[a], eligible[b]);
    proposal.candidates.push_back(concepts_[eligible[a]]);
    proposal.q_weights.push_back(q);
  }
  if (index_of(request.incumbent) >= 0) {
    proposal.q_current = q;
  } else {
    proposal.q_current = kFloor * q * static_cast<double>(m);
    proposal.flags.emplace_back("incumbent outside pool; q_current floored");
  }
  return proposal;
}

std::vector<AnnotationRecord> PoolOracle::annotate(std::span<const Observation> observations,
                                                   std::span<const Concept> concepts) {
  std::vector<AnnotationRecord> out;
  out.reserve(observations.size() * concepts.size());
  std::vector<int> idx;
  for (const auto& c : concepts) {
    const int j = index_of(c);
    if (j < 0) throw OracleError("pool oracle cannot annotate a concept outside its pool: " + c.question());
    idx.push_back(j);
  }
  for (const auto& obs : observations) {
    const auto toks = tokens_of(obs.text);
    for (std::size_t b = 0; b < concepts.size(); ++b) {
      const auto feat = tokens_of(pool_.entries[static_cast<std::size_t>(idx[b])].feature);
      out.push_back({obs.id, concepts[b].id(), contains_sequence(toks, feat) ? 1.0 : 0.0,
                     AnnotationSource::kPool, false});
    }
  }
  return out;
}

json PoolOracle::describe() const {
  return {{"kind", "pool"},
          {"proposal", ccbm::to_string(pool_.rule)},
          {"pool_size", concepts_.size()},
          {"gamma", model_.gamma}};
}

}  // namespace ccbm
