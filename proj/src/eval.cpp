#include "ccbm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "ccbm/errors.hpp"
#include "ccbm/rng.hpp"

namespace ccbm {

using json = nlohmann::json;

namespace {

void check_lengths(std::size_t a, std::size_t b) {
  if (a != b) throw ContractViolation("scores and labels differ in length");
  if (a == 0) throw ContractViolation("metric needs at least one observation");
}

}  // namespace

double auc(std::span<const double> scores, std::span<const int> labels) {
  check_lengths(scores.size(), labels.size());
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) rank[order[t]] = mid;
    i = j + 1;
  }
  double pos = 0.0, rank_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw ContractViolation("labels must be 0 or 1");
    if (labels[i] == 1) {
      pos += 1.0;
      rank_sum += rank[i];
    }
  }
  const double neg = static_cast<double>(n) - pos;
  if (pos == 0.0 || neg == 0.0) throw UndefinedMetricError("AUC needs both classes");
  return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

double brier(std::span<const double> scores, std::span<const int> labels) {
  check_lengths(scores.size(), labels.size());
  double s = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!(scores[i] >= 0.0 && scores[i] <= 1.0)) throw ContractViolation("Brier scores must lie in [0,1]");
    const double d = scores[i] - labels[i];
    s += d * d;
  }
  return s / static_cast<double>(scores.size());
}

double accuracy(std::span<const double> scores, std::span<const int> labels, double threshold) {
  check_lengths(scores.size(), labels.size());
  std::size_t hits = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if ((scores[i] >= threshold ? 1 : 0) == labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(scores.size());
}

double predictive_entropy(std::span<const double> class_probs) {
  if (class_probs.empty()) throw ContractViolation("entropy of an empty distribution");
  double total = 0.0, h = 0.0;
  for (double p : class_probs) {
    if (!(p >= 0.0 && p <= 1.0)) throw ContractViolation("class probabilities must lie in [0,1]");
    total += p;
    if (p > 0.0) h -= p * std::log(p);
  }
  if (std::abs(total - 1.0) > 1e-9) throw ContractViolation("class probabilities must sum to 1");
  return h;
}

std::optional<double> pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ContractViolation("correlation of columns with different lengths");
  if (a.empty()) return std::nullopt;
  const auto n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa <= 0.0 || sbb <= 0.0) return std::nullopt;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

void ConceptMatchRule::validate() const {
  if (!(threshold > 0.0 && threshold <= 1.0)) throw ContractViolation("match threshold must lie in (0,1]");
}

bool concepts_match(std::span<const double> a, std::span<const double> b, const ConceptMatchRule& rule) {
  rule.validate();
  if (a.size() != b.size()) throw ContractViolation("concept columns must share observations");
  if (a.size() < rule.min_shared) {
    throw InconclusiveMatch("only " + std::to_string(a.size()) + " shared observations; need " +
                            std::to_string(rule.min_shared));
  }
  const auto r = pearson(a, b);
  return r.has_value() && std::abs(*r) > rule.threshold;
}

json RecoveryReport::to_json() const {
  auto pairs = [](const std::vector<MatchedPair>& v) {
    json out = json::array();
    for (const auto& p : v) {
      out.push_back({{"sampled_id", p.sampled_id},
                     {"sampled_question", p.sampled_question},
                     {"true_id", p.true_id},
                     {"true_question", p.true_question},
                     {"correlation", p.correlation}});
    }
    return out;
  };
  json freq = json::array();
  for (const auto& f : frequencies) freq.push_back({{"id", f.id}, {"question", f.question}, {"frequency", f.frequency}});
  return {{"concept_precision", concept_precision},
          {"concept_recall", concept_recall},
          {"per_truth_recall", per_truth_recall},
          {"frequencies", freq},
          {"matched", pairs(matched)},
          {"borderline", pairs(borderline)},
          {"warnings", warnings}};
}

std::string RecoveryReport::frequencies_csv() const {
  std::ostringstream out;
  out << "concept_id,question,frequency\n";
  for (const auto& f : frequencies) {
    std::string q = f.question;
    std::string quoted = "\"";
    for (char ch : q) {
      if (ch == '"') quoted += "\"\"";
      else quoted.push_back(ch);
    }
    quoted += "\"";
    out << f.id << ',' << quoted << ',' << f.frequency << '\n';
  }
  return out.str();
}

RecoveryReport recovery_report(std::span<const ConceptSet> samples, std::span<const Concept> truth,
                               const ConceptMatchRule& rule, const PanelLookup& panel) {
  rule.validate();
  if (samples.empty()) throw ContractViolation("recovery report needs at least one sample");
  RecoveryReport report;

  std::unordered_map<std::string, std::vector<double>> columns;
  auto column = [&](const Concept& c) -> const std::vector<double>& {
    auto it = columns.find(c.id());
    if (it == columns.end()) it = columns.emplace(c.id(), panel(c)).first;
    return it->second;
  };

  // Distinct sampled concepts in first-seen order, with their sample counts.
  std::vector<Concept> distinct;
  std::unordered_map<std::string, std::size_t> count;
  for (const auto& s : samples) {
    for (const auto& c : s.concepts()) {
      if (count[c.id()]++ == 0) distinct.push_back(c);
    }
  }
  const auto n_samples = static_cast<double>(samples.size());

  // match[d][t]: distinct sampled concept d matches true concept t
  std::vector<std::vector<bool>> match(distinct.size(), std::vector<bool>(truth.size(), false));
  for (std::size_t d = 0; d < distinct.size(); ++d) {
    for (std::size_t t = 0; t < truth.size(); ++t) {
      const auto& a = column(distinct[d]);
      const auto& b = column(truth[t]);
      bool m = false;
      try {
        m = concepts_match(a, b, rule);
      } catch (const InconclusiveMatch& e) {
        report.warnings.push_back(distinct[d].id() + " vs " + truth[t].id() + ": " + e.what());
      }
      match[d][t] = m;
      const double r = a.size() == b.size() ? pearson(a, b).value_or(0.0) : 0.0;
      MatchedPair pair{distinct[d].id(), distinct[d].question(), truth[t].id(), truth[t].question(), r};
      if (m) report.matched.push_back(pair);
      const double abs_r = std::abs(r);
      if (abs_r >= rule.borderline_low && abs_r <= rule.borderline_high) report.borderline.push_back(pair);
    }
  }
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t d = 0; d < distinct.size(); ++d) index[distinct[d].id()] = d;

  std::size_t slots = 0, precise = 0;
  std::vector<double> hit(truth.size(), 0.0);
  for (const auto& s : samples) {
    std::vector<bool> covered(truth.size(), false);
    for (const auto& c : s.concepts()) {
      const auto& row = match[index.at(c.id())];
      ++slots;
      if (std::find(row.begin(), row.end(), true) != row.end()) ++precise;
      for (std::size_t t = 0; t < truth.size(); ++t) covered[t] = covered[t] || row[t];
    }
    for (std::size_t t = 0; t < truth.size(); ++t) hit[t] += covered[t] ? 1.0 : 0.0;
  }
  report.concept_precision = slots == 0 ? 0.0 : static_cast<double>(precise) / static_cast<double>(slots);
  for (double h : hit) report.per_truth_recall.push_back(h / n_samples);
  report.concept_recall =
      truth.empty() ? 0.0
                    : std::accumulate(report.per_truth_recall.begin(), report.per_truth_recall.end(), 0.0) /
                          static_cast<double>(truth.size());

  for (const auto& c : distinct) {
    report.frequencies.push_back({c.id(), c.question(), static_cast<double>(count[c.id()]) / n_samples});
  }
  std::stable_sort(report.frequencies.begin(), report.frequencies.end(),
                   [](const ConceptFrequency& a, const ConceptFrequency& b) {
                     if (a.frequency != b.frequency) return a.frequency > b.frequency;
                     return a.id < b.id;
                   });
  return report;
}

std::map<std::string, double> EnumeratedPosterior::by_key() const {
  std::map<std::string, double> out;
  for (const auto& s : supports) out[s.key] = s.probability;
  return out;
}

json EnumeratedPosterior::to_json() const {
  json out = json::array();
  for (const auto& s : supports) {
    out.push_back({{"pool_indices", s.pool_indices},
                   {"key", s.key},
                   {"log_marginal", s.log_marginal},
                   {"probability", s.probability}});
  }
  return out;
}

EnumeratedPosterior enumerate_posterior(std::span<const Concept> pool, std::size_t k,
                                        const Eigen::VectorXd& y,
                                        std::span<const std::vector<double>> columns, double gamma,
                                        double max_supports) {
  const std::size_t p = pool.size();
  if (columns.size() != p) throw ContractViolation("one column per pool concept is required");
  if (k == 0 || k > p) throw ContractViolation("k must lie in [1, pool size]");
  double count = 1.0;
  for (std::size_t i = 0; i < k; ++i) count = count * static_cast<double>(p - i) / static_cast<double>(i + 1);
  count = std::round(count);
  if (count > max_supports) {
    throw CombinatorialBudgetExceeded("enumeration would visit " + std::to_string(static_cast<long long>(count)) +
                                          " supports (budget " + std::to_string(static_cast<long long>(max_supports)) + ")",
                                      count);
  }
  const auto n = y.size();
  for (const auto& col : columns) {
    if (static_cast<Eigen::Index>(col.size()) != n) throw ContractViolation("pool column length differs from labels");
  }
  ModelConfig cfg;
  cfg.gamma = gamma;
  cfg.k = static_cast<int>(k);
  cfg.validate();

  EnumeratedPosterior post;
  std::vector<std::size_t> idx(k);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Eigen::MatrixXd x(n, static_cast<Eigen::Index>(k) + 1);
  x.col(static_cast<Eigen::Index>(k)).setOnes();
  while (true) {
    std::vector<Concept> members;
    for (std::size_t a = 0; a < k; ++a) {
      for (Eigen::Index r = 0; r < n; ++r) x(r, static_cast<Eigen::Index>(a)) = columns[idx[a]][static_cast<std::size_t>(r)];
      members.push_back(pool[idx[a]]);
    }
    EnumeratedSupport s;
    s.pool_indices = idx;
    s.key = ConceptSet(members).support_key();
    s.log_marginal = log_marginal_design(x, y, cfg).value;
    post.supports.push_back(std::move(s));
    // next combination in lexicographic order
    std::size_t i = k;
    while (i > 0 && idx[i - 1] == p - k + (i - 1)) --i;
    if (i == 0) break;
    ++idx[i - 1];
    for (std::size_t j = i; j < k; ++j) idx[j] = idx[j - 1] + 1;
  }
  double mx = -std::numeric_limits<double>::infinity();
  for (const auto& s : post.supports) mx = std::max(mx, s.log_marginal);
  double z = 0.0;
  for (const auto& s : post.supports) z += std::exp(s.log_marginal - mx);
  const double log_z = mx + std::log(z);
  for (auto& s : post.supports) s.probability = std::exp(s.log_marginal - log_z);
  return post;
}

std::map<std::string, double> support_frequencies(std::span<const ConceptSet> samples) {
  std::map<std::string, double> out;
  if (samples.empty()) return out;
  for (const auto& s : samples) out[s.support_key()] += 1.0;
  for (auto& [key, v] : out) v /= static_cast<double>(samples.size());
  return out;
}

double total_variation(const std::map<std::string, double>& p, const std::map<std::string, double>& q) {
  double s = 0.0;
  for (const auto& [key, v] : p) {
    auto it = q.find(key);
    s += std::abs(v - (it == q.end() ? 0.0 : it->second));
  }
  for (const auto& [key, v] : q) {
    if (!p.contains(key)) s += std::abs(v);
  }
  return 0.5 * s;
}

void SyntheticSpec::validate() const {
  if (pool.empty()) throw ContractViolation("synthetic pool is empty");
  if (coefficients.size() != true_support.size()) {
    throw ContractViolation("need one coefficient per true feature");
  }
  for (std::size_t j : true_support) {
    if (j >= pool.size()) throw ContractViolation("true support index outside the pool");
  }
  if (std::set<std::size_t>(true_support.begin(), true_support.end()).size() != true_support.size()) {
    throw ContractViolation("true support has repeated indices");
  }
  for (const auto& f : pool) {
    if (!(f.prevalence >= 0.0 && f.prevalence <= 1.0)) throw ContractViolation("prevalence outside [0,1]");
    if (normalize_keyphrase(f.feature) != f.feature || f.feature.empty()) {
      throw ContractViolation("synthetic feature must be a normalized phrase: '" + f.feature + "'");
    }
  }
  if (!(feature_copy_probability >= 0.0 && feature_copy_probability <= 1.0)) {
    throw ContractViolation("feature_copy_probability outside [0,1]");
  }
}

SyntheticSpec default_synthetic_spec(std::size_t n, std::uint64_t seed) {
  SyntheticSpec spec;
  spec.n = n;
  spec.seed = seed;
  spec.pool = {
      {"Does the note say the patient is unemployed?", "unemployed", 0.2},
      {"Does the note say the patient is retired?", "retired", 0.2},
      {"Does the note mention current or past alcohol use?", "alcohol use", 0.2},
      {"Does the note mention current or past smoking?", "smoking", 0.3},
      {"Does the note mention current or past recreational drug use?", "drug use", 0.15},
  };
  const char* distractors[] = {"hypertension", "diabetes",     "asthma",     "obesity",      "depression",
                               "anxiety",      "chest pain",   "back pain",  "headache",     "fever",
                               "cough",        "fatigue",      "insomnia",   "allergies",    "arthritis",
                               "pregnancy",    "fracture",     "migraine",   "anemia",       "kidney disease",
                               "heart failure", "dementia",    "homeless",   "married",      "lives alone"};
  for (const char* d : distractors) {
    spec.pool.push_back({std::string("Does the note mention ") + d + "?", d, 0.2});
  }
  spec.true_support = {0, 1, 2, 3, 4};
  spec.coefficients = {4.0, 4.0, 4.0, -4.0, 5.0};
  spec.intercept = 0.0;
  return spec;
}

std::string synthetic_note(const std::vector<std::string>& active_features) {
  if (active_features.empty()) return "Patient note. No notable findings.";
  std::string out = "Patient note. Findings: ";
  for (std::size_t i = 0; i < active_features.size(); ++i) {
    if (i > 0) out += "; ";
    out += active_features[i];
  }
  out += ".";
  return out;
}

SyntheticData generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const std::size_t p = spec.pool.size();
  SyntheticData data;
  data.features = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(spec.n), static_cast<Eigen::Index>(p));
  data.logits.resize(static_cast<Eigen::Index>(spec.n));
  for (std::size_t i = 0; i < spec.n; ++i) {
    const double shared = rng.uniform();
    std::vector<std::string> active;
    for (std::size_t j = 0; j < p; ++j) {
      // both draws happen every time so the stream does not depend on the outcome
      const bool copy = rng.uniform() < spec.feature_copy_probability;
      const double own = rng.uniform();
      const bool on = (copy ? shared : own) < spec.pool[j].prevalence;
      if (on) {
        data.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = 1.0;
        active.push_back(spec.pool[j].feature);
      }
    }
    double logit = spec.intercept;
    for (std::size_t t = 0; t < spec.true_support.size(); ++t) {
      logit += spec.coefficients[t] *
               data.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(spec.true_support[t]));
    }
    data.logits[static_cast<Eigen::Index>(i)] = logit;
    const int label = rng.uniform() < sigmoid(logit) ? 1 : 0;
    std::string id = spec.id_prefix + "-" + std::to_string(i);
    data.keyphrases.push_back(KeyphraseBag::from_raw(id, active));
    data.observations.push_back({std::move(id), synthetic_note(active), label});
  }
  for (const auto& f : spec.pool) data.pool.entries.push_back({f.question, f.feature});
  for (std::size_t j : spec.true_support) data.truth.emplace_back(spec.pool[j].question);
  return data;
}

}  // namespace ccbm
