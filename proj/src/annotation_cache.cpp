#include "ccbm/annotation_cache.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <map>
#include <mutex>

#include "ccbm/errors.hpp"

namespace ccbm {

using json = nlohmann::json;

namespace {

std::string cache_key(const std::string& obs, const std::string& concept_id) {
  std::string key;
  key.reserve(obs.size() + concept_id.size() + 1);
  key += obs;
  key.push_back('\x1f');
  key += concept_id;
  return key;
}

// Reads every parseable line, hands it to `apply`, then rewrites the file with
// `dump` and reopens it for appending.
template <typename Apply, typename Dump>
void load_and_compact(const std::filesystem::path& file, std::ofstream& log, Apply apply,
                      Dump dump) {
  if (file.empty()) return;
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  if (std::filesystem::exists(file)) {
    std::ifstream in(file);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      try {
        apply(json::parse(line));
      } catch (const json::exception&) {
        // torn trailing write from an interrupted run
      }
    }
    const auto tmp = std::filesystem::path(file.string() + ".compact");
    {
      std::ofstream out(tmp, std::ios::trunc);
      dump(out);
    }
    std::filesystem::rename(tmp, file);
  }
  log.open(file, std::ios::app);
  if (!log) throw ConfigError("cannot open cache file " + file.string());
}

}  // namespace

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

AnnotationCache::AnnotationCache(std::filesystem::path file) : file_(std::move(file)) {
  std::unordered_map<std::string, json> records;
  std::vector<std::string> order;
  load_and_compact(
      file_, log_,
      [&](const json& j) {
        const auto key = cache_key(j.at("observation_id").get<std::string>(),
                                   j.at("concept_id").get<std::string>());
        const double v = j.at("value").get<double>();
        if (!(v >= 0.0 && v <= 1.0)) return;
        values_[key] = v;
        if (!records.contains(key)) order.push_back(key);
        records[key] = j;
      },
      [&](std::ofstream& out) {
        for (const auto& key : order) out << records[key].dump() << '\n';
      });
}

std::optional<double> AnnotationCache::get(const std::string& observation_id,
                                           const std::string& concept_id) const {
  std::shared_lock lock(mu_);
  if (auto it = values_.find(cache_key(observation_id, concept_id)); it != values_.end()) {
    return it->second;
  }
  return std::nullopt;
}

void AnnotationCache::put(const AnnotationRecord& record) {
  if (!(record.value >= 0.0 && record.value <= 1.0)) {
    throw ContractViolation("cached annotation outside [0,1]");
  }
  std::unique_lock lock(mu_);
  values_[cache_key(record.observation_id, record.concept_id)] = record.value;
  if (log_.is_open()) {
    const json j = {{"observation_id", record.observation_id},
                    {"concept_id", record.concept_id},
                    {"value", record.value},
                    {"source", to_string(record.source)},
                    {"timestamp", utc_timestamp()}};
    log_ << j.dump() << '\n';
    log_.flush();
  }
}

std::size_t AnnotationCache::size() const {
  std::shared_lock lock(mu_);
  return values_.size();
}

KeyphraseCache::KeyphraseCache(std::filesystem::path file) : file_(std::move(file)) {
  std::vector<std::string> order;
  load_and_compact(
      file_, log_,
      [&](const json& j) {
        KeyphraseBag bag;
        bag.observation_id = j.at("observation_id").get<std::string>();
        bag.phrases = j.at("phrases").get<std::vector<std::string>>();
        if (!bags_.contains(bag.observation_id)) order.push_back(bag.observation_id);
        bags_[bag.observation_id] = std::move(bag);
      },
      [&](std::ofstream& out) {
        for (const auto& id : order) {
          const auto& bag = bags_[id];
          out << json{{"observation_id", id}, {"phrases", bag.phrases}}.dump() << '\n';
        }
      });
}

std::optional<KeyphraseBag> KeyphraseCache::get(const std::string& observation_id) const {
  std::shared_lock lock(mu_);
  if (auto it = bags_.find(observation_id); it != bags_.end()) return it->second;
  return std::nullopt;
}

void KeyphraseCache::put(const KeyphraseBag& bag) {
  std::unique_lock lock(mu_);
  bags_[bag.observation_id] = bag;
  if (log_.is_open()) {
    const json j = {{"observation_id", bag.observation_id},
                    {"phrases", bag.phrases},
                    {"timestamp", utc_timestamp()}};
    log_ << j.dump() << '\n';
    log_.flush();
  }
}

std::size_t KeyphraseCache::size() const {
  std::shared_lock lock(mu_);
  return bags_.size();
}

AnnotationService::AnnotationService(ConceptOracle& oracle, AnnotationCache& cache,
                                     KeyphraseCache& keyphrases)
    : oracle_(oracle), cache_(cache), keyphrase_cache_(keyphrases) {}

std::vector<std::vector<double>> AnnotationService::annotate(
    std::span<const Observation> observations, std::span<const Concept> concepts) {
  std::vector<bool> ignored;
  return annotate(observations, concepts, ignored);
}

std::vector<std::vector<double>> AnnotationService::annotate(
    std::span<const Observation> observations, std::span<const Concept> concepts,
    std::vector<bool>& fully_imputed) {
  std::vector<std::vector<bool>> ignored;
  return annotate(observations, concepts, fully_imputed, ignored);
}

std::vector<std::vector<double>> AnnotationService::annotate(
    std::span<const Observation> observations, std::span<const Concept> concepts,
    std::vector<bool>& fully_imputed, std::vector<std::vector<bool>>& imputed) {
  const std::size_t n = observations.size();
  std::vector<std::vector<double>> columns(concepts.size(), std::vector<double>(n, 0.5));
  std::vector<std::size_t> imputed_count(concepts.size(), 0);
  imputed.assign(concepts.size(), std::vector<bool>(n, false));

  // Group misses by the exact set of missing concepts, so one oracle call
  // covers several observations that need the same questions.
  std::vector<std::vector<std::size_t>> missing(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < concepts.size(); ++j) {
      if (auto v = cache_.get(observations[i].id, concepts[j].id())) {
        columns[j][i] = *v;
        ++counters_.annotation_cache_hits;
      } else {
        missing[i].push_back(j);
      }
    }
  }
  std::map<std::vector<std::size_t>, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < n; ++i) {
    if (!missing[i].empty()) groups[missing[i]].push_back(i);
  }
  for (const auto& [concept_idx, obs_idx] : groups) {
    std::vector<Observation> batch_obs;
    std::vector<Concept> batch_concepts;
    for (std::size_t i : obs_idx) batch_obs.push_back(observations[i]);
    for (std::size_t j : concept_idx) batch_concepts.push_back(concepts[j]);
    const auto records = oracle_.annotate(batch_obs, batch_concepts);
    if (records.size() != batch_obs.size() * batch_concepts.size()) {
      throw OracleError("oracle returned the wrong number of annotation records");
    }
    counters_.annotation_queries += batch_obs.size();
    for (std::size_t a = 0; a < batch_obs.size(); ++a) {
      for (std::size_t b = 0; b < batch_concepts.size(); ++b) {
        AnnotationRecord rec = records[a * batch_concepts.size() + b];
        ++counters_.annotation_values;
        if (!(rec.value >= 0.0 && rec.value <= 1.0)) {
          ++counters_.clamped;
          rec.value = std::isnan(rec.value) ? 0.5 : std::clamp(rec.value, 0.0, 1.0);
        }
        columns[concept_idx[b]][obs_idx[a]] = rec.value;
        if (rec.imputed) {
          ++counters_.imputed;
          ++imputed_count[concept_idx[b]];
          imputed[concept_idx[b]][obs_idx[a]] = true;
        } else {
          cache_.put(rec);
        }
      }
    }
  }
  fully_imputed.assign(concepts.size(), false);
  for (std::size_t j = 0; j < concepts.size(); ++j) {
    fully_imputed[j] = n > 0 && imputed_count[j] == n;
  }
  return columns;
}

std::vector<KeyphraseBag> AnnotationService::keyphrases(std::span<const Observation> observations) {
  std::vector<KeyphraseBag> out(observations.size());
  std::vector<Observation> misses;
  std::vector<std::size_t> miss_idx;
  for (std::size_t i = 0; i < observations.size(); ++i) {
    if (auto bag = keyphrase_cache_.get(observations[i].id)) {
      out[i] = std::move(*bag);
      ++counters_.keyphrase_cache_hits;
    } else {
      misses.push_back(observations[i]);
      miss_idx.push_back(i);
    }
  }
  if (!misses.empty()) {
    auto bags = oracle_.extract_keyphrases(misses);
    if (bags.size() != misses.size()) throw OracleError("oracle returned the wrong number of keyphrase bags");
    counters_.keyphrase_queries += misses.size();
    for (std::size_t a = 0; a < bags.size(); ++a) {
      bags[a].observation_id = misses[a].id;
      keyphrase_cache_.put(bags[a]);
      out[miss_idx[a]] = std::move(bags[a]);
    }
  }
  return out;
}

AnnotatedColumns::AnnotatedColumns(AnnotationService& service, std::vector<Observation> observations)
    : service_(service), observations_(std::move(observations)) {}

std::vector<std::string> AnnotatedColumns::prefetch(std::span<const Concept> concepts) {
  std::vector<Concept> todo;
  for (const auto& c : concepts) {
    if (!columns_.contains(c.id()) &&
        std::find(todo.begin(), todo.end(), c) == todo.end()) {
      todo.push_back(c);
    }
  }
  std::vector<std::string> dropped;
  if (todo.empty()) return dropped;
  std::vector<bool> failed;
  auto cols = service_.annotate(observations_, todo, failed);
  for (std::size_t j = 0; j < todo.size(); ++j) {
    if (failed[j]) {
      dropped.push_back(todo[j].id());
    } else {
      columns_.emplace(todo[j].id(), std::move(cols[j]));
    }
  }
  return dropped;
}

const std::vector<double>& AnnotatedColumns::column(const Concept& c) {
  if (auto it = columns_.find(c.id()); it != columns_.end()) return it->second;
  const Concept one[] = {c};
  if (!prefetch(one).empty()) throw OracleError("annotation failed for concept: " + c.question());
  return columns_.at(c.id());
}

FixedColumns::FixedColumns(std::size_t rows,
                           std::unordered_map<std::string, std::vector<double>> columns)
    : rows_(rows), columns_(std::move(columns)) {
  for (const auto& [id, col] : columns_) {
    if (col.size() != rows_) throw ContractViolation("fixed column has wrong length: " + id);
  }
}

std::vector<std::string> FixedColumns::prefetch(std::span<const Concept> concepts) {
  std::vector<std::string> dropped;
  for (const auto& c : concepts) {
    if (!columns_.contains(c.id())) dropped.push_back(c.id());
  }
  return dropped;
}

const std::vector<double>& FixedColumns::column(const Concept& c) {
  auto it = columns_.find(c.id());
  if (it == columns_.end()) throw ContractViolation("no column for concept: " + c.question());
  return it->second;
}

}  // namespace ccbm
