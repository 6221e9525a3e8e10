#pragma once

// Persistent caches for oracle output. Each is an append-only newline-delimited
// JSON log, compacted (last record wins) when opened, so a crash mid-run loses
// at most a partial trailing line.

#include <atomic>
#include <filesystem>
#include <fstream>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "ccbm/concept.hpp"
#include "ccbm/dataset.hpp"
#include "ccbm/keyphrase.hpp"
#include "ccbm/oracle.hpp"

namespace ccbm {

class AnnotationCache {
 public:
  /// Empty path keeps the cache in memory only.
  explicit AnnotationCache(std::filesystem::path file = {});

  std::optional<double> get(const std::string& observation_id, const std::string& concept_id) const;
  void put(const AnnotationRecord& record);
  std::size_t size() const;
  const std::filesystem::path& path() const { return file_; }

 private:
  std::filesystem::path file_;
  mutable std::shared_mutex mu_;
  std::unordered_map<std::string, double> values_;
  std::ofstream log_;
};

class KeyphraseCache {
 public:
  explicit KeyphraseCache(std::filesystem::path file = {});

  std::optional<KeyphraseBag> get(const std::string& observation_id) const;
  void put(const KeyphraseBag& bag);
  std::size_t size() const;

 private:
  std::filesystem::path file_;
  mutable std::shared_mutex mu_;
  std::unordered_map<std::string, KeyphraseBag> bags_;
  std::ofstream log_;
};

struct OracleCounters {
  std::size_t annotation_values = 0;   // (observation, concept) pairs fetched from the oracle
  std::size_t annotation_queries = 0;  // per-observation batched requests
  std::size_t annotation_cache_hits = 0;
  std::size_t imputed = 0;
  std::size_t clamped = 0;
  std::size_t keyphrase_queries = 0;
  std::size_t keyphrase_cache_hits = 0;
};

/// Cache-first access to the oracle. Only misses reach the oracle, batched so
/// each observation gets one request covering all of its missing concepts.
class AnnotationService {
 public:
  AnnotationService(ConceptOracle& oracle, AnnotationCache& cache, KeyphraseCache& keyphrases);

  /// columns[j][i] = value of concepts[j] on observations[i].
  std::vector<std::vector<double>> annotate(std::span<const Observation> observations,
                                            std::span<const Concept> concepts);
  /// Same, plus which concepts came back imputed on every observation.
  std::vector<std::vector<double>> annotate(std::span<const Observation> observations,
                                            std::span<const Concept> concepts,
                                            std::vector<bool>& fully_imputed);
  /// imputed[j][i] marks values that fell back to 0.5 because the reply was unusable.
  std::vector<std::vector<double>> annotate(std::span<const Observation> observations,
                                            std::span<const Concept> concepts,
                                            std::vector<bool>& fully_imputed,
                                            std::vector<std::vector<bool>>& imputed);
  std::vector<KeyphraseBag> keyphrases(std::span<const Observation> observations);

  const OracleCounters& counters() const { return counters_; }
  ConceptOracle& oracle() { return oracle_; }

 private:
  ConceptOracle& oracle_;
  AnnotationCache& cache_;
  KeyphraseCache& keyphrase_cache_;
  OracleCounters counters_;
};

/// Annotation columns over a fixed observation list, as the sampler consumes them.
class ColumnSource {
 public:
  virtual ~ColumnSource() = default;
  virtual std::size_t rows() const = 0;
  /// Makes every concept's column available; returns ids of concepts that
  /// could not be annotated (callers drop them).
  virtual std::vector<std::string> prefetch(std::span<const Concept> concepts) = 0;
  virtual const std::vector<double>& column(const Concept& c) = 0;
};

class AnnotatedColumns : public ColumnSource {
 public:
  AnnotatedColumns(AnnotationService& service, std::vector<Observation> observations);

  std::size_t rows() const override { return observations_.size(); }
  std::vector<std::string> prefetch(std::span<const Concept> concepts) override;
  const std::vector<double>& column(const Concept& c) override;

 private:
  AnnotationService& service_;
  std::vector<Observation> observations_;
  std::unordered_map<std::string, std::vector<double>> columns_;
};

/// Precomputed columns keyed by concept id (tests, enumeration testbeds).
class FixedColumns : public ColumnSource {
 public:
  FixedColumns(std::size_t rows, std::unordered_map<std::string, std::vector<double>> columns);

  std::size_t rows() const override { return rows_; }
  std::vector<std::string> prefetch(std::span<const Concept> concepts) override;
  const std::vector<double>& column(const Concept& c) override;

 private:
  std::size_t rows_;
  std::unordered_map<std::string, std::vector<double>> columns_;
};

std::string utc_timestamp();

}  // namespace ccbm
