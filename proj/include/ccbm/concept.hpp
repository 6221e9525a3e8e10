#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace ccbm {

/// Lowercases and collapses runs of whitespace; leading/trailing space dropped.
std::string normalize_question(std::string_view question);

/// 64-bit FNV-1a of the normalized question, as 16 lowercase hex digits.
std::string concept_id_for(std::string_view question);

/// A yes/no question defining a feature extractor. Identity is the id hash,
/// so rephrasings that normalize identically are the same concept.
class Concept {
 public:
  Concept() = default;
  explicit Concept(std::string question);

  const std::string& question() const { return question_; }
  const std::string& id() const { return id_; }

  friend bool operator==(const Concept& a, const Concept& b) {
    return a.id_ == b.id_;
  }

 private:
  std::string question_;
  std::string id_;
};

/// Ordered support (c_1, ..., c_K) with distinct ids.
class ConceptSet {
 public:
  ConceptSet() = default;
  explicit ConceptSet(std::vector<Concept> concepts);

  std::size_t size() const { return concepts_.size(); }
  bool empty() const { return concepts_.empty(); }
  const Concept& operator[](std::size_t slot) const { return concepts_.at(slot); }
  std::span<const Concept> concepts() const { return concepts_; }

  bool contains(const Concept& c) const;
  /// Concepts other than `slot`, in order.
  std::vector<Concept> without(std::size_t slot) const;
  /// Copy with `slot` replaced; throws ContractViolation if that creates a duplicate.
  ConceptSet with_replaced(std::size_t slot, const Concept& c) const;
  /// Order-independent key: sorted ids joined by ','.
  std::string support_key() const;

  friend bool operator==(const ConceptSet& a, const ConceptSet& b) {
    return a.concepts_ == b.concepts_;
  }

 private:
  std::vector<Concept> concepts_;
};

}  // namespace ccbm
