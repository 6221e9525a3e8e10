#include "ccbm/concept.hpp"

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <unordered_set>

#include "ccbm/errors.hpp"

namespace ccbm {

std::string normalize_question(std::string_view question) {
  std::string out;
  out.reserve(question.size());
  bool pending_space = false;
  for (unsigned char ch : question) {
    if (std::isspace(ch)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) {
      out.push_back(' ');
      pending_space = false;
    }
    out.push_back(static_cast<char>(std::tolower(ch)));
  }
  return out;
}

std::string concept_id_for(std::string_view question) {
  const std::string norm = normalize_question(question);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : norm) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

Concept::Concept(std::string question)
    : question_(std::move(question)), id_(concept_id_for(question_)) {
  if (normalize_question(question_).empty()) {
    throw ContractViolation("concept question must not be empty");
  }
}

ConceptSet::ConceptSet(std::vector<Concept> concepts) : concepts_(std::move(concepts)) {
  std::unordered_set<std::string> seen;
  for (const auto& c : concepts_) {
    if (!seen.insert(c.id()).second) {
      throw ContractViolation("duplicate concept in set: " + c.question());
    }
  }
}

bool ConceptSet::contains(const Concept& c) const {
  return std::find(concepts_.begin(), concepts_.end(), c) != concepts_.end();
}

std::vector<Concept> ConceptSet::without(std::size_t slot) const {
  if (slot >= concepts_.size()) throw ContractViolation("slot out of range");
  std::vector<Concept> rest;
  rest.reserve(concepts_.size() - 1);
  for (std::size_t j = 0; j < concepts_.size(); ++j) {
    if (j != slot) rest.push_back(concepts_[j]);
  }
  return rest;
}

ConceptSet ConceptSet::with_replaced(std::size_t slot, const Concept& c) const {
  if (slot >= concepts_.size()) throw ContractViolation("slot out of range");
  std::vector<Concept> next = concepts_;
  next[slot] = c;
  return ConceptSet(std::move(next));
}

std::string ConceptSet::support_key() const {
  std::vector<std::string> ids;
  ids.reserve(concepts_.size());
  for (const auto& c : concepts_) ids.push_back(c.id());
  std::sort(ids.begin(), ids.end());
  std::string key;
  for (const auto& id : ids) {
    if (!key.empty()) key.push_back(',');
    key += id;
  }
  return key;
}

}  // namespace ccbm
