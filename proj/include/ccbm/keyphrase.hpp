#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace ccbm {

/// Lowercase, punctuation stripped ('-' and '/' become spaces), whitespace
/// collapsed, truncated to the first two tokens. May return "".
std::string normalize_keyphrase(std::string_view raw);

/// Normalized, deduplicated phrases for one observation (synonyms and
/// generalizations are merged in as separate phrases).
struct KeyphraseBag {
  std::string observation_id;
  std::vector<std::string> phrases;  // sorted, unique

  /// Normalizes, drops empties, sorts and deduplicates.
  static KeyphraseBag from_raw(std::string observation_id, const std::vector<std::string>& raw);
  bool contains(const std::string& phrase) const;
};

struct RankedPhrase {
  std::string phrase;
  double coefficient = 0.0;
  int sign = 0;
  int label_class = 1;  // class the coefficient belongs to (1 for binary fits)
};

/// Keyphrases ordered by |coefficient| descending, ties by phrase.
struct KeyphraseSummary {
  std::vector<RankedPhrase> phrases;

  bool empty() const { return phrases.empty(); }
  /// Numbered list for the {top_keyphrases} prompt slot.
  std::string render() const;
};

}  // namespace ccbm
