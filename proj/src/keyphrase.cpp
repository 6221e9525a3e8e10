#include "ccbm/keyphrase.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>

namespace ccbm {

std::string normalize_keyphrase(std::string_view raw) {
  std::vector<std::string> tokens;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) tokens.push_back(std::move(current));
    current.clear();
  };
  for (unsigned char ch : raw) {
    if (std::isalnum(ch)) {
      current.push_back(static_cast<char>(std::tolower(ch)));
    } else if (std::isspace(ch) || ch == '-' || ch == '/') {
      flush();
    } else if (ch >= 0x80) {
      current.push_back(static_cast<char>(ch));  // keep non-ASCII bytes verbatim
    }
  }
  flush();
  if (tokens.size() > 2) tokens.resize(2);
  std::string out;
  for (const auto& t : tokens) {
    if (!out.empty()) out.push_back(' ');
    out += t;
  }
  return out;
}

KeyphraseBag KeyphraseBag::from_raw(std::string observation_id,
                                    const std::vector<std::string>& raw) {
  KeyphraseBag bag;
  bag.observation_id = std::move(observation_id);
  for (const auto& r : raw) {
    auto p = normalize_keyphrase(r);
    if (!p.empty()) bag.phrases.push_back(std::move(p));
  }
  std::sort(bag.phrases.begin(), bag.phrases.end());
  bag.phrases.erase(std::unique(bag.phrases.begin(), bag.phrases.end()), bag.phrases.end());
  return bag;
}

bool KeyphraseBag::contains(const std::string& phrase) const {
  return std::binary_search(phrases.begin(), phrases.end(), phrase);
}

std::string KeyphraseSummary::render() const {
  if (phrases.empty()) {
    return "(no residual signal: no keyphrase adds predictive value beyond the existing concepts)";
  }
  std::string out;
  char buf[64];
  for (std::size_t i = 0; i < phrases.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%+.3f", phrases[i].coefficient);
    out += std::to_string(i + 1) + ". " + phrases[i].phrase + " (" + buf + ")\n";
  }
  return out;
}

}  // namespace ccbm
