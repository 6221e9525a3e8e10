#pragma once

// Concept oracle backed by a chat-completions endpoint. Every call asks for a
// JSON object; transport errors and unparseable replies are retried with
// backoff, and what still fails falls back as documented per operation.

#include <atomic>
#include <filesystem>
#include <functional>
#include <json.hpp>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "ccbm/oracle.hpp"

namespace ccbm {

/// Transport-level failure (connection, timeout, non-200 status).
class TransportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ChatTransport {
 public:
  virtual ~ChatTransport() = default;
  /// Sends one chat-completions request body; returns the assistant message content.
  /// Must be safe to call from several threads at once.
  virtual std::string complete(const nlohmann::json& request) = 0;
};

/// POSTs to an http(s) URL with a bearer token.
class HttpChatTransport : public ChatTransport {
 public:
  HttpChatTransport(std::string endpoint, std::string api_key, int timeout_seconds = 120);
  std::string complete(const nlohmann::json& request) override;

 private:
  std::string scheme_host_port_;
  std::string path_;
  std::string api_key_;
  int timeout_seconds_;
};

struct PromptTemplates {
  std::string keyphrases;
  std::string initialize;
  std::string propose;
  std::string annotate;

  static PromptTemplates defaults();
  /// Reads keyphrases.txt, initialize.txt, propose.txt, annotate.txt from `dir`;
  /// files that are absent keep their default.
  static PromptTemplates load(const std::filesystem::path& dir);
};

/// Replaces each {name} with vars[name]; unknown placeholders are left as-is.
std::string render_template(const std::string& tmpl, const std::map<std::string, std::string>& vars);

/// Parses the first JSON object in `content`, tolerating code fences and prose around it.
nlohmann::json extract_json_object(const std::string& content);

struct LlmConfig {
  std::string endpoint = "https://api.openai.com/v1/chat/completions";
  std::string model = "gpt-4o-mini";
  std::string api_key_env = "CCBM_API_KEY";
  double annotation_temperature = 0.0;
  double proposal_temperature = 1.0;
  int max_tokens = 2048;
  int retries = 3;  // after the first attempt
  std::vector<double> backoff_seconds = {1.0, 4.0, 16.0};
  std::size_t max_in_flight = 4;
  int timeout_seconds = 120;
  std::string template_dir;      // empty: built-in templates
  std::string task_description;  // empty: the target is only called "Y"
  std::string data_description = "clinical notes";

  nlohmann::json to_json() const;
  static LlmConfig from_json(const nlohmann::json& j);
};

class LlmOracle : public ConceptOracle {
 public:
  using Sleeper = std::function<void(double seconds)>;

  LlmOracle(LlmConfig cfg, std::shared_ptr<ChatTransport> transport, PromptTemplates templates,
            Sleeper sleeper = {});

  std::vector<KeyphraseBag> extract_keyphrases(std::span<const Observation> observations) override;
  ConceptSet initialize_concepts(const KeyphraseSummary& summary, std::size_t k) override;
  OracleProposal propose(const ProposalRequest& request) override;
  std::vector<AnnotationRecord> annotate(std::span<const Observation> observations,
                                         std::span<const Concept> concepts) override;
  bool uses_keyphrase_summary() const override { return true; }
  nlohmann::json describe() const override;

  std::size_t requests() const { return requests_.load(); }
  std::size_t parse_failures() const { return parse_failures_.load(); }

  /// Prompt builders, exposed for tests.
  std::string keyphrase_prompt(const Observation& obs) const;
  std::string initialize_prompt(const KeyphraseSummary& summary, std::size_t k) const;
  std::string propose_prompt(const ProposalRequest& request) const;
  std::string annotate_prompt(const Observation& obs, std::span<const Concept> concepts) const;

 private:
  // Sends `prompt` until `accept` returns true on the parsed reply. Throws
  // OracleUnavailable if the last failure was transport-level, else OracleParseError.
  nlohmann::json call(const std::string& prompt, double temperature,
                      const std::function<bool(const nlohmann::json&)>& accept);
  std::string target_phrase() const;

  LlmConfig cfg_;
  std::shared_ptr<ChatTransport> transport_;
  PromptTemplates templates_;
  Sleeper sleeper_;
  std::atomic<std::size_t> requests_{0};
  std::atomic<std::size_t> parse_failures_{0};
};

}  // namespace ccbm
