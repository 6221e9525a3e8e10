#include "ccbm/llm_oracle.hpp"

#include <httplib.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>

#include "ccbm/errors.hpp"

namespace ccbm {

using json = nlohmann::json;

namespace {

const char* kKeyphrasePrompt = R"(Below is one record from a collection of {data_description}.

Record:
{note}

List short descriptors of this record: the characteristics, findings, circumstances and history it mentions. After each descriptor, also list synonyms and broader terms for it. Every descriptor, synonym and broader term must be at most two words long.

Reply with JSON only, in the form {"keyphrases": ["descriptor", "synonym", "broader term", ...]}.
)";

const char* kInitializePrompt = R"(We are building an interpretable classifier for {data_description}. It predicts {target} from {k} yes/no questions answered about each record.

A sparse model fitted on short descriptors extracted from the records found these descriptors most predictive, strongest first, with signed weights:
{top_keyphrases}

Write {k} distinct yes/no questions to use as the classifier's inputs. Work from the top of the list down. Each question must ask about one specific thing that can be answered from the record alone. Do not join unrelated items with "or", and do not ask questions whose answer is nearly always yes.

Reply with JSON only, in the form {"concepts": ["question 1", "question 2", ...]}.
)";

const char* kProposePrompt = R"(We are building an interpretable classifier for {data_description}. It predicts {target} from {k} yes/no questions answered about each record. These questions are fixed for now:
{existing_concepts}

One more question is needed. The current choice for it is:
{incumbent}

To see what the fixed questions miss, a sparse model was fitted on part of the data using the fixed questions plus short descriptors extracted from each record. These descriptors carry the most remaining signal, strongest first, with signed weights:
{top_keyphrases}

Go through the descriptors in order and suggest up to {m} candidate questions for the open slot. Each candidate must be a single yes/no question about one specific thing. Avoid questions that are nearly always yes, questions that join unrelated items, and questions that would almost always agree with one of the fixed questions.

For every candidate, and for the current choice, give your probability that it is the best question for the open slot given the evidence above.

Reply with JSON only, in the form {"candidates": [{"question": "...", "probability": 0.2}, ...], "incumbent_probability": 0.1}.
)";

const char* kAnnotatePrompt = R"(Read the record below and answer each question about it with 1 for yes or 0 for no. If the record does not settle a question, answer with your probability that the answer is yes.

Questions:
{questions}

Record:
{note}

Reply with JSON only, using the question numbers as keys, in the form {"answers": {"1": 0, "2": 1, ...}}.
)";

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

std::string numbered(const std::vector<std::string>& items) {
  if (items.empty()) return "(none)";
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    out += std::to_string(i + 1) + ". " + items[i];
    if (i + 1 < items.size()) out += "\n";
  }
  return out;
}

// Runs fn(i) for i in [0, n) on at most `cap` threads; rethrows the first failure.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t cap, Fn fn) {
  cap = std::max<std::size_t>(1, std::min(cap, n));
  if (cap <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> workers;
  for (std::size_t w = 0; w < cap; ++w) {
    workers.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= n) return;
        {
          std::lock_guard lock(error_mu);
          if (error) return;
        }
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mu);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : workers) t.join();
  if (error) std::rethrow_exception(error);
}

void collect_strings(const json& j, std::vector<std::string>& out) {
  if (j.is_string()) {
    out.push_back(j.get<std::string>());
  } else if (j.is_array() || j.is_object()) {
    for (const auto& v : j) collect_strings(v, out);
  }
}

std::optional<double> as_probability(const json& v) {
  if (v.is_number()) return v.get<double>();
  if (v.is_boolean()) return v.get<bool>() ? 1.0 : 0.0;
  if (v.is_string()) {
    std::string s = v.get<std::string>();
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    if (s == "yes" || s == "true") return 1.0;
    if (s == "no" || s == "false") return 0.0;
    try {
      std::size_t used = 0;
      const double d = std::stod(s, &used);
      if (used > 0) return d;
    } catch (const std::exception&) {
    }
  }
  return std::nullopt;
}

std::optional<std::string> as_question(const json& v) {
  std::string q;
  if (v.is_string()) {
    q = v.get<std::string>();
  } else if (v.is_object() && v.contains("question") && v["question"].is_string()) {
    q = v["question"].get<std::string>();
  } else {
    return std::nullopt;
  }
  if (normalize_question(q).empty()) return std::nullopt;
  return q;
}

}  // namespace

HttpChatTransport::HttpChatTransport(std::string endpoint, std::string api_key, int timeout_seconds)
    : api_key_(std::move(api_key)), timeout_seconds_(timeout_seconds) {
  const auto scheme_end = endpoint.find("://");
  if (scheme_end == std::string::npos) throw ConfigError("endpoint must be an http(s) URL: " + endpoint);
  const auto path_start = endpoint.find('/', scheme_end + 3);
  scheme_host_port_ = endpoint.substr(0, path_start);
  path_ = path_start == std::string::npos ? "/" : endpoint.substr(path_start);
  const std::string scheme = endpoint.substr(0, scheme_end);
  if (scheme != "http" && scheme != "https") throw ConfigError("unsupported endpoint scheme: " + scheme);
}

std::string HttpChatTransport::complete(const json& request) {
  httplib::Client client(scheme_host_port_);
  client.set_connection_timeout(timeout_seconds_, 0);
  client.set_read_timeout(timeout_seconds_, 0);
  client.set_write_timeout(timeout_seconds_, 0);
  httplib::Headers headers;
  if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);
  auto res = client.Post(path_, headers, request.dump(), "application/json");
  if (!res) throw TransportError("request failed: " + httplib::to_string(res.error()));
  if (res->status != 200) {
    throw TransportError("endpoint returned HTTP " + std::to_string(res->status) + ": " +
                         res->body.substr(0, 200));
  }
  try {
    const json body = json::parse(res->body);
    return body.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const json::exception& e) {
    throw TransportError(std::string("malformed chat-completions response: ") + e.what());
  }
}

PromptTemplates PromptTemplates::defaults() {
  return {kKeyphrasePrompt, kInitializePrompt, kProposePrompt, kAnnotatePrompt};
}

PromptTemplates PromptTemplates::load(const std::filesystem::path& dir) {
  PromptTemplates t = defaults();
  if (dir.empty()) return t;
  if (!std::filesystem::is_directory(dir)) throw ConfigError("template directory not found: " + dir.string());
  auto maybe = [&](const char* name, std::string& slot) {
    const auto p = dir / name;
    if (std::filesystem::exists(p)) slot = read_file(p);
  };
  maybe("keyphrases.txt", t.keyphrases);
  maybe("initialize.txt", t.initialize);
  maybe("propose.txt", t.propose);
  maybe("annotate.txt", t.annotate);
  return t;
}

std::string render_template(const std::string& tmpl, const std::map<std::string, std::string>& vars) {
  std::string out;
  out.reserve(tmpl.size());
  std::size_t i = 0;
  while (i < tmpl.size()) {
    if (tmpl[i] == '{') {
      const auto close = tmpl.find('}', i + 1);
      if (close != std::string::npos) {
        const std::string name = tmpl.substr(i + 1, close - i - 1);
        if (auto it = vars.find(name); it != vars.end()) {
          out += it->second;
          i = close + 1;
          continue;
        }
      }
    }
    out.push_back(tmpl[i]);
    ++i;
  }
  return out;
}

json extract_json_object(const std::string& content) {
  try {
    json j = json::parse(content);
    if (j.is_object()) return j;
  } catch (const json::exception&) {
  }
  const auto open = content.find('{');
  const auto close = content.rfind('}');
  if (open == std::string::npos || close == std::string::npos || close < open) {
    throw OracleParseError("reply contains no JSON object");
  }
  try {
    json j = json::parse(content.substr(open, close - open + 1));
    if (!j.is_object()) throw OracleParseError("reply JSON is not an object");
    return j;
  } catch (const json::exception& e) {
    throw OracleParseError(std::string("reply is not valid JSON: ") + e.what());
  }
}

json LlmConfig::to_json() const {
  return {{"endpoint", endpoint},
          {"model", model},
          {"api_key_env", api_key_env},
          {"annotation_temperature", annotation_temperature},
          {"proposal_temperature", proposal_temperature},
          {"max_tokens", max_tokens},
          {"retries", retries},
          {"backoff_seconds", backoff_seconds},
          {"max_in_flight", max_in_flight},
          {"timeout_seconds", timeout_seconds},
          {"template_dir", template_dir},
          {"task_description", task_description},
          {"data_description", data_description}};
}

LlmConfig LlmConfig::from_json(const json& j) {
  LlmConfig c;
  try {
    c.endpoint = j.value("endpoint", c.endpoint);
    c.model = j.value("model", c.model);
    c.api_key_env = j.value("api_key_env", c.api_key_env);
    c.annotation_temperature = j.value("annotation_temperature", c.annotation_temperature);
    c.proposal_temperature = j.value("proposal_temperature", c.proposal_temperature);
    c.max_tokens = j.value("max_tokens", c.max_tokens);
    c.retries = j.value("retries", c.retries);
    c.backoff_seconds = j.value("backoff_seconds", c.backoff_seconds);
    c.max_in_flight = j.value("max_in_flight", c.max_in_flight);
    c.timeout_seconds = j.value("timeout_seconds", c.timeout_seconds);
    c.template_dir = j.value("template_dir", c.template_dir);
    c.task_description = j.value("task_description", c.task_description);
    c.data_description = j.value("data_description", c.data_description);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad llm config: ") + e.what());
  }
  if (c.retries < 0) throw ConfigError("retries must be nonnegative");
  if (c.max_in_flight < 1) throw ConfigError("max_in_flight must be at least 1");
  return c;
}

LlmOracle::LlmOracle(LlmConfig cfg, std::shared_ptr<ChatTransport> transport, PromptTemplates templates,
                     Sleeper sleeper)
    : cfg_(std::move(cfg)), transport_(std::move(transport)), templates_(std::move(templates)),
      sleeper_(std::move(sleeper)) {
  if (!transport_) throw ContractViolation("LLM oracle needs a transport");
  if (!sleeper_) {
    sleeper_ = [](double s) { std::this_thread::sleep_for(std::chrono::duration<double>(s)); };
  }
}

std::string LlmOracle::target_phrase() const {
  return cfg_.task_description.empty() ? "an outcome Y" : cfg_.task_description;
}

json LlmOracle::call(const std::string& prompt, double temperature,
                     const std::function<bool(const json&)>& accept) {
  const json request = {{"model", cfg_.model},
                        {"messages", json::array({{{"role", "user"}, {"content", prompt}}})},
                        {"temperature", temperature},
                        {"max_tokens", cfg_.max_tokens},
                        {"response_format", {{"type", "json_object"}}}};
  bool last_was_transport = false;
  std::string last_error;
  for (int attempt = 0; attempt <= cfg_.retries; ++attempt) {
    if (attempt > 0) {
      const auto& b = cfg_.backoff_seconds;
      const double delay = b.empty() ? 0.0 : b[std::min<std::size_t>(static_cast<std::size_t>(attempt - 1), b.size() - 1)];
      sleeper_(delay);
    }
    ++requests_;
    std::string content;
    try {
      content = transport_->complete(request);
    } catch (const TransportError& e) {
      last_was_transport = true;
      last_error = e.what();
      continue;
    }
    last_was_transport = false;
    try {
      json parsed = extract_json_object(content);
      if (accept(parsed)) return parsed;
      last_error = "reply did not have the expected fields";
    } catch (const OracleParseError& e) {
      last_error = e.what();
    }
    ++parse_failures_;
  }
  const std::string msg = "LLM call failed after " + std::to_string(cfg_.retries + 1) + " attempts: " + last_error;
  if (last_was_transport) throw OracleUnavailable(msg);
  throw OracleParseError(msg);
}

std::string LlmOracle::keyphrase_prompt(const Observation& obs) const {
  return render_template(templates_.keyphrases,
                         {{"note", obs.text}, {"data_description", cfg_.data_description}, {"target", target_phrase()}});
}

std::string LlmOracle::initialize_prompt(const KeyphraseSummary& summary, std::size_t k) const {
  return render_template(templates_.initialize, {{"k", std::to_string(k)},
                                                 {"top_keyphrases", summary.render()},
                                                 {"data_description", cfg_.data_description},
                                                 {"target", target_phrase()}});
}

std::string LlmOracle::propose_prompt(const ProposalRequest& request) const {
  std::vector<std::string> existing;
  for (const auto& c : request.context) existing.push_back(c.question());
  const std::string top = request.summary ? request.summary->render() : KeyphraseSummary{}.render();
  return render_template(templates_.propose, {{"k", std::to_string(request.k)},
                                              {"m", std::to_string(request.m)},
                                              {"existing_concepts", numbered(existing)},
                                              {"incumbent", request.incumbent.question()},
                                              {"top_keyphrases", top},
                                              {"data_description", cfg_.data_description},
                                              {"target", target_phrase()}});
}

std::string LlmOracle::annotate_prompt(const Observation& obs, std::span<const Concept> concepts) const {
  std::vector<std::string> qs;
  for (const auto& c : concepts) qs.push_back(c.question());
  return render_template(templates_.annotate, {{"questions", numbered(qs)},
                                               {"note", obs.text},
                                               {"data_description", cfg_.data_description}});
}

std::vector<KeyphraseBag> LlmOracle::extract_keyphrases(std::span<const Observation> observations) {
  std::vector<KeyphraseBag> out(observations.size());
  parallel_for(observations.size(), cfg_.max_in_flight, [&](std::size_t i) {
    const Observation& obs = observations[i];
    if (obs.text.find_first_not_of(" \t\r\n") == std::string::npos) {
      out[i] = KeyphraseBag{obs.id, {}};
      return;
    }
    std::vector<std::string> raw;
    try {
      const json reply = call(keyphrase_prompt(obs), cfg_.annotation_temperature, [](const json& j) {
        return j.contains("keyphrases") || !j.empty();
      });
      collect_strings(reply.contains("keyphrases") ? reply["keyphrases"] : reply, raw);
    } catch (const OracleParseError&) {
      // unparseable after retries: empty bag, counted in parse_failures
    }
    out[i] = KeyphraseBag::from_raw(obs.id, raw);
  });
  return out;
}

ConceptSet LlmOracle::initialize_concepts(const KeyphraseSummary& summary, std::size_t k) {
  if (summary.empty()) throw ContractViolation("initialization needs a non-empty keyphrase summary");
  if (k == 0) throw ContractViolation("k must be at least 1");
  std::vector<Concept> chosen;
  auto parse = [&](const json& j) {
    std::vector<Concept> found;
    if (!j.contains("concepts") || !j["concepts"].is_array()) return found;
    for (const auto& v : j["concepts"]) {
      if (auto q = as_question(v)) {
        Concept c(*q);
        if (std::find(found.begin(), found.end(), c) == found.end()) found.push_back(std::move(c));
      }
    }
    return found;
  };
  try {
    const json reply = call(initialize_prompt(summary, k), cfg_.proposal_temperature,
                            [&](const json& j) { return parse(j).size() >= k; });
    chosen = parse(reply);
  } catch (const OracleParseError& e) {
    throw InitializationError(std::string("could not obtain ") + std::to_string(k) +
                              " distinct concepts: " + e.what());
  }
  chosen.resize(k);
  return ConceptSet(std::move(chosen));
}

OracleProposal LlmOracle::propose(const ProposalRequest& request) {
  if (request.m == 0) throw ContractViolation("proposal size m must be at least 1");
  struct Parsed {
    std::vector<Concept> candidates;
    std::vector<std::optional<double>> weights;
    std::optional<double> incumbent;
  };
  auto parse = [&](const json& j) {
    Parsed p;
    if (!j.contains("candidates") || !j["candidates"].is_array()) return p;
    for (const auto& v : j["candidates"]) {
      auto q = as_question(v);
      if (!q) continue;
      Concept c(*q);
      if (std::find(request.context.begin(), request.context.end(), c) != request.context.end()) continue;
      if (std::find(p.candidates.begin(), p.candidates.end(), c) != p.candidates.end()) continue;
      std::optional<double> w;
      if (v.is_object() && v.contains("probability")) w = as_probability(v["probability"]);
      p.candidates.push_back(std::move(c));
      p.weights.push_back(w);
      if (p.candidates.size() == request.m) break;
    }
    if (j.contains("incumbent_probability")) p.incumbent = as_probability(j["incumbent_probability"]);
    return p;
  };
  const json reply = call(propose_prompt(request), cfg_.proposal_temperature,
                          [&](const json& j) { return !parse(j).candidates.empty(); });
  Parsed p = parse(reply);

  OracleProposal out;
  out.candidates = p.candidates;
  const bool all_weights = std::all_of(p.weights.begin(), p.weights.end(), [](const auto& w) {
    return w.has_value() && std::isfinite(*w) && *w >= 0.0;
  });
  std::vector<double> w(p.candidates.size(), 1.0);
  if (all_weights) {
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = *p.weights[i];
  } else {
    out.flags.emplace_back("candidate weights missing; uniform weights imputed");
  }
  double total = 0.0;
  for (double v : w) total += v;
  if (total <= 0.0) {
    std::fill(w.begin(), w.end(), 1.0);
    total = static_cast<double>(w.size());
    out.flags.emplace_back("candidate weights all zero; uniform weights imputed");
  }
  const double eps = 1e-3 * total;
  double q_current;
  if (p.incumbent && std::isfinite(*p.incumbent) && *p.incumbent >= 0.0) {
    q_current = *p.incumbent;
  } else {
    q_current = eps;
    out.flags.emplace_back("incumbent probability missing; floored");
  }
  // A candidate restating the incumbent shares its weight.
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (p.candidates[i] == request.incumbent) q_current = std::max(q_current, w[i]);
  }
  for (double& v : w) {
    if (v <= 0.0) {
      v = eps;
      out.flags.emplace_back("zero candidate weight floored");
    }
  }
  if (q_current <= 0.0) q_current = eps;
  double z = q_current;
  for (double v : w) z += v;
  for (double& v : w) v /= z;
  out.q_weights = std::move(w);
  out.q_current = q_current / z;
  return out;
}

std::vector<AnnotationRecord> LlmOracle::annotate(std::span<const Observation> observations,
                                                  std::span<const Concept> concepts) {
  const std::size_t kc = concepts.size();
  std::vector<AnnotationRecord> out(observations.size() * kc);
  parallel_for(observations.size(), cfg_.max_in_flight, [&](std::size_t i) {
    const Observation& obs = observations[i];
    std::vector<std::optional<double>> values(kc);
    auto parse = [&](const json& j, std::vector<std::optional<double>>& vals) {
      if (!j.contains("answers")) return false;
      const json& a = j["answers"];
      for (std::size_t b = 0; b < kc; ++b) {
        const json* v = nullptr;
        if (a.is_object()) {
          const std::string key = std::to_string(b + 1);
          if (a.contains(key)) v = &a[key];
          else if (a.contains(concepts[b].question())) v = &a[concepts[b].question()];
        } else if (a.is_array() && b < a.size()) {
          v = &a[b];
        }
        if (v) vals[b] = as_probability(*v);
      }
      return true;
    };
    try {
      const json reply = call(annotate_prompt(obs, concepts), cfg_.annotation_temperature, [&](const json& j) {
        std::vector<std::optional<double>> probe(kc);
        return parse(j, probe);
      });
      parse(reply, values);
    } catch (const OracleParseError&) {
      // every value for this observation is imputed below
    }
    for (std::size_t b = 0; b < kc; ++b) {
      AnnotationRecord& r = out[i * kc + b];
      r.observation_id = obs.id;
      r.concept_id = concepts[b].id();
      r.source = AnnotationSource::kLlm;
      if (values[b] && std::isfinite(*values[b])) {
        r.value = *values[b];  // clamped by the annotation service
      } else {
        r.value = 0.5;
        r.imputed = true;
      }
    }
  });
  return out;
}

json LlmOracle::describe() const {
  json cfg = cfg_.to_json();
  return {{"kind", "llm"}, {"config", cfg}};
}

}  // namespace ccbm
