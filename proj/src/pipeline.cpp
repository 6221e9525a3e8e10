#include "ccbm/pipeline.hpp"

#include <fcntl.h>
#include <signal.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstdlib>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "ccbm/errors.hpp"

namespace ccbm {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

fs::path resolve(const fs::path& p, const fs::path& base) {
  if (p.empty() || p.is_absolute() || base.empty()) return p;
  return base / p;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + p.string());
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

json read_json(const fs::path& p) {
  try {
    return json::parse(read_text(p));
  } catch (const json::exception& e) {
    throw ConfigError("bad JSON in " + p.string() + ": " + e.what());
  }
}

json keyphrase_config_to_json(const KeyphraseModelConfig& c) {
  return {{"lambda_grid", c.lambda_grid}, {"folds", c.folds},         {"fold_seed", c.fold_seed},
          {"concept_ridge", c.concept_ridge}, {"min_df", c.min_df},   {"max_vocab", c.max_vocab},
          {"top_n", c.top_n},             {"force_multinomial", c.force_multinomial}};
}

KeyphraseModelConfig keyphrase_config_from_json(const json& j) {
  KeyphraseModelConfig c;
  c.lambda_grid = j.value("lambda_grid", c.lambda_grid);
  c.folds = j.value("folds", c.folds);
  c.fold_seed = j.value("fold_seed", c.fold_seed);
  c.concept_ridge = j.value("concept_ridge", c.concept_ridge);
  c.min_df = j.value("min_df", c.min_df);
  c.max_vocab = j.value("max_vocab", c.max_vocab);
  c.top_n = j.value("top_n", c.top_n);
  c.force_multinomial = j.value("force_multinomial", c.force_multinomial);
  if (c.lambda_grid.empty() || c.folds < 2) throw ConfigError("keyphrase model needs a lambda grid and >= 2 folds");
  return c;
}

json counters_to_json(const OracleCounters& c) {
  return {{"annotation_values", c.annotation_values},
          {"annotation_queries", c.annotation_queries},
          {"annotation_cache_hits", c.annotation_cache_hits},
          {"imputed", c.imputed},
          {"clamped", c.clamped},
          {"keyphrase_queries", c.keyphrase_queries},
          {"keyphrase_cache_hits", c.keyphrase_cache_hits}};
}

OracleCounters counters_from_json(const json& j) {
  OracleCounters c;
  c.annotation_values = j.value("annotation_values", std::size_t{0});
  c.annotation_queries = j.value("annotation_queries", std::size_t{0});
  c.annotation_cache_hits = j.value("annotation_cache_hits", std::size_t{0});
  c.imputed = j.value("imputed", std::size_t{0});
  c.clamped = j.value("clamped", std::size_t{0});
  c.keyphrase_queries = j.value("keyphrase_queries", std::size_t{0});
  c.keyphrase_cache_hits = j.value("keyphrase_cache_hits", std::size_t{0});
  return c;
}

OracleCounters add(const OracleCounters& a, const OracleCounters& b) {
  return {a.annotation_values + b.annotation_values,         a.annotation_queries + b.annotation_queries,
          a.annotation_cache_hits + b.annotation_cache_hits, a.imputed + b.imputed,
          a.clamped + b.clamped,                             a.keyphrase_queries + b.keyphrase_queries,
          a.keyphrase_cache_hits + b.keyphrase_cache_hits};
}

OracleCounters subtract(const OracleCounters& a, const OracleCounters& b) {
  return {a.annotation_values - b.annotation_values,         a.annotation_queries - b.annotation_queries,
          a.annotation_cache_hits - b.annotation_cache_hits, a.imputed - b.imputed,
          a.clamped - b.clamped,                             a.keyphrase_queries - b.keyphrase_queries,
          a.keyphrase_cache_hits - b.keyphrase_cache_hits};
}

// Exclusive ownership of a run directory. A lock left by a dead process is taken over.
class RunLock {
 public:
  explicit RunLock(fs::path path) : path_(std::move(path)) {
    for (int attempt = 0; attempt < 2; ++attempt) {
      const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
      if (fd >= 0) {
        const std::string pid = std::to_string(::getpid()) + "\n";
        if (::write(fd, pid.data(), pid.size()) < 0) {
          // the lock still holds without the pid
        }
        ::close(fd);
        return;
      }
      if (errno != EEXIST) throw ConfigError("cannot create lock file " + path_.string());
      long owner = 0;
      std::ifstream(path_) >> owner;
      if (owner > 0 && (::kill(static_cast<pid_t>(owner), 0) == 0 || errno != ESRCH)) {
        throw ConfigError("run directory is in use (lock held by pid " + std::to_string(owner) + ")");
      }
      fs::remove(path_);
    }
    throw ConfigError("could not acquire " + path_.string());
  }
  ~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  fs::path path_;
};

std::vector<int> int_labels(const Eigen::VectorXd& y) {
  std::vector<int> out(static_cast<std::size_t>(y.size()));
  for (Eigen::Index i = 0; i < y.size(); ++i) out[static_cast<std::size_t>(i)] = static_cast<int>(y[i]);
  return out;
}

// Everything a run directory needs at hand: config, data, oracle, caches.
struct RunContext {
  RunConfig cfg;
  fs::path run_dir;
  Dataset train;
  std::unique_ptr<ConceptOracle> oracle;
  std::unique_ptr<AnnotationCache> annotations;
  std::unique_ptr<KeyphraseCache> keyphrases;
  std::unique_ptr<AnnotationService> service;

  RunContext(RunConfig c, const RunOptions& opts) : cfg(std::move(c)), run_dir(cfg.output_dir) {
    train = Dataset::load_jsonl(cfg.dataset);
    oracle = make_oracle(cfg, train.observations(), opts);
    const fs::path cache = cfg.cache_dir.empty() ? run_dir / "cache" : cfg.cache_dir;
    fs::create_directories(cache);
    annotations = std::make_unique<AnnotationCache>(cache / "annotations.jsonl");
    keyphrases = std::make_unique<KeyphraseCache>(cache / "keyphrases.jsonl");
    service = std::make_unique<AnnotationService>(*oracle, *annotations, *keyphrases);
  }
};

RunConfig load_snapshot(const fs::path& run_dir) {
  const fs::path snap = run_dir / "config.snapshot";
  if (!fs::exists(snap)) throw ConfigError("not a run directory (no config.snapshot): " + run_dir.string());
  RunConfig cfg = RunConfig::from_json(read_json(snap));
  cfg.output_dir = run_dir;
  return cfg;
}

std::vector<PosteriorSample> load_samples(const fs::path& run_dir) {
  std::ifstream in(run_dir / "samples.jsonl");
  if (!in) throw ConfigError("run has no samples.jsonl: " + run_dir.string());
  std::vector<PosteriorSample> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(sample_from_json(json::parse(line)));
  }
  if (out.empty()) throw ConfigError("samples.jsonl is empty");
  return out;
}

std::vector<Concept> load_truth(const fs::path& path) {
  const json j = read_json(path);
  std::vector<Concept> out;
  for (const auto& q : j.at("concepts")) out.emplace_back(q.get<std::string>());
  return out;
}

std::vector<PredictionRow> predict_with(RunContext& ctx, const std::vector<PosteriorSample>& samples,
                                        const std::vector<Observation>& observations) {
  // distinct concepts across samples, first-seen order
  std::vector<Concept> concepts;
  std::unordered_map<std::string, std::size_t> col_of;
  for (const auto& s : samples) {
    for (const auto& c : s.concept_set.concepts()) {
      if (col_of.emplace(c.id(), concepts.size()).second) concepts.push_back(c);
    }
  }
  std::vector<bool> fully;
  std::vector<std::vector<bool>> imputed;
  const auto cols = ctx.service->annotate(observations, concepts, fully, imputed);

  // group samples by ordered concept set; identical sets share a full-data fit
  struct Group {
    const PosteriorSample* sample;
    std::size_t count = 0;
  };
  std::vector<Group> groups;
  std::unordered_map<std::string, std::size_t> group_of;
  for (const auto& s : samples) {
    std::string key;
    for (const auto& c : s.concept_set.concepts()) key += c.id() + ",";
    auto [it, inserted] = group_of.emplace(key, groups.size());
    if (inserted) groups.push_back({&s, 0});
    ++groups[it->second].count;
  }

  std::vector<PredictionRow> rows;
  for (std::size_t i = 0; i < observations.size(); ++i) {
    PredictionRow row;
    row.id = observations[i].id;
    row.label = observations[i].label;
    bool flagged = false;
    for (std::size_t j = 0; j < concepts.size(); ++j) flagged = flagged || imputed[j][i];
    json breakdown = json::array();
    if (!flagged) {
      std::vector<PosteriorSample> reps;
      std::vector<Eigen::VectorXd> phis;
      double total = 0.0;
      for (const auto& g : groups) {
        const auto& cs = g.sample->concept_set;
        Eigen::VectorXd phi(static_cast<Eigen::Index>(cs.size()) + 1);
        json values = json::array();
        for (std::size_t a = 0; a < cs.size(); ++a) {
          const double v = cols[col_of.at(cs[a].id())][i];
          phi[static_cast<Eigen::Index>(a)] = v;
          values.push_back({{"question", cs[a].question()}, {"value", v}});
        }
        phi[static_cast<Eigen::Index>(cs.size())] = 1.0;
        const double p = sigmoid_predict(g.sample->theta, phi);
        total += p * static_cast<double>(g.count);
        breakdown.push_back({{"concepts", values},
                             {"probability", p},
                             {"weight", static_cast<double>(g.count) / static_cast<double>(samples.size())}});
      }
      row.probability = total / static_cast<double>(samples.size());
    }
    row.breakdown = flagged ? json{{"flag", "annotation failed; row not scored"}} : breakdown;
    rows.push_back(std::move(row));
  }
  return rows;
}

json evaluate_predictions(const std::vector<PredictionRow>& rows) {
  std::vector<double> scores;
  std::vector<int> labels;
  std::size_t unscored = 0;
  double entropy = 0.0;
  for (const auto& r : rows) {
    if (!r.probability) {
      ++unscored;
      continue;
    }
    if (!r.label) continue;
    scores.push_back(*r.probability);
    labels.push_back(*r.label);
    const double p = std::clamp(*r.probability, 0.0, 1.0);
    const double probs[] = {p, 1.0 - p};
    entropy += predictive_entropy(probs);
  }
  json out = {{"n_scored", scores.size()}, {"n_unscored", unscored}};
  if (scores.empty()) return out;
  out["brier"] = brier(scores, labels);
  out["accuracy"] = accuracy(scores, labels);
  out["mean_predictive_entropy"] = entropy / static_cast<double>(scores.size());
  try {
    out["auc"] = auc(scores, labels);
  } catch (const UndefinedMetricError& e) {
    out["auc"] = nullptr;
    out["auc_error"] = e.what();
  }
  return out;
}

json write_reports(RunContext& ctx, const std::vector<PosteriorSample>& samples, const fs::path& test,
                   const fs::path& truth) {
  const fs::path reports = ctx.run_dir / "reports";
  fs::create_directories(reports);
  json summary;

  std::vector<Observation> panel = ctx.train.observations();
  std::optional<Dataset> test_data;
  if (!test.empty()) {
    test_data = Dataset::load_jsonl(test);
    panel = test_data->observations();
  }
  std::vector<ConceptSet> sets;
  for (const auto& s : samples) sets.push_back(s.concept_set);
  std::vector<Concept> truth_concepts;
  if (!truth.empty()) truth_concepts = load_truth(truth);

  ConceptMatchRule rule;
  rule.threshold = ctx.cfg.match_threshold;
  PanelLookup lookup = [&](const Concept& c) {
    const Concept one[] = {c};
    return ctx.service->annotate(panel, one).front();
  };
  const RecoveryReport rec = recovery_report(sets, truth_concepts, rule, lookup);
  write_atomic(reports / "concept_frequencies.csv", rec.frequencies_csv());
  if (!truth.empty()) {
    json r = rec.to_json();
    r["panel"] = test.empty() ? "training" : "test";
    r["panel_size"] = panel.size();
    write_atomic(reports / "recovery.json", r.dump(2) + "\n");
    summary["recovery"] = {{"concept_precision", rec.concept_precision}, {"concept_recall", rec.concept_recall}};
  }
  if (test_data) {
    const auto rows = predict_with(ctx, samples, test_data->observations());
    json metrics = evaluate_predictions(rows);
    write_atomic(reports / "eval.json", metrics.dump(2) + "\n");
    summary["test_metrics"] = metrics;
  }
  return summary;
}

json checkpoint_json(const RunConfig& cfg, const ChainTrace* trace, const json& init_info,
                     const OracleCounters& counters) {
  return {{"version", kSoftwareVersion},
          {"sampler", cfg.sampler.to_json()},
          {"initialization", init_info},
          {"counters", counters_to_json(counters)},
          {"trace", trace ? trace->to_json() : json(nullptr)}};
}

}  // namespace

void write_atomic(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write " + tmp.string());
    out << text;
    out.flush();
    if (!out) throw ConfigError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

RunConfig RunConfig::from_json(const json& j, const fs::path& base) {
  RunConfig c;
  try {
    if (!j.contains("dataset")) throw ConfigError("config needs \"dataset\"");
    if (!j.contains("output_dir")) throw ConfigError("config needs \"output_dir\"");
    c.dataset = resolve(j.at("dataset").get<std::string>(), base);
    c.output_dir = resolve(j.at("output_dir").get<std::string>(), base);
    c.test_dataset = resolve(j.value("test_dataset", std::string{}), base);
    c.truth = resolve(j.value("truth", std::string{}), base);
    c.cache_dir = resolve(j.value("cache_dir", std::string{}), base);

    if (j.contains("sampler")) c.sampler = SamplerConfig::from_json(j.at("sampler"));
    if (j.contains("seed")) c.sampler.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("model")) {
      const auto& m = j.at("model");
      if (m.contains("gamma")) c.sampler.gamma = m.at("gamma").get<double>();
      c.model.gradient_tolerance = m.value("gradient_tolerance", c.model.gradient_tolerance);
      c.model.max_newton_iterations = m.value("max_newton_iterations", c.model.max_newton_iterations);
    }
    c.model.gamma = c.sampler.gamma;
    c.model.k = static_cast<int>(c.sampler.k);
    if (j.contains("keyphrase_model")) c.keyphrase = keyphrase_config_from_json(j.at("keyphrase_model"));
    const std::string init = j.value("init", std::string("keyphrase"));
    if (init == "keyphrase") c.init = InitRule::kKeyphrase;
    else if (init == "random") c.init = InitRule::kRandom;
    else throw ConfigError("init must be keyphrase or random");
    c.match_threshold = j.value("match_threshold", c.match_threshold);

    const json oracle = j.value("oracle", json{{"kind", "pool"}});
    c.oracle_kind = oracle.value("kind", std::string("pool"));
    if (c.oracle_kind == "pool") {
      if (!oracle.contains("pool")) throw ConfigError("pool oracle needs \"pool\" (a path or an inline definition)");
      json pool = oracle.at("pool");
      if (pool.is_string()) pool = read_json(resolve(pool.get<std::string>(), base));
      if (oracle.contains("proposal")) pool["proposal"] = oracle.at("proposal");
      PoolDefinition::from_json(pool);  // validates
      c.pool = pool;
    } else if (c.oracle_kind == "llm") {
      c.llm = LlmConfig::from_json(oracle);
      if (!c.llm.template_dir.empty()) c.llm.template_dir = resolve(c.llm.template_dir, base).string();
    } else {
      throw ConfigError("oracle.kind must be pool or llm");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad run config: ") + e.what());
  }
  c.validate();
  return c;
}

json RunConfig::to_json() const {
  json oracle;
  if (oracle_kind == "pool") {
    oracle = {{"kind", "pool"}, {"pool", pool}};
  } else {
    oracle = llm.to_json();
    oracle["kind"] = "llm";
  }
  return {{"dataset", fs::absolute(dataset).string()},
          {"output_dir", fs::absolute(output_dir).string()},
          {"test_dataset", test_dataset.empty() ? "" : fs::absolute(test_dataset).string()},
          {"truth", truth.empty() ? "" : fs::absolute(truth).string()},
          {"cache_dir", cache_dir.empty() ? "" : fs::absolute(cache_dir).string()},
          {"seed", sampler.seed},
          {"sampler", sampler.to_json()},
          {"model",
           {{"gamma", model.gamma},
            {"gradient_tolerance", model.gradient_tolerance},
            {"max_newton_iterations", model.max_newton_iterations}}},
          {"keyphrase_model", keyphrase_config_to_json(keyphrase)},
          {"init", init == InitRule::kKeyphrase ? "keyphrase" : "random"},
          {"match_threshold", match_threshold},
          {"oracle", oracle}};
}

void RunConfig::validate() const {
  sampler.validate();
  model.validate();
  if (!fs::exists(dataset)) throw ConfigError("dataset not found: " + dataset.string());
  if (!test_dataset.empty() && !fs::exists(test_dataset)) {
    throw ConfigError("test dataset not found: " + test_dataset.string());
  }
  if (!truth.empty() && !fs::exists(truth)) throw ConfigError("truth file not found: " + truth.string());
  if (output_dir.empty()) throw ConfigError("output_dir is empty");
  if (oracle_kind == "llm" && init == InitRule::kRandom) {
    throw ConfigError("random initialization needs a pool oracle");
  }
  if (!(match_threshold > 0.0 && match_threshold <= 1.0)) throw ConfigError("match_threshold must lie in (0,1]");
}

std::unique_ptr<ConceptOracle> make_oracle(const RunConfig& cfg, const std::vector<Observation>& training,
                                           const RunOptions& opts) {
  if (cfg.oracle_kind == "pool") {
    return std::make_unique<PoolOracle>(PoolDefinition::from_json(cfg.pool), cfg.model, training);
  }
  std::shared_ptr<ChatTransport> transport = opts.transport;
  if (!transport) {
    const char* key = std::getenv(cfg.llm.api_key_env.c_str());
    transport = std::make_shared<HttpChatTransport>(cfg.llm.endpoint, key ? key : "", cfg.llm.timeout_seconds);
  }
  return std::make_unique<LlmOracle>(cfg.llm, transport, PromptTemplates::load(cfg.llm.template_dir), opts.sleeper);
}

RunResult cmd_run(const RunConfig& cfg_in, const RunOptions& opts) {
  RunConfig cfg = opts.resume ? load_snapshot(cfg_in.output_dir) : cfg_in;
  cfg.validate();
  const fs::path run_dir = cfg.output_dir;
  fs::create_directories(run_dir / "checkpoints");
  fs::create_directories(run_dir / "reports");
  RunLock lock(run_dir / "run.lock");
  const fs::path checkpoint_path = run_dir / "checkpoints" / "checkpoint.json";
  if (opts.resume) {
    if (!fs::exists(checkpoint_path)) throw ConfigError("nothing to resume: no checkpoint in " + run_dir.string());
  } else {
    if (fs::exists(checkpoint_path)) {
      throw ConfigError("run directory already holds a run; pass --resume or choose another output_dir");
    }
    write_atomic(run_dir / "config.snapshot", cfg.to_json().dump(2) + "\n");
  }

  const std::string started = utc_timestamp();
  RunContext ctx(cfg, opts);
  const auto& obs = ctx.train.observations();
  const Eigen::VectorXd y = ctx.train.labels();
  const std::size_t n = obs.size();
  AnnotatedColumns columns(*ctx.service, obs);
  LikelihoodEvaluator eval(columns, y, cfg.model);

  OracleCounters earlier;  // counters carried over from the interrupted process
  json init_info;
  std::optional<ChainTrace> trace;
  if (opts.resume) {
    const json ck = read_json(checkpoint_path);
    earlier = counters_from_json(ck.at("counters"));
    init_info = ck.at("initialization");
    if (!ck.at("trace").is_null()) trace = ChainTrace::from_json(ck.at("trace"));
  }

  std::vector<KeyphraseBag> bags;
  const bool need_bags = ctx.oracle->uses_keyphrase_summary() || cfg.init == InitRule::kKeyphrase;
  const std::vector<int> labels = int_labels(y);
  SummaryProvider summary = [&](std::span<const Concept> context, std::span<const std::size_t> rows) {
    if (rows.empty()) return KeyphraseSummary{};
    std::vector<KeyphraseBag> sub;
    std::vector<int> sub_labels;
    Eigen::MatrixXd concepts(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(context.size()));
    for (std::size_t j = 0; j < context.size(); ++j) {
      const auto& col = columns.column(context[j]);
      for (std::size_t r = 0; r < rows.size(); ++r) {
        concepts(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) = col[rows[r]];
      }
    }
    for (std::size_t r : rows) {
      sub.push_back(bags[r]);
      sub_labels.push_back(labels[r]);
    }
    return keyphrase_summary_for(sub, concepts, sub_labels, cfg.keyphrase);
  };

  auto write_checkpoint = [&](const ChainTrace* t) {
    const OracleCounters total = add(earlier, ctx.service->counters());
    write_atomic(checkpoint_path, checkpoint_json(cfg, t, init_info, total).dump() + "\n");
  };

  auto manifest_for = [&](const std::string& status, const ChainTrace* t) {
    const OracleCounters total = add(earlier, ctx.service->counters());
    json m = {{"software_version", kSoftwareVersion},
              {"status", status},
              {"started_at", started},
              {"finished_at", utc_timestamp()},
              {"resumed", opts.resume},
              {"config", cfg.to_json()},
              {"oracle", ctx.oracle->describe()},
              {"n_train", n},
              {"oracle_calls", counters_to_json(total)},
              {"cache_records", ctx.annotations->size()},
              {"initialization", init_info}};
    const std::size_t k = cfg.sampler.k;
    const std::size_t epochs = static_cast<std::size_t>(cfg.sampler.t_epochs + cfg.sampler.warm_start_epochs);
    m["cost_bound"] = n * epochs * k * (cfg.sampler.m_candidates + 1) + n;
    if (t) {
      // distinct concepts the training rows were ever annotated with
      std::set<std::string> seen;
      std::size_t init_concepts = 0;
      if (init_info.contains("concepts")) {
        for (const auto& c : init_info.at("concepts")) {
          if (seen.insert(c.at("id").get<std::string>()).second) ++init_concepts;
        }
      }
      std::size_t new_concepts = 0;
      for (const auto& u : t->updates) {
        for (const auto& id : u.candidates) new_concepts += seen.insert(id).second ? 1 : 0;
        for (const auto& id : u.dropped) new_concepts += seen.insert(id).second ? 1 : 0;
      }
      m["accounting"] = {{"formula", "n*K_init + n*sum_updates(new concepts)"},
                         {"n", n},
                         {"initial_concepts", init_concepts},
                         {"new_candidate_concepts", new_concepts},
                         {"expected_cold_annotation_values", n * (init_concepts + new_concepts)}};
      m["acceptance_rate"] = t->acceptance_rate();
      m["acceptance_count"] = t->acceptance_count;
      m["proposal_count"] = t->proposal_count;
      m["epoch_log_marginal"] = t->epoch_log_marginal;
      m["warm_start_samples_kept"] =
          std::min<std::size_t>(k * static_cast<std::size_t>(cfg.sampler.warm_start_epochs), cfg.sampler.keep_last);
      m["next_epoch"] = t->next_epoch;
    }
    return m;
  };

  RunResult result{run_dir, "", {}};
  try {
    if (need_bags) bags = ctx.service->keyphrases(obs);
    if (!trace) {
      ConceptSet initial;
      if (cfg.init == InitRule::kKeyphrase) {
        std::vector<std::size_t> all(n);
        std::iota(all.begin(), all.end(), std::size_t{0});
        const KeyphraseSummary s = summary({}, all);
        if (s.empty()) throw InitializationError("keyphrase summary is empty; cannot initialize concepts");
        initial = ctx.oracle->initialize_concepts(s, cfg.sampler.k);
        init_info["rule"] = "keyphrase";
        init_info["summary"] = s.render();
      } else {
        auto* pool = dynamic_cast<PoolOracle*>(ctx.oracle.get());
        if (!pool) throw ConfigError("random initialization needs a pool oracle");
        if (cfg.sampler.k > pool->concepts().size()) throw ConfigError("k exceeds the pool size");
        Rng init_rng(cfg.sampler.seed ^ 0x9e3779b97f4a7c15ULL);
        std::vector<Concept> pick = pool->concepts();
        for (std::size_t a = 0; a < cfg.sampler.k; ++a) std::swap(pick[a], pick[a + init_rng.below(pick.size() - a)]);
        pick.resize(cfg.sampler.k);
        initial = ConceptSet(std::move(pick));
        init_info["rule"] = "random";
      }
      json concepts = json::array();
      for (const auto& c : initial.concepts()) concepts.push_back({{"id", c.id()}, {"question", c.question()}});
      init_info["concepts"] = concepts;
      if (!columns.prefetch(initial.concepts()).empty()) {
        throw InitializationError("initial concepts could not be annotated");
      }
      ChainTrace fresh;
      fresh.state = initial;
      fresh.rng_state = Rng(cfg.sampler.seed).state();
      trace = std::move(fresh);
      write_checkpoint(&*trace);
    }

    GibbsHooks hooks;
    hooks.summary = summary;
    hooks.halt_after_epoch = opts.halt_after_epoch;
    hooks.on_epoch_end = [&](const ChainTrace& t) { write_checkpoint(&t); };
    trace = resume_gibbs(eval, *ctx.oracle, cfg.sampler, std::move(*trace), hooks);
  } catch (...) {
    // the last epoch-boundary checkpoint stays resumable
    if (!fs::exists(checkpoint_path)) write_checkpoint(nullptr);
    result.status = "aborted";
    result.manifest = manifest_for("aborted", nullptr);
    write_atomic(run_dir / "manifest.json", result.manifest.dump(2) + "\n");
    throw;
  }

  if (!trace->complete) {
    result.status = "halted";
    result.manifest = manifest_for("halted", &*trace);
    write_atomic(run_dir / "manifest.json", result.manifest.dump(2) + "\n");
    return result;
  }

  const auto posterior = trace->posterior(cfg.sampler);
  std::string samples_text, updates_text;
  for (const auto& s : posterior) samples_text += sample_to_json(s).dump() + "\n";
  for (const auto& u : trace->updates) updates_text += u.to_json().dump() + "\n";
  write_atomic(run_dir / "samples.jsonl", samples_text);
  write_atomic(run_dir / "updates.jsonl", updates_text);

  result.status = "complete";
  result.manifest = manifest_for("complete", &*trace);
  const OracleCounters before_reports = ctx.service->counters();
  json reports = write_reports(ctx, posterior, cfg.test_dataset, cfg.truth);
  result.manifest["reports"] = reports;
  result.manifest["evaluation_oracle_calls"] = counters_to_json(subtract(ctx.service->counters(), before_reports));
  result.manifest["finished_at"] = utc_timestamp();
  write_atomic(run_dir / "manifest.json", result.manifest.dump(2) + "\n");
  return result;
}

std::vector<PredictionRow> cmd_predict(const fs::path& run_dir, const std::vector<Observation>& observations,
                                       const RunOptions& opts) {
  RunConfig cfg = load_snapshot(run_dir);
  RunLock lock(run_dir / "run.lock");
  RunContext ctx(cfg, opts);
  return predict_with(ctx, load_samples(run_dir), observations);
}

json cmd_eval(const fs::path& run_dir, const fs::path& test, const fs::path& truth, const RunOptions& opts) {
  RunConfig cfg = load_snapshot(run_dir);
  RunLock lock(run_dir / "run.lock");
  RunContext ctx(cfg, opts);
  const fs::path t = test.empty() ? cfg.test_dataset : test;
  const fs::path tr = truth.empty() ? cfg.truth : truth;
  return write_reports(ctx, load_samples(run_dir), t, tr);
}

json cmd_simulate(const fs::path& out_dir, const SimulateOptions& opts) {
  SyntheticSpec spec = default_synthetic_spec(opts.n_train + opts.n_test, opts.seed);
  spec.feature_copy_probability = opts.feature_copy_probability;
  if (opts.intercept) spec.intercept = *opts.intercept;
  const SyntheticData data = generate_synthetic(spec);
  fs::create_directories(out_dir);
  std::vector<Observation> train(data.observations.begin(),
                                 data.observations.begin() + static_cast<std::ptrdiff_t>(opts.n_train));
  std::vector<Observation> test(data.observations.begin() + static_cast<std::ptrdiff_t>(opts.n_train),
                                data.observations.end());
  Dataset(train).save_jsonl(out_dir / "train.jsonl");
  Dataset(test).save_jsonl(out_dir / "test.jsonl");
  PoolDefinition pool = data.pool;
  pool.rule = pool_rule_from_string(opts.proposal);
  write_atomic(out_dir / "pool.json", pool.to_json().dump(2) + "\n");
  json truth = json::array();
  for (const auto& c : data.truth) truth.push_back(c.question());
  json truth_doc = {{"concepts", truth}, {"coefficients", spec.coefficients}, {"intercept", spec.intercept}};
  write_atomic(out_dir / "truth.json", truth_doc.dump(2) + "\n");
  return {{"n_train", opts.n_train}, {"n_test", opts.n_test}, {"seed", opts.seed}, {"pool_size", spec.pool.size()}};
}

EnumeratedPosterior cmd_enumerate(const fs::path& dataset, const fs::path& pool_path, std::size_t k, double gamma) {
  const Dataset data = Dataset::load_jsonl(dataset);
  const Eigen::VectorXd y = data.labels();
  ModelConfig model;
  model.gamma = gamma;
  PoolOracle pool(PoolDefinition::load_json(pool_path), model, data.observations());
  std::vector<std::vector<double>> cols;
  for (std::size_t j = 0; j < pool.concepts().size(); ++j) cols.push_back(pool.training_column(j));
  return enumerate_posterior(pool.concepts(), k, y, cols, gamma);
}

json cmd_extract_keyphrases(const RunConfig& cfg, const RunOptions& opts) {
  cfg.validate();
  fs::create_directories(cfg.output_dir);
  RunLock lock(cfg.output_dir / "run.lock");
  RunContext ctx(cfg, opts);
  const auto& obs = ctx.train.observations();
  const auto bags = ctx.service->keyphrases(obs);
  json out = {{"n", obs.size()}, {"keyphrase_queries", ctx.service->counters().keyphrase_queries}};
  if (ctx.train.has_labels()) {
    const std::vector<int> labels = int_labels(ctx.train.labels());
    const KeyphraseSummary s = keyphrase_summary_for(bags, Eigen::MatrixXd(static_cast<Eigen::Index>(obs.size()), 0),
                                                     labels, cfg.keyphrase);
    json top = json::array();
    for (const auto& p : s.phrases) top.push_back({{"phrase", p.phrase}, {"coefficient", p.coefficient}});
    out["summary"] = top;
  }
  write_atomic(cfg.output_dir / "reports" / "keyphrases.json", out.dump(2) + "\n");
  return out;
}

}  // namespace ccbm
