#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <optional>
#include <string>

#include "ccbm/errors.hpp"
#include "ccbm/pipeline.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

// Flags shared by run and extract-keyphrases; each mirrors a config key.
struct ConfigFlags {
  std::string config;
  std::optional<std::string> dataset, output, test_dataset, truth, cache_dir, pool, proposal, init;
  std::optional<std::string> oracle, endpoint, model, template_dir, task_description;
  std::optional<std::string> mode, oracle_mode;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> k, candidates, keep_last;
  std::optional<int> epochs, warm_start_epochs;
  std::optional<double> omega, gamma;

  void attach(CLI::App* app) {
    app->add_option("--config", config, "JSON run configuration");
    app->add_option("--dataset", dataset, "training JSONL (dataset)");
    app->add_option("--output", output, "run directory (output_dir)");
    app->add_option("--test-dataset", test_dataset, "held-out JSONL (test_dataset)");
    app->add_option("--truth", truth, "true concepts JSON (truth)");
    app->add_option("--cache-dir", cache_dir, "annotation cache directory (cache_dir)");
    app->add_option("--seed", seed, "chain seed (seed)");
    app->add_option("--k", k, "concepts per model (sampler.k)");
    app->add_option("--epochs", epochs, "sampling epochs (sampler.t_epochs)");
    app->add_option("--candidates", candidates, "candidates per update (sampler.m_candidates)");
    app->add_option("--omega", omega, "subset fraction (sampler.omega)");
    app->add_option("--gamma", gamma, "prior standard deviation (model.gamma)");
    app->add_option("--warm-start-epochs", warm_start_epochs, "greedy epochs (sampler.warm_start_epochs)");
    app->add_option("--keep-last", keep_last, "warm-start states kept (sampler.keep_last)");
    app->add_option("--mode", mode, "single_try | multi_try (sampler.mode)");
    app->add_option("--oracle-mode", oracle_mode, "prior_only | partial_posterior | full_posterior (sampler.oracle_mode)");
    app->add_option("--oracle", oracle, "pool | llm (oracle.kind)");
    app->add_option("--pool", pool, "pool definition JSON (oracle.pool)");
    app->add_option("--proposal", proposal, "exact | exact_sampled | uniform (oracle.proposal)");
    app->add_option("--endpoint", endpoint, "chat-completions URL (oracle.endpoint)");
    app->add_option("--model", model, "model name (oracle.model)");
    app->add_option("--template-dir", template_dir, "prompt template directory (oracle.template_dir)");
    app->add_option("--task-description", task_description, "what the label means (oracle.task_description)");
    app->add_option("--init", init, "keyphrase | random (init)");
  }

  ccbm::RunConfig resolve() const {
    json j = json::object();
    fs::path base = fs::current_path();
    if (!config.empty()) {
      std::ifstream in(config);
      if (!in) throw ccbm::ConfigError("cannot read config " + config);
      try {
        j = json::parse(in);
      } catch (const json::exception& e) {
        throw ccbm::ConfigError("bad JSON in " + config + ": " + e.what());
      }
      base = fs::absolute(config).parent_path();
    }
    // flag paths are relative to the working directory, file paths to the file
    auto path = [](const std::string& p) { return fs::absolute(p).string(); };
    if (dataset) j["dataset"] = path(*dataset);
    if (output) j["output_dir"] = path(*output);
    if (test_dataset) j["test_dataset"] = path(*test_dataset);
    if (truth) j["truth"] = path(*truth);
    if (cache_dir) j["cache_dir"] = path(*cache_dir);
    if (seed) j["seed"] = *seed;
    json& s = j["sampler"];
    if (s.is_null()) s = json::object();
    if (k) s["k"] = *k;
    if (epochs) s["t_epochs"] = *epochs;
    if (candidates) s["m_candidates"] = *candidates;
    if (omega) s["omega"] = *omega;
    if (warm_start_epochs) s["warm_start_epochs"] = *warm_start_epochs;
    if (keep_last) s["keep_last"] = *keep_last;
    if (mode) s["mode"] = *mode;
    if (oracle_mode) s["oracle_mode"] = *oracle_mode;
    if (gamma) j["model"]["gamma"] = *gamma;
    if (init) j["init"] = *init;
    json& o = j["oracle"];
    if (o.is_null()) o = {{"kind", "pool"}};
    if (oracle) o["kind"] = *oracle;
    if (pool) o["pool"] = path(*pool);
    if (proposal) o["proposal"] = *proposal;
    if (endpoint) o["endpoint"] = *endpoint;
    if (model) o["model"] = *model;
    if (template_dir) o["template_dir"] = path(*template_dir);
    if (task_description) o["task_description"] = *task_description;
    return ccbm::RunConfig::from_json(j, base);
  }
};

void write_or_print(const std::string& out, const std::string& text) {
  if (out.empty()) {
    std::cout << text;
  } else {
    ccbm::write_atomic(out, text);
  }
}

int run_main(int argc, char** argv) {
  CLI::App app{"Bayesian concept bottleneck models with oracle-proposed concepts"};
  app.require_subcommand(1);

  ConfigFlags run_flags;
  bool resume = false;
  int halt_after_epoch = -1;
  auto* run = app.add_subcommand("run", "extract keyphrases, initialize, sample and report");
  run_flags.attach(run);
  run->add_flag("--resume", resume, "continue the run in --output from its checkpoint");
  run->add_option("--halt-after-epoch", halt_after_epoch)->group("");

  std::string predict_run, predict_input, predict_out;
  auto* predict = app.add_subcommand("predict", "score observations with a finished run");
  predict->add_option("--run", predict_run, "run directory")->required();
  predict->add_option("--input", predict_input, "observations JSONL")->required();
  predict->add_option("--out", predict_out, "scored JSONL (default: stdout)");

  std::string eval_run, eval_test, eval_truth;
  auto* eval = app.add_subcommand("eval", "metrics and concept recovery for a finished run");
  eval->add_option("--run", eval_run, "run directory")->required();
  eval->add_option("--test-dataset", eval_test, "held-out JSONL (default: the run's)");
  eval->add_option("--truth", eval_truth, "true concepts JSON (default: the run's)");

  std::string sim_out;
  ccbm::SimulateOptions sim;
  double sim_intercept = 0.0;
  auto* simulate = app.add_subcommand("simulate", "write a synthetic corpus, pool and truth");
  simulate->add_option("--output", sim_out, "output directory")->required();
  simulate->add_option("--n-train", sim.n_train, "training observations");
  simulate->add_option("--n-test", sim.n_test, "held-out observations");
  simulate->add_option("--seed", sim.seed, "generator seed");
  simulate->add_option("--proposal", sim.proposal, "exact | exact_sampled | uniform, written into pool.json");
  simulate->add_option("--feature-copy-probability", sim.feature_copy_probability, "feature correlation knob");
  auto* intercept_opt = simulate->add_option("--intercept", sim_intercept, "logit intercept");

  std::string enum_dataset, enum_pool, enum_out;
  std::size_t enum_k = 1;
  double enum_gamma = 2.0;
  auto* enumerate = app.add_subcommand("enumerate", "exact posterior over k-subsets of a pool");
  enumerate->add_option("--dataset", enum_dataset, "labelled JSONL")->required();
  enumerate->add_option("--pool", enum_pool, "pool definition JSON")->required();
  enumerate->add_option("--k", enum_k, "concepts per model");
  enumerate->add_option("--gamma", enum_gamma, "prior standard deviation");
  enumerate->add_option("--out", enum_out, "output JSON (default: stdout)");

  ConfigFlags kp_flags;
  auto* extract = app.add_subcommand("extract-keyphrases", "keyphrase pass and its summary");
  kp_flags.attach(extract);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  if (*run) {
    ccbm::RunOptions opts;
    opts.resume = resume;
    opts.halt_after_epoch = halt_after_epoch;
    ccbm::RunConfig cfg;
    if (resume) {
      if (!run_flags.output) throw ccbm::ConfigError("--resume needs --output");
      cfg.output_dir = fs::absolute(*run_flags.output);
    } else {
      cfg = run_flags.resolve();
    }
    const auto result = ccbm::cmd_run(cfg, opts);
    std::cout << json{{"run_dir", result.run_dir.string()}, {"status", result.status}}.dump() << "\n";
  } else if (*predict) {
    const auto data = ccbm::Dataset::load_jsonl(predict_input);
    const auto rows = ccbm::cmd_predict(predict_run, data.observations());
    std::string text;
    for (const auto& r : rows) {
      json line = {{"id", r.id}, {"breakdown", r.breakdown}};
      line["probability"] = r.probability ? json(*r.probability) : json(nullptr);
      if (r.label) line["label"] = *r.label;
      text += line.dump() + "\n";
    }
    write_or_print(predict_out, text);
  } else if (*eval) {
    std::cout << ccbm::cmd_eval(eval_run, eval_test, eval_truth).dump(2) << "\n";
  } else if (*simulate) {
    if (intercept_opt->count() > 0) sim.intercept = sim_intercept;
    std::cout << ccbm::cmd_simulate(sim_out, sim).dump() << "\n";
  } else if (*enumerate) {
    const auto post = ccbm::cmd_enumerate(enum_dataset, enum_pool, enum_k, enum_gamma);
    write_or_print(enum_out, post.to_json().dump(2) + "\n");
  } else if (*extract) {
    std::cout << ccbm::cmd_extract_keyphrases(kp_flags.resolve()).dump(2) << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run_main(argc, argv);
  } catch (const ccbm::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ccbm::ContractViolation& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return 2;
  } catch (const ccbm::OracleError& e) {
    std::cerr << "oracle failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
