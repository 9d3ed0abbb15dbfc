// plsm_lab: dataset generation, training, evaluation, diagnostics and the
// experiment suites.
//
// Exit codes: 0 success, 1 config error, 2 runtime failure, 3 suite
// acceptance-threshold failure.

#include "plsm/container.hpp"
#include "plsm/experiment.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace plsm;

namespace {

constexpr int kConfigError = 1;
constexpr int kRuntimeError = 2;
constexpr int kThresholdFailure = 3;

/// Flags that map onto config keys; applied after the config file in the order
/// given.
struct Overrides {
  std::string config_file;
  std::vector<std::pair<std::string, std::string>> values;

  void attach(CLI::App* app) {
    app->add_option("--config", config_file, "config file of 'key = value' lines")->check(CLI::ExistingFile);
    app->add_option_function<std::vector<std::string>>(
           "--set",
           [this](const std::vector<std::string>& items) {
             for (const auto& item : items) {
               const auto eq = item.find('=');
               if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + item + "'");
               values.emplace_back(item.substr(0, eq), item.substr(eq + 1));
             }
           },
           "override any config key, key=value")
        ->take_all();
  }

  void flag(CLI::App* app, const std::string& name, const std::string& key, const std::string& help) {
    app->add_option_function<std::string>(
        name, [this, key](const std::string& v) { values.emplace_back(key, v); }, help + " (" + key + ")");
  }

  ExperimentConfig build(const std::vector<std::pair<std::string, std::string>>& before = {}) const {
    ExperimentConfig c;
    for (const auto& [k, v] : before) c.set(k, v);
    if (!config_file.empty()) c.merge_file(config_file);
    for (const auto& [k, v] : values) c.set(k, v);
    return c;
  }
};

void add_env_flags(CLI::App* app, Overrides& o) {
  o.flag(app, "--env", "env.kind", "heart, wall or shapes");
  o.flag(app, "--grid", "env.grid_size", "cells per side");
  o.flag(app, "--objects", "env.num_objects", "object slots");
  o.flag(app, "--present", "env.present_objects", "objects placed, 0 for all");
  o.flag(app, "--seed", "seed", "root seed");
}

void add_model_flags(CLI::App* app, Overrides& o) {
  o.flag(app, "--variant", "model.variant", "cwm, plsm, latent_l1, latent_l2, no_query, topk, weight_decay, hybrid, spr");
  o.flag(app, "--beta", "model.beta", "norm penalty coefficient");
  o.flag(app, "--margin", "model.margin", "hinge margin");
  o.flag(app, "--latent-dim", "model.latent_dim", "|z|");
  o.flag(app, "--query-dim", "model.query_dim", "|h|");
  o.flag(app, "--hidden", "model.hidden_units", "hidden units per layer");
  o.flag(app, "--layers", "model.hidden_layers", "hidden layers per network");
  o.flag(app, "--topk-k", "model.topk_k", "features kept by the topk variant");
  o.flag(app, "--weight-decay", "model.weight_decay", "dynamics weight decay");
  o.flag(app, "--ema-tau", "model.ema_tau", "target encoder EMA rate");
  o.flag(app, "--hybrid-split", "model.hybrid_split", "parsimonious latent fraction");
  o.flag(app, "--epochs", "train.epochs", "training epochs");
  o.flag(app, "--batch-size", "train.batch_size", "minibatch size");
  o.flag(app, "--lr", "train.learning_rate", "Adam learning rate");
  o.flag(app, "--negatives", "train.negatives", "single or all");
}

fs::path default_out(const ExperimentConfig& c, const std::string& sub) { return output_root(c.out_dir) / sub; }

/// Copies the dataset's environment into the config so the echoed config
/// shows the values actually used.
void adopt_env(ExperimentConfig& c, const EnvConfig& env) {
  c.set("env.kind", to_string(env.kind));
  c.set("env.grid_size", std::to_string(env.grid_size));
  c.set("env.num_objects", std::to_string(env.num_objects));
  c.set("env.present_objects", std::to_string(env.present_objects));
  c.set("env.episode_length", std::to_string(env.episode_length));
}

void check_widths(const WorldModel& model, const TransitionDataset& data) {
  if (model.action_size() != data.action_size()) {
    throw std::runtime_error("action width mismatch: checkpoint " + std::to_string(model.action_size()) +
                             ", dataset " + std::to_string(data.action_size()));
  }
  if (model.observation_size() != data.observation_size()) {
    throw std::runtime_error("observation width mismatch: checkpoint " + std::to_string(model.observation_size()) +
                             ", dataset " + std::to_string(data.observation_size()));
  }
}

std::string hits_csv(const HitsResult& hits) {
  std::string out = "horizon,accuracy\n";
  for (const auto& [h, acc] : hits.accuracy) out += std::to_string(h) + "," + format_number(acc) + "\n";
  return out;
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> out;
  ExperimentConfig probe;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    probe.set("seed", item);
    out.push_back(probe.seed);
  }
  if (out.empty()) throw ConfigError("--seeds: empty list");
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Parsimonious latent-space world model lab"};
  app.require_subcommand(1);

  // generate
  Overrides gen_o;
  std::string gen_split = "train";
  std::string gen_out;
  auto* gen = app.add_subcommand("generate", "generate a dataset file and its sidecar config");
  gen_o.attach(gen);
  add_env_flags(gen, gen_o);
  gen_o.flag(gen, "--episodes", "data.train_episodes", "training episodes");
  gen_o.flag(gen, "--episode-length", "env.episode_length", "observations per training episode");
  gen->add_option("--split", gen_split, "train or eval")->check(CLI::IsMember({"train", "eval"}));
  gen->add_option("--out", gen_out, "dataset path");

  // train
  Overrides train_o;
  std::string train_dataset, train_out;
  auto* tr = app.add_subcommand("train", "train a model on a dataset file");
  train_o.attach(tr);
  train_o.flag(tr, "--seed", "seed", "root seed");
  add_model_flags(tr, train_o);
  tr->add_option("--dataset", train_dataset, "dataset file")->required();
  tr->add_option("--out", train_out, "output directory");

  // eval
  Overrides eval_o;
  std::string eval_ckpt, eval_dataset, eval_out;
  auto* ev = app.add_subcommand("eval", "Hits@1, delta clusters and collapse for a checkpoint");
  eval_o.attach(ev);
  eval_o.flag(ev, "--seed", "seed", "root seed (noise stream)");
  eval_o.flag(ev, "--horizons", "eval.horizons", "comma-separated rollout horizons");
  eval_o.flag(ev, "--noise", "eval.noise", "Gaussian corruption std applied before evaluation");
  eval_o.flag(ev, "--epsilon", "eval.epsilon", "clustering radius");
  ev->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  ev->add_option("--dataset", eval_dataset, "dataset file")->required();
  ev->add_option("--out", eval_out, "output directory");

  // diagnose
  auto* diag = app.add_subcommand("diagnose", "norm, cluster or probe diagnostics");
  diag->require_subcommand(1);
  Overrides diag_o;
  std::string diag_ckpt, diag_baseline, diag_dataset, diag_out;
  auto add_diag = [&](const std::string& name, const std::string& help) {
    auto* s = diag->add_subcommand(name, help);
    diag_o.attach(s);
    s->add_option("--checkpoint", diag_ckpt, "checkpoint file")->required();
    s->add_option("--dataset", diag_dataset, "dataset file")->required();
    s->add_option("--out", diag_out, "output directory");
    return s;
  };
  auto* d_norm = add_diag("norm", "query-norm and dynamics-weight ratios against a baseline");
  d_norm->add_option("--baseline", diag_baseline, "baseline checkpoint")->required();
  auto* d_cluster = add_diag("cluster", "delta clustering and empirical mutual information");
  diag_o.flag(d_cluster, "--epsilon", "eval.epsilon", "clustering radius");
  auto* d_probe = add_diag("probe", "ridge probes from z and h to object positions");
  diag_o.flag(d_probe, "--alpha", "eval.probe_alpha", "ridge coefficient");

  // suite
  Overrides suite_o;
  std::string suite_name, suite_seeds = "0,1,2,3,4", suite_out;
  bool suite_fresh = false;
  auto* su = app.add_subcommand("suite", "run a named experiment bundle");
  suite_o.attach(su);
  su->add_option("name", suite_name, "fig2, appendixB, appendixC, appendixD, generalization, robustness, probes")
      ->required();
  su->add_option("--seeds", suite_seeds, "comma-separated seeds");
  su->add_option("--out", suite_out, "output root");
  su->add_flag("--fresh", suite_fresh, "retrain every cell instead of reusing cached checkpoints");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kConfigError;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  }

  // Config errors are raised while building and resolving configs; anything
  // after that is a runtime failure.
  int stage = kConfigError;
  try {
    if (*gen) {
      ExperimentConfig c = gen_o.build();
      c.resolve();
      stage = kRuntimeError;
      const bool eval_split = gen_split == "eval";
      const EnvConfig env = eval_split ? c.eval_env() : c.train_env();
      const int episodes = eval_split ? c.data.eval_episodes : c.data.train_episodes;
      const fs::path out = gen_out.empty() ? default_out(c, "data") / (gen_split + ".plsm") : fs::path(gen_out);
      if (out.has_parent_path()) fs::create_directories(out.parent_path());
      save_dataset(generate_dataset(env, static_cast<std::size_t>(episodes)), out);
      nlohmann::json sidecar = c.to_json();
      sidecar["split"] = gen_split;
      sidecar["dataset_env"] = env.to_json();
      write_text(fs::path(out.string() + ".json"), dump_json(sidecar));
      std::cout << "wrote " << out.generic_string() << " (" << episodes << " episodes)\n";
      return 0;
    }

    if (*tr) {
      ExperimentConfig c = train_o.build();
      stage = kRuntimeError;
      const TransitionDataset data = load_dataset(train_dataset);
      stage = kConfigError;
      adopt_env(c, data.config);
      c.set("data.train_episodes", std::to_string(data.episodes));
      c.resolve();
      stage = kRuntimeError;
      const fs::path out = train_out.empty() ? default_out(c, "train") : fs::path(train_out);
      WorldModel model(c.model, data.observation_size(), data.action_size(), c.seed);
      const MetricsRecord metrics = train(model, data, c.train);
      nlohmann::json summary = metrics.summary();
      summary["seed"] = c.seed;
      summary["format_version"] = kFormatVersion;
      summary["dataset"] = fs::absolute(train_dataset).generic_string();
      fs::create_directories(out);
      model.save(out / "checkpoint.plsm", {{"seed", c.seed}, {"format_version", kFormatVersion}});
      write_text(out / "metrics.csv", metrics.to_csv());
      write_text(out / "summary.json", dump_json(summary));
      write_resolved_config(out, c);
      std::cout << "trained " << to_string(c.model.variant) << " for " << c.train.epochs << " epochs";
      if (metrics.has("total")) std::cout << ", final loss " << format_number(metrics.series("total").back());
      std::cout << "; wrote " << out.generic_string() << "\n";
      return 0;
    }

    if (*ev) {
      ExperimentConfig c = eval_o.build();
      c.set("data.eval_episode_length", "1000000");  // horizons are checked against the dataset below
      c.resolve();
      stage = kRuntimeError;
      const WorldModel model = WorldModel::load(eval_ckpt);
      TransitionDataset data = load_dataset(eval_dataset);
      check_widths(model, data);
      c.model = model.config();
      c.data.eval_episode_length = static_cast<int>(data.steps());
      c.data.eval_episodes = static_cast<int>(data.episodes);
      if (c.eval.noise > 0.0) data = corrupt(data, c.eval.noise, c.noise_seed());
      const CellEval result = evaluate(model, data, c.eval);
      const fs::path out = eval_out.empty() ? default_out(c, "eval") : fs::path(eval_out);
      nlohmann::json j = result.to_json();
      j["checkpoint"] = fs::absolute(eval_ckpt).generic_string();
      j["dataset"] = fs::absolute(eval_dataset).generic_string();
      j["noise"] = c.eval.noise;
      j["format_version"] = kFormatVersion;
      write_text(out / "eval.json", dump_json(j));
      write_text(out / "hits.csv", hits_csv(result.hits));
      write_resolved_config(out, c);
      for (const auto& [h, acc] : result.hits.accuracy) std::cout << "hits@" << h << " " << format_number(acc) << "\n";
      std::cout << "clusters marginal " << result.clusters.marginal_count << ", max per action "
                << result.clusters.max_per_action() << ", empirical MI " << format_number(result.clusters.empirical_mi)
                << " bits\n";
      return 0;
    }

    if (*diag) {
      ExperimentConfig c = diag_o.build();
      c.resolve();
      stage = kRuntimeError;
      const WorldModel model = WorldModel::load(diag_ckpt);
      const TransitionDataset data = load_dataset(diag_dataset);
      check_widths(model, data);
      c.model = model.config();
      nlohmann::json j;
      std::string name;
      if (*d_norm) {
        name = "norm";
        const WorldModel baseline = WorldModel::load(diag_baseline);
        check_widths(baseline, data);
        j = norm_diagnostics(model, baseline, data).to_json();
      } else if (*d_cluster) {
        name = "cluster";
        j = delta_clusters(model, data, c.eval.epsilon).to_json();
      } else {
        name = "probe";
        j = decode_probe(model, data, c.eval.probe_alpha).to_json();
      }
      j["format_version"] = kFormatVersion;
      std::cout << dump_json(j);
      if (!diag_out.empty()) {
        write_text(fs::path(diag_out) / (name + ".json"), dump_json(j));
        write_resolved_config(diag_out, c);
      }
      return 0;
    }

    if (*su) {
      SuiteOptions options;
      options.seeds = parse_seeds(suite_seeds);
      options.overrides = suite_o.values;
      if (!suite_o.config_file.empty()) {
        auto merged = parse_config_text(read_text(suite_o.config_file), suite_o.config_file);
        merged.insert(merged.end(), options.overrides.begin(), options.overrides.end());
        options.overrides = std::move(merged);
      }
      ExperimentConfig probe = suite_base_config(suite_name);
      for (const auto& [k, v] : options.overrides) probe.set(k, v);
      probe.resolve();
      options.out_root = suite_out.empty() ? output_root(probe.out_dir) : fs::path(suite_out);
      options.reuse_cells = !suite_fresh;
      options.log = &std::cerr;
      stage = kRuntimeError;
      const SuiteResult result = run_suite(suite_name, options);
      for (const auto& row : result.table) {
        for (std::size_t i = 0; i < row.size(); ++i) std::cout << (i ? "," : "") << row[i];
        std::cout << "\n";
      }
      for (const auto& crit : result.criteria) {
        std::cout << (crit.passed ? "PASS " : "FAIL ") << crit.name << ": " << crit.detail << "\n";
      }
      std::cout << "wrote " << result.dir.generic_string() << "\n";
      return result.passed() ? 0 : kThresholdFailure;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const ContainerError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  } catch (const std::exception& e) {
    std::cerr << (stage == kConfigError ? "config error: " : "error: ") << e.what() << "\n";
    return stage;
  }
  return 0;
}
