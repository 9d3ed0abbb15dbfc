#include "plsm/experiment.hpp"

#include "plsm/rng.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <ostream>
#include <sstream>

namespace plsm {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Value parsing
// ---------------------------------------------------------------------------

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const char* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc{} || ptr != end) throw ConfigError(key + ": cannot parse '" + text + "'");
  if constexpr (std::is_floating_point_v<T>) {
    if (!std::isfinite(value)) throw ConfigError(key + ": must be finite");
  }
  return value;
}

std::vector<int> parse_int_list(const std::string& key, const std::string& text) {
  std::vector<int> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) out.push_back(parse_number<int>(key, trim(item)));
  if (out.empty()) throw ConfigError(key + ": empty list");
  return out;
}

std::string join(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

struct KeySpec {
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string& key, const std::string& value)> set;
};

template <typename T, typename Owner>
KeySpec int_key(T Owner::*field, Owner ExperimentConfig::*owner) {
  return {[=](const ExperimentConfig& c) { return std::to_string(c.*owner.*field); },
          [=](ExperimentConfig& c, const std::string& k, const std::string& v) {
            c.*owner.*field = parse_number<T>(k, v);
          }};
}

template <typename Owner>
KeySpec double_key(double Owner::*field, Owner ExperimentConfig::*owner) {
  return {[=](const ExperimentConfig& c) { return format_number(c.*owner.*field); },
          [=](ExperimentConfig& c, const std::string& k, const std::string& v) {
            c.*owner.*field = parse_number<double>(k, v);
          }};
}

template <typename E, typename Owner>
KeySpec enum_key(E Owner::*field, Owner ExperimentConfig::*owner, E (*from)(const std::string&)) {
  return {[=](const ExperimentConfig& c) { return to_string(c.*owner.*field); },
          [=](ExperimentConfig& c, const std::string& k, const std::string& v) {
            try {
              c.*owner.*field = from(v);
            } catch (const std::exception& e) {
              throw ConfigError(k + ": " + e.what());
            }
          }};
}

const std::map<std::string, KeySpec>& key_table() {
  using C = ExperimentConfig;
  static const std::map<std::string, KeySpec> table = {
      {"seed", {[](const C& c) { return std::to_string(c.seed); },
                [](C& c, const std::string& k, const std::string& v) { c.seed = parse_number<std::uint64_t>(k, v); }}},
      {"out.dir", {[](const C& c) { return c.out_dir.generic_string(); },
                   [](C& c, const std::string& k, const std::string& v) {
                     if (v.empty()) throw ConfigError(k + ": must not be empty");
                     c.out_dir = v;
                   }}},

      {"env.kind", enum_key(&EnvConfig::kind, &C::env, &env_kind_from_string)},
      {"env.grid_size", int_key(&EnvConfig::grid_size, &C::env)},
      {"env.num_objects", int_key(&EnvConfig::num_objects, &C::env)},
      {"env.present_objects", int_key(&EnvConfig::present_objects, &C::env)},
      {"env.episode_length", int_key(&EnvConfig::episode_length, &C::env)},

      {"data.train_episodes", int_key(&DataSettings::train_episodes, &C::data)},
      {"data.eval_episodes", int_key(&DataSettings::eval_episodes, &C::data)},
      {"data.eval_episode_length", int_key(&DataSettings::eval_episode_length, &C::data)},

      {"model.variant", enum_key(&ModelConfig::variant, &C::model, &variant_from_string)},
      {"model.latent_dim", int_key(&ModelConfig::latent_dim, &C::model)},
      {"model.query_dim", int_key(&ModelConfig::query_dim, &C::model)},
      {"model.hidden_units", int_key(&ModelConfig::hidden_units, &C::model)},
      {"model.hidden_layers", int_key(&ModelConfig::hidden_layers, &C::model)},
      {"model.beta", double_key(&ModelConfig::beta, &C::model)},
      {"model.margin", double_key(&ModelConfig::margin, &C::model)},
      {"model.topk_k", int_key(&ModelConfig::topk_k, &C::model)},
      {"model.weight_decay", double_key(&ModelConfig::weight_decay, &C::model)},
      {"model.ema_tau", double_key(&ModelConfig::ema_tau, &C::model)},
      {"model.hybrid_split", double_key(&ModelConfig::hybrid_split, &C::model)},

      {"train.batch_size", int_key(&TrainConfig::batch_size, &C::train)},
      {"train.epochs", int_key(&TrainConfig::epochs, &C::train)},
      {"train.learning_rate", double_key(&TrainConfig::learning_rate, &C::train)},
      {"train.negatives", enum_key(&TrainConfig::negatives, &C::train, &negative_mode_from_string)},

      {"eval.horizons", {[](const C& c) { return join(c.eval.horizons); },
                         [](C& c, const std::string& k, const std::string& v) { c.eval.horizons = parse_int_list(k, v); }}},
      {"eval.epsilon", double_key(&EvalSettings::epsilon, &C::eval)},
      {"eval.noise", double_key(&EvalSettings::noise, &C::eval)},
      {"eval.probe_alpha", double_key(&EvalSettings::probe_alpha, &C::eval)},
  };
  return table;
}

}  // namespace

// ---------------------------------------------------------------------------
// ExperimentConfig
// ---------------------------------------------------------------------------

void ExperimentConfig::set(const std::string& key, const std::string& value) {
  const auto& table = key_table();
  const auto it = table.find(key);
  if (it == table.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second.set(*this, key, trim(value));
  explicit_.insert(key);
}

std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text, const std::string& source) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream in(text);
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(source + ":" + std::to_string(number) + ": expected 'key = value'");
    }
    out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return out;
}

void ExperimentConfig::merge_text(const std::string& text, const std::string& source) {
  for (const auto& [k, v] : parse_config_text(text, source)) {
    try {
      set(k, v);
    } catch (const ConfigError& e) {
      throw ConfigError(source + ": " + e.what());
    }
  }
}

void ExperimentConfig::merge_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  merge_text(text.str(), path.string());
}

void ExperimentConfig::resolve() {
  const bool grid_set = explicit_.contains("env.grid_size");
  const bool objects_set = explicit_.contains("env.num_objects");
  if (env.kind == EnvKind::shapes) {
    if (!grid_set) env.grid_size = 5;
    if (!objects_set) env.num_objects = 5;
  } else {
    if (!grid_set) env.grid_size = 8;
    if (!objects_set) env.num_objects = 1;
  }
  env.seed = train_data_seed();
  train.seed = seed;
  try {
    env.validate();
    eval_env().validate();
    model.validate();
    train.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (data.train_episodes < 1) throw ConfigError("data.train_episodes: must be positive");
  if (data.eval_episodes < 1) throw ConfigError("data.eval_episodes: must be positive");
  for (int h : eval.horizons) {
    if (h < 1 || h >= data.eval_episode_length) {
      throw ConfigError("eval.horizons: " + std::to_string(h) + " outside [1, data.eval_episode_length - 1]");
    }
  }
  if (!(eval.epsilon > 0.0)) throw ConfigError("eval.epsilon: must be positive");
  if (!(eval.noise >= 0.0)) throw ConfigError("eval.noise: must be non-negative");
  if (!(eval.probe_alpha > 0.0)) throw ConfigError("eval.probe_alpha: must be positive");
}

std::vector<std::pair<std::string, std::string>> ExperimentConfig::entries() const {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& [key, spec] : key_table()) out.emplace_back(key, spec.get(*this));
  return out;
}

std::string ExperimentConfig::to_text() const {
  std::string out = "# plsm-lab resolved config, format_version " + std::to_string(kFormatVersion) + "\n";
  for (const auto& [k, v] : entries()) out += k + " = " + v + "\n";
  return out;
}

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : entries()) j[k] = v;
  j["format_version"] = kFormatVersion;
  return j;
}

std::vector<std::string> ExperimentConfig::keys() {
  std::vector<std::string> out;
  for (const auto& [key, spec] : key_table()) out.push_back(key);
  return out;
}

ExperimentConfig ExperimentConfig::from_text(const std::string& text) {
  ExperimentConfig c;
  c.merge_text(text);
  c.resolve();
  return c;
}

std::uint64_t ExperimentConfig::train_data_seed() const { return derive_seed(seed, "data.train"); }
std::uint64_t ExperimentConfig::eval_data_seed() const { return derive_seed(seed, "data.eval"); }
std::uint64_t ExperimentConfig::noise_seed() const { return derive_seed(seed, "data.noise"); }

EnvConfig ExperimentConfig::train_env() const {
  EnvConfig e = env;
  e.seed = train_data_seed();
  return e;
}

EnvConfig ExperimentConfig::eval_env() const {
  EnvConfig e = env;
  e.episode_length = data.eval_episode_length;
  e.seed = eval_data_seed();
  return e;
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

fs::path output_root(const fs::path& fallback) {
  if (const char* env = std::getenv("PLSM_LAB_OUT"); env != nullptr && *env != '\0') return env;
  return fallback;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return text.str();
}

void write_resolved_config(const fs::path& dir, const ExperimentConfig& config) {
  write_text(dir / "config.txt", config.to_text());
}

std::string dump_json(const nlohmann::json& j) { return j.dump(2) + "\n"; }

// ---------------------------------------------------------------------------
// Cells
// ---------------------------------------------------------------------------

Cell train_cell(const ExperimentConfig& config, const fs::path& dir, bool reuse, std::ostream* log) {
  const std::string resolved = config.to_text();
  const fs::path checkpoint = dir / "checkpoint.plsm";
  if (reuse && fs::exists(dir / "config.txt") && fs::exists(checkpoint) && read_text(dir / "config.txt") == resolved) {
    if (log) *log << "  reuse " << dir.generic_string() << "\n";
    return {dir, WorldModel::load(checkpoint), true};
  }
  if (log) *log << "  train " << dir.generic_string() << std::flush;
  // Config is written last so an interrupted run is never mistaken for a finished one.
  fs::create_directories(dir);
  fs::remove(dir / "config.txt");
  const TransitionDataset dataset = generate_dataset(config.train_env(), static_cast<std::size_t>(config.data.train_episodes));
  WorldModel model(config.model, dataset.observation_size(), dataset.action_size(), config.seed);
  const MetricsRecord metrics = train(model, dataset, config.train);

  nlohmann::json summary = metrics.summary();
  summary["seed"] = config.seed;
  summary["format_version"] = kFormatVersion;
  model.save(checkpoint, {{"seed", config.seed}, {"format_version", kFormatVersion}});
  write_text(dir / "metrics.csv", metrics.to_csv());
  write_text(dir / "summary.json", dump_json(summary));
  write_text(dir / "config.txt", resolved);
  if (log && metrics.has("total")) *log << " (final loss " << format_number(metrics.series("total").back()) << ")";
  if (log) *log << "\n";
  return {dir, std::move(model), false};
}

nlohmann::json CellEval::to_json() const {
  nlohmann::json clusters_json = clusters.to_json();
  clusters_json.erase("centroids");
  nlohmann::json j = {{"hits", hits.to_json()},
                      {"clusters", clusters_json},
                      {"collapse", {{"mean_variance", collapse.mean_variance}, {"variance", collapse.variance}}}};
  if (probes) j["probes"] = probes->to_json();
  return j;
}

CellEval evaluate(const WorldModel& model, const TransitionDataset& dataset, const EvalSettings& settings, bool probes) {
  CellEval out{hits_at_1(model, dataset, settings.horizons), delta_clusters(model, dataset, settings.epsilon),
               collapse_metric(model, dataset), std::nullopt};
  if (probes) out.probes = decode_probe(model, dataset, settings.probe_alpha);
  return out;
}

// ---------------------------------------------------------------------------
// Suites
// ---------------------------------------------------------------------------

bool SuiteResult::passed() const {
  return std::all_of(criteria.begin(), criteria.end(), [](const CriterionResult& c) { return c.passed; });
}

const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names = {"fig2",           "appendixB",  "appendixC", "appendixD",
                                                 "generalization", "robustness", "probes"};
  return names;
}

ExperimentConfig suite_base_config(const std::string& name) {
  ExperimentConfig c;
  if (name == "fig2") {
    c.set("env.kind", "heart");
  } else if (name == "appendixB") {
    c.set("env.kind", "wall");
  } else if (std::find(suite_names().begin(), suite_names().end(), name) != suite_names().end()) {
    c.set("env.kind", "shapes");
  } else {
    std::string known;
    for (const auto& n : suite_names()) known += (known.empty() ? "" : ", ") + n;
    throw ConfigError("unknown suite '" + name + "' (expected one of " + known + ")");
  }
  return c;
}

namespace {

/// Metrics of one (variant, evaluation condition, seed) triple.
struct Record {
  std::string variant;
  std::string condition;
  std::uint64_t seed = 0;
  std::map<std::string, double> metrics;
};

std::map<std::string, double> flatten(const CellEval& e) {
  std::map<std::string, double> m;
  for (const auto& [h, acc] : e.hits.accuracy) m["hits@" + std::to_string(h)] = acc;
  m["marginal_clusters"] = e.clusters.marginal_count;
  m["max_action_clusters"] = e.clusters.max_per_action();
  m["empirical_mi"] = e.clusters.empirical_mi;
  m["latent_variance"] = e.collapse.mean_variance;
  if (e.probes) {
    m["probe_z"] = e.probes->mean_latent();
    if (!e.probes->query.empty()) {
      m["probe_h"] = e.probes->mean_query();
      m["probe_h_addressed"] = e.probes->mean_query_conditioned();
    }
  }
  return m;
}

class SuiteRunner {
public:
  SuiteRunner(std::string name, const SuiteOptions& options)
      : name_(std::move(name)), options_(options), root_(options.out_root), dir_(root_ / name_) {}

  ExperimentConfig config(const std::string& variant, std::uint64_t seed) const {
    ExperimentConfig c = suite_base_config(name_);
    c.set("model.variant", variant);
    c.set("seed", std::to_string(seed));
    c.set("out.dir", root_.generic_string());
    for (const auto& [k, v] : options_.overrides) c.set(k, v);
    c.resolve();
    return c;
  }

  Cell cell(const ExperimentConfig& c) const {
    const fs::path dir = root_ / "cells" /
                         (to_string(c.env.kind) + "-n" + std::to_string(c.env.grid_size) + "-k" +
                          std::to_string(c.env.num_objects)) /
                         to_string(c.model.variant) / ("seed" + std::to_string(c.seed));
    return train_cell(c, dir, options_.reuse_cells, options_.log);
  }

  TransitionDataset eval_data(const ExperimentConfig& c) const {
    return generate_dataset(c.eval_env(), static_cast<std::size_t>(c.data.eval_episodes));
  }

  void add(Record r) { records_.push_back(std::move(r)); }
  const std::vector<Record>& records() const { return records_; }
  nlohmann::json& extra() { return extra_; }

  double mean(const std::string& variant, const std::string& condition, const std::string& metric) const {
    double s = 0.0;
    int n = 0;
    for (const auto& r : records_) {
      if (r.variant == variant && r.condition == condition) {
        s += r.metrics.at(metric);
        ++n;
      }
    }
    if (n == 0) throw std::logic_error("no records for " + variant + "/" + condition);
    return s / n;
  }

  /// Metric of `variant` under `condition` for one seed.
  double at(const std::string& variant, const std::string& condition, std::uint64_t seed,
            const std::string& metric) const {
    for (const auto& r : records_)
      if (r.variant == variant && r.condition == condition && r.seed == seed) return r.metrics.at(metric);
    throw std::logic_error("no record for " + variant + "/" + condition);
  }

  void log(const std::string& line) const {
    if (options_.log) *options_.log << line << "\n";
  }

  SuiteResult finish(std::vector<CriterionResult> criteria) const {
    SuiteResult result;
    result.name = name_;
    result.dir = dir_;
    result.criteria = std::move(criteria);

    nlohmann::json cells = nlohmann::json::array();
    for (const auto& r : records_) {
      cells.push_back({{"variant", r.variant}, {"condition", r.condition}, {"seed", r.seed}, {"metrics", r.metrics}});
    }
    result.results = {{"suite", name_},
                      {"format_version", kFormatVersion},
                      {"seeds", options_.seeds},
                      {"cells", cells},
                      {"extra", extra_},
                      {"config", config(records_.empty() ? "plsm" : records_.front().variant,
                                        options_.seeds.front()).to_json()}};
    nlohmann::json crit = nlohmann::json::array();
    for (const auto& c : result.criteria) crit.push_back({{"name", c.name}, {"passed", c.passed}, {"detail", c.detail}});
    result.results["criteria"] = crit;

    // Mean over seeds of every metric, one row per (variant, condition).
    std::vector<std::string> metric_names;
    for (const auto& r : records_)
      for (const auto& [m, v] : r.metrics)
        if (std::find(metric_names.begin(), metric_names.end(), m) == metric_names.end()) metric_names.push_back(m);
    std::vector<std::string> header{"variant", "condition", "seeds"};
    header.insert(header.end(), metric_names.begin(), metric_names.end());
    result.table.push_back(header);
    std::vector<std::pair<std::string, std::string>> groups;
    for (const auto& r : records_) {
      const std::pair<std::string, std::string> g{r.variant, r.condition};
      if (std::find(groups.begin(), groups.end(), g) == groups.end()) groups.push_back(g);
    }
    for (const auto& [variant, condition] : groups) {
      std::vector<std::string> row{variant, condition};
      int n = 0;
      std::map<std::string, std::pair<double, int>> acc;
      for (const auto& r : records_) {
        if (r.variant != variant || r.condition != condition) continue;
        ++n;
        for (const auto& [m, v] : r.metrics) {
          acc[m].first += v;
          acc[m].second += 1;
        }
      }
      row.push_back(std::to_string(n));
      for (const auto& m : metric_names) {
        const auto it = acc.find(m);
        row.push_back(it == acc.end() ? "" : format_number(it->second.first / it->second.second));
      }
      result.table.push_back(row);
    }

    std::string csv;
    for (const auto& row : result.table) {
      for (std::size_t i = 0; i < row.size(); ++i) csv += (i ? "," : "") + row[i];
      csv += "\n";
    }
    std::string crit_text;
    for (const auto& c : result.criteria) crit_text += std::string(c.passed ? "PASS " : "FAIL ") + c.name + ": " + c.detail + "\n";
    write_text(dir_ / "results.json", dump_json(result.results));
    write_text(dir_ / "table.csv", csv);
    write_text(dir_ / "criteria.txt", crit_text);
    write_resolved_config(dir_, config(records_.empty() ? "plsm" : records_.front().variant, options_.seeds.front()));
    return result;
  }

  const std::vector<std::uint64_t>& seeds() const { return options_.seeds; }

private:
  std::string name_;
  const SuiteOptions& options_;
  fs::path root_;
  fs::path dir_;
  std::vector<Record> records_;
  nlohmann::json extra_ = nlohmann::json::object();
};

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(4);
  s << v;
  return s.str();
}

/// Trains and evaluates `variants` on the suite's own evaluation set.
void run_standard(SuiteRunner& runner, const std::vector<std::string>& variants, bool probes = false) {
  for (std::uint64_t seed : runner.seeds()) {
    for (const auto& v : variants) {
      const ExperimentConfig c = runner.config(v, seed);
      const Cell cell = runner.cell(c);
      const CellEval e = evaluate(cell.model, runner.eval_data(c), c.eval, probes);
      runner.add({v, "in_distribution", seed, flatten(e)});
    }
  }
}

std::vector<CriterionResult> suite_fig2(SuiteRunner& r) {
  run_standard(r, {"plsm", "cwm"});
  const auto& seeds = r.seeds();
  const std::string cond = "in_distribution";
  bool small = true;
  int more = 0;
  bool mi = true;
  std::string detail_small, detail_more, detail_mi;
  for (auto s : seeds) {
    const double pa = r.at("plsm", cond, s, "max_action_clusters");
    const double pm = r.at("plsm", cond, s, "marginal_clusters");
    const double cm = r.at("cwm", cond, s, "marginal_clusters");
    const double pmi = r.at("plsm", cond, s, "empirical_mi");
    const double cmi = r.at("cwm", cond, s, "empirical_mi");
    small = small && pa <= 3 && pm <= 10;
    if (cm > pm) ++more;
    mi = mi && pmi < cmi;
    detail_small += " s" + std::to_string(s) + "=" + fmt(pa) + "/" + fmt(pm);
    detail_more += " s" + std::to_string(s) + "=" + fmt(cm) + ">" + fmt(pm);
    detail_mi += " s" + std::to_string(s) + "=" + fmt(pmi) + "<" + fmt(cmi);
  }
  const int needed = static_cast<int>(seeds.size() - seeds.size() / 5);
  return {
      {"plsm per-action clusters <= 3 and marginal <= 10", small, "per-action/marginal" + detail_small},
      {"cwm marginal clusters > plsm on >= " + std::to_string(needed) + " seeds", more >= needed,
       std::to_string(more) + " of " + std::to_string(seeds.size()) + ":" + detail_more},
      {"plsm empirical MI < cwm on every seed", mi, "bits" + detail_mi},
  };
}

std::vector<CriterionResult> suite_appendix_b(SuiteRunner& r) {
  run_standard(r, {"plsm", "cwm", "latent_l1", "latent_l2"});
  return {};
}

std::vector<CriterionResult> suite_appendix_c(SuiteRunner& r) {
  run_standard(r, {"plsm", "no_query", "topk", "weight_decay"});
  const std::string cond = "in_distribution", h = "hits@10";
  const double plsm = r.mean("plsm", cond, h);
  const double nq = r.mean("no_query", cond, h);
  const double tk = r.mean("topk", cond, h);
  const double wd = r.mean("weight_decay", cond, h);
  return {
      {"no_query horizon-10 accuracy < plsm", nq < plsm, fmt(nq) + " vs " + fmt(plsm)},
      {"topk horizon-10 accuracy within 0.05 of plsm", std::abs(tk - plsm) <= 0.05, fmt(tk) + " vs " + fmt(plsm)},
      {"weight_decay horizon-10 accuracy within 0.05 of plsm", std::abs(wd - plsm) <= 0.05,
       fmt(wd) + " vs " + fmt(plsm)},
  };
}

std::vector<CriterionResult> suite_appendix_d(SuiteRunner& r) {
  bool norms = true, weights = true;
  std::string dn, dw;
  nlohmann::json diag = nlohmann::json::array();
  for (std::uint64_t seed : r.seeds()) {
    const ExperimentConfig pc = r.config("plsm", seed), cc = r.config("cwm", seed);
    const Cell p = r.cell(pc), c = r.cell(cc);
    const TransitionDataset data = r.eval_data(pc);
    const NormDiagnostics d = norm_diagnostics(p.model, c.model, data);
    r.add({"plsm", "in_distribution", seed, flatten(evaluate(p.model, data, pc.eval))});
    r.add({"cwm", "in_distribution", seed, flatten(evaluate(c.model, data, cc.eval))});
    nlohmann::json dj = d.to_json();
    dj["seed"] = seed;
    diag.push_back(dj);
    norms = norms && d.norm_ratio < 0.01;
    weights = weights && d.weight_ratio < 3.0 && d.weight_ratio > 1.0 / 3.0;
    dn += " s" + std::to_string(seed) + "=" + fmt(d.norm_ratio);
    dw += " s" + std::to_string(seed) + "=" + fmt(d.weight_ratio);
  }
  r.extra()["norm_diagnostics"] = diag;
  return {
      {"mean ||h|| (plsm) < 0.01 x mean ||z|| (cwm)", norms, "ratio" + dn},
      {"first dynamics-layer weight norms within a factor of 3", weights, "ratio" + dw},
  };
}

std::vector<CriterionResult> suite_generalization(SuiteRunner& r) {
  const std::vector<int> present{1, 2, 3};
  for (std::uint64_t seed : r.seeds()) {
    for (const std::string v : {"plsm", "cwm"}) {
      const ExperimentConfig c = r.config(v, seed);
      const Cell cell = r.cell(c);
      r.add({v, "in_distribution", seed, flatten(evaluate(cell.model, r.eval_data(c), c.eval))});
      for (int k : present) {
        ExperimentConfig ck = c;
        ck.env.present_objects = k;
        r.add({v, "objects=" + std::to_string(k), seed, flatten(evaluate(cell.model, r.eval_data(ck), c.eval))});
      }
    }
  }
  std::vector<CriterionResult> out;
  const std::string in = "in_distribution";
  const double p10 = r.mean("plsm", in, "hits@10"), c10 = r.mean("cwm", in, "hits@10");
  out.push_back({"plsm horizon-10 accuracy >= cwm", p10 >= c10, fmt(p10) + " vs " + fmt(c10)});
  const double p1 = r.mean("plsm", in, "hits@1");
  out.push_back({"plsm horizon-1 accuracy >= 0.95", p1 >= 0.95, fmt(p1)});
  for (int k : present) {
    const std::string cond = "objects=" + std::to_string(k);
    const double p = r.mean("plsm", cond, "hits@10"), c = r.mean("cwm", cond, "hits@10");
    out.push_back({"plsm horizon-10 accuracy >= cwm with " + std::to_string(k) + " objects", p >= c,
                   fmt(p) + " vs " + fmt(c)});
  }
  return out;
}

std::vector<CriterionResult> suite_robustness(SuiteRunner& r) {
  const std::vector<double> sigmas{0.1, 0.2};
  for (std::uint64_t seed : r.seeds()) {
    for (const std::string v : {"plsm", "cwm"}) {
      const ExperimentConfig c = r.config(v, seed);
      const Cell cell = r.cell(c);
      const TransitionDataset clean = r.eval_data(c);
      r.add({v, "sigma=0", seed, flatten(evaluate(cell.model, clean, c.eval))});
      for (double sigma : sigmas) {
        const TransitionDataset noisy = corrupt(clean, sigma, c.noise_seed());
        r.add({v, "sigma=" + format_number(sigma), seed, flatten(evaluate(cell.model, noisy, c.eval))});
      }
    }
  }
  std::vector<CriterionResult> out;
  for (double sigma : sigmas) {
    const std::string cond = "sigma=" + format_number(sigma);
    const double p = r.mean("plsm", cond, "hits@10"), c = r.mean("cwm", cond, "hits@10");
    out.push_back({"plsm horizon-10 accuracy >= cwm at " + cond, p >= c, fmt(p) + " vs " + fmt(c)});
  }
  return out;
}

std::vector<CriterionResult> suite_probes(SuiteRunner& r) {
  run_standard(r, {"plsm"}, true);
  int both = 0;
  std::string detail;
  const std::string cond = "in_distribution";
  for (auto s : r.seeds()) {
    const double z = r.at("plsm", cond, s, "probe_z");
    const double h = r.at("plsm", cond, s, "probe_h");
    const double hc = r.at("plsm", cond, s, "probe_h_addressed");
    if (z > h && hc > h) ++both;
    detail += " s" + std::to_string(s) + "=" + fmt(z) + "/" + fmt(h) + "/" + fmt(hc);
  }
  const auto n = r.seeds().size();
  return {{"R2(z) > R2(h) and R2(h | addressed) > R2(h) on a majority of seeds", 2 * static_cast<std::size_t>(both) > n,
           std::to_string(both) + " of " + std::to_string(n) + "; z/h/h_addressed" + detail}};
}

}  // namespace

SuiteResult run_suite(const std::string& name, const SuiteOptions& options) {
  suite_base_config(name);  // rejects unknown names
  if (options.seeds.empty()) throw ConfigError("suite: at least one seed required");
  SuiteRunner runner(name, options);
  runner.log("suite " + name);
  std::vector<CriterionResult> criteria;
  if (name == "fig2") criteria = suite_fig2(runner);
  else if (name == "appendixB") criteria = suite_appendix_b(runner);
  else if (name == "appendixC") criteria = suite_appendix_c(runner);
  else if (name == "appendixD") criteria = suite_appendix_d(runner);
  else if (name == "generalization") criteria = suite_generalization(runner);
  else if (name == "robustness") criteria = suite_robustness(runner);
  else criteria = suite_probes(runner);
  return runner.finish(std::move(criteria));
}

}  // namespace plsm
