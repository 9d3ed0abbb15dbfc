#pragma once

#include "plsm/envs.hpp"
#include "plsm/eval.hpp"
#include "plsm/model.hpp"
#include "plsm/training.hpp"

#include <json.hpp>

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace plsm {

/// Bad key, unparsable value or invalid combination of settings.
class ConfigError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kFormatVersion = 1;

struct DataSettings {
  int train_episodes = 1000;
  int eval_episodes = 200;
  /// Observations per evaluation episode; training episodes use env.episode_length.
  int eval_episode_length = 11;
};

struct EvalSettings {
  std::vector<int> horizons{1, 2, 3, 5, 10};
  double epsilon = 0.05;
  double noise = 0.0;
  double probe_alpha = 1e-3;
};

/// Everything one generate/train/eval run needs. Written and read as flat
/// `key = value` lines; `#` starts a comment. Precedence, lowest first:
/// built-in defaults, config file, command-line flags.
///
/// env.grid_size and env.num_objects default per kind (heart and wall: 8 and 1,
/// shapes: 5 and 5) unless set explicitly.
struct ExperimentConfig {
  std::uint64_t seed = 0;
  EnvConfig env;
  DataSettings data;
  ModelConfig model;
  TrainConfig train;
  EvalSettings eval;
  std::filesystem::path out_dir = "plsm_out";

  /// Assigns one dotted key. Throws ConfigError naming the key.
  void set(const std::string& key, const std::string& value);
  /// Reads `key = value` lines.
  void merge_text(const std::string& text, const std::string& source = "config");
  void merge_file(const std::filesystem::path& path);

  /// Applies kind-dependent defaults, propagates the root seed and validates.
  /// Throws ConfigError.
  void resolve();

  /// Every key with the value in effect, sorted by key.
  std::vector<std::pair<std::string, std::string>> entries() const;
  std::string to_text() const;
  nlohmann::json to_json() const;

  static std::vector<std::string> keys();
  static ExperimentConfig from_text(const std::string& text);

  /// Seeds of the named data streams.
  std::uint64_t train_data_seed() const;
  std::uint64_t eval_data_seed() const;
  std::uint64_t noise_seed() const;

  EnvConfig train_env() const;
  EnvConfig eval_env() const;

private:
  std::set<std::string> explicit_;
};

/// `key = value` pairs of a config text in order; `#` starts a comment. Keys
/// are not checked here.
std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text,
                                                                   const std::string& source = "config");

/// Output root: $PLSM_LAB_OUT if set, else `fallback`.
std::filesystem::path output_root(const std::filesystem::path& fallback);

/// Writes `config.txt` (resolved config with format version) into `dir`.
void write_resolved_config(const std::filesystem::path& dir, const ExperimentConfig& config);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

/// Text identical on every platform for identical values.
std::string dump_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Cells: one trained model, cached on disk
// ---------------------------------------------------------------------------

struct Cell {
  std::filesystem::path dir;
  WorldModel model;
  bool cached = false;
};

/// Trains the configured model on its training dataset and writes
/// checkpoint.plsm, metrics.csv, summary.json and config.txt into `dir`.
/// When `dir` already holds a checkpoint trained from the same resolved
/// config, that checkpoint is loaded instead (unless `reuse` is false).
Cell train_cell(const ExperimentConfig& config, const std::filesystem::path& dir, bool reuse = true,
                std::ostream* log = nullptr);

/// Evaluation bundle for one model on one dataset.
struct CellEval {
  HitsResult hits;
  ClusterReport clusters;
  CollapseReport collapse;
  std::optional<ProbeReport> probes;

  nlohmann::json to_json() const;
};

CellEval evaluate(const WorldModel& model, const TransitionDataset& dataset, const EvalSettings& settings,
                  bool probes = false);

// ---------------------------------------------------------------------------
// Suites
// ---------------------------------------------------------------------------

struct CriterionResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct SuiteOptions {
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  /// Applied to every cell after the suite's own settings.
  std::vector<std::pair<std::string, std::string>> overrides;
  std::filesystem::path out_root = "plsm_out";
  bool reuse_cells = true;
  std::ostream* log = nullptr;
};

struct SuiteResult {
  std::string name;
  std::filesystem::path dir;
  nlohmann::json results;
  std::vector<std::vector<std::string>> table;  // header row first
  std::vector<CriterionResult> criteria;

  bool passed() const;
};

const std::vector<std::string>& suite_names();

/// Runs every (variant x seed) cell of the suite, evaluates, writes
/// results.json, table.csv and criteria.txt under out_root/<name>/, and
/// checks the suite's acceptance thresholds. Throws ConfigError for an
/// unknown suite.
SuiteResult run_suite(const std::string& name, const SuiteOptions& options);

/// Base config of the suite's cells before user overrides.
ExperimentConfig suite_base_config(const std::string& name);

}  // namespace plsm
