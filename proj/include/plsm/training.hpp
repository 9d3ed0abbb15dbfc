#pragma once

#include "plsm/autodiff.hpp"
#include "plsm/envs.hpp"
#include "plsm/model.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace plsm {

class Rng;

/// How contrastive negatives are drawn from the batch: one per sample via a
/// derangement, or every other sample in the batch.
enum class NegativeMode { single, all };

std::string to_string(NegativeMode mode);
NegativeMode negative_mode_from_string(const std::string& name);

struct TrainConfig {
  int batch_size = 128;
  int epochs = 50;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  NegativeMode negatives = NegativeMode::single;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct LossBreakdown {
  double total = 0.0;
  double prediction = 0.0;
  double negative = 0.0;
  double penalty = 0.0;
};

/// Differentiable total plus the value of each term.
struct LossTerms {
  Var total;
  LossBreakdown values;
};

struct Batch {
  Tensor observations;       // [B, D]
  Tensor actions;            // [B, A]
  Tensor next_observations;  // [B, D]

  std::size_t size() const { return observations.rows(); }
};

Batch make_batch(const TransitionDataset& dataset, std::span<const std::pair<std::size_t, std::size_t>> at);

/// Uniform random derangement of [0, batch): entry i is the negative for
/// sample i and never equals i.
std::vector<std::size_t> sample_negatives(std::size_t batch, Rng& rng);
std::vector<std::size_t> sample_negatives(std::size_t batch, std::uint64_t seed);

struct Negatives {
  NegativeMode mode = NegativeMode::single;
  std::vector<std::size_t> permutation;  // single mode only
};

/// mean_i ||z_next - z_pred||^2 + max(0, margin - ||z_neg - z_pred||^2).
LossTerms contrastive_loss(Var z_next, Var z_pred, Var z_negative, double margin);
/// As above, with the hinge averaged over every other sample of the batch.
LossTerms contrastive_loss_all(Var z_next, Var z_pred, double margin);

/// Contrastive loss through the direct z path (cwm).
LossTerms cwm_loss(Tape& tape, const WorldModel& model, const Batch& batch, const Negatives& negatives);
/// Contrastive loss through the query path plus beta * mean ||h||^2
/// (plsm, topk, weight_decay, hybrid).
LossTerms plsm_loss(Tape& tape, const WorldModel& model, const Batch& batch, const Negatives& negatives);
/// ||sg(target(s')) - (z + delta)||^2 + beta * mean ||h||^2, no negatives.
LossTerms spr_loss(Tape& tape, const WorldModel& model, const Batch& batch);

enum class LatentNorm { l1, l2 };
/// Contrastive loss through the direct z path plus beta * mean ||z||.
LossTerms latent_reg_loss(Tape& tape, const WorldModel& model, const Batch& batch, const Negatives& negatives,
                          LatentNorm norm);

/// Dispatches on the model variant.
LossTerms objective(Tape& tape, const WorldModel& model, const Batch& batch, const Negatives& negatives);

/// Named scalar series, kept in insertion order.
class MetricsRecord {
public:
  void append(const std::string& name, double value);
  bool has(const std::string& name) const;
  const std::vector<double>& series(const std::string& name) const;
  const std::vector<std::pair<std::string, std::vector<double>>>& all() const { return series_; }

  /// One row per index; columns in insertion order. Short series leave
  /// blank cells.
  std::string to_csv() const;
  /// Last value of every series.
  nlohmann::json summary() const;

private:
  std::vector<std::pair<std::string, std::vector<double>>> series_;
};

/// Shortest decimal text that round-trips the double; used by every metrics
/// writer so reruns are byte-identical.
std::string format_number(double v);

class TrainingError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

using EpochHook = std::function<void(int epoch, const WorldModel& model, MetricsRecord& metrics)>;

/// Shuffled minibatch Adam training. Logs one row per epoch with the mean
/// loss terms; `hook` runs after each epoch. Aborts with TrainingError on any
/// non-finite value.
MetricsRecord train(WorldModel& model, const TransitionDataset& dataset, const TrainConfig& config,
                    const EpochHook& hook = {});

}  // namespace plsm
