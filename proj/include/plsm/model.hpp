#pragma once

#include "plsm/autodiff.hpp"
#include "plsm/tensor.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace plsm {

class Rng;

enum class Variant { cwm, plsm, latent_l1, latent_l2, no_query, topk, weight_decay, hybrid, spr };

std::string to_string(Variant v);
Variant variant_from_string(const std::string& name);

/// True when the dynamics head reads the query code h instead of z.
bool uses_query(Variant v);

struct ModelConfig {
  int latent_dim = 32;
  int query_dim = 32;
  int hidden_units = 128;
  int hidden_layers = 2;
  double beta = 0.1;
  double margin = 1.0;
  Variant variant = Variant::plsm;
  int topk_k = 15;
  double weight_decay = 1e-3;
  double ema_tau = 0.99;
  /// Fraction of the latent governed by query-path dynamics (hybrid only).
  double hybrid_split = 0.5;

  void validate() const;
  /// Width of the parsimonious block of a hybrid latent.
  int parsimonious_dim() const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [1, out]
};

/// ReLU multilayer perceptron with a linear output layer.
class Mlp {
public:
  Mlp() = default;
  /// Weights uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)], biases zero.
  Mlp(std::size_t input, std::size_t hidden, std::size_t hidden_layers, std::size_t output, Rng& rng);

  Var forward(Tape& tape, Var x) const;

  std::vector<Linear>& layers() { return layers_; }
  const std::vector<Linear>& layers() const { return layers_; }
  std::size_t input_size() const { return layers_.front().weight.dim(0); }
  std::size_t output_size() const { return layers_.back().bias.dim(1); }
  bool empty() const { return layers_.empty(); }

private:
  std::vector<Linear> layers_;
};

/// Outputs of one dynamics evaluation. `query` is invalid for variants that
/// read z directly.
struct DeltaPrediction {
  Var delta;
  Var query;
};

struct NamedTensor {
  std::string name;
  Tensor* tensor;
};

/// Encoder, optional query network, dynamics head(s) and, for the spr variant,
/// an EMA target encoder that the optimizer never touches.
class WorldModel {
public:
  WorldModel(const ModelConfig& config, std::size_t observation_size, std::size_t action_size, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  Variant variant() const { return config_.variant; }
  std::size_t observation_size() const { return observation_size_; }
  std::size_t action_size() const { return action_size_; }

  Var encode(Tape& tape, Var observations) const;
  /// Target-encoder embedding behind a stop-gradient (spr only).
  Var encode_target(Tape& tape, Var observations) const;
  /// h = f([z ; a]); top-k masked for the topk variant.
  Var query(Tape& tape, Var z, Var actions) const;
  /// Dynamics head fed with an externally supplied query code.
  Var delta_from_query(Tape& tape, Var h, Var actions) const;
  DeltaPrediction predict_delta(Tape& tape, Var z, Var actions) const;
  /// z + delta.
  Var predict_next(Tape& tape, Var z, Var actions) const;

  Tensor encode(const Tensor& observations) const;
  Tensor query(const Tensor& z, const Tensor& actions) const;
  Tensor predict_delta(const Tensor& z, const Tensor& actions) const;
  Tensor predict_next(const Tensor& z, const Tensor& actions) const;
  /// Encodes once, then applies predict_next per action batch in latent space.
  Tensor rollout(const Tensor& observations, std::span<const Tensor> actions) const;

  /// target <- tau * target + (1 - tau) * online, per parameter.
  void ema_update(double tau);

  std::vector<NamedTensor> trainable_parameters();
  std::vector<NamedTensor> all_parameters();
  /// Weight matrices of the dynamics head(s), for the weight_decay variant.
  std::vector<Tensor*> dynamics_weights();

  Mlp& encoder() { return encoder_; }
  const Mlp& encoder() const { return encoder_; }
  Mlp& query_net() { return query_; }
  const Mlp& query_net() const { return query_; }
  Mlp& dynamics_net() { return dynamics_; }
  const Mlp& dynamics_net() const { return dynamics_; }
  Mlp& free_dynamics_net() { return free_dynamics_; }
  std::optional<Mlp>& target_encoder() { return target_; }
  const std::optional<Mlp>& target_encoder() const { return target_; }

  void save(const std::filesystem::path& path, const nlohmann::json& extra_meta = {}) const;
  static WorldModel load(const std::filesystem::path& path);

private:
  void check_latent(const char* op, const Var& z, const Var& a) const;

  ModelConfig config_;
  std::size_t observation_size_ = 0;
  std::size_t action_size_ = 0;
  Mlp encoder_;
  Mlp query_;
  Mlp dynamics_;
  Mlp free_dynamics_;  // hybrid: unconstrained block
  std::optional<Mlp> target_;
};

}  // namespace plsm
