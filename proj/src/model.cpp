#include "plsm/model.hpp"

#include "plsm/container.hpp"
#include "plsm/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace plsm {

namespace {

constexpr std::pair<Variant, const char*> kVariantNames[] = {
    {Variant::cwm, "cwm"},         {Variant::plsm, "plsm"},
    {Variant::latent_l1, "latent_l1"}, {Variant::latent_l2, "latent_l2"},
    {Variant::no_query, "no_query"}, {Variant::topk, "topk"},
    {Variant::weight_decay, "weight_decay"}, {Variant::hybrid, "hybrid"},
    {Variant::spr, "spr"},
};

std::size_t to_size(int v) { return static_cast<std::size_t>(v); }

}  // namespace

std::string to_string(Variant v) {
  for (const auto& [variant, name] : kVariantNames)
    if (variant == v) return name;
  return "unknown";
}

Variant variant_from_string(const std::string& name) {
  for (const auto& [variant, n] : kVariantNames)
    if (name == n) return variant;
  throw std::invalid_argument("model.variant: unknown variant '" + name + "'");
}

bool uses_query(Variant v) {
  switch (v) {
    case Variant::plsm:
    case Variant::topk:
    case Variant::weight_decay:
    case Variant::hybrid:
    case Variant::spr: return true;
    default: return false;
  }
}

void ModelConfig::validate() const {
  if (latent_dim <= 0) throw std::invalid_argument("model.latent_dim: must be positive");
  if (query_dim <= 0) throw std::invalid_argument("model.query_dim: must be positive");
  if (hidden_units <= 0) throw std::invalid_argument("model.hidden_units: must be positive");
  if (hidden_layers < 0) throw std::invalid_argument("model.hidden_layers: must be non-negative");
  if (!(beta >= 0.0)) throw std::invalid_argument("model.beta: must be non-negative");
  if (!std::isfinite(margin)) throw std::invalid_argument("model.margin: must be finite");
  if (variant == Variant::topk && (topk_k <= 0 || topk_k > query_dim)) {
    throw std::invalid_argument("model.topk_k: must be in [1, query_dim], got " + std::to_string(topk_k));
  }
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("model.weight_decay: must be non-negative");
  if (!(ema_tau >= 0.0 && ema_tau < 1.0)) throw std::invalid_argument("model.ema_tau: must be in [0, 1)");
  if (variant == Variant::hybrid) {
    if (!(hybrid_split > 0.0 && hybrid_split < 1.0)) {
      throw std::invalid_argument("model.hybrid_split: must be in (0, 1)");
    }
    const int p = parsimonious_dim();
    if (p <= 0 || p >= latent_dim) {
      throw std::invalid_argument("model.hybrid_split: leaves an empty latent block for latent_dim " +
                                  std::to_string(latent_dim));
    }
  }
}

int ModelConfig::parsimonious_dim() const {
  return static_cast<int>(std::lround(hybrid_split * static_cast<double>(latent_dim)));
}

nlohmann::json ModelConfig::to_json() const {
  return {{"latent_dim", latent_dim},     {"query_dim", query_dim},   {"hidden_units", hidden_units},
          {"hidden_layers", hidden_layers}, {"beta", beta},           {"margin", margin},
          {"variant", to_string(variant)}, {"topk_k", topk_k},        {"weight_decay", weight_decay},
          {"ema_tau", ema_tau},           {"hybrid_split", hybrid_split}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.latent_dim = j.at("latent_dim").get<int>();
  c.query_dim = j.at("query_dim").get<int>();
  c.hidden_units = j.at("hidden_units").get<int>();
  c.hidden_layers = j.at("hidden_layers").get<int>();
  c.beta = j.at("beta").get<double>();
  c.margin = j.at("margin").get<double>();
  c.variant = variant_from_string(j.at("variant").get<std::string>());
  c.topk_k = j.at("topk_k").get<int>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.ema_tau = j.at("ema_tau").get<double>();
  c.hybrid_split = j.at("hybrid_split").get<double>();
  c.validate();
  return c;
}

Mlp::Mlp(std::size_t input, std::size_t hidden, std::size_t hidden_layers, std::size_t output, Rng& rng) {
  std::size_t fan_in = input;
  for (std::size_t i = 0; i <= hidden_layers; ++i) {
    const std::size_t out = i == hidden_layers ? output : hidden;
    Linear layer{Tensor({fan_in, out}), Tensor({1, out})};
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (double& w : layer.weight.storage()) w = rng.uniform(-bound, bound);
    layers_.push_back(std::move(layer));
    fan_in = out;
  }
}

Var Mlp::forward(Tape& tape, Var x) const {
  if (x.cols() != input_size()) {
    throw ShapeError("mlp: expected input width " + std::to_string(input_size()) + ", got shape " +
                     shape_string(x.shape()));
  }
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    x = ops::add(ops::matmul(x, tape.parameter(layers_[i].weight)), tape.parameter(layers_[i].bias));
    if (i + 1 < layers_.size()) x = ops::relu(x);
  }
  return x;
}

WorldModel::WorldModel(const ModelConfig& config, std::size_t observation_size, std::size_t action_size,
                       std::uint64_t seed)
    : config_(config), observation_size_(observation_size), action_size_(action_size) {
  config_.validate();
  if (observation_size == 0 || action_size == 0) throw std::invalid_argument("world model: empty observation or action");
  const std::size_t z = to_size(config_.latent_dim);
  const std::size_t h = to_size(config_.query_dim);
  const std::size_t hidden = to_size(config_.hidden_units);
  const std::size_t layers = to_size(config_.hidden_layers);

  // Each network draws from its own substream so that equally-shaped heads of
  // different variants start identical under a shared seed.
  Rng enc_rng(derive_seed(seed, "init.encoder"));
  encoder_ = Mlp(observation_size, hidden, layers, z, enc_rng);

  Rng dyn_rng(derive_seed(seed, "init.dynamics"));
  if (uses_query(config_.variant)) {
    Rng query_rng(derive_seed(seed, "init.query"));
    query_ = Mlp(z + action_size, hidden, layers, h, query_rng);
    if (config_.variant == Variant::hybrid) {
      const std::size_t parsimonious = to_size(config_.parsimonious_dim());
      dynamics_ = Mlp(h + action_size, hidden, layers, parsimonious, dyn_rng);
      Rng free_rng(derive_seed(seed, "init.free_dynamics"));
      free_dynamics_ = Mlp(z + action_size, hidden, layers, z - parsimonious, free_rng);
    } else {
      dynamics_ = Mlp(h + action_size, hidden, layers, z, dyn_rng);
    }
  } else {
    dynamics_ = Mlp(z + action_size, hidden, layers, z, dyn_rng);
  }
  if (config_.variant == Variant::spr) target_ = encoder_;
}

void WorldModel::check_latent(const char* op, const Var& z, const Var& a) const {
  if (z.value().rank() != 2 || z.cols() != to_size(config_.latent_dim) || a.value().rank() != 2 ||
      a.cols() != action_size_ || a.rows() != z.rows()) {
    throw ShapeError(std::string(op) + ": latent " + shape_string(z.shape()) + " and action " +
                     shape_string(a.shape()) + " do not match |z|=" + std::to_string(config_.latent_dim) +
                     ", |a|=" + std::to_string(action_size_));
  }
}

Var WorldModel::encode(Tape& tape, Var observations) const {
  if (observations.cols() != observation_size_) {
    throw ShapeError("encode: expected observation width " + std::to_string(observation_size_) + ", got shape " +
                     shape_string(observations.shape()));
  }
  return encoder_.forward(tape, observations);
}

Var WorldModel::encode_target(Tape& tape, Var observations) const {
  if (!target_) throw std::logic_error("encode_target: variant " + to_string(config_.variant) + " has no target encoder");
  return ops::stop_gradient(target_->forward(tape, observations));
}

Var WorldModel::query(Tape& tape, Var z, Var actions) const {
  if (!uses_query(config_.variant)) {
    throw std::logic_error("query: variant " + to_string(config_.variant) + " has no query network");
  }
  check_latent("query", z, actions);
  Var h = query_.forward(tape, ops::concat(z, actions));
  if (config_.variant == Variant::topk) h = ops::topk_mask(h, to_size(config_.topk_k));
  return h;
}

Var WorldModel::delta_from_query(Tape& tape, Var h, Var actions) const {
  if (!uses_query(config_.variant) || config_.variant == Variant::hybrid) {
    throw std::logic_error("delta_from_query: variant " + to_string(config_.variant) +
                           " does not route dynamics through the query alone");
  }
  return dynamics_.forward(tape, ops::concat(h, actions));
}

DeltaPrediction WorldModel::predict_delta(Tape& tape, Var z, Var actions) const {
  check_latent("predict_delta", z, actions);
  DeltaPrediction out;
  if (!uses_query(config_.variant)) {
    out.delta = dynamics_.forward(tape, ops::concat(z, actions));
    return out;
  }
  out.query = query(tape, z, actions);
  if (config_.variant == Variant::hybrid) {
    Var parsimonious = dynamics_.forward(tape, ops::concat(out.query, actions));
    Var unconstrained = free_dynamics_.forward(tape, ops::concat(z, actions));
    out.delta = ops::concat(parsimonious, unconstrained);
  } else {
    out.delta = dynamics_.forward(tape, ops::concat(out.query, actions));
  }
  return out;
}

Var WorldModel::predict_next(Tape& tape, Var z, Var actions) const {
  return ops::add(z, predict_delta(tape, z, actions).delta);
}

Tensor WorldModel::encode(const Tensor& observations) const {
  Tape tape;
  return encode(tape, tape.constant(observations)).value();
}

Tensor WorldModel::query(const Tensor& z, const Tensor& actions) const {
  Tape tape;
  return query(tape, tape.constant(z), tape.constant(actions)).value();
}

Tensor WorldModel::predict_delta(const Tensor& z, const Tensor& actions) const {
  Tape tape;
  return predict_delta(tape, tape.constant(z), tape.constant(actions)).delta.value();
}

Tensor WorldModel::predict_next(const Tensor& z, const Tensor& actions) const {
  Tape tape;
  return predict_next(tape, tape.constant(z), tape.constant(actions)).value();
}

Tensor WorldModel::rollout(const Tensor& observations, std::span<const Tensor> actions) const {
  if (actions.empty()) throw std::invalid_argument("rollout: empty action sequence");
  Tape tape;
  Var z = encode(tape, tape.constant(observations));
  for (const Tensor& a : actions) z = predict_next(tape, z, tape.constant(a));
  return z.value();
}

void WorldModel::ema_update(double tau) {
  if (!target_) throw std::logic_error("ema_update: variant " + to_string(config_.variant) + " has no target encoder");
  if (!(tau >= 0.0 && tau <= 1.0)) throw std::invalid_argument("ema_update: tau must be in [0, 1]");
  auto& target_layers = target_->layers();
  const auto& online_layers = encoder_.layers();
  for (std::size_t i = 0; i < target_layers.size(); ++i) {
    auto blend = [tau](Tensor& dst, const Tensor& src) {
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = tau * dst[j] + (1.0 - tau) * src[j];
    };
    blend(target_layers[i].weight, online_layers[i].weight);
    blend(target_layers[i].bias, online_layers[i].bias);
  }
}

namespace {

void append_named(std::vector<NamedTensor>& out, const std::string& prefix, Mlp& mlp) {
  for (std::size_t i = 0; i < mlp.layers().size(); ++i) {
    out.push_back({prefix + "." + std::to_string(i) + ".weight", &mlp.layers()[i].weight});
    out.push_back({prefix + "." + std::to_string(i) + ".bias", &mlp.layers()[i].bias});
  }
}

}  // namespace

std::vector<NamedTensor> WorldModel::trainable_parameters() {
  std::vector<NamedTensor> out;
  append_named(out, "encoder", encoder_);
  if (!query_.empty()) append_named(out, "query", query_);
  append_named(out, "dynamics", dynamics_);
  if (!free_dynamics_.empty()) append_named(out, "free_dynamics", free_dynamics_);
  return out;
}

std::vector<NamedTensor> WorldModel::all_parameters() {
  std::vector<NamedTensor> out = trainable_parameters();
  if (target_) append_named(out, "target", *target_);
  return out;
}

std::vector<Tensor*> WorldModel::dynamics_weights() {
  std::vector<Tensor*> out;
  for (auto& l : dynamics_.layers()) out.push_back(&l.weight);
  for (auto& l : free_dynamics_.layers()) out.push_back(&l.weight);
  return out;
}

void WorldModel::save(const std::filesystem::path& path, const nlohmann::json& extra_meta) const {
  Container c;
  c.kind = "checkpoint";
  c.meta = {{"variant", to_string(config_.variant)},
            {"model", config_.to_json()},
            {"observation_size", observation_size_},
            {"action_size", action_size_},
            {"config", extra_meta}};
  // all_parameters() only hands out pointers; the copy keeps this const.
  WorldModel copy = *this;
  for (const auto& p : copy.all_parameters()) c.arrays.push_back({p.name, *p.tensor});
  write_container(path, c);
}

WorldModel WorldModel::load(const std::filesystem::path& path) {
  const Container c = read_container(path);
  if (c.kind != "checkpoint") {
    throw ContainerError(ContainerErrc::malformed_header, path.string() + " holds a " + c.kind + ", not a checkpoint");
  }
  ModelConfig config;
  std::size_t obs = 0, act = 0;
  try {
    config = ModelConfig::from_json(c.meta.at("model"));
    obs = c.meta.at("observation_size").get<std::size_t>();
    act = c.meta.at("action_size").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ContainerError(ContainerErrc::malformed_header, std::string("malformed checkpoint header: ") + e.what());
  }
  WorldModel model(config, obs, act, 0);
  for (const auto& p : model.all_parameters()) {
    const Tensor& stored = c.array(p.name);
    if (stored.shape() != p.tensor->shape()) {
      throw ContainerError(ContainerErrc::malformed_header, "checkpoint array " + p.name + " has shape " +
                                                                shape_string(stored.shape()) + ", expected " +
                                                                shape_string(p.tensor->shape()));
    }
    *p.tensor = stored;
  }
  return model;
}

}  // namespace plsm
