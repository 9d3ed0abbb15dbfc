#include "plsm/training.hpp"

#include "plsm/adam.hpp"
#include "plsm/rng.hpp"

#include <algorithm>
#include <charconv>
#include <numeric>
#include <sstream>

namespace plsm {

std::string to_string(NegativeMode mode) { return mode == NegativeMode::single ? "single" : "all"; }

NegativeMode negative_mode_from_string(const std::string& name) {
  if (name == "single") return NegativeMode::single;
  if (name == "all") return NegativeMode::all;
  throw std::invalid_argument("train.negatives: expected 'single' or 'all', got '" + name + "'");
}

void TrainConfig::validate() const {
  if (batch_size < 2) throw std::invalid_argument("train.batch_size: must be at least 2, got " + std::to_string(batch_size));
  if (epochs < 0) throw std::invalid_argument("train.epochs: must be non-negative");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("train.learning_rate: must be positive");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"batch_size", batch_size},
          {"epochs", epochs},
          {"learning_rate", learning_rate},
          {"seed", seed},
          {"negatives", to_string(negatives)}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.batch_size = j.at("batch_size").get<int>();
  c.epochs = j.at("epochs").get<int>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.negatives = negative_mode_from_string(j.at("negatives").get<std::string>());
  c.validate();
  return c;
}

Batch make_batch(const TransitionDataset& dataset, std::span<const std::pair<std::size_t, std::size_t>> at) {
  std::vector<std::pair<std::size_t, std::size_t>> next(at.begin(), at.end());
  for (auto& p : next) ++p.second;
  return {dataset.observation_batch(at), dataset.action_batch(at), dataset.observation_batch(next)};
}

std::vector<std::size_t> sample_negatives(std::size_t batch, Rng& rng) {
  if (batch < 2) throw std::invalid_argument("sample_negatives: batch must hold at least 2 samples");
  std::vector<std::size_t> perm(batch);
  // Rejection sampling over uniform permutations gives a uniform derangement;
  // the acceptance rate tends to 1/e.
  for (;;) {
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    rng.shuffle(perm.begin(), perm.end());
    bool fixed_point = false;
    for (std::size_t i = 0; i < batch && !fixed_point; ++i) fixed_point = perm[i] == i;
    if (!fixed_point) return perm;
  }
}

std::vector<std::size_t> sample_negatives(std::size_t batch, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "negatives"));
  return sample_negatives(batch, rng);
}

namespace {

void require_same_shape(const char* op, const Var& a, const Var& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()) +
                     " differ");
  }
}

LossTerms contrastive_from(const WorldModel& model, const Batch& batch, const Negatives& negatives, Var z_pred,
                           Var z_next) {
  if (negatives.mode == NegativeMode::all) return contrastive_loss_all(z_next, z_pred, model.config().margin);
  if (negatives.permutation.size() != batch.size()) {
    throw ShapeError("contrastive_loss: " + std::to_string(negatives.permutation.size()) + " negatives for batch of " +
                     std::to_string(batch.size()));
  }
  Var z_neg = ops::gather_rows(z_next, negatives.permutation);
  return contrastive_loss(z_next, z_pred, z_neg, model.config().margin);
}

/// Adds beta * mean per-row norm of `x` (squared L2, or L1).
void add_penalty(LossTerms& terms, Var x, bool l1, double beta) {
  x.tape().set_scope("penalty_term");
  Var penalty = ops::scale(ops::mean(l1 ? ops::row_l1norm(x) : ops::row_sqnorm(x)), beta);
  terms.values.penalty = penalty.value().item();
  terms.total = ops::add(terms.total, penalty);
  terms.values.total = terms.values.prediction + terms.values.negative + terms.values.penalty;
}

void require_variant(const char* op, const WorldModel& model, std::initializer_list<Variant> allowed) {
  for (Variant v : allowed)
    if (model.variant() == v) return;
  throw std::invalid_argument(std::string(op) + ": not applicable to variant " + to_string(model.variant()));
}

}  // namespace

LossTerms contrastive_loss(Var z_next, Var z_pred, Var z_negative, double margin) {
  require_same_shape("contrastive_loss", z_next, z_pred);
  require_same_shape("contrastive_loss", z_negative, z_pred);
  z_pred.tape().set_scope("prediction_term");
  Var prediction = ops::mean(ops::row_sqnorm(ops::sub(z_next, z_pred)));
  z_pred.tape().set_scope("negative_term");
  Var hinge = ops::maximum(ops::add_scalar(ops::scale(ops::row_sqnorm(ops::sub(z_negative, z_pred)), -1.0), margin), 0.0);
  Var negative = ops::mean(hinge);
  LossTerms out;
  out.total = ops::add(prediction, negative);
  out.values.prediction = prediction.value().item();
  out.values.negative = negative.value().item();
  out.values.total = out.values.prediction + out.values.negative;
  return out;
}

LossTerms contrastive_loss_all(Var z_next, Var z_pred, double margin) {
  require_same_shape("contrastive_loss", z_next, z_pred);
  const std::size_t b = z_pred.rows();
  if (b < 2) throw std::invalid_argument("contrastive_loss: batch must hold at least 2 samples");
  z_pred.tape().set_scope("prediction_term");
  Var prediction = ops::mean(ops::row_sqnorm(ops::sub(z_next, z_pred)));
  z_pred.tape().set_scope("negative_term");
  std::vector<Var> hinges;
  std::vector<std::size_t> shift(b);
  for (std::size_t k = 1; k < b; ++k) {
    for (std::size_t i = 0; i < b; ++i) shift[i] = (i + k) % b;
    Var z_neg = ops::gather_rows(z_next, shift);
    hinges.push_back(
        ops::maximum(ops::add_scalar(ops::scale(ops::row_sqnorm(ops::sub(z_neg, z_pred)), -1.0), margin), 0.0));
  }
  Var negative = ops::mean(ops::concat(hinges));
  LossTerms out;
  out.total = ops::add(prediction, negative);
  out.values.prediction = prediction.value().item();
  out.values.negative = negative.value().item();
  out.values.total = out.values.prediction + out.values.negative;
  return out;
}

LossTerms cwm_loss(Tape& tape, const WorldModel& model, const Batch& batch, const Negatives& negatives) {
  require_variant("cwm_loss", model, {Variant::cwm});
  tape.set_scope("prediction_term");
  Var z = model.encode(tape, tape.constant(batch.observations));
  Var z_next = model.encode(tape, tape.constant(batch.next_observations));
  Var z_pred = model.predict_next(tape, z, tape.constant(batch.actions));
  return contrastive_from(model, batch, negatives, z_pred, z_next);
}

LossTerms plsm_loss(Tape& tape, const WorldModel& model, const Batch& batch, const Negatives& negatives) {
  require_variant("plsm_loss", model, {Variant::plsm, Variant::topk, Variant::weight_decay, Variant::hybrid});
  tape.set_scope("prediction_term");
  Var z = model.encode(tape, tape.constant(batch.observations));
  Var z_next = model.encode(tape, tape.constant(batch.next_observations));
  DeltaPrediction pred = model.predict_delta(tape, z, tape.constant(batch.actions));
  Var z_pred = ops::add(z, pred.delta);
  LossTerms terms = contrastive_from(model, batch, negatives, z_pred, z_next);
  add_penalty(terms, pred.query, false, model.config().beta);
  return terms;
}

LossTerms spr_loss(Tape& tape, const WorldModel& model, const Batch& batch) {
  require_variant("spr_loss", model, {Variant::spr});
  tape.set_scope("prediction_term");
  Var z = model.encode(tape, tape.constant(batch.observations));
  Var target = model.encode_target(tape, tape.constant(batch.next_observations));
  DeltaPrediction pred = model.predict_delta(tape, z, tape.constant(batch.actions));
  Var prediction = ops::mean(ops::row_sqnorm(ops::sub(target, ops::add(z, pred.delta))));
  LossTerms terms;
  terms.total = prediction;
  terms.values.prediction = prediction.value().item();
  add_penalty(terms, pred.query, false, model.config().beta);
  return terms;
}

LossTerms latent_reg_loss(Tape& tape, const WorldModel& model, const Batch& batch, const Negatives& negatives,
                          LatentNorm norm) {
  require_variant("latent_reg_loss", model, {Variant::latent_l1, Variant::latent_l2, Variant::no_query});
  tape.set_scope("prediction_term");
  Var z = model.encode(tape, tape.constant(batch.observations));
  Var z_next = model.encode(tape, tape.constant(batch.next_observations));
  Var z_pred = model.predict_next(tape, z, tape.constant(batch.actions));
  LossTerms terms = contrastive_from(model, batch, negatives, z_pred, z_next);
  add_penalty(terms, z, norm == LatentNorm::l1, model.config().beta);
  return terms;
}

LossTerms objective(Tape& tape, const WorldModel& model, const Batch& batch, const Negatives& negatives) {
  switch (model.variant()) {
    case Variant::cwm: return cwm_loss(tape, model, batch, negatives);
    case Variant::plsm:
    case Variant::topk:
    case Variant::weight_decay:
    case Variant::hybrid: return plsm_loss(tape, model, batch, negatives);
    case Variant::latent_l1: return latent_reg_loss(tape, model, batch, negatives, LatentNorm::l1);
    case Variant::latent_l2:
    case Variant::no_query: return latent_reg_loss(tape, model, batch, negatives, LatentNorm::l2);
    case Variant::spr: return spr_loss(tape, model, batch);
  }
  throw std::logic_error("objective: unhandled variant");
}

void MetricsRecord::append(const std::string& name, double value) {
  for (auto& [n, values] : series_) {
    if (n == name) {
      values.push_back(value);
      return;
    }
  }
  series_.push_back({name, {value}});
}

bool MetricsRecord::has(const std::string& name) const {
  return std::any_of(series_.begin(), series_.end(), [&](const auto& s) { return s.first == name; });
}

const std::vector<double>& MetricsRecord::series(const std::string& name) const {
  for (const auto& [n, values] : series_)
    if (n == name) return values;
  throw std::out_of_range("metrics: no series named '" + name + "'");
}

std::string format_number(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string MetricsRecord::to_csv() const {
  std::ostringstream out;
  std::size_t rows = 0;
  for (std::size_t i = 0; i < series_.size(); ++i) {
    out << (i ? "," : "") << series_[i].first;
    rows = std::max(rows, series_[i].second.size());
  }
  out << '\n';
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < series_.size(); ++i) {
      if (i) out << ',';
      if (r < series_[i].second.size()) out << format_number(series_[i].second[r]);
    }
    out << '\n';
  }
  return out.str();
}

nlohmann::json MetricsRecord::summary() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [n, values] : series_)
    if (!values.empty()) j[n] = values.back();
  return j;
}

MetricsRecord train(WorldModel& model, const TransitionDataset& dataset, const TrainConfig& config,
                    const EpochHook& hook) {
  config.validate();
  if (dataset.observation_size() != model.observation_size() || dataset.action_size() != model.action_size()) {
    throw std::invalid_argument("train: dataset widths (obs " + std::to_string(dataset.observation_size()) + ", action " +
                                std::to_string(dataset.action_size()) + ") do not match the model (obs " +
                                std::to_string(model.observation_size()) + ", action " +
                                std::to_string(model.action_size()) + ")");
  }

  std::vector<std::pair<std::size_t, std::size_t>> transitions;
  transitions.reserve(dataset.transition_count());
  for (std::size_t e = 0; e < dataset.episodes; ++e)
    for (std::size_t t = 0; t + 1 < dataset.steps(); ++t) transitions.emplace_back(e, t);
  if (transitions.size() < 2) throw std::invalid_argument("train: dataset holds fewer than 2 transitions");

  Rng shuffle_rng(derive_seed(config.seed, "shuffle"));
  Rng negative_rng(derive_seed(config.seed, "negatives"));
  Adam adam(AdamConfig{config.learning_rate});

  auto named = model.trainable_parameters();
  std::vector<Tensor*> params;
  for (const auto& p : named) params.push_back(p.tensor);
  std::vector<Tensor*> decayed;
  if (model.variant() == Variant::weight_decay) decayed = model.dynamics_weights();
  const double decay = model.config().weight_decay;

  const auto batch_size = static_cast<std::size_t>(config.batch_size);
  MetricsRecord metrics;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    shuffle_rng.shuffle(transitions.begin(), transitions.end());
    LossBreakdown sum;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < transitions.size(); start += batch_size) {
      const std::size_t end = std::min(transitions.size(), start + batch_size);
      if (end - start < 2) break;
      const Batch batch =
          make_batch(dataset, std::span(transitions).subspan(start, end - start));
      Negatives negatives{config.negatives, {}};
      if (config.negatives == NegativeMode::single && model.variant() != Variant::spr) {
        negatives.permutation = sample_negatives(batch.size(), negative_rng);
      }

      Tape tape;
      LossTerms terms;
      try {
        terms = objective(tape, model, batch, negatives);
        tape.backward(terms.total);
      } catch (const NonFiniteError& e) {
        throw TrainingError("training aborted at epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(batches + 1) + ": " + e.what());
      }

      std::vector<Tensor> grads;
      grads.reserve(params.size());
      for (Tensor* p : params) {
        const Tensor* g = tape.gradient_for(*p);
        grads.push_back(g ? *g : Tensor(p->shape(), 0.0));
      }
      for (Tensor* w : decayed) {
        const auto idx = static_cast<std::size_t>(std::find(params.begin(), params.end(), w) - params.begin());
        for (std::size_t j = 0; j < w->size(); ++j) grads[idx][j] += decay * (*w)[j];
      }
      std::vector<const Tensor*> grad_ptrs;
      for (const Tensor& g : grads) grad_ptrs.push_back(&g);
      try {
        adam.step(params, grad_ptrs);
      } catch (const NonFiniteError& e) {
        throw TrainingError("training aborted at epoch " + std::to_string(epoch) + ": " + e.what());
      }
      if (model.variant() == Variant::spr) model.ema_update(model.config().ema_tau);

      sum.total += terms.values.total;
      sum.prediction += terms.values.prediction;
      sum.negative += terms.values.negative;
      sum.penalty += terms.values.penalty;
      ++batches;
    }
    const double n = static_cast<double>(batches);
    metrics.append("epoch", epoch);
    metrics.append("total", sum.total / n);
    metrics.append("prediction", sum.prediction / n);
    metrics.append("negative", sum.negative / n);
    metrics.append("penalty", sum.penalty / n);
    if (hook) hook(epoch, model, metrics);
  }
  return metrics;
}

}  // namespace plsm
