#include "plsm/training.hpp"
#include "support.hpp"

#include <doctest.h>

#include <cmath>
#include <map>

using namespace plsm;
using plsm::test::random_tensor;

namespace {

ModelConfig small_config(Variant v, double beta = 0.1) {
  ModelConfig c;
  c.variant = v;
  c.latent_dim = 4;
  c.query_dim = 3;
  c.hidden_units = 8;
  c.hidden_layers = 1;
  c.beta = beta;
  c.topk_k = 2;
  return c;
}

Batch random_batch(std::size_t batch, std::size_t obs, std::size_t act, std::uint64_t seed) {
  Rng rng(seed);
  Batch b{random_tensor({batch, obs}, rng), Tensor({batch, act}), random_tensor({batch, obs}, rng)};
  for (std::size_t r = 0; r < batch; ++r) b.actions.at(r, rng.below(act)) = 1.0;
  return b;
}

Negatives shift_negatives(std::size_t batch) {
  Negatives n;
  for (std::size_t i = 0; i < batch; ++i) n.permutation.push_back((i + 1) % batch);
  return n;
}

/// Encoder that maps every input to `z`.
void constant_encoder(WorldModel& m, const Tensor& z) {
  for (auto& layer : m.encoder().layers()) layer.weight.fill(0.0);
  m.encoder().layers().back().bias = z;
}

LossBreakdown evaluate(const WorldModel& m, const Batch& b, const Negatives& n) {
  Tape tape;
  return objective(tape, m, b, n).values;
}

EnvConfig wall_config(std::uint64_t seed) {
  EnvConfig c;
  c.kind = EnvKind::wall;
  c.grid_size = 8;
  c.num_objects = 1;
  c.seed = seed;
  return c;
}

}  // namespace

TEST_CASE("contrastive loss examples") {
  Tape tape;
  Var z = tape.constant(Tensor::row({0.0, 0.0}));
  SUBCASE("perfect prediction with a far negative") {
    const LossTerms t = contrastive_loss(z, z, tape.constant(Tensor::row({1.0, 0.0})), 1.0);
    CHECK(t.values.total == 0.0);
  }
  SUBCASE("negative at squared distance 0.25") {
    const LossTerms t = contrastive_loss(z, z, tape.constant(Tensor::row({0.3, 0.4})), 1.0);
    CHECK(t.values.total == doctest::Approx(0.75));
    CHECK(t.values.prediction == 0.0);
    CHECK(t.values.negative == doctest::Approx(0.75));
  }
  SUBCASE("shape mismatch") {
    CHECK_THROWS_AS(contrastive_loss(z, z, tape.constant(Tensor::row({0.3, 0.4, 0.0})), 1.0), ShapeError);
  }
}

TEST_CASE("latent norm penalty examples") {
  const Batch b = random_batch(2, 5, 3, 1);
  SUBCASE("L2 of [3, 4] with beta 0.1") {
    ModelConfig c = small_config(Variant::latent_l2);
    c.latent_dim = 2;
    WorldModel m(c, 5, 3, 0);
    constant_encoder(m, Tensor::row({3, 4}));
    CHECK(evaluate(m, b, shift_negatives(2)).penalty == doctest::Approx(2.5));
  }
  SUBCASE("L1 of [3, -4] with beta 0.1") {
    ModelConfig c = small_config(Variant::latent_l1);
    c.latent_dim = 2;
    WorldModel m(c, 5, 3, 0);
    constant_encoder(m, Tensor::row({3, -4}));
    CHECK(evaluate(m, b, shift_negatives(2)).penalty == doctest::Approx(0.7));
  }
}

TEST_CASE("beta zero reduces the regularized objectives to the contrastive loss") {
  const Batch b = random_batch(6, 5, 3, 2);
  const Negatives n = shift_negatives(6);
  for (Variant v : {Variant::plsm, Variant::latent_l1, Variant::latent_l2}) {
    CAPTURE(to_string(v));
    const WorldModel m(small_config(v, 0.0), 5, 3, 1);
    const LossBreakdown l = evaluate(m, b, n);
    CHECK(l.penalty == 0.0);
    CHECK(l.total == l.prediction + l.negative);
  }
  // Same parameters scored through the direct path give the cwm loss.
  const WorldModel l2(small_config(Variant::latent_l2, 0.0), 5, 3, 1);
  ModelConfig cc = small_config(Variant::cwm);
  WorldModel cwm(cc, 5, 3, 1);
  CHECK(evaluate(cwm, b, n).total == evaluate(l2, b, n).total);
}

TEST_CASE("zero query output gives zero penalty") {
  WorldModel m(small_config(Variant::plsm), 5, 3, 2);
  m.query_net().layers().back().weight.fill(0.0);
  m.query_net().layers().back().bias.fill(0.0);
  CHECK(evaluate(m, random_batch(4, 5, 3, 3), shift_negatives(4)).penalty == 0.0);
}

TEST_CASE("term accounting") {
  const Batch b = random_batch(8, 5, 3, 4);
  for (Variant v : {Variant::cwm, Variant::plsm, Variant::latent_l1, Variant::latent_l2, Variant::no_query,
                    Variant::topk, Variant::weight_decay, Variant::hybrid, Variant::spr}) {
    CAPTURE(to_string(v));
    const WorldModel m(small_config(v), 5, 3, 5);
    Tape tape;
    const LossTerms t = objective(tape, m, b, shift_negatives(8));
    CHECK(std::abs(t.values.total - (t.values.prediction + t.values.negative + t.values.penalty)) <= 1e-12);
    CHECK(t.total.value().item() == doctest::Approx(t.values.total).epsilon(1e-12));
  }
}

TEST_CASE("beta strictly increases the plsm loss at fixed parameters") {
  const Batch b = random_batch(8, 5, 3, 6);
  double previous = -1.0;
  for (double beta : {0.0, 0.1, 1.0, 10.0}) {
    const WorldModel m(small_config(Variant::plsm, beta), 5, 3, 7);
    const double total = evaluate(m, b, shift_negatives(8)).total;
    CHECK(total > previous);
    previous = total;
  }
}

TEST_CASE("losses reject other variants") {
  const Batch b = random_batch(4, 5, 3, 8);
  const WorldModel cwm(small_config(Variant::cwm), 5, 3, 0);
  const WorldModel plsm(small_config(Variant::plsm), 5, 3, 0);
  Tape tape;
  CHECK_THROWS_AS(plsm_loss(tape, cwm, b, shift_negatives(4)), std::invalid_argument);
  CHECK_THROWS_AS(cwm_loss(tape, plsm, b, shift_negatives(4)), std::invalid_argument);
  CHECK_THROWS_AS(spr_loss(tape, plsm, b), std::invalid_argument);
  CHECK_THROWS_AS(latent_reg_loss(tape, plsm, b, shift_negatives(4), LatentNorm::l2), std::invalid_argument);
}

TEST_CASE("spr loss") {
  WorldModel m(small_config(Variant::spr), 5, 3, 9);
  Batch b = random_batch(4, 5, 3, 9);
  b.next_observations = b.observations;
  SUBCASE("identical encoders and zero delta leave only the penalty") {
    m.dynamics_net().layers().back().weight.fill(0.0);
    const LossBreakdown l = evaluate(m, b, {});
    CHECK(l.prediction == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(l.negative == 0.0);
    const Tensor h = m.query(m.encode(b.observations), b.actions);
    CHECK(l.total == doctest::Approx(0.1 * squared_norm(h) / 4.0));
  }
  SUBCASE("target parameters get no gradient") {
    const Batch other = random_batch(4, 5, 3, 10);
    Tape tape;
    const LossTerms t = spr_loss(tape, m, other);
    tape.backward(t.total);
    for (const auto& layer : m.target_encoder()->layers()) {
      const Tensor* g = tape.gradient_for(layer.weight);
      if (g != nullptr) CHECK(squared_norm(*g) == 0.0);
    }
  }
  SUBCASE("the target moves the loss value but not the gradient") {
    const Batch other = random_batch(4, 5, 3, 11);
    WorldModel bumped = m;
    bumped.target_encoder()->layers()[0].weight[0] += 1e-3;
    CHECK(evaluate(bumped, other, {}).total != evaluate(m, other, {}).total);
    Tape tape;
    tape.backward(spr_loss(tape, bumped, other).total);
    const Tensor* g = tape.gradient_for(bumped.target_encoder()->layers()[0].weight);
    CHECK((g == nullptr || squared_norm(*g) == 0.0));
  }
}

TEST_CASE("negatives form a derangement") {
  SUBCASE("batch of two swaps") {
    CHECK(sample_negatives(2, std::uint64_t{1}) == std::vector<std::size_t>{1, 0});
  }
  SUBCASE("fixed seed is reproducible") {
    CHECK(sample_negatives(16, std::uint64_t{3}) == sample_negatives(16, std::uint64_t{3}));
  }
  SUBCASE("batch of one is rejected") {
    CHECK_THROWS_AS(sample_negatives(1, std::uint64_t{0}), std::invalid_argument);
  }
  SUBCASE("off-diagonal frequencies are uniform within 3 sigma") {
    const std::size_t n = 8, draws = 10000;
    Rng rng(77);
    std::vector<std::vector<int>> counts(n, std::vector<int>(n, 0));
    for (std::size_t d = 0; d < draws; ++d) {
      const auto p = sample_negatives(n, rng);
      for (std::size_t i = 0; i < n; ++i) {
        REQUIRE(p[i] != i);
        ++counts[i][p[i]];
      }
    }
    const double prob = 1.0 / static_cast<double>(n - 1);
    const double expected = draws * prob;
    const double sigma = std::sqrt(draws * prob * (1.0 - prob));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) CHECK(std::abs(counts[i][j] - expected) <= 3.0 * sigma);
  }
}

TEST_CASE("all-negatives mode averages the hinge over the batch") {
  Tape tape;
  Var z = tape.constant(Tensor::matrix(3, 1, {0.0, 0.5, 2.0}));
  const LossTerms t = contrastive_loss_all(z, z, 1.0);
  // Hinge per ordered pair (i, j != i): max(0, 1 - (z_j - z_i)^2)
  const double pairs[] = {0.75, 0.0, 0.75, 0.0, 0.0, 0.0};
  double mean = 0.0;
  for (double p : pairs) mean += p;
  CHECK(t.values.negative == doctest::Approx(mean / 6.0));
}

TEST_CASE("zero epochs leave the model unchanged") {
  const TransitionDataset ds = generate_dataset(wall_config(1), 5);
  WorldModel m(small_config(Variant::cwm), ds.observation_size(), ds.action_size(), 1);
  const WorldModel before = m;
  TrainConfig tc;
  tc.epochs = 0;
  train(m, ds, tc);
  CHECK(m.encoder().layers()[0].weight == before.encoder().layers()[0].weight);
}

TEST_CASE("training is deterministic per seed") {
  const TransitionDataset ds = generate_dataset(wall_config(2), 20);
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 32;
  for (Variant v : {Variant::plsm, Variant::spr, Variant::weight_decay}) {
    CAPTURE(to_string(v));
    WorldModel a(small_config(v), ds.observation_size(), ds.action_size(), 3);
    WorldModel b(small_config(v), ds.observation_size(), ds.action_size(), 3);
    const MetricsRecord ra = train(a, ds, tc), rb = train(b, ds, tc);
    CHECK(ra.to_csv() == rb.to_csv());
    const auto pa = a.all_parameters(), pb = b.all_parameters();
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(*pa[i].tensor == *pb[i].tensor);
  }
}

TEST_CASE("weight decay shrinks only dynamics weights") {
  const TransitionDataset ds = generate_dataset(wall_config(3), 10);
  ModelConfig heavy = small_config(Variant::weight_decay);
  heavy.weight_decay = 100.0;
  ModelConfig none = heavy;
  none.weight_decay = 0.0;
  TrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 32;
  WorldModel a(heavy, ds.observation_size(), ds.action_size(), 4);
  WorldModel b(none, ds.observation_size(), ds.action_size(), 4);
  train(a, ds, tc);
  train(b, ds, tc);
  CHECK(frobenius_norm(a.dynamics_net().layers()[0].weight) < frobenius_norm(b.dynamics_net().layers()[0].weight));
}

TEST_CASE("metrics record and number formatting") {
  MetricsRecord r;
  r.append("epoch", 0);
  r.append("total", 0.1);
  r.append("epoch", 1);
  CHECK(r.to_csv() == "epoch,total\n0,0.1\n1,\n");
  CHECK(r.summary()["epoch"] == 1.0);
  CHECK(format_number(0.1) == "0.1");
  CHECK(std::stod(format_number(1.0 / 3.0)) == 1.0 / 3.0);
  CHECK_THROWS(r.series("missing"));
}

TEST_CASE("batch size below two is rejected") {
  TrainConfig tc;
  tc.batch_size = 1;
  CHECK_THROWS_AS(tc.validate(), std::invalid_argument);
}

TEST_CASE("non-finite losses abort with the offending term") {
  const TransitionDataset ds = generate_dataset(wall_config(4), 5);
  WorldModel m(small_config(Variant::plsm, 1e308), ds.observation_size(), ds.action_size(), 5);
  // A huge query that the dynamics ignore: only the penalty can overflow.
  for (auto& layer : m.query_net().layers()) layer.bias.fill(1e200);
  m.dynamics_net().layers().front().weight.fill(0.0);
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 16;
  try {
    train(m, ds, tc);
    FAIL("expected TrainingError");
  } catch (const TrainingError& e) {
    INFO(std::string(e.what()));
    CHECK(std::string(e.what()).find("penalty_term") != std::string::npos);
  }
}

TEST_CASE("cwm on the wall environment cuts its training loss by 90 percent in 30 epochs") {
  const TransitionDataset ds = generate_dataset(wall_config(0), 1000);
  ModelConfig mc;
  mc.variant = Variant::cwm;
  WorldModel m(mc, ds.observation_size(), ds.action_size(), 0);
  TrainConfig tc;
  tc.epochs = 30;
  const MetricsRecord r = train(m, ds, tc);
  const auto& loss = r.series("total");
  CHECK(loss.back() <= 0.1 * loss.front());
}
