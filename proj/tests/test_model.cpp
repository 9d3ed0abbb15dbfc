#include "plsm/container.hpp"
#include "plsm/model.hpp"
#include "support.hpp"

#include <doctest.h>

using namespace plsm;
using plsm::test::random_tensor;

namespace {

ModelConfig small_config(Variant v) {
  ModelConfig c;
  c.variant = v;
  c.latent_dim = 6;
  c.query_dim = 5;
  c.hidden_units = 8;
  c.hidden_layers = 1;
  c.topk_k = 2;
  return c;
}

Tensor one_hot_actions(std::size_t batch, std::size_t width, Rng& rng) {
  Tensor a({batch, width});
  for (std::size_t r = 0; r < batch; ++r) a.at(r, rng.below(width)) = 1.0;
  return a;
}

}  // namespace

TEST_CASE("defaults follow the desk-scale table") {
  const ModelConfig c;
  CHECK(c.latent_dim == 32);
  CHECK(c.query_dim == 32);
  CHECK(c.beta == 0.1);
  CHECK(c.margin == 1.0);
  CHECK(c.topk_k == 15);
  CHECK(c.ema_tau == 0.99);
  CHECK(c.variant == Variant::plsm);
}

TEST_CASE("variant names round-trip") {
  for (Variant v : {Variant::cwm, Variant::plsm, Variant::latent_l1, Variant::latent_l2, Variant::no_query,
                    Variant::topk, Variant::weight_decay, Variant::hybrid, Variant::spr}) {
    CHECK(variant_from_string(to_string(v)) == v);
  }
  CHECK_THROWS_AS(variant_from_string("vae"), std::invalid_argument);
}

TEST_CASE("config validation") {
  ModelConfig c = small_config(Variant::topk);
  c.topk_k = 6;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = small_config(Variant::hybrid);
  c.hybrid_split = 1.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = small_config(Variant::spr);
  c.ema_tau = 1.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  CHECK(ModelConfig::from_json(small_config(Variant::hybrid).to_json()).to_json() ==
        small_config(Variant::hybrid).to_json());
}

TEST_CASE("encode shapes and determinism") {
  const WorldModel m(small_config(Variant::plsm), 10, 4, 1);
  Rng rng(1);
  const Tensor obs = random_tensor({3, 10}, rng);
  const Tensor z = m.encode(obs);
  CHECK(z.shape() == Shape{3, 6});
  CHECK(m.encode(obs) == z);
  CHECK_THROWS_AS(m.encode(random_tensor({3, 9}, rng)), ShapeError);
}

TEST_CASE("zero-weight encoder outputs its bias") {
  WorldModel m(small_config(Variant::cwm), 10, 4, 1);
  for (auto& layer : m.encoder().layers()) layer.weight.fill(0.0);
  m.encoder().layers().back().bias = Tensor::row({1, 2, 3, 4, 5, 6});
  Rng rng(2);
  const Tensor z = m.encode(random_tensor({2, 10}, rng));
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < 6; ++c) CHECK(z.at(r, c) == static_cast<double>(c + 1));
}

TEST_CASE("architecture per variant") {
  const std::size_t obs = 10, act = 4;
  SUBCASE("cwm dynamics reads [z; a]") {
    const WorldModel m(small_config(Variant::cwm), obs, act, 0);
    CHECK(m.query_net().empty());
    CHECK(m.dynamics_net().input_size() == 6 + act);
    CHECK_FALSE(m.target_encoder().has_value());
  }
  SUBCASE("plsm dynamics reads [h; a]") {
    const WorldModel m(small_config(Variant::plsm), obs, act, 0);
    CHECK(m.query_net().input_size() == 6 + act);
    CHECK(m.query_net().output_size() == 5);
    CHECK(m.dynamics_net().input_size() == 5 + act);
  }
  SUBCASE("spr carries a target encoder equal to the encoder at init") {
    const WorldModel m(small_config(Variant::spr), obs, act, 0);
    REQUIRE(m.target_encoder().has_value());
    for (std::size_t l = 0; l < m.encoder().layers().size(); ++l)
      CHECK(m.target_encoder()->layers()[l].weight == m.encoder().layers()[l].weight);
  }
  SUBCASE("hybrid splits the delta") {
    const WorldModel m(small_config(Variant::hybrid), obs, act, 0);
    CHECK(m.dynamics_net().output_size() == 3);
    CHECK(m.dynamics_net().input_size() == 5 + act);
    Rng rng(3);
    const Tensor z = random_tensor({2, 6}, rng), a = one_hot_actions(2, act, rng);
    CHECK(m.predict_delta(z, a).shape() == Shape{2, 6});
  }
}

TEST_CASE("topk query keeps the k largest magnitudes") {
  const WorldModel m(small_config(Variant::topk), 10, 4, 3);
  Rng rng(4);
  const Tensor z = random_tensor({5, 6}, rng), a = one_hot_actions(5, 4, rng);
  const Tensor h = m.query(z, a);
  for (std::size_t r = 0; r < 5; ++r) {
    int nonzero = 0;
    for (std::size_t c = 0; c < 5; ++c) nonzero += h.at(r, c) != 0.0;
    CHECK(nonzero <= 2);
  }
}

TEST_CASE("residual prediction and rollout") {
  const WorldModel m(small_config(Variant::plsm), 10, 4, 5);
  Rng rng(5);
  const Tensor obs = random_tensor({3, 10}, rng);
  const Tensor a1 = one_hot_actions(3, 4, rng), a2 = one_hot_actions(3, 4, rng);
  const Tensor z = m.encode(obs);
  const Tensor next = m.predict_next(z, a1);
  const Tensor delta = m.predict_delta(z, a1);
  for (std::size_t i = 0; i < z.size(); ++i) CHECK(next[i] == doctest::Approx(z[i] + delta[i]));
  const Tensor two = m.predict_next(next, a2);
  const Tensor actions[] = {a1, a2};
  CHECK(m.rollout(obs, actions) == two);
  CHECK_THROWS_AS(m.rollout(obs, std::span<const Tensor>{}), std::invalid_argument);
  CHECK_THROWS_AS(m.predict_delta(z, one_hot_actions(3, 5, rng)), ShapeError);
}

TEST_CASE("ema update") {
  WorldModel m(small_config(Variant::spr), 10, 4, 6);
  const Tensor target_before = m.target_encoder()->layers()[0].weight;
  SUBCASE("identical encoders stay identical") {
    m.ema_update(0.99);
    CHECK(m.target_encoder()->layers()[0].weight == target_before);
  }
  SUBCASE("tau blends target and online") {
    for (double& w : m.encoder().layers()[0].weight.storage()) w += 1.0;
    m.ema_update(0.9);
    const Tensor& after = m.target_encoder()->layers()[0].weight;
    for (std::size_t i = 0; i < after.size(); ++i) CHECK(after[i] == doctest::Approx(target_before[i] + 0.1));
  }
  SUBCASE("tau 0 copies the online encoder") {
    for (double& w : m.encoder().layers()[0].weight.storage()) w *= 2.0;
    m.ema_update(0.0);
    CHECK(m.target_encoder()->layers()[0].weight == m.encoder().layers()[0].weight);
  }
  SUBCASE("variants without a target reject ema") {
    WorldModel cwm(small_config(Variant::cwm), 10, 4, 6);
    CHECK_THROWS(cwm.ema_update(0.5));
  }
}

TEST_CASE("target parameters are not trainable") {
  WorldModel m(small_config(Variant::spr), 10, 4, 7);
  for (const auto& p : m.trainable_parameters()) CHECK(p.name.rfind("target.", 0) != 0);
  bool has_target = false;
  for (const auto& p : m.all_parameters()) has_target = has_target || p.name.rfind("target.", 0) == 0;
  CHECK(has_target);
}

TEST_CASE("dynamics weights cover only dynamics matrices") {
  WorldModel m(small_config(Variant::hybrid), 10, 4, 8);
  const auto weights = m.dynamics_weights();
  CHECK(weights.size() == m.dynamics_net().layers().size() + m.free_dynamics_net().layers().size());
  for (Tensor* w : weights) CHECK(w->dim(0) > 1);
}

TEST_CASE("checkpoints round-trip") {
  test::TempDir dir("model_io");
  for (Variant v : {Variant::cwm, Variant::plsm, Variant::hybrid, Variant::spr, Variant::topk}) {
    CAPTURE(to_string(v));
    const WorldModel m(small_config(v), 10, 4, 9);
    const auto path = dir.path() / (to_string(v) + ".plsm");
    m.save(path, {{"note", "x"}});
    const WorldModel back = WorldModel::load(path);
    CHECK(back.variant() == v);
    CHECK(back.config().to_json() == m.config().to_json());
    Rng rng(1);
    const Tensor obs = random_tensor({2, 10}, rng), a = one_hot_actions(2, 4, rng);
    CHECK(back.predict_next(back.encode(obs), a) == m.predict_next(m.encode(obs), a));
    const Container c = read_container(path);
    CHECK(c.kind == "checkpoint");
    CHECK(c.meta.at("variant") == to_string(v));
  }
}
