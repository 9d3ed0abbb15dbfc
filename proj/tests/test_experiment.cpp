#include "plsm/experiment.hpp"
#include "support.hpp"

#include <doctest.h>

#include <cstdlib>

using namespace plsm;

TEST_CASE("config text sets dotted keys") {
  ExperimentConfig c;
  c.merge_text("# comment\nseed = 7\nmodel.variant = cwm  # trailing\n\ntrain.epochs=3\n");
  c.resolve();
  CHECK(c.seed == 7);
  CHECK(c.model.variant == Variant::cwm);
  CHECK(c.train.epochs == 3);
  CHECK(c.train.seed == 7);
}

TEST_CASE("config errors name the offending key") {
  ExperimentConfig c;
  CHECK_THROWS_WITH_AS(c.set("model.colour", "red"), doctest::Contains("model.colour"), ConfigError);
  CHECK_THROWS_WITH_AS(c.set("train.epochs", "ten"), doctest::Contains("train.epochs"), ConfigError);
  CHECK_THROWS_AS(c.merge_text("seed 7\n"), ConfigError);
  ExperimentConfig bad;
  bad.set("model.beta", "-1");
  CHECK_THROWS_AS(bad.resolve(), ConfigError);
  ExperimentConfig horizon;
  horizon.set("eval.horizons", "1,11");
  CHECK_THROWS_AS(horizon.resolve(), ConfigError);
}

TEST_CASE("environment defaults depend on the kind unless set") {
  ExperimentConfig heart;
  heart.set("env.kind", "heart");
  heart.resolve();
  CHECK(heart.env.grid_size == 8);
  CHECK(heart.env.num_objects == 1);

  ExperimentConfig shapes;
  shapes.resolve();
  CHECK(shapes.env.kind == EnvKind::shapes);
  CHECK(shapes.env.grid_size == 5);
  CHECK(shapes.env.num_objects == 5);

  ExperimentConfig custom;
  custom.set("env.kind", "wall");
  custom.set("env.grid_size", "12");
  custom.resolve();
  CHECK(custom.env.grid_size == 12);
}

TEST_CASE("resolved text round-trips") {
  ExperimentConfig c;
  c.set("seed", "3");
  c.set("env.kind", "heart");
  c.set("model.variant", "spr");
  c.set("eval.horizons", "1,2,5");
  c.set("model.beta", "0.25");
  c.resolve();
  const std::string text = c.to_text();
  CHECK(text.rfind("# plsm-lab resolved config, format_version 1", 0) == 0);
  ExperimentConfig back = ExperimentConfig::from_text(text);
  back.resolve();
  CHECK(back.to_text() == text);
  CHECK(back.to_json() == c.to_json());
  CHECK(c.entries().size() == ExperimentConfig::keys().size());
}

TEST_CASE("data streams differ and follow the root seed") {
  ExperimentConfig a, b;
  b.set("seed", "1");
  a.resolve();
  b.resolve();
  CHECK(a.train_data_seed() != a.eval_data_seed());
  CHECK(a.train_data_seed() != a.noise_seed());
  CHECK(a.train_data_seed() != b.train_data_seed());
  CHECK(a.eval_env().episode_length == a.data.eval_episode_length);
}

TEST_CASE("output root honors the environment variable") {
  ::unsetenv("PLSM_LAB_OUT");
  CHECK(output_root("fallback") == std::filesystem::path("fallback"));
  ::setenv("PLSM_LAB_OUT", "/tmp/elsewhere", 1);
  CHECK(output_root("fallback") == std::filesystem::path("/tmp/elsewhere"));
  ::unsetenv("PLSM_LAB_OUT");
}

TEST_CASE("trained cells are cached by resolved config") {
  test::TempDir dir("cells");
  ExperimentConfig c;
  c.set("env.kind", "wall");
  c.set("data.train_episodes", "20");
  c.set("train.epochs", "1");
  c.set("model.latent_dim", "4");
  c.set("model.query_dim", "4");
  c.set("model.hidden_units", "8");
  c.resolve();
  const std::filesystem::path cell_dir = dir.path() / "nested" / "cell";
  const Cell first = train_cell(c, cell_dir);
  CHECK_FALSE(first.cached);
  for (const char* f : {"checkpoint.plsm", "metrics.csv", "summary.json", "config.txt"})
    CHECK(std::filesystem::exists(cell_dir / f));
  const Cell again = train_cell(c, cell_dir);
  CHECK(again.cached);
  CHECK(again.model.config().to_json() == first.model.config().to_json());
  c.set("train.epochs", "2");
  c.resolve();
  CHECK_FALSE(train_cell(c, cell_dir).cached);
}

TEST_CASE("unknown suites are rejected") {
  CHECK_THROWS_AS(suite_base_config("fig9"), ConfigError);
  CHECK(suite_names().size() == 7);
}
