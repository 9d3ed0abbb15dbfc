#include "plsm/container.hpp"
#include "plsm/envs.hpp"
#include "oracles.hpp"
#include "support.hpp"

#include <doctest.h>

#include <fstream>
#include <set>

using namespace plsm;
using plsm::test::reference_shapes_step;

namespace {

EnvConfig config_for(EnvKind kind, int n, int k = 1, std::uint64_t seed = 0) {
  EnvConfig c;
  c.kind = kind;
  c.grid_size = n;
  c.num_objects = k;
  c.seed = seed;
  return c;
}

}  // namespace

TEST_CASE("heart moves") {
  const EnvState center{{{3, 3}}};
  CHECK(heart_step(center, 2, 8).positions[0] == Position{3, 4});  // east
  const EnvState corner{{{0, 0}}};
  CHECK(heart_step(corner, 7, 8) == corner);  // north-west
  // A diagonal blocked on one axis is a full stop.
  CHECK(heart_step(EnvState{{{0, 3}}}, 1, 8).positions[0] == Position{0, 3});
}

TEST_CASE("heart enumerates exactly nine ground-truth deltas") {
  std::set<std::pair<int, int>> deltas;
  for (int r = 0; r < 8; ++r)
    for (int c = 0; c < 8; ++c)
      for (int a = 0; a < 8; ++a) {
        const Position next = heart_step(EnvState{{{r, c}}}, a, 8).positions[0];
        deltas.emplace(next.row - r, next.col - c);
      }
  CHECK(deltas.size() == 9);
}

TEST_CASE("wall moves") {
  const int n = 8;
  // Wall occupies column 4, rows 2..6.
  CHECK(is_wall_cell({2, 4}, n));
  CHECK(is_wall_cell({6, 4}, n));
  CHECK_FALSE(is_wall_cell({1, 4}, n));
  CHECK_FALSE(is_wall_cell({7, 4}, n));
  CHECK(wall_step(EnvState{{{3, 3}}}, kEast, n).positions[0] == Position{3, 3});
  CHECK(wall_step(EnvState{{{0, 0}}}, kNorth, n).positions[0] == Position{0, 0});
  CHECK(wall_step(EnvState{{{1, 1}}}, kSouth, n).positions[0] == Position{2, 1});
}

TEST_CASE("shapes moves") {
  CHECK(shapes_step(EnvState{{{0, 3}, {4, 4}}}, 0, kNorth, 5).positions[0] == Position{0, 3});
  CHECK(shapes_step(EnvState{{{2, 2}, {2, 3}}}, 0, kEast, 5).positions[0] == Position{2, 2});
  CHECK(shapes_step(EnvState{{{2, 2}, {2, 3}}}, 1, kEast, 5).positions[1] == Position{2, 4});
}

TEST_CASE("shapes matches an independent simulator on 10000 random transitions") {
  Rng rng(2024);
  const int n = 5, k = 3;
  int mismatches = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    std::vector<std::pair<int, int>> objects;
    while (static_cast<int>(objects.size()) < k) {
      const std::pair<int, int> p{static_cast<int>(rng.below(n)), static_cast<int>(rng.below(n))};
      if (std::find(objects.begin(), objects.end(), p) == objects.end()) objects.push_back(p);
    }
    const int object = static_cast<int>(rng.below(k));
    const int direction = static_cast<int>(rng.below(4));
    EnvState state;
    for (const auto& [r, c] : objects) state.positions.push_back({r, c});
    const EnvState next = shapes_step(state, object, direction, n);
    const auto expected = reference_shapes_step(objects, object, direction, n);
    for (int i = 0; i < k; ++i) {
      if (next.positions[i].row != expected[i].first || next.positions[i].col != expected[i].second) {
        ++mismatches;
        break;
      }
    }
  }
  CHECK(mismatches == 0);
}

TEST_CASE("render") {
  const EnvConfig heart = config_for(EnvKind::heart, 4);
  const Tensor obs = render(EnvState{{{1, 2}}}, heart);
  CHECK(obs.shape() == Shape{1, 4, 4});
  CHECK(obs[6] == 1.0);
  double total = 0.0;
  for (double v : obs.data()) total += v;
  CHECK(total == 1.0);

  EnvConfig shapes = config_for(EnvKind::shapes, 5, 3);
  shapes.present_objects = 2;
  const Tensor partial = render(EnvState{{{0, 0}, {1, 1}}}, shapes);
  double channel2 = 0.0;
  for (std::size_t i = 50; i < 75; ++i) channel2 += partial[i];
  CHECK(channel2 == 0.0);
}

TEST_CASE("generated datasets re-render from their factors") {
  const TransitionDataset ds = generate_dataset(config_for(EnvKind::shapes, 5, 5, 3), 100);
  const std::size_t obs = ds.observation_size();
  for (std::size_t e = 0; e < ds.episodes; ++e) {
    for (std::size_t t = 0; t < ds.steps(); ++t) {
      const EnvState s = ds.state(e, t);
      REQUIRE(is_valid_state(s, ds.config));
      const Tensor r = render(s, ds.config);
      const auto stored = ds.observation(e, t);
      REQUIRE(std::equal(r.data().begin(), r.data().end(), stored.begin(), stored.begin() + obs));
    }
  }
}

TEST_CASE("heart dataset transitions follow the oracle") {
  const TransitionDataset ds = generate_dataset(config_for(EnvKind::heart, 8, 1, 5), 500);
  for (std::size_t e = 0; e < ds.episodes; ++e)
    for (std::size_t t = 0; t + 1 < ds.steps(); ++t)
      REQUIRE(heart_step(ds.state(e, t), ds.action_index(e, t), 8) == ds.state(e, t + 1));
}

TEST_CASE("every stored transition is consistent with the step function") {
  for (EnvKind kind : {EnvKind::wall, EnvKind::shapes}) {
    const EnvConfig c = kind == EnvKind::wall ? config_for(kind, 8) : config_for(kind, 5, 5, 1);
    const TransitionDataset ds = generate_dataset(c, 50);
    for (std::size_t e = 0; e < ds.episodes; ++e)
      for (std::size_t t = 0; t + 1 < ds.steps(); ++t)
        REQUIRE(env_step(c, ds.state(e, t), ds.action_index(e, t)) == ds.state(e, t + 1));
  }
}

TEST_CASE("wall datasets never place the dot on the wall") {
  const TransitionDataset ds = generate_dataset(config_for(EnvKind::wall, 8, 1, 2), 200);
  for (std::size_t e = 0; e < ds.episodes; ++e)
    for (std::size_t t = 0; t < ds.steps(); ++t) REQUIRE_FALSE(is_wall_cell(ds.factor(e, t, 0), 8));
}

TEST_CASE("generation is deterministic per seed") {
  const EnvConfig c = config_for(EnvKind::shapes, 5, 5, 7);
  CHECK(generate_dataset(c, 20) == generate_dataset(c, 20));
  CHECK_FALSE(generate_dataset(c, 20) == generate_dataset(config_for(EnvKind::shapes, 5, 5, 8), 20));
  // Episode streams are independent of how many episodes are generated.
  const TransitionDataset small = generate_dataset(c, 3), large = generate_dataset(c, 10);
  CHECK(small.state(2, 5) == large.state(2, 5));
}

TEST_CASE("generalization datasets keep the action width and skip absent objects") {
  EnvConfig c = config_for(EnvKind::shapes, 5, 5, 1);
  const TransitionDataset full = generate_dataset(c, 10);
  c.present_objects = 2;
  const TransitionDataset partial = generate_dataset(c, 200);
  CHECK(partial.action_size() == full.action_size());
  CHECK(partial.action_size() == 20);
  for (std::size_t e = 0; e < partial.episodes; ++e)
    for (std::size_t t = 0; t + 1 < partial.steps(); ++t) REQUIRE(partial.action_index(e, t) / 4 < 2);
  CHECK(partial.factor(0, 0, 3) == Position{-1, -1});
}

TEST_CASE("impossible placements are rejected") {
  EnvConfig c = config_for(EnvKind::shapes, 4, 9);
  CHECK_NOTHROW(c.validate());
  c.num_objects = 10;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = config_for(EnvKind::shapes, 3, 1);
  CHECK_THROWS_AS(generate_dataset(c, 1), std::invalid_argument);
  CHECK_THROWS_AS(env_kind_from_string("maze"), std::invalid_argument);
}

TEST_CASE("corruption adds Gaussian noise of the requested std") {
  EnvConfig c = config_for(EnvKind::shapes, 8, 5, 4);
  const TransitionDataset clean = generate_dataset(c, 400);  // 400*21*5*64 > 1e6 entries
  REQUIRE(clean.observations.size() >= 1000000);
  CHECK(corrupt(clean, 0.0, 1) == clean);
  for (double sigma : {0.1, 0.2}) {
    CAPTURE(sigma);
    const TransitionDataset noisy = corrupt(clean, sigma, 9);
    CHECK(noisy == corrupt(clean, sigma, 9));
    CHECK(noisy.factors == clean.factors);
    CHECK(noisy.actions == clean.actions);
    double sum = 0.0, sq = 0.0;
    const auto n = static_cast<double>(clean.observations.size());
    for (std::size_t i = 0; i < clean.observations.size(); ++i) {
      const double d = noisy.observations[i] - clean.observations[i];
      sum += d;
      sq += d * d;
    }
    const double std = std::sqrt(sq / n - (sum / n) * (sum / n));
    CHECK(std >= sigma * 0.95);
    CHECK(std <= sigma * 1.05);
  }
}

TEST_CASE("dataset files round-trip and report distinct errors") {
  test::TempDir dir("envs_io");
  const TransitionDataset ds = generate_dataset(config_for(EnvKind::shapes, 5, 3, 6), 12);
  const auto path = dir.path() / "data.plsm";
  save_dataset(ds, path);
  CHECK(load_dataset(path) == ds);

  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto expect = [&](std::string corrupted, ContainerErrc code) {
    try {
      decode_container(corrupted);
      FAIL("expected ContainerError");
    } catch (const ContainerError& e) {
      CHECK(e.code() == code);
    }
  };
  std::string bad = bytes;
  bad[0] = 'X';
  expect(bad, ContainerErrc::bad_magic);
  bad = bytes;
  bad[4] = 2;
  expect(bad, ContainerErrc::version_mismatch);
  expect(bytes.substr(0, bytes.size() - 8), ContainerErrc::truncated_payload);
  expect(bytes + std::string(8, '\0'), ContainerErrc::truncated_payload);
  bad = bytes;
  bad[13] = '!';
  expect(bad, ContainerErrc::malformed_header);
  expect(bytes.substr(0, 3), ContainerErrc::bad_magic);

  try {
    load_dataset(dir.path() / "missing.plsm");
    FAIL("expected ContainerError");
  } catch (const ContainerError& e) {
    CHECK(e.code() == ContainerErrc::io);
  }
}
