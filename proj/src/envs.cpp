#include "plsm/envs.hpp"

#include "plsm/container.hpp"
#include "plsm/rng.hpp"

#include <algorithm>
#include <stdexcept>

namespace plsm {

std::string to_string(EnvKind kind) {
  switch (kind) {
    case EnvKind::heart: return "heart";
    case EnvKind::wall: return "wall";
    case EnvKind::shapes: return "shapes";
  }
  return "unknown";
}

EnvKind env_kind_from_string(const std::string& name) {
  if (name == "heart") return EnvKind::heart;
  if (name == "wall") return EnvKind::wall;
  if (name == "shapes") return EnvKind::shapes;
  throw std::invalid_argument("env.kind: unknown environment '" + name + "' (expected heart, wall or shapes)");
}

void EnvConfig::validate() const {
  if (grid_size < 4) throw std::invalid_argument("env.grid_size: must be at least 4, got " + std::to_string(grid_size));
  if (episode_length < 2) {
    throw std::invalid_argument("env.episode_length: must be at least 2, got " + std::to_string(episode_length));
  }
  if (kind == EnvKind::shapes) {
    if (num_objects < 1 || num_objects > 9) {
      throw std::invalid_argument("env.num_objects: must be in [1, 9], got " + std::to_string(num_objects));
    }
    if (present_objects < 0 || present_objects > num_objects) {
      throw std::invalid_argument("env.present_objects: must be in [0, num_objects], got " +
                                  std::to_string(present_objects));
    }
    if (present() > grid_size * grid_size) {
      throw std::invalid_argument("env.num_objects: cannot place " + std::to_string(present()) + " objects on a " +
                                  std::to_string(grid_size) + "x" + std::to_string(grid_size) + " grid");
    }
  } else if (num_objects != 1 || (present_objects != 0 && present_objects != 1)) {
    throw std::invalid_argument("env.num_objects: " + to_string(kind) + " has exactly one object");
  }
}

int EnvConfig::channels() const { return kind == EnvKind::shapes ? num_objects : 1; }

int EnvConfig::present() const {
  if (kind != EnvKind::shapes) return 1;
  return present_objects == 0 ? num_objects : present_objects;
}

int EnvConfig::action_count() const {
  switch (kind) {
    case EnvKind::heart: return 8;
    case EnvKind::wall: return 4;
    case EnvKind::shapes: return 4 * num_objects;
  }
  return 0;
}

std::size_t EnvConfig::observation_size() const {
  return static_cast<std::size_t>(channels()) * static_cast<std::size_t>(grid_size * grid_size);
}

nlohmann::json EnvConfig::to_json() const {
  return {{"kind", to_string(kind)},
          {"grid_size", grid_size},
          {"num_objects", num_objects},
          {"present_objects", present_objects},
          {"episode_length", episode_length},
          {"seed", seed}};
}

EnvConfig EnvConfig::from_json(const nlohmann::json& j) {
  EnvConfig c;
  c.kind = env_kind_from_string(j.at("kind").get<std::string>());
  c.grid_size = j.at("grid_size").get<int>();
  c.num_objects = j.at("num_objects").get<int>();
  c.present_objects = j.at("present_objects").get<int>();
  c.episode_length = j.at("episode_length").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

Position heart_offset(int action) {
  static constexpr Position kOffsets[8] = {{-1, 0}, {-1, 1}, {0, 1}, {1, 1}, {1, 0}, {1, -1}, {0, -1}, {-1, -1}};
  if (action < 0 || action >= 8) throw std::out_of_range("heart action must be in [0, 8)");
  return kOffsets[action];
}

Position cardinal_offset(int direction) {
  static constexpr Position kOffsets[4] = {{-1, 0}, {0, 1}, {1, 0}, {0, -1}};
  if (direction < 0 || direction >= 4) throw std::out_of_range("direction must be in [0, 4)");
  return kOffsets[direction];
}

namespace {

bool inside(Position p, int n) { return p.row >= 0 && p.row < n && p.col >= 0 && p.col < n; }

Position moved(Position p, Position d) { return {p.row + d.row, p.col + d.col}; }

}  // namespace

EnvState heart_step(const EnvState& state, int action, int grid_size) {
  EnvState next = state;
  const Position target = moved(state.positions.at(0), heart_offset(action));
  if (inside(target, grid_size)) next.positions[0] = target;
  return next;
}

bool is_wall_cell(Position p, int grid_size) {
  return p.col == grid_size / 2 && p.row >= grid_size / 4 && p.row <= 3 * grid_size / 4;
}

EnvState wall_step(const EnvState& state, int direction, int grid_size) {
  EnvState next = state;
  const Position target = moved(state.positions.at(0), cardinal_offset(direction));
  if (inside(target, grid_size) && !is_wall_cell(target, grid_size)) next.positions[0] = target;
  return next;
}

EnvState shapes_step(const EnvState& state, int object, int direction, int grid_size) {
  EnvState next = state;
  const Position target = moved(state.positions.at(static_cast<std::size_t>(object)), cardinal_offset(direction));
  if (!inside(target, grid_size)) return next;
  for (std::size_t i = 0; i < state.positions.size(); ++i) {
    if (static_cast<int>(i) != object && state.positions[i] == target) return next;
  }
  next.positions[static_cast<std::size_t>(object)] = target;
  return next;
}

EnvState env_step(const EnvConfig& config, const EnvState& state, int action) {
  switch (config.kind) {
    case EnvKind::heart: return heart_step(state, action, config.grid_size);
    case EnvKind::wall: return wall_step(state, action, config.grid_size);
    case EnvKind::shapes: return shapes_step(state, action / 4, action % 4, config.grid_size);
  }
  return state;
}

Tensor render(const EnvState& state, const EnvConfig& config) {
  const auto n = static_cast<std::size_t>(config.grid_size);
  Tensor out({static_cast<std::size_t>(config.channels()), n, n});
  for (std::size_t c = 0; c < state.positions.size(); ++c) {
    const Position p = state.positions[c];
    out[c * n * n + static_cast<std::size_t>(p.row) * n + static_cast<std::size_t>(p.col)] = 1.0;
  }
  return out;
}

bool is_valid_state(const EnvState& state, const EnvConfig& config) {
  if (static_cast<int>(state.positions.size()) != config.present()) return false;
  for (std::size_t i = 0; i < state.positions.size(); ++i) {
    const Position p = state.positions[i];
    if (!inside(p, config.grid_size)) return false;
    if (config.kind == EnvKind::wall && is_wall_cell(p, config.grid_size)) return false;
    for (std::size_t j = 0; j < i; ++j)
      if (state.positions[j] == p) return false;
  }
  return true;
}

std::span<const double> TransitionDataset::observation(std::size_t episode, std::size_t t) const {
  const std::size_t d = observation_size();
  return observations.data().subspan((episode * steps() + t) * d, d);
}

int TransitionDataset::action_index(std::size_t episode, std::size_t t) const {
  const std::size_t a = action_size();
  const auto row = actions.data().subspan((episode * (steps() - 1) + t) * a, a);
  return static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
}

Position TransitionDataset::factor(std::size_t episode, std::size_t t, std::size_t object) const {
  const auto k = static_cast<std::size_t>(config.channels());
  const std::size_t base = ((episode * steps() + t) * k + object) * 2;
  return {factors[base], factors[base + 1]};
}

EnvState TransitionDataset::state(std::size_t episode, std::size_t t) const {
  EnvState s;
  for (int i = 0; i < config.present(); ++i) s.positions.push_back(factor(episode, t, static_cast<std::size_t>(i)));
  return s;
}

Tensor TransitionDataset::observation_batch(std::span<const std::pair<std::size_t, std::size_t>> at) const {
  const std::size_t d = observation_size();
  Tensor out({at.size(), d});
  for (std::size_t i = 0; i < at.size(); ++i) {
    const auto src = observation(at[i].first, at[i].second);
    std::copy(src.begin(), src.end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  return out;
}

Tensor TransitionDataset::action_batch(std::span<const std::pair<std::size_t, std::size_t>> at) const {
  const std::size_t a = action_size();
  Tensor out({at.size(), a});
  for (std::size_t i = 0; i < at.size(); ++i) out.at(i, static_cast<std::size_t>(action_index(at[i].first, at[i].second))) = 1.0;
  return out;
}

namespace {

EnvState sample_initial_state(const EnvConfig& config, Rng& rng) {
  const int n = config.grid_size;
  EnvState s;
  while (static_cast<int>(s.positions.size()) < config.present()) {
    const auto cell = static_cast<int>(rng.below(static_cast<std::uint64_t>(n * n)));
    const Position p{cell / n, cell % n};
    if (config.kind == EnvKind::wall && is_wall_cell(p, n)) continue;
    if (std::find(s.positions.begin(), s.positions.end(), p) != s.positions.end()) continue;
    s.positions.push_back(p);
  }
  return s;
}

int sample_action(const EnvConfig& config, Rng& rng) {
  if (config.kind == EnvKind::shapes) return static_cast<int>(rng.below(static_cast<std::uint64_t>(4 * config.present())));
  return static_cast<int>(rng.below(static_cast<std::uint64_t>(config.action_count())));
}

}  // namespace

TransitionDataset generate_dataset(const EnvConfig& config, std::size_t num_episodes) {
  config.validate();
  if (num_episodes == 0) throw std::invalid_argument("generate_dataset: num_episodes must be positive");
  if (config.kind == EnvKind::wall) {
    int free_cells = 0;
    for (int r = 0; r < config.grid_size; ++r)
      for (int c = 0; c < config.grid_size; ++c) free_cells += is_wall_cell({r, c}, config.grid_size) ? 0 : 1;
    if (free_cells < 1) throw std::invalid_argument("generate_dataset: no free cell for the wall agent");
  }

  const auto T = static_cast<std::size_t>(config.episode_length);
  const auto C = static_cast<std::size_t>(config.channels());
  const auto n = static_cast<std::size_t>(config.grid_size);
  const auto A = static_cast<std::size_t>(config.action_count());
  const std::size_t frame = C * n * n;

  TransitionDataset ds;
  ds.config = config;
  ds.episodes = num_episodes;
  ds.observations = Tensor({num_episodes, T, C, n, n});
  ds.actions = Tensor({num_episodes, T - 1, A});
  ds.factors.assign(num_episodes * T * C * 2, -1);

  const std::uint64_t episode_root = derive_seed(config.seed, "episode");
  for (std::size_t e = 0; e < num_episodes; ++e) {
    Rng rng(episode_root ^ static_cast<std::uint64_t>(e));
    EnvState s = sample_initial_state(config, rng);
    for (std::size_t t = 0; t < T; ++t) {
      const Tensor frame_t = render(s, config);
      std::copy(frame_t.data().begin(), frame_t.data().end(),
                ds.observations.data().begin() + static_cast<std::ptrdiff_t>((e * T + t) * frame));
      for (std::size_t k = 0; k < s.positions.size(); ++k) {
        const std::size_t base = ((e * T + t) * C + k) * 2;
        ds.factors[base] = s.positions[k].row;
        ds.factors[base + 1] = s.positions[k].col;
      }
      if (t + 1 == T) break;
      const int action = sample_action(config, rng);
      ds.actions[(e * (T - 1) + t) * A + static_cast<std::size_t>(action)] = 1.0;
      s = env_step(config, s, action);
    }
  }
  return ds;
}

TransitionDataset corrupt(const TransitionDataset& dataset, double sigma, std::uint64_t seed) {
  if (!(sigma >= 0.0)) throw std::invalid_argument("corrupt: sigma must be non-negative");
  TransitionDataset out = dataset;
  if (sigma == 0.0) return out;
  Rng rng(derive_seed(seed, "noise"));
  for (double& v : out.observations.storage()) v += sigma * rng.normal();
  return out;
}

void save_dataset(const TransitionDataset& dataset, const std::filesystem::path& path) {
  Container c;
  c.kind = "dataset";
  c.meta = {{"env", dataset.config.to_json()}, {"episodes", dataset.episodes}};
  std::vector<double> factors(dataset.factors.begin(), dataset.factors.end());
  const auto T = dataset.steps();
  const auto k = static_cast<std::size_t>(dataset.config.channels());
  c.arrays.push_back({"observations", dataset.observations});
  c.arrays.push_back({"actions", dataset.actions});
  c.arrays.push_back({"factors", Tensor({dataset.episodes, T, k, 2}, std::move(factors))});
  write_container(path, c);
}

TransitionDataset load_dataset(const std::filesystem::path& path) {
  const Container c = read_container(path);
  if (c.kind != "dataset") {
    throw ContainerError(ContainerErrc::malformed_header, path.string() + " holds a " + c.kind + ", not a dataset");
  }
  TransitionDataset ds;
  try {
    ds.config = EnvConfig::from_json(c.meta.at("env"));
    ds.episodes = c.meta.at("episodes").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ContainerError(ContainerErrc::malformed_header, std::string("malformed dataset header: ") + e.what());
  }
  ds.observations = c.array("observations");
  ds.actions = c.array("actions");
  const Tensor& f = c.array("factors");
  ds.factors.reserve(f.size());
  for (double v : f.data()) ds.factors.push_back(static_cast<int>(v));

  const auto T = ds.steps();
  const auto C = static_cast<std::size_t>(ds.config.channels());
  const auto n = static_cast<std::size_t>(ds.config.grid_size);
  if (ds.observations.shape() != Shape{ds.episodes, T, C, n, n} ||
      ds.actions.shape() != Shape{ds.episodes, T - 1, ds.action_size()} ||
      f.shape() != Shape{ds.episodes, T, C, 2}) {
    throw ContainerError(ContainerErrc::malformed_header, "dataset arrays do not match the stored env config");
  }
  return ds;
}

}  // namespace plsm
