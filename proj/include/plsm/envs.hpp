#pragma once

#include "plsm/tensor.hpp"

#include <json.hpp>

#include <compare>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace plsm {

enum class EnvKind { heart, wall, shapes };

std::string to_string(EnvKind kind);
EnvKind env_kind_from_string(const std::string& name);

/// Grid environments. Observations are one-hot occupancy channels, one
/// channel per object slot.
struct EnvConfig {
  EnvKind kind = EnvKind::shapes;
  int grid_size = 5;
  /// Object slots (channels); shapes only, 1 for heart and wall.
  int num_objects = 5;
  /// Objects actually placed; 0 means all slots. Fewer than `num_objects`
  /// gives a generalization dataset: the action width is unchanged but
  /// absent objects are never addressed.
  int present_objects = 0;
  /// Observations per episode (actions per episode is one less).
  int episode_length = 21;
  std::uint64_t seed = 0;

  void validate() const;
  int channels() const;
  int present() const;
  int action_count() const;
  std::size_t observation_size() const;

  nlohmann::json to_json() const;
  static EnvConfig from_json(const nlohmann::json& j);

  bool operator==(const EnvConfig&) const = default;
};

struct Position {
  int row = 0;
  int col = 0;
  auto operator<=>(const Position&) const = default;
};

struct EnvState {
  std::vector<Position> positions;
  bool operator==(const EnvState&) const = default;
};

// Cardinal directions, used by wall and shapes actions.
enum Direction : int { kNorth = 0, kEast = 1, kSouth = 2, kWest = 3 };

/// Row/column offset of each of the eight heart actions, clockwise from
/// north: N, NE, E, SE, S, SW, W, NW.
Position heart_offset(int action);
Position cardinal_offset(int direction);

/// Moves one cell in any of eight directions; a move that would leave the grid
/// on either axis leaves the position unchanged.
EnvState heart_step(const EnvState& state, int action, int grid_size);

/// True for cells of the wall: column n/2, rows n/4 through 3n/4.
bool is_wall_cell(Position p, int grid_size);
/// Cardinal move blocked by the grid boundary or the wall.
EnvState wall_step(const EnvState& state, int direction, int grid_size);

/// Moves object `object`; blocked by the boundary or another object.
EnvState shapes_step(const EnvState& state, int object, int direction, int grid_size);

/// Dispatches on `config.kind`. Shapes actions are `object * 4 + direction`.
EnvState env_step(const EnvConfig& config, const EnvState& state, int action);

/// [C, n, n] occupancy tensor; channels of absent objects are all zero.
Tensor render(const EnvState& state, const EnvConfig& config);

bool is_valid_state(const EnvState& state, const EnvConfig& config);

struct TransitionDataset {
  EnvConfig config;
  std::size_t episodes = 0;
  /// [E, T, C, n, n]
  Tensor observations;
  /// [E, T-1, A] one-hot
  Tensor actions;
  /// [E, T, k, 2] object (row, col); (-1, -1) for absent objects.
  std::vector<int> factors;

  std::size_t steps() const { return static_cast<std::size_t>(config.episode_length); }
  std::size_t observation_size() const { return config.observation_size(); }
  std::size_t action_size() const { return static_cast<std::size_t>(config.action_count()); }
  std::size_t transition_count() const { return episodes * (steps() - 1); }

  std::span<const double> observation(std::size_t episode, std::size_t t) const;
  int action_index(std::size_t episode, std::size_t t) const;
  EnvState state(std::size_t episode, std::size_t t) const;
  Position factor(std::size_t episode, std::size_t t, std::size_t object) const;

  /// Rows are flattened observations at the given (episode, t) pairs.
  Tensor observation_batch(std::span<const std::pair<std::size_t, std::size_t>> at) const;
  /// Rows are one-hot actions at the given (episode, t) pairs.
  Tensor action_batch(std::span<const std::pair<std::size_t, std::size_t>> at) const;

  bool operator==(const TransitionDataset&) const = default;
};

/// Random-policy episodes. Episode e draws from its own stream seeded by the
/// config seed and e, so generation order does not matter.
TransitionDataset generate_dataset(const EnvConfig& config, std::size_t num_episodes);

/// Adds i.i.d. N(0, sigma^2) noise to every observation entry.
TransitionDataset corrupt(const TransitionDataset& dataset, double sigma, std::uint64_t seed);

void save_dataset(const TransitionDataset& dataset, const std::filesystem::path& path);
TransitionDataset load_dataset(const std::filesystem::path& path);

}  // namespace plsm
