#pragma once

// Run configuration: INI-style "key = value" under [sections]. One file fully
// describes a run; command-line overrides use "section.key=value".

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "artstvg/metrics.hpp"
#include "artstvg/synthworld.hpp"
#include "artstvg/training.hpp"

namespace artstvg {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  WorldConfig world;
  ModelConfig model;  // grid and channel sizes follow `world`
  TrainConfig train;
  std::uint64_t seed = 0;
  std::size_t episodes = 64;       // episodes written by gen
  std::size_t eval_episodes = 16;  // held-out episodes for eval/ablate when no test file is given
  std::string data_dir = ".";
  std::string train_data;  // dataset file (relative paths resolve against data_dir)
  std::string test_data;
  std::string checkpoint;  // model checkpoint for eval/ground
  std::string out;

  /// World used to generate test episodes (defaults to `world`).
  WorldConfig test_world;
  bool test_world_set = false;

  AblationGrid grid;
  std::vector<std::uint64_t> ablation_seeds = {1, 2, 3};

  /// Keeps the encoder's grid geometry in sync with the world and validates.
  void finalize();
};

/// Parses INI text. `overrides` are applied on top ("section.key" -> value).
RunConfig parse_config(const std::string& text,
                       const std::map<std::string, std::string>& overrides = {});
RunConfig load_config(const std::string& path,
                      const std::map<std::string, std::string>& overrides = {});
/// Config with every default and only the overrides applied.
RunConfig default_config(const std::map<std::string, std::string>& overrides = {});

/// Canonical INI rendering of every key (parse_config(to_ini(c)) == c).
std::string to_ini(const RunConfig& config);

std::string resolve_data_path(const RunConfig& config, const std::string& path);

}  // namespace artstvg
