#pragma once

// Command-line front end: gen, train, eval, ground, ablate.

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "artstvg/config.hpp"

namespace artstvg {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitRuntime = 3;

/// Episodes generated from `seed`; episode i gets its own derived seed, so a
/// longer set extends a shorter one.
std::vector<SyntheticEpisode> make_episodes(const WorldConfig& world, std::uint64_t seed,
                                            std::size_t count);

/// Held-out episodes use a seed stream disjoint from the training one.
std::uint64_t test_seed(std::uint64_t seed);

/// Runs one command. `args` excludes the program name. Returns the exit code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace artstvg
