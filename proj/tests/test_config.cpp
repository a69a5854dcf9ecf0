#include <filesystem>
#include <fstream>

#include "artstvg/config.hpp"
#include "doctest.h"

using namespace artstvg;

namespace {

std::string error_of(const std::string& text, const std::map<std::string, std::string>& overrides = {}) {
  try {
    parse_config(text, overrides);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_SUITE("config") {

TEST_CASE("defaults") {
  const RunConfig c = default_config();
  CHECK(c.model.encoder.width == 32);
  CHECK(c.model.decoder.width == 32);
  CHECK(c.model.encoder.blocks == 2);
  CHECK(c.model.decoder.n_s == 32);
  CHECK(c.model.decoder.blocks == 2);
  CHECK(c.train.loss.weights.lambda_k == 10.0);
  CHECK(c.train.loss.weights.lambda_l == 5.0);
  CHECK(c.train.loss.weights.lambda_u == 3.0);
  CHECK(c.train.learning_rate == 1e-4);
  CHECK(c.train.clip_norm == 1.0);
  CHECK(c.world.grid_h == 8);
  CHECK(c.world.channels == 8);
  CHECK(c.model.encoder.grid_h == c.world.grid_h);
  CHECK(c.model.encoder.raw_channels == c.world.channels);
  CHECK(c.ablation_seeds == std::vector<std::uint64_t>{1, 2, 3});
}

TEST_CASE("sections, enums and lists") {
  const RunConfig c = parse_config(R"(
# comment
[run]
seed = 17
[world]
grid_h = 6
grid_w = 5
frames = 40
[model]
width = 24
heads = 3
n_s = 4
temporal_memory = all
spatial_memory = none
temporal_context = parallel
insert = outgoing
similarity = dot
boundary_threshold = 0.25
[loss]
iou = iou
[train]
learning_rate = 3e-3
shuffle = false
[ablate]
seeds = 4, 5
temporal_memory = selective, none, all
n_s = 1, 8, 32
)");
  CHECK(c.seed == 17);
  CHECK(c.world.frames == 40);
  CHECK(c.model.encoder.grid_h == 6);
  CHECK(c.model.encoder.grid_w == 5);
  CHECK(c.model.decoder.width == 24);
  CHECK(c.model.decoder.heads == 3);
  CHECK(c.model.decoder.n_s == 4);
  CHECK(c.model.decoder.temporal_memory == MemoryMode::kAll);
  CHECK(c.model.decoder.spatial_memory == MemoryMode::kNone);
  CHECK(c.model.decoder.temporal_context == TemporalContext::kParallel);
  CHECK(c.model.decoder.insert == InsertMode::kOutgoing);
  CHECK(c.model.decoder.similarity == Similarity::kDot);
  REQUIRE(c.model.decoder.boundary.absolute_threshold.has_value());
  CHECK(*c.model.decoder.boundary.absolute_threshold == 0.25);
  CHECK(c.train.loss.iou == IouLoss::kIou);
  CHECK(c.train.learning_rate == 3e-3);
  CHECK_FALSE(c.train.shuffle);
  CHECK(c.ablation_seeds == std::vector<std::uint64_t>{4, 5});
  CHECK(c.grid.temporal_memory.size() == 3);
  CHECK(c.grid.n_s == std::vector<std::size_t>{1, 8, 32});
}

TEST_CASE("overrides win over the file") {
  const RunConfig c = parse_config("[model]\nn_s = 4\n", {{"model.n_s", "9"}, {"run.seed", "3"}});
  CHECK(c.model.decoder.n_s == 9);
  CHECK(c.seed == 3);
}

TEST_CASE("errors name the line or the field") {
  CHECK(error_of("[model]\nwidth = 32\nthis line is broken\n").find("line 3") != std::string::npos);
  CHECK(error_of("[model]\nwidht = 32\n").find("unknown config field 'model.widht'") != std::string::npos);
  CHECK(error_of("[bogus]\nx = 1\n").find("bogus.x") != std::string::npos);
  const std::string bad = error_of("[model]\nn_s = many\n");
  CHECK(bad.find("model.n_s") != std::string::npos);
  CHECK(bad.find("many") != std::string::npos);
  CHECK(error_of("[model]\ntemporal_memory = sometimes\n").find("sometimes") != std::string::npos);
  CHECK(error_of("seed = 3\n") != "");
  CHECK(error_of("", {{"model.nope", "1"}}).find("model.nope") != std::string::npos);
  CHECK(error_of("", {{"train.learning_rate", "fast"}}) != "");
}

TEST_CASE("invalid dimensions are config errors") {
  CHECK(error_of("[model]\nn_s = 0\n") != "");
  CHECK(error_of("[model]\nwidth = 30\nheads = 4\n") != "");
  CHECK(error_of("[world]\nframes = 2\n") != "");
  CHECK(error_of("[model]\ntext_len = 0\n") != "");
  CHECK(error_of("[model]\ndecoder_blocks = 0\n") != "");
  CHECK(error_of("[world]\nevents = 0\n") != "");
}

TEST_CASE("canonical rendering round trips") {
  RunConfig c = parse_config(R"(
[train]
learning_rate = 0.000123456789012345
[model]
roi_tau = 0.0731
boundary_alpha = 1.25
[loss]
target_sigma = 0
[world]
noise = 0.3333333333333333
)");
  const RunConfig d = parse_config(to_ini(c));
  CHECK(to_ini(d) == to_ini(c));
  CHECK(d.train.learning_rate == c.train.learning_rate);
  CHECK(d.model.decoder.roi_tau == 0.0731);
  CHECK(d.world.noise == c.world.noise);

  c = parse_config("[test_world]\nframes = 64\n");
  CHECK(c.test_world_set);
  CHECK(c.test_world.frames == 64);
  CHECK(to_ini(c).find("[test_world]") != std::string::npos);
  CHECK(to_ini(default_config()).find("[test_world]") == std::string::npos);
}

TEST_CASE("files and data paths") {
  const auto dir = std::filesystem::temp_directory_path() / "artstvg_test_cfg";
  std::filesystem::create_directories(dir);
  const auto path = (dir / "run.ini").string();
  {
    std::ofstream f(path);
    f << "[run]\ndata_dir = " << dir.string() << "\ntrain_data = a.artge\n";
  }
  const RunConfig c = load_config(path);
  CHECK(resolve_data_path(c, c.train_data) == (dir / "a.artge").string());
  CHECK(resolve_data_path(c, "/abs/b.artge") == "/abs/b.artge");
  CHECK_THROWS_AS(load_config((dir / "missing.ini").string()), ConfigError);
}

}  // TEST_SUITE
