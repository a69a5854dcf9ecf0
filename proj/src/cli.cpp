#include "artstvg/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>

#include <spdlog/sinks/ostream_sink.h>
#include <spdlog/spdlog.h>

#include "CLI11.hpp"

namespace artstvg {

namespace {

constexpr std::uint64_t kTestSalt = 0x7e57'5e7'0000'0001ULL;

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<std::size_t> steps;
  std::vector<std::string> sets;
  // gen
  std::string split = "train";
  std::optional<std::size_t> count;
  // train / eval / ground
  std::string data;
  std::string checkpoint;
  std::string resume;
  bool oracle = false;
  std::size_t index = 0;
  std::optional<std::size_t> frames;
  // ablate
  std::string suite = "grid";
};

std::map<std::string, std::string> overrides(const Options& o) {
  std::map<std::string, std::string> out;
  for (const auto& s : o.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ConfigError("--set expects section.key=value, got '" + s + "'");
    }
    out[s.substr(0, eq)] = s.substr(eq + 1);
  }
  if (o.seed) out["run.seed"] = std::to_string(*o.seed);
  if (o.steps) out["train.steps"] = std::to_string(*o.steps);
  if (const char* dir = std::getenv("ARTSTVG_DATA_DIR"); dir && *dir) out["run.data_dir"] = dir;
  return out;
}

RunConfig resolve(const Options& o) {
  const auto ov = overrides(o);
  return o.config_path.empty() ? default_config(ov) : load_config(o.config_path, ov);
}

std::string pick(const std::string& flag, const std::string& configured, const std::string& fallback) {
  if (!flag.empty()) return flag;
  if (!configured.empty()) return configured;
  return fallback;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write '" + path + "'");
  f << text;
  if (!f) throw std::runtime_error("failed writing '" + path + "'");
}

std::vector<SyntheticEpisode> train_set(const RunConfig& c, const std::string& data_flag) {
  const std::string path = pick(data_flag, c.train_data, "");
  if (!path.empty()) return read_dataset(resolve_data_path(c, path));
  return make_episodes(c.world, c.seed, c.episodes);
}

std::vector<SyntheticEpisode> test_set(const RunConfig& c, const std::string& data_flag) {
  const std::string path = pick(data_flag, c.test_data, "");
  if (!path.empty()) return read_dataset(resolve_data_path(c, path));
  return make_episodes(c.test_world, test_seed(c.seed), c.eval_episodes);
}

Model load_model(const RunConfig& c, const std::string& checkpoint_flag) {
  const std::string path = pick(checkpoint_flag, c.checkpoint, "");
  if (path.empty()) throw std::runtime_error("no checkpoint given (--checkpoint or run.checkpoint)");
  if (!std::filesystem::exists(path)) throw std::runtime_error("checkpoint '" + path + "' not found");
  Model model(c.model, c.seed);
  model.load(TensorArchive::load(path));
  return model;
}

int cmd_gen(const Options& o, std::ostream& out) {
  const RunConfig c = resolve(o);
  const bool test = o.split == "test";
  const std::size_t n = o.count ? *o.count : (test ? c.eval_episodes : c.episodes);
  const auto episodes = test ? make_episodes(c.test_world, test_seed(c.seed), n)
                             : make_episodes(c.world, c.seed, n);
  const std::string path = pick(o.out, "", test ? "test.artge" : "train.artge");
  write_dataset(path, episodes);
  spdlog::info("wrote {} {} episodes to {}", episodes.size(), o.split, path);
  out << path << "\n";
  return kExitOk;
}

int cmd_train(const Options& o, std::ostream& out) {
  RunConfig c = resolve(o);
  auto episodes = train_set(c, o.data);
  if (episodes.empty()) throw std::runtime_error("training set is empty");
  const std::string path = pick(o.out, c.checkpoint, "model.artc");
  TrainConfig tc = c.train;
  tc.seed = c.seed;
  tc.log_path = path + ".csv";
  tc.dump_path = path + ".dump";
  if (tc.checkpoint_every > 0) tc.checkpoint_path = path;
  Model model(c.model, c.seed);
  Trainer trainer(model, tc, std::move(episodes));
  if (!o.resume.empty()) {
    trainer.load_checkpoint(o.resume);
    spdlog::info("resumed from {} at step {}", o.resume, trainer.steps_done());
  }
  write_text(path + ".ini", to_ini(c));
  const std::size_t every = std::max<std::size_t>(1, tc.steps / 20);
  trainer.run([&](const StepRecord& r) {
    if ((r.step + 1) % every == 0 || r.step + 1 == tc.steps) {
      spdlog::info("step {} loss {:.5f} (kl {:.4f}/{:.4f} l1 {:.4f} iou {:.4f})", r.step, r.loss,
                   r.kl_s, r.kl_e, r.l1, r.iou);
    }
  });
  trainer.save_checkpoint(path);
  spdlog::info("saved checkpoint {}", path);
  out << path << "\n";
  return kExitOk;
}

int cmd_eval(const Options& o, std::ostream& out) {
  const RunConfig c = resolve(o);
  const auto episodes = test_set(c, o.data);
  if (episodes.empty()) throw std::runtime_error("evaluation set is empty");
  EvalReport report;
  if (o.oracle) {
    std::vector<TubePrediction> predictions;
    for (const auto& e : episodes) predictions.push_back(oracle_prediction(e));
    report = evaluate_predictions(predictions, episodes);
  } else {
    report = evaluate(load_model(c, o.checkpoint), episodes);
  }
  const std::string path = pick(o.out, "", "eval.json");
  write_text(path, report.to_json() + "\n");
  out << report.to_text();
  return kExitOk;
}

int cmd_ground(const Options& o, std::ostream& out) {
  const RunConfig c = resolve(o);
  const auto episodes = test_set(c, o.data);
  if (o.index >= episodes.size()) {
    throw std::runtime_error("--index " + std::to_string(o.index) + " out of range (" +
                             std::to_string(episodes.size()) + " episodes)");
  }
  const auto& ep = episodes[o.index];
  std::size_t n = ep.length();
  if (o.frames) {
    if (*o.frames == 0 || *o.frames > n) {
      throw std::runtime_error("--frames must be in [1, " + std::to_string(n) + "]");
    }
    n = *o.frames;
  }
  std::vector<std::vector<double>> grids;
  for (std::size_t i = 0; i < n; ++i) grids.push_back(ep.frames[i].grid);
  const Model model = load_model(c, o.checkpoint);
  const auto tube = ground(model, grids, encode_query_tokens(ep, c.model.encoder.text_len));
  if (o.out.empty()) {
    write_tube_jsonl(out, tube);
  } else {
    std::ofstream f(o.out, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write '" + o.out + "'");
    write_tube_jsonl(f, tube);
    out << o.out << "\n";
  }
  return kExitOk;
}

int cmd_ablate(const Options& o, std::ostream& out) {
  const RunConfig c = resolve(o);
  AblationSetup setup;
  setup.base = c.model;
  setup.train = c.train;
  setup.train_episodes = train_set(c, o.data);
  setup.test_episodes = make_episodes(c.test_world, test_seed(c.seed), c.eval_episodes);
  if (!c.test_data.empty()) setup.test_episodes = read_dataset(resolve_data_path(c, c.test_data));
  setup.seeds = c.ablation_seeds;
  std::vector<Variant> variants;
  if (o.suite == "reference") {
    variants = reference_variants(c.model, c.grid.n_s);
  } else {
    variants = expand_grid(c.grid, c.model);
  }
  const auto directions = applicable_directions(reference_directions(c.model), variants);
  spdlog::info("ablation: {} variants x {} seeds", variants.size(), setup.seeds.size());
  const auto result = ablate(variants, setup, directions, [](const AblationRow& r) {
    spdlog::info("{} seed {}: m_tIoU {:.4f} m_vIoU {:.4f}", r.variant, r.seed, r.report.m_tiou,
                 r.report.m_viou);
  });
  const std::string path = pick(o.out, "", "ablation.txt");
  write_text(path, result.to_text());
  write_text(path + ".json", result.to_json() + "\n");
  out << result.to_text();
  return kExitOk;
}

void configure_logging(std::ostream& err) {
  auto sink = std::make_shared<spdlog::sinks::ostream_sink_mt>(err);
  auto logger = std::make_shared<spdlog::logger>("artstvg", sink);
  logger->set_pattern("[%l] %v");
  spdlog::level::level_enum level = spdlog::level::info;
  if (const char* env = std::getenv("ARTSTVG_LOG_LEVEL"); env && *env) {
    level = spdlog::level::from_str(env);
  }
  logger->set_level(level);
  spdlog::set_default_logger(logger);
}

}  // namespace

std::uint64_t test_seed(std::uint64_t seed) { return seed ^ kTestSalt; }

std::vector<SyntheticEpisode> make_episodes(const WorldConfig& world, std::uint64_t seed,
                                            std::size_t count) {
  Rng rng(seed);
  std::vector<SyntheticEpisode> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_episode(world, rng.next_u64()));
  return out;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  configure_logging(err);
  Options o;
  CLI::App app{"Streaming spatio-temporal video grounding on synthetic episodes", "artstvg"};
  app.require_subcommand(1);
  auto common = [&o](CLI::App* sub) {
    sub->add_option("--config", o.config_path, "INI run configuration")->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "Run seed (overrides run.seed)");
    sub->add_option("--out", o.out, "Output path");
    sub->add_option("--set", o.sets, "Config override section.key=value (repeatable)");
  };
  auto* gen = app.add_subcommand("gen", "Generate a synthetic dataset");
  common(gen);
  gen->add_option("--split", o.split, "train or test")->check(CLI::IsMember({"train", "test"}));
  gen->add_option("--count", o.count, "Number of episodes");

  auto* train = app.add_subcommand("train", "Train a model");
  common(train);
  train->add_option("--steps", o.steps, "Optimizer steps (overrides train.steps)");
  train->add_option("--data", o.data, "Training dataset");
  train->add_option("--resume", o.resume, "Resume from a training checkpoint")->check(CLI::ExistingFile);

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  common(eval);
  eval->add_option("--checkpoint", o.checkpoint, "Model checkpoint");
  eval->add_option("--data", o.data, "Evaluation dataset");
  eval->add_flag("--oracle", o.oracle, "Score the ground truth instead of a model");

  auto* ground_cmd = app.add_subcommand("ground", "Ground one episode and emit its tube");
  common(ground_cmd);
  ground_cmd->add_option("--checkpoint", o.checkpoint, "Model checkpoint");
  ground_cmd->add_option("--data", o.data, "Dataset holding the episode");
  ground_cmd->add_option("--index", o.index, "Episode index");
  ground_cmd->add_option("--frames", o.frames, "Use only the first N frames");

  auto* ablate_cmd = app.add_subcommand("ablate", "Train and compare model variants");
  common(ablate_cmd);
  ablate_cmd->add_option("--steps", o.steps, "Optimizer steps per run");
  ablate_cmd->add_option("--data", o.data, "Training dataset");
  ablate_cmd->add_option("--suite", o.suite, "grid (config [ablate]) or reference")
      ->check(CLI::IsMember({"grid", "reference"}));

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    if (gen->parsed()) return cmd_gen(o, out);
    if (train->parsed()) return cmd_train(o, out);
    if (eval->parsed()) return cmd_eval(o, out);
    if (ground_cmd->parsed()) return cmd_ground(o, out);
    if (ablate_cmd->parsed()) return cmd_ablate(o, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitConfig;
}

}  // namespace artstvg
