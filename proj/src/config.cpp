#include "artstvg/config.hpp"

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

namespace artstvg {

namespace {

struct Field {
  std::string name;
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

[[noreturn]] void bad_value(const std::string& field, const std::string& value,
                            const std::string& expected) {
  throw ConfigError("config field '" + field + "': invalid value '" + value + "' (expected " +
                    expected + ")");
}

std::uint64_t parse_u64(const std::string& field, const std::string& v) {
  std::uint64_t out = 0;
  const auto* end = v.data() + v.size();
  const auto r = std::from_chars(v.data(), end, out);
  if (v.empty() || r.ec != std::errc() || r.ptr != end) bad_value(field, v, "a non-negative integer");
  return out;
}

double parse_double(const std::string& field, const std::string& v) {
  double out = 0.0;
  const auto* end = v.data() + v.size();
  const auto r = std::from_chars(v.data(), end, out);
  if (v.empty() || r.ec != std::errc() || r.ptr != end || !std::isfinite(out)) {
    bad_value(field, v, "a finite number");
  }
  return out;
}

bool parse_bool(const std::string& field, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  bad_value(field, v, "true or false");
}

std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

MemoryMode parse_mode(const std::string& field, const std::string& v) {
  if (v == "none") return MemoryMode::kNone;
  if (v == "all") return MemoryMode::kAll;
  if (v == "selective") return MemoryMode::kSelective;
  bad_value(field, v, "none, all or selective");
}

TemporalContext parse_context(const std::string& field, const std::string& v) {
  if (v == "cascaded") return TemporalContext::kCascaded;
  if (v == "parallel") return TemporalContext::kParallel;
  bad_value(field, v, "cascaded or parallel");
}

struct Registry {
  std::vector<Field> fields;

  void size(const std::string& name, std::size_t& ref) {
    fields.push_back({name, [&ref, name](const std::string& v) { ref = parse_u64(name, v); },
                      [&ref] { return std::to_string(ref); }});
  }
  void u64(const std::string& name, std::uint64_t& ref) {
    fields.push_back({name, [&ref, name](const std::string& v) { ref = parse_u64(name, v); },
                      [&ref] { return std::to_string(ref); }});
  }
  void real(const std::string& name, double& ref) {
    fields.push_back({name, [&ref, name](const std::string& v) { ref = parse_double(name, v); },
                      [&ref] { return format_double(ref); }});
  }
  void flag(const std::string& name, bool& ref) {
    fields.push_back({name, [&ref, name](const std::string& v) { ref = parse_bool(name, v); },
                      [&ref] { return std::string(ref ? "true" : "false"); }});
  }
  void text(const std::string& name, std::string& ref) {
    fields.push_back({name, [&ref](const std::string& v) { ref = v; }, [&ref] { return ref; }});
  }
  void mode(const std::string& name, MemoryMode& ref) {
    fields.push_back({name, [&ref, name](const std::string& v) { ref = parse_mode(name, v); },
                      [&ref] { return mode_name(ref); }});
  }
  void world(const std::string& s, WorldConfig& w, std::function<void()> touched = {}) {
    auto wrap = [this, touched](std::size_t first) {
      if (!touched) return;
      for (std::size_t i = first; i < fields.size(); ++i) {
        auto inner = fields[i].set;
        fields[i].set = [inner, touched](const std::string& v) {
          inner(v);
          touched();
        };
      }
    };
    const std::size_t first = fields.size();
    size(s + ".grid_h", w.grid_h);
    size(s + ".grid_w", w.grid_w);
    size(s + ".channels", w.channels);
    size(s + ".frames", w.frames);
    size(s + ".actors", w.actors);
    size(s + ".actor_classes", w.actor_classes);
    size(s + ".actions", w.actions);
    size(s + ".events", w.events);
    size(s + ".event_min_len", w.event_min_len);
    size(s + ".event_max_len", w.event_max_len);
    size(s + ".min_gap", w.min_gap);
    real(s + ".box_min", w.box_min);
    real(s + ".box_max", w.box_max);
    real(s + ".max_step", w.max_step);
    real(s + ".identity_visibility", w.identity_visibility);
    real(s + ".action_visibility", w.action_visibility);
    real(s + ".noise", w.noise);
    wrap(first);
  }
};

Registry registry(RunConfig& c) {
  Registry r;
  r.u64("run.seed", c.seed);
  r.text("run.out", c.out);
  r.text("run.checkpoint", c.checkpoint);
  r.text("run.data_dir", c.data_dir);
  r.text("run.train_data", c.train_data);
  r.text("run.test_data", c.test_data);
  r.size("run.episodes", c.episodes);
  r.size("run.eval_episodes", c.eval_episodes);

  r.world("world", c.world);
  r.world("test_world", c.test_world, [&c] { c.test_world_set = true; });

  auto& e = c.model.encoder;
  auto& d = c.model.decoder;
  r.size("model.width", e.width);
  r.size("model.heads", e.heads);
  r.size("model.encoder_blocks", e.blocks);
  r.size("model.mlp_ratio", e.mlp_ratio);
  r.size("model.text_len", e.text_len);
  r.size("model.text_width", e.text_width);
  r.size("model.decoder_blocks", d.blocks);
  r.size("model.n_s", d.n_s);
  r.mode("model.spatial_memory", d.spatial_memory);
  r.mode("model.temporal_memory", d.temporal_memory);
  r.fields.push_back({"model.temporal_context",
                      [&d](const std::string& v) { d.temporal_context = parse_context("model.temporal_context", v); },
                      [&d] { return context_name(d.temporal_context); }});
  r.fields.push_back({"model.insert",
                      [&d](const std::string& v) {
                        if (v == "incoming") {
                          d.insert = InsertMode::kIncoming;
                        } else if (v == "outgoing") {
                          d.insert = InsertMode::kOutgoing;
                        } else {
                          bad_value("model.insert", v, "incoming or outgoing");
                        }
                      },
                      [&d] { return std::string(d.insert == InsertMode::kIncoming ? "incoming" : "outgoing"); }});
  r.fields.push_back({"model.similarity",
                      [&d](const std::string& v) {
                        if (v == "cosine") {
                          d.similarity = Similarity::kCosine;
                        } else if (v == "dot") {
                          d.similarity = Similarity::kDot;
                        } else {
                          bad_value("model.similarity", v, "cosine or dot");
                        }
                      },
                      [&d] { return std::string(d.similarity == Similarity::kCosine ? "cosine" : "dot"); }});
  r.real("model.boundary_alpha", d.boundary.alpha);
  r.fields.push_back({"model.boundary_threshold",
                      [&d](const std::string& v) {
                        if (v.empty() || v == "none") {
                          d.boundary.absolute_threshold.reset();
                        } else {
                          d.boundary.absolute_threshold = parse_double("model.boundary_threshold", v);
                        }
                      },
                      [&d] {
                        return d.boundary.absolute_threshold
                                   ? format_double(*d.boundary.absolute_threshold)
                                   : std::string("none");
                      }});
  r.real("model.roi_tau", d.roi_tau);
  r.fields.push_back({"model.memory_capacity",
                      [&d](const std::string& v) {
                        const auto n = parse_u64("model.memory_capacity", v);
                        if (n == 0) {
                          d.memory_capacity.reset();
                        } else {
                          d.memory_capacity = n;
                        }
                      },
                      [&d] { return std::to_string(d.memory_capacity ? *d.memory_capacity : 0); }});

  auto& l = c.train.loss;
  r.real("loss.lambda_k", l.weights.lambda_k);
  r.real("loss.lambda_l", l.weights.lambda_l);
  r.real("loss.lambda_u", l.weights.lambda_u);
  r.real("loss.target_sigma", l.target_sigma);
  r.real("loss.smooth_l1_beta", l.smooth_l1_beta);
  r.fields.push_back({"loss.iou",
                      [&l](const std::string& v) {
                        if (v == "giou") {
                          l.iou = IouLoss::kGiou;
                        } else if (v == "iou") {
                          l.iou = IouLoss::kIou;
                        } else {
                          bad_value("loss.iou", v, "giou or iou");
                        }
                      },
                      [&l] { return std::string(l.iou == IouLoss::kGiou ? "giou" : "iou"); }});

  auto& t = c.train;
  r.real("train.learning_rate", t.learning_rate);
  r.real("train.clip_norm", t.clip_norm);
  r.size("train.steps", t.steps);
  r.flag("train.shuffle", t.shuffle);
  r.flag("train.teacher_forcing", t.teacher_forcing);
  r.size("train.checkpoint_every", t.checkpoint_every);

  auto& g = c.grid;
  r.fields.push_back({"ablate.seeds",
                      [&c](const std::string& v) {
                        c.ablation_seeds.clear();
                        for (const auto& s : split_list(v)) c.ablation_seeds.push_back(parse_u64("ablate.seeds", s));
                      },
                      [&c] {
                        std::string out;
                        for (auto s : c.ablation_seeds) out += (out.empty() ? "" : ", ") + std::to_string(s);
                        return out;
                      }});
  auto mode_list = [&r](const std::string& name, std::vector<MemoryMode>& ref) {
    r.fields.push_back({name,
                        [&ref, name](const std::string& v) {
                          ref.clear();
                          for (const auto& s : split_list(v)) ref.push_back(parse_mode(name, s));
                        },
                        [&ref] {
                          std::string out;
                          for (auto m : ref) out += (out.empty() ? "" : ", ") + mode_name(m);
                          return out;
                        }});
  };
  mode_list("ablate.temporal_memory", g.temporal_memory);
  mode_list("ablate.spatial_memory", g.spatial_memory);
  r.fields.push_back({"ablate.temporal_context",
                      [&g](const std::string& v) {
                        g.temporal_context.clear();
                        for (const auto& s : split_list(v)) {
                          g.temporal_context.push_back(parse_context("ablate.temporal_context", s));
                        }
                      },
                      [&g] {
                        std::string out;
                        for (auto x : g.temporal_context) out += (out.empty() ? "" : ", ") + context_name(x);
                        return out;
                      }});
  r.fields.push_back({"ablate.n_s",
                      [&g](const std::string& v) {
                        g.n_s.clear();
                        for (const auto& s : split_list(v)) g.n_s.push_back(parse_u64("ablate.n_s", s));
                      },
                      [&g] {
                        std::string out;
                        for (auto x : g.n_s) out += (out.empty() ? "" : ", ") + std::to_string(x);
                        return out;
                      }});
  return r;
}

void apply(Registry& r, const std::string& name, const std::string& value) {
  for (auto& f : r.fields) {
    if (f.name == name) {
      f.set(trim(value));
      return;
    }
  }
  throw ConfigError("unknown config field '" + name + "'");
}

RunConfig build(const boost::property_tree::ptree* tree,
                const std::map<std::string, std::string>& overrides) {
  RunConfig c;
  Registry r = registry(c);
  if (tree) {
    for (const auto& [section, body] : *tree) {
      if (body.empty()) {
        throw ConfigError("config key '" + section + "' must be inside a [section]");
      }
      for (const auto& [key, value] : body) {
        apply(r, section + "." + key, value.get_value<std::string>());
      }
    }
  }
  for (const auto& [name, value] : overrides) apply(r, name, value);
  c.finalize();
  return c;
}

}  // namespace

void RunConfig::finalize() {
  if (!test_world_set) test_world = world;
  model.encoder.grid_h = world.grid_h;
  model.encoder.grid_w = world.grid_w;
  model.encoder.raw_channels = world.channels;
  model.decoder.width = model.encoder.width;
  model.decoder.heads = model.encoder.heads;
  model.decoder.mlp_ratio = model.encoder.mlp_ratio;
  if (test_world.grid_h != world.grid_h || test_world.grid_w != world.grid_w ||
      test_world.channels != world.channels) {
    throw ConfigError("test_world must use the same grid and channels as world");
  }
  if (grid.temporal_memory.empty() || grid.spatial_memory.empty() ||
      grid.temporal_context.empty() || grid.n_s.empty()) {
    throw ConfigError("every ablate axis needs at least one value");
  }
  if (ablation_seeds.empty()) throw ConfigError("ablate.seeds needs at least one seed");
  try {
    world.validate();
    test_world.validate();
    model.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
  for (auto ns : grid.n_s) {
    if (ns < 1) throw ConfigError("ablate.n_s values must be >= 1");
  }
  if (train.learning_rate < 0.0) throw ConfigError("train.learning_rate must be >= 0");
  if (train.clip_norm <= 0.0) throw ConfigError("train.clip_norm must be > 0");
  const auto& w = train.loss.weights;
  if (w.lambda_k < 0.0 || w.lambda_l < 0.0 || w.lambda_u < 0.0) {
    throw ConfigError("loss weights must be non-negative");
  }
  if (train.loss.smooth_l1_beta <= 0.0) throw ConfigError("loss.smooth_l1_beta must be > 0");
}

RunConfig parse_config(const std::string& text, const std::map<std::string, std::string>& overrides) {
  boost::property_tree::ptree tree;
  std::istringstream in(text);
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError("config line " + std::to_string(e.line()) + ": " + e.message());
  }
  return build(&tree, overrides);
}

RunConfig load_config(const std::string& path, const std::map<std::string, std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), overrides);
}

RunConfig default_config(const std::map<std::string, std::string>& overrides) {
  return build(nullptr, overrides);
}

std::string to_ini(const RunConfig& config) {
  RunConfig copy = config;
  Registry r = registry(copy);
  std::string out;
  std::string section;
  for (const auto& f : r.fields) {
    const auto dot = f.name.find('.');
    const std::string s = f.name.substr(0, dot);
    if (s == "test_world" && !config.test_world_set) continue;
    if (s != section) {
      out += (out.empty() ? "[" : "\n[") + s + "]\n";
      section = s;
    }
    out += f.name.substr(dot + 1) + " = " + f.get() + "\n";
  }
  return out;
}

std::string resolve_data_path(const RunConfig& config, const std::string& path) {
  const std::filesystem::path p(path);
  if (p.is_absolute() || config.data_dir.empty()) return path;
  return (std::filesystem::path(config.data_dir) / p).string();
}

}  // namespace artstvg
