#include "artstvg/synthworld.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>

#include "artstvg/binary_io.hpp"
#include "artstvg/rng.hpp"

namespace artstvg {

namespace {

const std::vector<std::string>& words() {
  static const std::vector<std::string> w = {
      "<pad>", "the",   "a",     "who",   "is",                                  // function
      "man",   "woman", "boy",   "girl",  "dog",   "robot",                      // actors
      "walks", "jumps", "waves", "turns", "sits",  "runs"};                      // actions
  return w;
}

constexpr std::size_t kFirstActor = 5;
constexpr std::size_t kFirstAction = kFirstActor + Vocabulary::kMaxActorClasses;

std::vector<double> unit_vector(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  double norm = 0.0;
  for (auto& x : v) {
    x = rng.normal();
    norm += x * x;
  }
  norm = std::sqrt(norm);
  for (auto& x : v) x /= norm;
  return v;
}

double cell_coverage(const Box& b, std::size_t y, std::size_t x, std::size_t H, std::size_t W) {
  const double cx0 = static_cast<double>(x) / W;
  const double cx1 = static_cast<double>(x + 1) / W;
  const double cy0 = static_cast<double>(y) / H;
  const double cy1 = static_cast<double>(y + 1) / H;
  const double ox = std::max(0.0, std::min(cx1, b.x2()) - std::max(cx0, b.x1()));
  const double oy = std::max(0.0, std::min(cy1, b.y2()) - std::max(cy0, b.y1()));
  return ox * oy * static_cast<double>(H * W);
}

struct ActorTrack {
  Box box;
  double vx = 0.0;
  double vy = 0.0;
};

void advance(ActorTrack& a, double max_step, Rng& rng) {
  a.vx += rng.normal(0.0, 0.3 * max_step);
  a.vy += rng.normal(0.0, 0.3 * max_step);
  const double speed = std::hypot(a.vx, a.vy);
  if (speed > max_step) {
    a.vx *= max_step / speed;
    a.vy *= max_step / speed;
  }
  const auto reflect = [](double& c, double& v, double half) {
    c += v;
    if (c - half < 0.0) {
      c = 2.0 * half - c;
      v = -v;
    }
    if (c + half > 1.0) {
      c = 2.0 * (1.0 - half) - c;
      v = -v;
    }
    c = std::clamp(c, half, 1.0 - half);
  };
  reflect(a.box.cx, a.vx, 0.5 * a.box.w);
  reflect(a.box.cy, a.vy, 0.5 * a.box.h);
}

// Splits `free` idle frames into events+1 gaps, inner gaps >= min_gap.
std::vector<std::size_t> split_gaps(std::size_t free, std::size_t events, std::size_t min_gap,
                                    Rng& rng) {
  std::vector<std::size_t> gaps(events + 1, 0);
  for (std::size_t i = 1; i < events; ++i) gaps[i] = min_gap;
  std::size_t rest = free - min_gap * (events - 1);
  for (std::size_t i = 0; i < rest; ++i) gaps[rng.below(gaps.size())] += 1;
  return gaps;
}

}  // namespace

// ---------------------------------------------------------------------------
// Vocabulary

std::size_t Vocabulary::size() { return words().size(); }

std::size_t Vocabulary::id(std::string_view word) {
  const auto& w = words();
  const auto it = std::find(w.begin(), w.end(), word);
  if (it == w.end()) throw UnknownTokenError("unknown token '" + std::string(word) + "'");
  return static_cast<std::size_t>(it - w.begin());
}

const std::string& Vocabulary::word(std::size_t id) {
  if (id >= size()) throw UnknownTokenError("unknown token id " + std::to_string(id));
  return words()[id];
}

std::size_t Vocabulary::actor_token(std::size_t actor_class) {
  if (actor_class >= kMaxActorClasses) throw UnknownTokenError("actor class out of range");
  return kFirstActor + actor_class;
}

std::size_t Vocabulary::action_token(std::size_t action) {
  if (action >= kMaxActions) throw UnknownTokenError("action out of range");
  return kFirstAction + action;
}

std::vector<std::string> Vocabulary::decode(std::span<const std::size_t> ids) {
  std::vector<std::string> out;
  for (auto id : ids) {
    if (id == kPad) continue;
    out.push_back(word(id));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Config / episode

void WorldConfig::validate() const {
  const auto fail = [](const std::string& m) { throw WorldConfigError("world config: " + m); };
  if (grid_h < 1 || grid_w < 1 || channels < 1) fail("grid dimensions must be >= 1");
  if (frames < 4) fail("frames must be >= 4");
  if (actors < 1) fail("at least one actor is required");
  if (events < 1) fail("at least one event is required");
  if (actor_classes < 1 || actor_classes > Vocabulary::kMaxActorClasses) {
    fail("actor_classes must be in [1, 6]");
  }
  if (actions < 1 || actions > Vocabulary::kMaxActions) fail("actions must be in [1, 6]");
  if (event_min_len < 1 || event_max_len < event_min_len) fail("invalid event length range");
  if (events * event_max_len + (events - 1) * min_gap > frames) {
    fail("events do not fit into " + std::to_string(frames) + " frames");
  }
  if (!(box_min > 0.0) || box_max > 1.0 || box_max < box_min) fail("invalid box size range");
  if (max_step < 0.0) fail("max_step must be >= 0");
  if (identity_visibility < 0.0 || identity_visibility > 1.0) fail("identity_visibility in [0,1]");
  if (action_visibility < 0.0 || action_visibility > 1.0) fail("action_visibility in [0,1]");
  if (noise < 0.0) fail("noise must be >= 0");
  if (events > 1 && actors * actions < 2) {
    fail("a single (actor, action) pair cannot produce distractor events");
  }
}

const Box& SyntheticEpisode::gt_box(int frame) const {
  if (!gt_segment.contains(frame)) throw std::out_of_range("frame outside GT segment");
  return gt_boxes[static_cast<std::size_t>(frame - gt_segment.start)];
}

const Signatures& signatures(std::size_t channels) {
  static std::mutex mu;
  static std::map<std::size_t, Signatures> cache;
  std::lock_guard lock(mu);
  auto it = cache.find(channels);
  if (it != cache.end()) return it->second;
  Rng rng(0x5157A7E5ULL + channels);
  Signatures s;
  s.body = unit_vector(channels, rng);
  s.finish = unit_vector(channels, rng);
  for (std::size_t i = 0; i < Vocabulary::kMaxActorClasses; ++i) {
    s.identity.push_back(unit_vector(channels, rng));
  }
  for (std::size_t i = 0; i < Vocabulary::kMaxActions; ++i) s.action.push_back(unit_vector(channels, rng));
  return cache.emplace(channels, std::move(s)).first->second;
}

std::vector<double> render_grid(std::size_t H, std::size_t W, std::size_t C,
                                std::span<const SceneObject> objects,
                                std::span<const std::size_t> actor_classes) {
  const Signatures& sig = signatures(C);
  std::vector<double> grid(H * W * C, 0.0);
  std::vector<double> pattern(C);
  for (const auto& o : objects) {
    for (std::size_t c = 0; c < C; ++c) {
      double v = sig.body[c];
      if (o.identity_visible) v += sig.identity[actor_classes[o.actor_id]][c];
      if (o.action_visible && o.action_id >= 0) v += sig.action[static_cast<std::size_t>(o.action_id)][c];
      if (o.finishing) v += sig.finish[c];
      pattern[c] = v;
    }
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        const double cov = cell_coverage(o.box, y, x, H, W);
        if (cov <= 0.0) continue;
        double* cell = grid.data() + (y * W + x) * C;
        for (std::size_t c = 0; c < C; ++c) cell[c] += cov * pattern[c];
      }
    }
  }
  return grid;
}

SyntheticEpisode generate_episode(const WorldConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  SyntheticEpisode ep;
  ep.grid_h = cfg.grid_h;
  ep.grid_w = cfg.grid_w;
  ep.channels = cfg.channels;

  // Actors: class word, initial box and velocity.
  std::vector<ActorTrack> tracks(cfg.actors);
  ep.actor_classes.resize(cfg.actors);
  for (std::size_t a = 0; a < cfg.actors; ++a) {
    ep.actor_classes[a] = static_cast<std::size_t>(rng.below(cfg.actor_classes));
    ActorTrack& t = tracks[a];
    t.box.w = rng.uniform(cfg.box_min, cfg.box_max);
    t.box.h = rng.uniform(cfg.box_min, cfg.box_max);
    t.box.cx = rng.uniform(0.5 * t.box.w, 1.0 - 0.5 * t.box.w);
    t.box.cy = rng.uniform(0.5 * t.box.h, 1.0 - 0.5 * t.box.h);
    const double angle = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    const double speed = rng.uniform(0.0, cfg.max_step);
    t.vx = speed * std::cos(angle);
    t.vy = speed * std::sin(angle);
  }

  // Event timing.
  std::vector<std::size_t> lengths(cfg.events);
  std::size_t busy = 0;
  for (auto& l : lengths) {
    l = cfg.event_min_len + static_cast<std::size_t>(rng.below(cfg.event_max_len - cfg.event_min_len + 1));
    busy += l;
  }
  const std::vector<std::size_t> gaps = split_gaps(cfg.frames - busy, cfg.events, cfg.min_gap, rng);

  // Event content: one target pair, distractors never match both words.
  const std::size_t target_event = static_cast<std::size_t>(rng.below(cfg.events));
  const std::size_t target_actor = static_cast<std::size_t>(rng.below(cfg.actors));
  const std::size_t target_action = static_cast<std::size_t>(rng.below(cfg.actions));
  const std::size_t target_class = ep.actor_classes[target_actor];
  std::vector<std::pair<std::size_t, std::size_t>> distractors;
  for (std::size_t a = 0; a < cfg.actors; ++a) {
    for (std::size_t act = 0; act < cfg.actions; ++act) {
      if (!(ep.actor_classes[a] == target_class && act == target_action)) distractors.emplace_back(a, act);
    }
  }
  if (cfg.events > 1 && distractors.empty()) {
    throw WorldConfigError("world config: actor classes leave no valid distractor event");
  }

  int cursor = static_cast<int>(gaps[0]);
  for (std::size_t e = 0; e < cfg.events; ++e) {
    ScriptedEvent ev;
    ev.event_id = e;
    if (e == target_event) {
      ev.actor_id = target_actor;
      ev.action_id = target_action;
    } else {
      const auto& d = distractors[rng.below(distractors.size())];
      ev.actor_id = d.first;
      ev.action_id = d.second;
    }
    ev.start = cursor;
    ev.end = cursor + static_cast<int>(lengths[e]) - 1;
    cursor = ev.end + 1 + static_cast<int>(gaps[e + 1]);
    ep.event_script.push_back(ev);
  }
  const ScriptedEvent& target = ep.event_script[target_event];
  ep.gt_segment = {target.start, target.end};
  ep.query_tokens = {Vocabulary::actor_token(target_class), Vocabulary::action_token(target_action)};

  // Frames.
  const std::size_t H = cfg.grid_h, W = cfg.grid_w, C = cfg.channels;
  ep.frames.reserve(cfg.frames);
  for (std::size_t f = 0; f < cfg.frames; ++f) {
    if (f > 0) {
      for (auto& t : tracks) advance(t, cfg.max_step, rng);
    }
    const int fi = static_cast<int>(f);
    FrameGrid frame;
    for (std::size_t a = 0; a < cfg.actors; ++a) {
      SceneObject o;
      o.actor_id = a;
      o.box = tracks[a].box;
      o.identity_visible = rng.uniform() < cfg.identity_visibility;
      for (const auto& ev : ep.event_script) {
        if (ev.actor_id != a || fi < ev.start || fi > ev.end) continue;
        o.action_id = static_cast<int>(ev.action_id);
        const bool onset = fi == ev.start;
        o.action_visible = onset || rng.uniform() < cfg.action_visibility;
        if (onset) o.identity_visible = true;
        o.finishing = fi == ev.end;
      }
      frame.objects.push_back(o);
    }
    frame.grid = render_grid(H, W, C, frame.objects, ep.actor_classes);
    if (cfg.noise > 0.0) {
      for (auto& v : frame.grid) v += rng.normal(0.0, cfg.noise);
    }
    if (ep.gt_segment.contains(fi)) ep.gt_boxes.push_back(tracks[target.actor_id].box);
    ep.frames.push_back(std::move(frame));
  }
  return ep;
}

RawFrameFeatures render_frame_features(const SyntheticEpisode& ep, std::size_t i) {
  if (i >= ep.frames.size()) {
    throw std::out_of_range("frame " + std::to_string(i) + " out of range for episode of " +
                            std::to_string(ep.frames.size()) + " frames");
  }
  RawFrameFeatures f;
  f.appearance = ep.frames[i].grid;
  const auto& prev = ep.frames[i == 0 ? 0 : i - 1].grid;
  f.motion.resize(f.appearance.size());
  for (std::size_t k = 0; k < f.motion.size(); ++k) f.motion[k] = f.appearance[k] - prev[k];
  return f;
}

EncodedQuery encode_query_tokens(std::span<const std::size_t> query, std::size_t text_len) {
  if (query.size() > text_len) {
    throw std::invalid_argument("query of " + std::to_string(query.size()) +
                                " tokens exceeds text length " + std::to_string(text_len));
  }
  EncodedQuery q;
  q.tokens.assign(text_len, Vocabulary::kPad);
  q.mask.assign(text_len, false);
  for (std::size_t i = 0; i < query.size(); ++i) {
    if (query[i] >= Vocabulary::size() || query[i] == Vocabulary::kPad) {
      throw UnknownTokenError("unknown query token id " + std::to_string(query[i]));
    }
    q.tokens[i] = query[i];
    q.mask[i] = true;
  }
  return q;
}

EncodedQuery encode_query_tokens(const SyntheticEpisode& episode, std::size_t text_len) {
  return encode_query_tokens(episode.query_tokens, text_len);
}

// ---------------------------------------------------------------------------
// Dataset container

namespace {

void put_box(ByteWriter& w, const Box& b) {
  w.put(b.cx);
  w.put(b.cy);
  w.put(b.w);
  w.put(b.h);
}

Box get_box(ByteReader& r) {
  Box b;
  b.cx = r.get<double>();
  b.cy = r.get<double>();
  b.w = r.get<double>();
  b.h = r.get<double>();
  return b;
}

void encode_record(ByteWriter& w, const SyntheticEpisode& ep) {
  w.put(static_cast<std::uint32_t>(ep.grid_h));
  w.put(static_cast<std::uint32_t>(ep.grid_w));
  w.put(static_cast<std::uint32_t>(ep.channels));
  w.put(static_cast<std::uint32_t>(ep.frames.size()));
  w.put(static_cast<std::uint32_t>(ep.actor_classes.size()));
  w.put_all<std::uint32_t>(ep.actor_classes);
  w.put(static_cast<std::uint32_t>(ep.query_tokens.size()));
  w.put_all<std::uint32_t>(ep.query_tokens);
  w.put(static_cast<std::int32_t>(ep.gt_segment.start));
  w.put(static_cast<std::int32_t>(ep.gt_segment.end));
  w.put(static_cast<std::uint32_t>(ep.event_script.size()));
  for (const auto& ev : ep.event_script) {
    w.put(static_cast<std::uint32_t>(ev.event_id));
    w.put(static_cast<std::uint32_t>(ev.action_id));
    w.put(static_cast<std::int32_t>(ev.start));
    w.put(static_cast<std::int32_t>(ev.end));
    w.put(static_cast<std::uint32_t>(ev.actor_id));
  }
  for (const auto& b : ep.gt_boxes) put_box(w, b);
  for (const auto& f : ep.frames) {
    w.put_all<double>(f.grid);
    w.put(static_cast<std::uint32_t>(f.objects.size()));
    for (const auto& o : f.objects) {
      w.put(static_cast<std::uint32_t>(o.actor_id));
      put_box(w, o.box);
      w.put(static_cast<std::int32_t>(o.action_id));
      const std::uint8_t flags = (o.identity_visible ? 1 : 0) | (o.action_visible ? 2 : 0) |
                                 (o.finishing ? 4 : 0);
      w.put(flags);
    }
  }
}

SyntheticEpisode decode_record(ByteReader& r) {
  SyntheticEpisode ep;
  ep.grid_h = r.get<std::uint32_t>();
  ep.grid_w = r.get<std::uint32_t>();
  ep.channels = r.get<std::uint32_t>();
  const std::size_t frames = r.get<std::uint32_t>();
  ep.actor_classes.resize(r.get<std::uint32_t>());
  for (auto& c : ep.actor_classes) c = r.get<std::uint32_t>();
  ep.query_tokens.resize(r.get<std::uint32_t>());
  for (auto& t : ep.query_tokens) t = r.get<std::uint32_t>();
  ep.gt_segment.start = r.get<std::int32_t>();
  ep.gt_segment.end = r.get<std::int32_t>();
  if (ep.gt_segment.start < 0 || ep.gt_segment.end < ep.gt_segment.start ||
      static_cast<std::size_t>(ep.gt_segment.end) >= frames) {
    throw FormatError("record has an invalid GT segment");
  }
  ep.event_script.resize(r.get<std::uint32_t>());
  for (auto& ev : ep.event_script) {
    ev.event_id = r.get<std::uint32_t>();
    ev.action_id = r.get<std::uint32_t>();
    ev.start = r.get<std::int32_t>();
    ev.end = r.get<std::int32_t>();
    ev.actor_id = r.get<std::uint32_t>();
  }
  ep.gt_boxes.resize(static_cast<std::size_t>(ep.gt_segment.length()));
  for (auto& b : ep.gt_boxes) b = get_box(r);
  const std::size_t cells = ep.grid_h * ep.grid_w * ep.channels;
  ep.frames.resize(frames);
  for (auto& f : ep.frames) {
    f.grid.resize(cells);
    for (auto& v : f.grid) v = r.get<double>();
    f.objects.resize(r.get<std::uint32_t>());
    for (auto& o : f.objects) {
      o.actor_id = r.get<std::uint32_t>();
      o.box = get_box(r);
      o.action_id = r.get<std::int32_t>();
      const auto flags = r.get<std::uint8_t>();
      o.identity_visible = flags & 1;
      o.action_visible = flags & 2;
      o.finishing = flags & 4;
    }
  }
  return ep;
}

constexpr std::string_view kDatasetMagic = "ARTG";

void check_header(ByteReader& r, const std::string& path) {
  if (r.get_raw(4) != kDatasetMagic) throw FormatError(path + ": not an ARTG dataset");
  const auto version = r.get<std::uint16_t>();
  if (version != kDatasetVersion) {
    throw FormatError(path + ": unsupported dataset version " + std::to_string(version));
  }
}

}  // namespace

void write_dataset(const std::string& path, std::span<const SyntheticEpisode> episodes) {
  ByteWriter w;
  w.put_raw(kDatasetMagic);
  w.put(kDatasetVersion);
  w.put(static_cast<std::uint32_t>(episodes.size()));
  std::ostringstream manifest;
  manifest << "# ARTG manifest v" << kDatasetVersion << "\n";
  manifest << "# index offset bytes\n";
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    const std::size_t offset = w.size();
    encode_record(w, episodes[i]);
    manifest << i << ' ' << offset << ' ' << (w.size() - offset) << '\n';
  }
  write_file_bytes(path, w.bytes());
  const std::string m = manifest.str();
  write_file_bytes(path + ".manifest", std::vector<unsigned char>(m.begin(), m.end()));
}

std::vector<SyntheticEpisode> read_dataset(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  ByteReader r(bytes);
  check_header(r, path);
  const std::size_t n = r.get<std::uint32_t>();
  std::vector<SyntheticEpisode> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(decode_record(r));
  if (r.remaining() != 0) throw FormatError(path + ": trailing bytes after last record");
  return out;
}

SyntheticEpisode read_dataset_record(const std::string& path, std::size_t index) {
  std::ifstream manifest(path + ".manifest");
  if (!manifest) throw std::runtime_error("cannot open manifest " + path + ".manifest");
  std::string line;
  std::size_t offset = 0;
  bool found = false;
  while (std::getline(manifest, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream is(line);
    std::size_t idx = 0, off = 0, len = 0;
    if (!(is >> idx >> off >> len)) throw FormatError("malformed manifest line: " + line);
    if (idx == index) {
      offset = off;
      found = true;
      break;
    }
  }
  if (!found) throw std::out_of_range("record " + std::to_string(index) + " not in manifest");
  const auto bytes = read_file_bytes(path);
  ByteReader r(bytes);
  check_header(r, path);
  r.seek(offset);
  return decode_record(r);
}

}  // namespace artstvg
