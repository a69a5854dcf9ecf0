#pragma once

// Synthetic long-form episodes: low-resolution feature grids with moving
// actors, scripted (actor, action) events and a two-word query that picks out
// exactly one of those events.

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "artstvg/box.hpp"

namespace artstvg {

class UnknownTokenError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class WorldConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Closed vocabulary: PAD, function words, actor words, action words.
/// Token ids are dense in [0, size()).
class Vocabulary {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kMaxActorClasses = 6;
  static constexpr std::size_t kMaxActions = 6;

  static std::size_t size();
  static std::size_t id(std::string_view word);
  static const std::string& word(std::size_t id);
  static std::size_t actor_token(std::size_t actor_class);
  static std::size_t action_token(std::size_t action);
  static std::vector<std::string> decode(std::span<const std::size_t> ids);
};

struct WorldConfig {
  std::size_t grid_h = 8;
  std::size_t grid_w = 8;
  std::size_t channels = 8;  // raw feature channels per cell
  std::size_t frames = 32;
  std::size_t actors = 2;
  std::size_t actor_classes = 2;
  std::size_t actions = 3;
  std::size_t events = 3;
  std::size_t event_min_len = 4;
  std::size_t event_max_len = 8;
  std::size_t min_gap = 1;  // idle frames between consecutive events
  double box_min = 0.2;
  double box_max = 0.4;
  double max_step = 0.04;  // per-frame displacement cap (normalized units)
  /// Probability that an actor's identity pattern shows on a frame. Event
  /// onsets always show it.
  double identity_visibility = 1.0;
  /// Probability that the action pattern shows on a non-onset event frame.
  double action_visibility = 1.0;
  double noise = 0.0;

  void validate() const;
};

struct SceneObject {
  std::size_t actor_id = 0;
  Box box;
  int action_id = -1;  // -1 when idle
  bool identity_visible = true;
  bool action_visible = false;
  bool finishing = false;  // last frame of this actor's event
};

/// One frame: H x W x C cells, row-major (y, x, c).
struct FrameGrid {
  std::vector<double> grid;
  std::vector<SceneObject> objects;
};

struct ScriptedEvent {
  std::size_t event_id = 0;
  std::size_t action_id = 0;
  int start = 0;
  int end = 0;
  std::size_t actor_id = 0;

  friend bool operator==(const ScriptedEvent&, const ScriptedEvent&) = default;
};

struct SyntheticEpisode {
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  std::size_t channels = 0;
  std::vector<FrameGrid> frames;
  std::vector<std::size_t> actor_classes;  // class (actor word) per actor instance
  std::vector<std::size_t> query_tokens;
  Segment gt_segment;
  std::vector<Box> gt_boxes;  // one per frame of gt_segment
  std::vector<ScriptedEvent> event_script;

  std::size_t length() const { return frames.size(); }
  std::size_t cells() const { return grid_h * grid_w; }
  /// GT box for an absolute frame index inside gt_segment.
  const Box& gt_box(int frame) const;
};

SyntheticEpisode generate_episode(const WorldConfig& config, std::uint64_t seed);

/// Fixed per-vocabulary signature patterns for a given channel count.
struct Signatures {
  std::vector<double> body;
  std::vector<double> finish;
  std::vector<std::vector<double>> identity;  // per actor class
  std::vector<std::vector<double>> action;    // per action
};
const Signatures& signatures(std::size_t channels);

/// Renders objects onto an H x W x C grid; each object adds its signature
/// weighted by the fraction of every cell its box covers.
std::vector<double> render_grid(std::size_t grid_h, std::size_t grid_w, std::size_t channels,
                                std::span<const SceneObject> objects,
                                std::span<const std::size_t> actor_classes);

struct RawFrameFeatures {
  std::vector<double> appearance;  // H x W x C
  std::vector<double> motion;      // grid(i) - grid(i-1), grid(-1) := grid(0)
};
RawFrameFeatures render_frame_features(const SyntheticEpisode& episode, std::size_t i);

struct EncodedQuery {
  std::vector<std::size_t> tokens;  // length text_len, right-padded with PAD
  std::vector<bool> mask;           // true for real tokens
};
EncodedQuery encode_query_tokens(std::span<const std::size_t> query, std::size_t text_len);
EncodedQuery encode_query_tokens(const SyntheticEpisode& episode, std::size_t text_len);

// Dataset container (.artge): "ARTG", u16 version, u32 record count, then
// self-describing records. A text manifest (<path>.manifest) lists the
// byte offset and length of every record.
inline constexpr std::uint16_t kDatasetVersion = 1;

void write_dataset(const std::string& path, std::span<const SyntheticEpisode> episodes);
std::vector<SyntheticEpisode> read_dataset(const std::string& path);
/// Reads a single record using the manifest's offset table.
SyntheticEpisode read_dataset_record(const std::string& path, std::size_t index);

}  // namespace artstvg
