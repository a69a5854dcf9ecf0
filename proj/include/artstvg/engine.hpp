#pragma once

// Streaming grounding loop. Frames are pushed one at a time; each step
// encodes the frame, decodes a box, pools motion under it, decodes
// start/end logits and appends to the memory banks.

#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <vector>

#include "artstvg/archive.hpp"
#include "artstvg/box.hpp"
#include "artstvg/encoder.hpp"
#include "artstvg/spatial_decoder.hpp"
#include "artstvg/synthworld.hpp"
#include "artstvg/temporal_decoder.hpp"

namespace artstvg {

class StreamOrderError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct ModelConfig {
  EncoderConfig encoder;
  DecoderConfig decoder;

  void validate() const;
};

class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  /// Every trainable tensor, named "encoder.*", "spatial.*", "temporal.*".
  ParameterSet parameters() const;

  void save(TensorArchive& archive) const;
  void load(const TensorArchive& archive);

 private:
  ModelConfig config_;
  Rng init_rng_;

 public:
  Encoder encoder;
  SpatialDecoder spatial;
  TemporalDecoder temporal;
};

struct FrameOutput {
  Box box;
  double start_logit = 0.0;
  double end_logit = 0.0;

  double start_score() const;
  double end_score() const;
};

struct StreamState {
  MemoryBank spatial_bank;
  MemoryBank temporal_bank;
  std::size_t cursor = 0;
  std::vector<double> previous_grid;
  std::vector<FrameOutput> outputs;
  /// Highest tensor storage reached during the latest step, above the live
  /// size at its start (banks and earlier outputs excluded).
  std::size_t last_step_peak_bytes = 0;
};

StreamState start_stream(const Model& model);

struct ForwardOptions {
  /// Differentiable RoI weights (training).
  bool soft_roi = false;
  /// Pools motion under this box instead of the predicted one.
  std::optional<Box> teacher_box;
  SpatialTrace* spatial_trace = nullptr;
  TemporalTrace* temporal_trace = nullptr;
};

struct FrameForward {
  Tensor box;     // 1 x 4
  Tensor logits;  // 1 x 2 (start, end)
};

/// One autoregressive step returning graph-connected outputs. `frame_index`
/// must equal the stream cursor. `grid` is the raw H x W x C frame.
FrameForward forward_frame(const Model& model, StreamState& state, std::size_t frame_index,
                           std::span<const double> grid, const EncodedQuery& query,
                           const ForwardOptions& options = {});

/// Inference step: forward_frame plus bookkeeping of plain outputs.
FrameOutput step(const Model& model, StreamState& state, std::size_t frame_index,
                 std::span<const double> grid, const EncodedQuery& query);

struct TubePrediction {
  std::vector<Box> boxes;
  std::vector<double> start_logits;
  std::vector<double> end_logits;
  Segment segment;
};

/// Most probable (s, e) with s <= e under independent frame-softmaxes of
/// the two score lists. Ties go to the smaller s, then the smaller e.
Segment decode_segment(std::span<const double> start_scores, std::span<const double> end_scores);

/// Assembles the tube from a stream's outputs.
TubePrediction finish_stream(const StreamState& state);

TubePrediction ground(const Model& model, std::span<const std::vector<double>> frames,
                      const EncodedQuery& query);
TubePrediction ground(const Model& model, const SyntheticEpisode& episode);

void save_stream(const StreamState& state, TensorArchive& archive);
StreamState load_stream(const Model& model, const TensorArchive& archive);

/// JSON-lines: {"frame","box","hs","he"} per frame, then {"segment":[s,e]}.
void write_tube_jsonl(std::ostream& out, const TubePrediction& tube);

}  // namespace artstvg
