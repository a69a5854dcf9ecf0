#pragma once

// Spatial decoder: one query per frame, refined by K memory-augmented
// blocks that attend to selected past spatial queries and to the frame's
// appearance and text features. A sigmoid MLP head turns it into a box.

#include <vector>

#include "artstvg/decoder_block.hpp"
#include "artstvg/encoder.hpp"

namespace artstvg {

struct SpatialTrace {
  std::vector<BlockTrace> blocks;
};

class SpatialDecoder {
 public:
  SpatialDecoder(const DecoderConfig& config, Rng& rng);

  const DecoderConfig& config() const { return config_; }

  MemoryBank make_bank() const;

  /// Runs the K blocks for `frame`, updating `bank`. Returns q^K (1 x C).
  Tensor decode(const MultimodalFeature& feature, MemoryBank& bank, std::size_t frame,
                SpatialTrace* trace = nullptr) const;

  /// Normalized (cx, cy, w, h) in (0, 1), shape 1 x 4.
  Tensor box(const Tensor& query) const;

  void collect(ParameterSet& set, const std::string& prefix) const;

  std::vector<DecoderBlock> blocks;
  Mlp head;

 private:
  DecoderConfig config_;
};

}  // namespace artstvg
