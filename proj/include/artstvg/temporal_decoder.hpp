#pragma once

// Temporal decoder: one query per frame attending to its selected temporal
// memories and to motion context, followed by a start/end score head.

#include <atomic>
#include <vector>

#include "artstvg/box.hpp"
#include "artstvg/decoder_block.hpp"
#include "artstvg/encoder.hpp"

namespace artstvg {

/// Mean of the motion rows whose cell centers lie inside `box` (normalized
/// coordinates, clamped to the frame). When no center is inside, or the box
/// is degenerate after clamping, the cell containing the box center is used
/// and the fallback counter is incremented.
/// motion: (grid_h * grid_w) x C, row-major cells.
Tensor roi_pool(const Tensor& motion, const Box& box, std::size_t grid_h, std::size_t grid_w);

/// Differentiable variant used for training: cell weights are products of
/// sigmoids of the signed distance (in cells) from each box edge, divided by
/// tau, plus a small fixed weight on the center cell so the result is always
/// defined. box: 1 x 4 tensor (cx, cy, w, h).
Tensor soft_roi_pool(const Tensor& motion, const Tensor& box, std::size_t grid_h,
                     std::size_t grid_w, double tau);

/// Number of times roi_pool fell back to the center cell.
std::size_t roi_fallback_count();
void reset_roi_fallback_count();

struct TemporalTrace {
  std::vector<BlockTrace> blocks;
};

class TemporalDecoder {
 public:
  TemporalDecoder(const DecoderConfig& config, Rng& rng);

  const DecoderConfig& config() const { return config_; }

  MemoryBank make_bank() const;

  /// Motion context for the temporal blocks: either a pooled motion row or
  /// every motion row, followed by the text rows. `key_bias` receives the
  /// matching attention mask.
  Tensor context(const MultimodalFeature& feature, const Tensor& pooled_motion,
                 std::vector<double>& key_bias) const;

  /// Runs the K blocks for `frame` against `context`, updating `bank`.
  /// Returns p^K (1 x C).
  Tensor decode(const Tensor& context, std::span<const double> key_bias, MemoryBank& bank,
                std::size_t frame, TemporalTrace* trace = nullptr) const;

  /// Start/end logits, shape 1 x 2. Scores are their sigmoids.
  Tensor logits(const Tensor& query) const;

  void collect(ParameterSet& set, const std::string& prefix) const;

  std::vector<DecoderBlock> blocks;
  Mlp head;

 private:
  DecoderConfig config_;
};

}  // namespace artstvg
