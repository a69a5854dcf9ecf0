#pragma once

#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "artstvg/layers.hpp"
#include "artstvg/memory.hpp"

namespace artstvg {

/// Which query is written into a block's memory partition.
enum class InsertMode {
  kIncoming,  // q^{k-1}, before the block runs (memory then includes this frame)
  kOutgoing,  // q^k, after the block runs
};

/// Source of the temporal decoder's motion context.
enum class TemporalContext {
  kCascaded,  // RoI-pooled motion under the predicted box
  kParallel,  // all motion rows, independent of the spatial branch
};

struct DecoderConfig {
  std::size_t width = 32;
  std::size_t heads = 4;
  std::size_t blocks = 2;  // K
  std::size_t mlp_ratio = 2;
  std::size_t n_s = 32;    // spatial memories kept by text selection
  MemoryMode spatial_memory = MemoryMode::kSelective;
  MemoryMode temporal_memory = MemoryMode::kSelective;
  Similarity similarity = Similarity::kCosine;
  BoundaryRule boundary;
  InsertMode insert = InsertMode::kIncoming;
  TemporalContext temporal_context = TemporalContext::kCascaded;
  double roi_tau = 0.1;  // soft RoI membership temperature, in grid cells
  std::optional<std::size_t> memory_capacity;

  void validate() const;
};

/// Attention maps captured from one block, for inspection.
struct BlockTrace {
  SelectedMemory memory;
  std::vector<std::vector<double>> memory_weights;
  std::vector<std::vector<double>> context_weights;
};

/// One memory-augmented decoder block: cross-attention to the selected
/// memory (skipped when the selection is empty), cross-attention to the
/// frame context, then a feed-forward sublayer. Every sublayer is pre-norm
/// with a residual connection.
struct DecoderBlock {
  CrossAttention memory_attention;
  CrossAttention context_attention;
  FeedForward ffn;

  static DecoderBlock init(std::size_t width, std::size_t heads, std::size_t hidden, Rng& rng);

  Tensor operator()(const Tensor& query, const SelectedMemory& memory, const Tensor& context,
                    std::span<const double> context_bias, BlockTrace* trace = nullptr) const;

  void collect(ParameterSet& set, const std::string& prefix) const;
};

using Selector = std::function<SelectedMemory(const MemoryBank& bank, std::size_t k)>;

/// Shared per-frame loop of both decoders. Starting from a zero query, each
/// block k writes into partition k (before or after running, per the insert
/// mode), reads its memory according to `mode` (`selective` supplies the
/// selective rule) and refines the query. Returns the last block's output.
Tensor run_decoder_blocks(const std::vector<DecoderBlock>& blocks, const DecoderConfig& config,
                          MemoryMode mode, const Selector& selective, MemoryBank& bank,
                          std::size_t frame, const Tensor& context,
                          std::span<const double> context_bias,
                          std::vector<BlockTrace>* traces = nullptr);

}  // namespace artstvg
