#include "artstvg/decoder_block.hpp"

#include <stdexcept>

namespace artstvg {

void DecoderConfig::validate() const {
  if (width < 1 || heads < 1 || width % heads != 0) {
    throw std::invalid_argument("decoder: width must be a positive multiple of heads");
  }
  if (blocks < 1) throw std::invalid_argument("decoder: need at least one block");
  if (mlp_ratio < 1) throw std::invalid_argument("decoder: mlp_ratio must be >= 1");
  if (n_s < 1) throw std::invalid_argument("decoder: n_s must be >= 1");
  if (!(roi_tau > 0.0)) throw std::invalid_argument("decoder: roi_tau must be positive");
  if (boundary.alpha < 0.0) throw std::invalid_argument("decoder: boundary alpha must be >= 0");
  if (memory_capacity && *memory_capacity < 1) {
    throw std::invalid_argument("decoder: memory capacity must be >= 1");
  }
}

DecoderBlock DecoderBlock::init(std::size_t width, std::size_t heads, std::size_t hidden,
                                Rng& rng) {
  DecoderBlock b;
  b.memory_attention = CrossAttention::init(width, heads, rng);
  b.context_attention = CrossAttention::init(width, heads, rng);
  b.ffn = FeedForward::init(width, hidden, rng);
  return b;
}

Tensor DecoderBlock::operator()(const Tensor& query, const SelectedMemory& memory,
                                const Tensor& context, std::span<const double> context_bias,
                                BlockTrace* trace) const {
  Tensor q = query;
  if (!memory.empty()) {
    q = memory_attention(q, concat_rows(memory.vectors), {},
                         trace ? &trace->memory_weights : nullptr);
  }
  q = context_attention(q, context, context_bias, trace ? &trace->context_weights : nullptr);
  if (trace) trace->memory = memory;
  return ffn(q);
}

void DecoderBlock::collect(ParameterSet& set, const std::string& prefix) const {
  memory_attention.collect(set, prefix + ".memory_attention");
  context_attention.collect(set, prefix + ".context_attention");
  ffn.collect(set, prefix + ".ffn");
}

Tensor run_decoder_blocks(const std::vector<DecoderBlock>& blocks, const DecoderConfig& config,
                          MemoryMode mode, const Selector& selective, MemoryBank& bank,
                          std::size_t frame, const Tensor& context,
                          std::span<const double> context_bias, std::vector<BlockTrace>* traces) {
  if (bank.partitions() != blocks.size()) {
    throw std::invalid_argument("decoder: bank has " + std::to_string(bank.partitions()) +
                                " partitions for " + std::to_string(blocks.size()) + " blocks");
  }
  if (traces) traces->assign(blocks.size(), {});
  Tensor q = Tensor::zeros({1, config.width});
  for (std::size_t k = 0; k < blocks.size(); ++k) {
    if (config.insert == InsertMode::kIncoming) bank.insert(k, q, frame);
    SelectedMemory memory;
    if (mode != MemoryMode::kNone && bank.size(k) > 0) {
      memory = mode == MemoryMode::kAll ? select_all(bank, k) : selective(bank, k);
    }
    Tensor next = blocks[k](q, memory, context, context_bias, traces ? &(*traces)[k] : nullptr);
    if (config.insert == InsertMode::kOutgoing) bank.insert(k, next, frame);
    q = std::move(next);
  }
  return q;
}

}  // namespace artstvg
