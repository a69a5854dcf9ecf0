#include "artstvg/spatial_decoder.hpp"

namespace artstvg {

SpatialDecoder::SpatialDecoder(const DecoderConfig& config, Rng& rng) : config_(config) {
  config_.validate();
  const std::size_t C = config_.width;
  for (std::size_t k = 0; k < config_.blocks; ++k) {
    blocks.push_back(DecoderBlock::init(C, config_.heads, C * config_.mlp_ratio, rng));
  }
  const std::size_t widths[] = {C, C, C, 4};
  head = Mlp::init(widths, rng);
}

MemoryBank SpatialDecoder::make_bank() const {
  return MemoryBank(BankKind::kSpatial, config_.blocks, config_.width, config_.memory_capacity);
}

Tensor SpatialDecoder::decode(const MultimodalFeature& feature, MemoryBank& bank,
                              std::size_t frame, SpatialTrace* trace) const {
  const Tensor context = concat_rows({feature.appearance, feature.text});
  std::vector<double> bias(feature.appearance.rows(), 0.0);
  const auto text_bias = feature.text_key_bias();
  bias.insert(bias.end(), text_bias.begin(), text_bias.end());

  const auto text_query = pooled_text(feature.text, feature.text_mask);
  const Selector select = [&](const MemoryBank& b, std::size_t k) {
    return select_spatial(b, k, text_query, config_.n_s, config_.similarity);
  };
  return run_decoder_blocks(blocks, config_, config_.spatial_memory, select, bank, frame, context,
                            bias, trace ? &trace->blocks : nullptr);
}

Tensor SpatialDecoder::box(const Tensor& query) const { return sigmoid(head(query)); }

void SpatialDecoder::collect(ParameterSet& set, const std::string& prefix) const {
  for (std::size_t k = 0; k < blocks.size(); ++k) {
    blocks[k].collect(set, prefix + ".block" + std::to_string(k));
  }
  head.collect(set, prefix + ".head");
}

}  // namespace artstvg
