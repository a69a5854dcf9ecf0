#include "artstvg/encoder.hpp"

#include <stdexcept>

#include "artstvg/synthworld.hpp"

namespace artstvg {

namespace {

std::vector<double> normal_values(std::size_t n, double stddev, Rng& rng) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal(0.0, stddev);
  return v;
}

}  // namespace

void EncoderConfig::validate() const {
  if (width < 1 || heads < 1 || width % heads != 0) {
    throw std::invalid_argument("encoder: width must be a positive multiple of heads");
  }
  if (grid_h < 1 || grid_w < 1 || raw_channels < 1 || text_len < 1 || text_width < 1) {
    throw std::invalid_argument("encoder: dimensions must be >= 1");
  }
  if (mlp_ratio < 1) throw std::invalid_argument("encoder: mlp_ratio must be >= 1");
}

std::vector<double> MultimodalFeature::text_key_bias() const {
  std::vector<double> bias(text_mask.size());
  for (std::size_t i = 0; i < bias.size(); ++i) bias[i] = text_mask[i] ? 0.0 : kMaskedScore;
  return bias;
}

Encoder::Encoder(const EncoderConfig& config, Rng& rng) : config_(config) {
  config_.validate();
  if (config_.vocab_size == 0) config_.vocab_size = Vocabulary::size();
  const std::size_t C = config_.width;
  appearance_proj = Linear::init(config_.raw_channels, C, rng);
  motion_proj = Linear::init(config_.raw_channels, C, rng);
  token_table = Tensor::parameter({config_.vocab_size, config_.text_width},
                                  normal_values(config_.vocab_size * config_.text_width, 1.0, rng));
  text_proj = Linear::init(config_.text_width, C, rng);
  const std::size_t L = config_.sequence_length();
  position = Tensor::parameter({L, C}, normal_values(L * C, 0.02, rng));
  type = Tensor::parameter({3, C}, normal_values(3 * C, 0.02, rng));
  for (std::size_t b = 0; b < config_.blocks; ++b) {
    blocks.push_back(SelfAttentionBlock::init(C, config_.heads, C * config_.mlp_ratio, rng));
  }
  type_index_.reserve(L);
  type_index_.insert(type_index_.end(), config_.cells(), 0);
  type_index_.insert(type_index_.end(), config_.cells(), 1);
  type_index_.insert(type_index_.end(), config_.text_len, 2);
}

EmbeddedInputs Encoder::embed(std::span<const double> appearance_raw,
                              std::span<const double> motion_raw,
                              std::span<const std::size_t> tokens,
                              const std::vector<bool>& mask) const {
  const std::size_t HW = config_.cells();
  const std::size_t Cr = config_.raw_channels;
  if (appearance_raw.size() != HW * Cr || motion_raw.size() != HW * Cr) {
    throw ShapeError("encoder: raw grids must hold " + std::to_string(HW) + "x" +
                     std::to_string(Cr) + " values, got " + std::to_string(appearance_raw.size()) +
                     " and " + std::to_string(motion_raw.size()));
  }
  if (tokens.size() != config_.text_len || mask.size() != config_.text_len) {
    throw ShapeError("encoder: expected " + std::to_string(config_.text_len) +
                     " tokens and mask entries, got " + std::to_string(tokens.size()) + " and " +
                     std::to_string(mask.size()));
  }
  // The H x W x C grid flattened row-major is already the HW x C matrix.
  const Tensor app = Tensor::from({HW, Cr}, {appearance_raw.begin(), appearance_raw.end()});
  const Tensor mot = Tensor::from({HW, Cr}, {motion_raw.begin(), motion_raw.end()});
  std::vector<double> keep(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) keep[i] = mask[i] ? 1.0 : 0.0;
  return {appearance_proj(app), motion_proj(mot),
          scale_rows(text_proj(gather_rows(token_table, tokens)), keep)};
}

MultimodalFeature Encoder::fuse(const EmbeddedInputs& in, const std::vector<bool>& mask,
                                std::vector<std::vector<std::vector<double>>>* attention_out) const {
  const std::size_t HW = config_.cells();
  const std::size_t Nt = config_.text_len;
  const std::size_t L = config_.sequence_length();
  const std::size_t rows = in.appearance.rows() + in.motion.rows() + in.text.rows();
  if (rows != L || in.appearance.rows() != HW || in.motion.rows() != HW || in.text.rows() != Nt) {
    throw ShapeError("encoder: fused sequence must have 2*" + std::to_string(HW) + "+" +
                     std::to_string(Nt) + "=" + std::to_string(L) + " rows, got " +
                     std::to_string(rows));
  }
  if (mask.size() != Nt) throw ShapeError("encoder: text mask length mismatch");

  std::vector<double> key_bias(L, 0.0);
  for (std::size_t i = 0; i < Nt; ++i) {
    if (!mask[i]) key_bias[2 * HW + i] = kMaskedScore;
  }

  Tensor x = concat_rows({in.appearance, in.motion, in.text}) + position +
             gather_rows(type, type_index_);
  if (attention_out) attention_out->clear();
  for (const auto& block : blocks) {
    std::vector<std::vector<double>> weights;
    x = block(x, key_bias, attention_out ? &weights : nullptr);
    if (attention_out) attention_out->push_back(std::move(weights));
  }
  return {slice_rows(x, 0, HW), slice_rows(x, HW, HW), slice_rows(x, 2 * HW, Nt), mask};
}

MultimodalFeature Encoder::operator()(std::span<const double> appearance_raw,
                                      std::span<const double> motion_raw,
                                      std::span<const std::size_t> tokens,
                                      const std::vector<bool>& mask) const {
  return fuse(embed(appearance_raw, motion_raw, tokens, mask), mask);
}

void Encoder::collect(ParameterSet& set, const std::string& prefix) const {
  appearance_proj.collect(set, prefix + ".appearance_proj");
  motion_proj.collect(set, prefix + ".motion_proj");
  set.add(prefix + ".token_table", token_table);
  text_proj.collect(set, prefix + ".text_proj");
  set.add(prefix + ".position", position);
  set.add(prefix + ".type", type);
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    blocks[b].collect(set, prefix + ".block" + std::to_string(b));
  }
}

}  // namespace artstvg
