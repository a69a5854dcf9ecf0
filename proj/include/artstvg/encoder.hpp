#pragma once

// Multimodal encoder: per-frame appearance, motion and text embeddings are
// projected to a common width, concatenated, tagged with position and type
// embeddings, fused by self-attention blocks and split back apart.

#include <span>
#include <vector>

#include "artstvg/layers.hpp"
#include "artstvg/rng.hpp"
#include "artstvg/tensor.hpp"

namespace artstvg {

struct EncoderConfig {
  std::size_t width = 32;        // C (full scale: 256)
  std::size_t heads = 4;
  std::size_t blocks = 2;        // N (full scale: 6)
  std::size_t mlp_ratio = 2;
  std::size_t grid_h = 8;
  std::size_t grid_w = 8;
  std::size_t raw_channels = 8;  // C_a = C_m at toy scale (full scale: 2048 / 768)
  std::size_t text_len = 8;      // N_t (full scale: 30)
  std::size_t text_width = 16;   // C_t (full scale: 768)
  std::size_t vocab_size = 0;    // 0 -> Vocabulary::size()

  std::size_t cells() const { return grid_h * grid_w; }
  std::size_t sequence_length() const { return 2 * cells() + text_len; }
  void validate() const;
};

/// Per-frame projected inputs (f^a_i, f^m_i, f^t), all of width C.
struct EmbeddedInputs {
  Tensor appearance;  // HW x C
  Tensor motion;      // HW x C
  Tensor text;        // N_t x C, PAD rows zero
};

/// Fused output split back into its three segments.
struct MultimodalFeature {
  Tensor appearance;  // HW x C
  Tensor motion;      // HW x C
  Tensor text;        // N_t x C
  std::vector<bool> text_mask;

  /// Additive key bias for attending over text rows (PAD -> masked).
  std::vector<double> text_key_bias() const;
};

class Encoder {
 public:
  Encoder(const EncoderConfig& config, Rng& rng);

  const EncoderConfig& config() const { return config_; }

  /// appearance_raw / motion_raw: H x W x C_raw cell grids (row-major),
  /// tokens: text_len ids, mask: true for real tokens.
  EmbeddedInputs embed(std::span<const double> appearance_raw, std::span<const double> motion_raw,
                       std::span<const std::size_t> tokens, const std::vector<bool>& mask) const;

  /// When attention_out is given it receives per block, per head, the
  /// (2HW+N_t)^2 self-attention matrix.
  MultimodalFeature fuse(const EmbeddedInputs& inputs, const std::vector<bool>& mask,
                         std::vector<std::vector<std::vector<double>>>* attention_out = nullptr) const;

  MultimodalFeature operator()(std::span<const double> appearance_raw,
                               std::span<const double> motion_raw,
                               std::span<const std::size_t> tokens,
                               const std::vector<bool>& mask) const;

  void collect(ParameterSet& set, const std::string& prefix) const;

  // Parameters are public so tests can build exact special cases.
  Linear appearance_proj;
  Linear motion_proj;
  Tensor token_table;  // |V| x C_t
  Linear text_proj;
  Tensor position;     // (2HW+N_t) x C
  Tensor type;         // 3 x C
  std::vector<SelfAttentionBlock> blocks;

 private:
  EncoderConfig config_;
  std::vector<std::size_t> type_index_;
};

}  // namespace artstvg
