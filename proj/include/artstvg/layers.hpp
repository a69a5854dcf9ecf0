#pragma once

#include <span>
#include <string>
#include <vector>

#include "artstvg/rng.hpp"
#include "artstvg/tensor.hpp"

namespace artstvg {

/// Named, ordered view over a model's trainable tensors. Entries share
/// storage with the modules that registered them.
class ParameterSet {
 public:
  struct Entry {
    std::string name;
    Tensor tensor;
  };

  void add(std::string name, Tensor tensor);
  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }
  const Tensor* find(const std::string& name) const;
  std::size_t scalar_count() const;
  void zero_grad();

 private:
  std::vector<Entry> entries_;
};

struct Linear {
  Tensor weight;  // [in x out]
  Tensor bias;    // [1 x out]

  /// Glorot-uniform weights, zero bias.
  static Linear init(std::size_t in, std::size_t out, Rng& rng);
  Tensor operator()(const Tensor& x) const;
  void collect(ParameterSet& set, const std::string& prefix) const;
  /// Zeroes weight and bias (used to build exact-identity residual blocks).
  void zero();
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;

  static LayerNorm init(std::size_t width);
  Tensor operator()(const Tensor& x) const;
  void collect(ParameterSet& set, const std::string& prefix) const;
};

/// Pre-norm position-wise MLP with residual: x + W2 relu(W1 LN(x)).
struct FeedForward {
  LayerNorm norm;
  Linear up;
  Linear down;

  static FeedForward init(std::size_t width, std::size_t hidden, Rng& rng);
  Tensor operator()(const Tensor& x) const;
  void collect(ParameterSet& set, const std::string& prefix) const;
};

/// Pre-norm cross-attention sublayer with residual:
///   u + Wo . MHA(Wq LN_q(u), Wk LN_kv(v), Wv LN_kv(v)).
/// `u` generates the queries, `v` the keys and values.
struct CrossAttention {
  LayerNorm query_norm;
  LayerNorm context_norm;
  Linear wq, wk, wv, wo;
  std::size_t heads = 1;

  static CrossAttention init(std::size_t width, std::size_t heads, Rng& rng);
  Tensor operator()(const Tensor& u, const Tensor& v, std::span<const double> key_bias = {},
                    std::vector<std::vector<double>>* weights_out = nullptr) const;
  void collect(ParameterSet& set, const std::string& prefix) const;
};

/// Pre-norm transformer encoder block (self-attention + MLP).
struct SelfAttentionBlock {
  LayerNorm norm;
  Linear wq, wk, wv, wo;
  FeedForward ffn;
  std::size_t heads = 1;

  static SelfAttentionBlock init(std::size_t width, std::size_t heads, std::size_t hidden,
                                 Rng& rng);
  Tensor operator()(const Tensor& x, std::span<const double> key_bias = {},
                    std::vector<std::vector<double>>* weights_out = nullptr) const;
  void collect(ParameterSet& set, const std::string& prefix) const;
};

/// Plain MLP: Linear -> ReLU -> ... -> Linear (no activation on the output).
struct Mlp {
  std::vector<Linear> layers;

  static Mlp init(std::span<const std::size_t> widths, Rng& rng);
  Tensor operator()(const Tensor& x) const;
  void collect(ParameterSet& set, const std::string& prefix) const;
};

}  // namespace artstvg
