#include "artstvg/layers.hpp"

#include <algorithm>
#include <cmath>

namespace artstvg {

void ParameterSet::add(std::string name, Tensor tensor) {
  if (find(name) != nullptr) throw std::logic_error("duplicate parameter name: " + name);
  entries_.push_back({std::move(name), std::move(tensor)});
}

const Tensor* ParameterSet::find(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return &e.tensor;
  }
  return nullptr;
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.tensor.size();
  return n;
}

void ParameterSet::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

// ---------------------------------------------------------------------------

Linear Linear::init(std::size_t in, std::size_t out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  std::vector<double> w(in * out);
  for (auto& x : w) x = rng.uniform(-limit, limit);
  return {Tensor::parameter({in, out}, std::move(w)),
          Tensor::parameter({1, out}, std::vector<double>(out, 0.0))};
}

Tensor Linear::operator()(const Tensor& x) const { return matmul(x, weight) + bias; }

void Linear::collect(ParameterSet& set, const std::string& prefix) const {
  set.add(prefix + ".weight", weight);
  set.add(prefix + ".bias", bias);
}

void Linear::zero() {
  auto w = weight.mutable_data();
  std::fill(w.begin(), w.end(), 0.0);
  auto b = bias.mutable_data();
  std::fill(b.begin(), b.end(), 0.0);
}

LayerNorm LayerNorm::init(std::size_t width) {
  return {Tensor::parameter({width}, std::vector<double>(width, 1.0)),
          Tensor::parameter({width}, std::vector<double>(width, 0.0))};
}

Tensor LayerNorm::operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }

void LayerNorm::collect(ParameterSet& set, const std::string& prefix) const {
  set.add(prefix + ".gamma", gamma);
  set.add(prefix + ".beta", beta);
}

FeedForward FeedForward::init(std::size_t width, std::size_t hidden, Rng& rng) {
  FeedForward f{LayerNorm::init(width), Linear::init(width, hidden, rng),
                Linear::init(hidden, width, rng)};
  return f;
}

Tensor FeedForward::operator()(const Tensor& x) const { return x + down(relu(up(norm(x)))); }

void FeedForward::collect(ParameterSet& set, const std::string& prefix) const {
  norm.collect(set, prefix + ".norm");
  up.collect(set, prefix + ".up");
  down.collect(set, prefix + ".down");
}

CrossAttention CrossAttention::init(std::size_t width, std::size_t heads, Rng& rng) {
  CrossAttention a;
  a.query_norm = LayerNorm::init(width);
  a.context_norm = LayerNorm::init(width);
  a.wq = Linear::init(width, width, rng);
  a.wk = Linear::init(width, width, rng);
  a.wv = Linear::init(width, width, rng);
  a.wo = Linear::init(width, width, rng);
  a.heads = heads;
  return a;
}

Tensor CrossAttention::operator()(const Tensor& u, const Tensor& v, std::span<const double> key_bias,
                                  std::vector<std::vector<double>>* weights_out) const {
  const Tensor ctx = context_norm(v);
  const Tensor mixed = attention(wq(query_norm(u)), wk(ctx), wv(ctx), heads, key_bias, weights_out);
  return u + wo(mixed);
}

void CrossAttention::collect(ParameterSet& set, const std::string& prefix) const {
  query_norm.collect(set, prefix + ".query_norm");
  context_norm.collect(set, prefix + ".context_norm");
  wq.collect(set, prefix + ".wq");
  wk.collect(set, prefix + ".wk");
  wv.collect(set, prefix + ".wv");
  wo.collect(set, prefix + ".wo");
}

SelfAttentionBlock SelfAttentionBlock::init(std::size_t width, std::size_t heads, std::size_t hidden,
                                            Rng& rng) {
  SelfAttentionBlock b;
  b.norm = LayerNorm::init(width);
  b.wq = Linear::init(width, width, rng);
  b.wk = Linear::init(width, width, rng);
  b.wv = Linear::init(width, width, rng);
  b.wo = Linear::init(width, width, rng);
  b.ffn = FeedForward::init(width, hidden, rng);
  b.heads = heads;
  return b;
}

Tensor SelfAttentionBlock::operator()(const Tensor& x, std::span<const double> key_bias,
                                      std::vector<std::vector<double>>* weights_out) const {
  const Tensor h = norm(x);
  const Tensor y = x + wo(attention(wq(h), wk(h), wv(h), heads, key_bias, weights_out));
  return ffn(y);
}

void SelfAttentionBlock::collect(ParameterSet& set, const std::string& prefix) const {
  norm.collect(set, prefix + ".norm");
  wq.collect(set, prefix + ".wq");
  wk.collect(set, prefix + ".wk");
  wv.collect(set, prefix + ".wv");
  wo.collect(set, prefix + ".wo");
  ffn.collect(set, prefix + ".ffn");
}

Mlp Mlp::init(std::span<const std::size_t> widths, Rng& rng) {
  Mlp m;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    m.layers.push_back(Linear::init(widths[i], widths[i + 1], rng));
  }
  return m;
}

Tensor Mlp::operator()(const Tensor& x) const {
  Tensor h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    h = layers[i](h);
    if (i + 1 < layers.size()) h = relu(h);
  }
  return h;
}

void Mlp::collect(ParameterSet& set, const std::string& prefix) const {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    layers[i].collect(set, prefix + ".layer" + std::to_string(i));
  }
}

}  // namespace artstvg
