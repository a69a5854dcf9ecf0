#include <cmath>

#include "artstvg/spatial_decoder.hpp"
#include "artstvg/synthworld.hpp"
#include "artstvg/temporal_decoder.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace artstvg;

namespace {

// Straight-line reference for one decoder block over plain matrices.
using Mat = std::vector<std::vector<double>>;

Mat to_mat(const Tensor& t) {
  Mat m(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) m[r][c] = t.at(r, c);
  return m;
}

Mat ref_linear(const Mat& x, const Linear& l) {
  const std::size_t out = l.weight.cols();
  Mat y(x.size(), std::vector<double>(out));
  for (std::size_t r = 0; r < x.size(); ++r)
    for (std::size_t j = 0; j < out; ++j) {
      double s = l.bias[j];
      for (std::size_t i = 0; i < x[r].size(); ++i) s += x[r][i] * l.weight.at(i, j);
      y[r][j] = s;
    }
  return y;
}

Mat ref_norm(const Mat& x, const LayerNorm& n) {
  Mat y = x;
  for (auto& row : y) {
    double mu = 0.0, var = 0.0;
    for (double v : row) mu += v;
    mu /= row.size();
    for (double v : row) var += (v - mu) * (v - mu);
    var /= row.size();
    for (std::size_t j = 0; j < row.size(); ++j) {
      row[j] = (row[j] - mu) / std::sqrt(var + 1e-5) * n.gamma[j] + n.beta[j];
    }
  }
  return y;
}

Mat ref_add(Mat a, const Mat& b) {
  for (std::size_t r = 0; r < a.size(); ++r)
    for (std::size_t j = 0; j < a[r].size(); ++j) a[r][j] += b[r][j];
  return a;
}

Mat ref_cross(const Mat& u, const Mat& v, const CrossAttention& a, const std::vector<double>& bias) {
  const Mat q = ref_linear(ref_norm(u, a.query_norm), a.wq);
  const Mat ctx = ref_norm(v, a.context_norm);
  const Mat k = ref_linear(ctx, a.wk), val = ref_linear(ctx, a.wv);
  const std::size_t C = q[0].size(), d = C / a.heads;
  Mat mixed(q.size(), std::vector<double>(C, 0.0));
  for (std::size_t r = 0; r < q.size(); ++r) {
    for (std::size_t h = 0; h < a.heads; ++h) {
      std::vector<double> s(k.size());
      double mx = -1e300;
      for (std::size_t j = 0; j < k.size(); ++j) {
        double dot = 0.0;
        for (std::size_t t = 0; t < d; ++t) dot += q[r][h * d + t] * k[j][h * d + t];
        s[j] = dot / std::sqrt(double(d)) + (bias.empty() ? 0.0 : bias[j]);
        mx = std::max(mx, s[j]);
      }
      double z = 0.0;
      for (auto& x : s) z += (x = std::exp(x - mx));
      for (std::size_t j = 0; j < k.size(); ++j)
        for (std::size_t t = 0; t < d; ++t) mixed[r][h * d + t] += s[j] / z * val[j][h * d + t];
    }
  }
  return ref_add(u, ref_linear(mixed, a.wo));
}

Mat ref_ffn(const Mat& x, const FeedForward& f) {
  Mat h = ref_linear(ref_norm(x, f.norm), f.up);
  for (auto& row : h)
    for (auto& v : row) v = std::max(v, 0.0);
  return ref_add(x, ref_linear(h, f.down));
}

Mat ref_block(const Mat& q, const Mat& memory, const Mat& context, const std::vector<double>& bias,
              const DecoderBlock& b) {
  Mat x = q;
  if (!memory.empty()) x = ref_cross(x, memory, b.memory_attention, {});
  x = ref_cross(x, context, b.context_attention, bias);
  return ref_ffn(x, b.ffn);
}

Tensor random_rows(Rng& rng, std::size_t rows, std::size_t cols) {
  return testing::random_tensor({rows, cols}, rng, 1.0, false);
}

MultimodalFeature random_feature(Rng& rng, const EncoderConfig& ec, std::size_t words = 2) {
  MultimodalFeature f;
  f.appearance = random_rows(rng, ec.cells(), ec.width);
  f.motion = random_rows(rng, ec.cells(), ec.width);
  f.text = random_rows(rng, ec.text_len, ec.width);
  f.text_mask.assign(ec.text_len, false);
  for (std::size_t i = 0; i < words; ++i) f.text_mask[i] = true;
  return f;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

void zero_out(DecoderBlock& b) {
  b.memory_attention.wo.zero();
  b.context_attention.wo.zero();
  b.ffn.down.zero();
}

}  // namespace

TEST_SUITE("decoders") {

TEST_CASE("decoder block matches the straight-line reference") {
  Rng rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    const DecoderBlock b = DecoderBlock::init(8, 2, 16, rng);
    const Tensor q = random_rows(rng, 1, 8);
    SelectedMemory mem;
    const std::size_t n_mem = trial % 4;
    for (std::size_t i = 0; i < n_mem; ++i) {
      mem.vectors.push_back(random_rows(rng, 1, 8));
      mem.source_indices.push_back(i);
    }
    const Tensor ctx = random_rows(rng, 6, 8);
    const std::vector<double> bias = {0, 0, 0, 0, kMaskedScore, 0};
    const Tensor got = b(q, mem, ctx, bias);
    Mat memory;
    for (const auto& v : mem.vectors) memory.push_back(to_mat(v)[0]);
    const Mat want = ref_block(to_mat(q), memory, to_mat(ctx), bias, b);
    for (std::size_t j = 0; j < 8; ++j) CHECK(std::abs(got[j] - want[0][j]) < 1e-9);
  }
}

TEST_CASE("single memory gets the whole attention weight") {
  Rng rng(2);
  const DecoderBlock b = DecoderBlock::init(8, 2, 16, rng);
  const Tensor q = random_rows(rng, 1, 8);
  SelectedMemory mem{{q}, {0}};
  BlockTrace trace;
  b(q, mem, random_rows(rng, 3, 8), {}, &trace);
  REQUIRE(trace.memory_weights.size() == 2);
  for (const auto& head : trace.memory_weights) {
    REQUIRE(head.size() == 1);
    CHECK(head[0] == doctest::Approx(1.0).epsilon(1e-15));
  }
}

TEST_CASE("zeroed output projections make the block an identity") {
  Rng rng(3);
  DecoderBlock b = DecoderBlock::init(8, 2, 16, rng);
  zero_out(b);
  const Tensor q = random_rows(rng, 1, 8);
  SelectedMemory mem{{random_rows(rng, 1, 8)}, {0}};
  const Tensor zeros = Tensor::zeros({5, 8});
  const Tensor out = b(q, mem, zeros, {});
  for (std::size_t j = 0; j < 8; ++j) CHECK(out[j] == q[j]);
}

TEST_CASE("spatial decode grows every partition by one per frame") {
  DecoderConfig dc;
  EncoderConfig ec;
  Rng rng(4);
  SpatialDecoder dec(dc, rng);
  MemoryBank bank = dec.make_bank();
  CHECK(bank.partitions() == dc.blocks);
  for (std::size_t f = 0; f < 5; ++f) {
    SpatialTrace trace;
    dec.decode(random_feature(rng, ec), bank, f, &trace);
    for (std::size_t k = 0; k < dc.blocks; ++k) CHECK(bank.size(k) == f + 1);
    // Insert-before-select: this frame's query is eligible in every block.
    for (const auto& bt : trace.blocks) CHECK(bt.memory.source_indices.back() == f);
  }
  // Block 1 stores the zero initial query.
  for (const auto& m : bank.partition(0))
    for (double v : m.vector.data()) CHECK(v == 0.0);
}

TEST_CASE("outgoing insertion stores block outputs") {
  DecoderConfig dc;
  dc.insert = InsertMode::kOutgoing;
  EncoderConfig ec;
  Rng rng(5);
  SpatialDecoder dec(dc, rng);
  MemoryBank bank = dec.make_bank();
  SpatialTrace trace;
  const Tensor q = dec.decode(random_feature(rng, ec), bank, 0, &trace);
  CHECK(trace.blocks[0].memory.empty());  // nothing stored yet at frame 0
  const auto last = bank.partition(dc.blocks - 1).back().vector;
  CHECK(max_abs_diff(last, q) == 0.0);
  dec.decode(random_feature(rng, ec), bank, 1, &trace);
  CHECK(trace.blocks[0].memory.source_indices == std::vector<std::size_t>{0});
}

TEST_CASE("single-block spatial decode is one block application") {
  DecoderConfig dc;
  dc.blocks = 1;
  EncoderConfig ec;
  Rng rng(6);
  SpatialDecoder dec(dc, rng);
  MemoryBank bank = dec.make_bank();
  const auto f = random_feature(rng, ec);
  const Tensor q = dec.decode(f, bank, 0);
  std::vector<double> bias(ec.cells(), 0.0);
  const auto tb = f.text_key_bias();
  bias.insert(bias.end(), tb.begin(), tb.end());
  const Tensor zero = Tensor::zeros({1, dc.width});
  SelectedMemory mem{{zero}, {0}};
  const Tensor want = dec.blocks[0](zero, mem, concat_rows({f.appearance, f.text}), bias);
  CHECK(max_abs_diff(q, want) == 0.0);
}

TEST_CASE("memory-disabled decoding equals the memoryless baseline") {
  DecoderConfig dc;
  dc.spatial_memory = MemoryMode::kNone;
  EncoderConfig ec;
  Rng rng(7);
  SpatialDecoder dec(dc, rng);
  MemoryBank bank = dec.make_bank();
  std::vector<double> bias(ec.cells(), 0.0);
  for (std::size_t f = 0; f < 4; ++f) {
    const auto feat = random_feature(rng, ec);
    const Tensor got = dec.decode(feat, bank, f);
    auto b = bias;
    const auto tb = feat.text_key_bias();
    b.insert(b.end(), tb.begin(), tb.end());
    Tensor q = Tensor::zeros({1, dc.width});
    const Tensor ctx = concat_rows({feat.appearance, feat.text});
    for (const auto& blk : dec.blocks) q = blk(q, SelectedMemory{}, ctx, b);
    CHECK(max_abs_diff(got, q) == 0.0);
  }
}

TEST_CASE("text-aligned memory is selected in every block") {
  DecoderConfig dc;
  dc.n_s = 1;
  EncoderConfig ec;
  Rng rng(8);
  SpatialDecoder dec(dc, rng);
  MemoryBank bank = dec.make_bank();
  const auto feat = random_feature(rng, ec);
  const auto text = pooled_text(feat.text, feat.text_mask);
  const std::size_t planted = 3;
  for (std::size_t f = 0; f < 6; ++f) {
    for (std::size_t k = 0; k < dc.blocks; ++k) {
      const Tensor v = f == planted ? Tensor::from({1, dc.width}, text) : random_rows(rng, 1, dc.width);
      bank.insert(k, v, f);
    }
  }
  SpatialTrace trace;
  dec.decode(feat, bank, 6, &trace);
  for (const auto& bt : trace.blocks) CHECK(bt.memory.source_indices == std::vector<std::size_t>{planted});
}

TEST_CASE("spatial head") {
  DecoderConfig dc;
  Rng rng(9);
  SpatialDecoder dec(dc, rng);
  SpatialDecoder zeroed = dec;
  zeroed.head.layers.back().zero();
  const Tensor b0 = zeroed.box(Tensor::zeros({1, dc.width}));
  for (std::size_t j = 0; j < 4; ++j) CHECK(b0[j] == 0.5);

  for (int i = 0; i < 1000; ++i) {
    const Tensor b = dec.box(testing::random_tensor({1, dc.width}, rng, 5.0, false));
    for (std::size_t j = 0; j < 4; ++j) {
      CHECK(b[j] > 0.0);
      CHECK(b[j] < 1.0);
    }
  }

  Tensor q = testing::random_tensor({1, dc.width}, rng, 1.0, true);
  const Tensor w = testing::random_tensor({1, 4}, rng, 1.0, false);
  const auto checks = testing::check_gradients([&] { return sum(dec.box(q) * w); }, {{"q", q}});
  CHECK(checks[0].ok(1e-4));
}

TEST_CASE("roi pooling") {
  Rng rng(10);
  const std::size_t C = 5;
  const Tensor motion = random_rows(rng, 64, C);
  // Full box: global mean.
  const Tensor all = roi_pool(motion, Box{0.5, 0.5, 1.0, 1.0}, 8, 8);
  for (std::size_t j = 0; j < C; ++j) {
    double m = 0.0;
    for (std::size_t r = 0; r < 64; ++r) m += motion.at(r, j);
    CHECK(all[j] == doctest::Approx(m / 64).epsilon(1e-12));
  }
  // 1x1 grid.
  const Tensor one = random_rows(rng, 1, C);
  const Tensor p1 = roi_pool(one, Box{0.3, 0.6, 0.1, 0.1}, 1, 1);
  for (std::size_t j = 0; j < C; ++j) CHECK(p1[j] == one[j]);
  // Box exactly over cells (2..3, 2..3), against a naive loop.
  const Box b = Box::from_corners(2.0 / 8, 2.0 / 8, 4.0 / 8, 4.0 / 8);
  const Tensor p = roi_pool(motion, b, 8, 8);
  for (std::size_t j = 0; j < C; ++j) {
    double m = 0.0;
    int n = 0;
    for (std::size_t y = 0; y < 8; ++y)
      for (std::size_t x = 0; x < 8; ++x) {
        if (y >= 2 && y <= 3 && x >= 2 && x <= 3) {
          m += motion.at(y * 8 + x, j);
          ++n;
        }
      }
    CHECK(n == 4);
    CHECK(p[j] == doctest::Approx(m / n).epsilon(1e-12));
  }
  // Tiny box between centers falls back to the center cell.
  reset_roi_fallback_count();
  const Tensor small = roi_pool(motion, Box{2.0 / 8, 5.0 / 8, 0.01, 0.01}, 8, 8);
  CHECK(roi_fallback_count() == 1);
  // Center (0.25, 0.625) lies in cell x=2, y=5.
  for (std::size_t j = 0; j < C; ++j) CHECK(small[j] == motion.at(5 * 8 + 2, j));
  roi_pool(motion, Box{0.5, 0.5, 0.0, 0.3}, 8, 8);
  CHECK(roi_fallback_count() == 2);
}

TEST_CASE("soft roi pooling approaches hard pooling and is differentiable") {
  Rng rng(11);
  const Tensor motion = random_rows(rng, 64, 4);
  const Box b = Box::from_corners(2.0 / 8, 2.0 / 8, 4.0 / 8, 5.0 / 8);
  const Tensor hard = roi_pool(motion, b, 8, 8);
  const Tensor soft = soft_roi_pool(motion, Tensor::from({1, 4}, {b.cx, b.cy, b.w, b.h}), 8, 8, 0.05);
  CHECK(max_abs_diff(hard, soft) < 1e-3);

  Tensor box = Tensor::parameter({1, 4}, {0.41, 0.52, 0.33, 0.27});
  const Tensor w = random_rows(rng, 1, 4);
  const auto checks =
      testing::check_gradients([&] { return sum(soft_roi_pool(motion, box, 8, 8, 0.1) * w); }, {{"box", box}});
  CHECK(checks[0].ok(1e-4));
  CHECK(checks[0].analytic_norm > 1e-3);
}

TEST_CASE("temporal context key counts") {
  EncoderConfig ec;
  Rng rng(12);
  const auto feat = random_feature(rng, ec);
  DecoderConfig dc;
  TemporalDecoder cascaded(dc, rng);
  std::vector<double> bias;
  const Tensor pooled = random_rows(rng, 1, dc.width);
  CHECK(cascaded.context(feat, pooled, bias).rows() == 1 + ec.text_len);
  CHECK(bias.size() == 1 + ec.text_len);
  dc.temporal_context = TemporalContext::kParallel;
  TemporalDecoder parallel(dc, rng);
  CHECK(parallel.context(feat, Tensor{}, bias).rows() == ec.cells() + ec.text_len);
  CHECK(bias.size() == ec.cells() + ec.text_len);
}

TEST_CASE("temporal decode: growth, suffix selection, head") {
  EncoderConfig ec;
  DecoderConfig dc;
  Rng rng(13);
  TemporalDecoder dec(dc, rng);
  MemoryBank bank = dec.make_bank();
  for (std::size_t f = 0; f < 12; ++f) {
    const auto feat = random_feature(rng, ec);
    std::vector<double> bias;
    const Tensor ctx = dec.context(feat, random_rows(rng, 1, dc.width), bias);
    TemporalTrace trace;
    dec.decode(ctx, bias, bank, f, &trace);
    for (std::size_t k = 0; k < dc.blocks; ++k) CHECK(bank.size(k) == f + 1);
    for (std::size_t k = 0; k < dc.blocks; ++k) {
      const auto& src = trace.blocks[k].memory.source_indices;
      REQUIRE_FALSE(src.empty());
      CHECK(src.back() == f);
      for (std::size_t i = 1; i < src.size(); ++i) CHECK(src[i] == src[i - 1] + 1);
      std::vector<std::vector<double>> vs;
      for (const auto& m : bank.partition(k)) vs.emplace_back(m.vector.data().begin(), m.vector.data().end());
      const auto b = detect_boundaries(vs, dc.boundary);
      CHECK(src.front() == (b.empty() ? 0 : b.back() + 1));
    }
  }

  TemporalDecoder zeroed = dec;
  zeroed.head.layers.back().zero();
  const Tensor l0 = zeroed.logits(Tensor::zeros({1, dc.width}));
  CHECK(1.0 / (1.0 + std::exp(-l0[0])) == 0.5);
  CHECK(1.0 / (1.0 + std::exp(-l0[1])) == 0.5);
  for (int i = 0; i < 1000; ++i) {
    const Tensor s = sigmoid(dec.logits(testing::random_tensor({1, dc.width}, rng, 5.0, false)));
    CHECK(s[0] > 0.0);
    CHECK(s[0] < 1.0);
    CHECK(s[1] > 0.0);
    CHECK(s[1] < 1.0);
  }
  Tensor p = testing::random_tensor({1, dc.width}, rng, 1.0, true);
  const auto checks = testing::check_gradients(
      [&] { return sum(sigmoid(dec.logits(p)) * Tensor::from({1, 2}, {0.7, -1.3})); }, {{"p", p}});
  CHECK(checks[0].ok(1e-4));
}

TEST_CASE("all-memory temporal variant attends to the whole partition") {
  EncoderConfig ec;
  DecoderConfig dc;
  dc.temporal_memory = MemoryMode::kAll;
  Rng rng(14);
  TemporalDecoder dec(dc, rng);
  MemoryBank bank = dec.make_bank();
  for (std::size_t f = 0; f < 6; ++f) {
    std::vector<double> bias;
    const Tensor ctx = dec.context(random_feature(rng, ec), random_rows(rng, 1, dc.width), bias);
    TemporalTrace trace;
    dec.decode(ctx, bias, bank, f, &trace);
    for (const auto& bt : trace.blocks) CHECK(bt.memory.size() == f + 1);
  }
}

TEST_CASE("cascade: the box changes the temporal scores") {
  EncoderConfig ec;
  DecoderConfig dc;
  Rng rng(15);
  TemporalDecoder dec(dc, rng);
  const auto feat = random_feature(rng, ec);
  // Keep the center off a cell edge: the fallback center cell is piecewise constant.
  Tensor box = Tensor::parameter({1, 4}, {0.45, 0.52, 0.3, 0.35});
  const auto logits_of = [&] {
    MemoryBank bank = dec.make_bank();
    std::vector<double> bias;
    const Tensor pooled = soft_roi_pool(feat.motion, box, ec.grid_h, ec.grid_w, dc.roi_tau);
    const Tensor ctx = dec.context(feat, pooled, bias);
    return dec.logits(dec.decode(ctx, bias, bank, 0));
  };
  const Tensor w = Tensor::from({1, 2}, {1.0, 0.5});
  const auto checks = testing::check_gradients([&] { return sum(logits_of() * w); }, {{"box", box}});
  CHECK(checks[0].analytic_norm > 1e-6);
  CHECK_MESSAGE(checks[0].ok(1e-4), "error " << checks[0].error << " norm " << checks[0].analytic_norm << " numeric " << checks[0].numeric_norm);
}

}  // TEST_SUITE
