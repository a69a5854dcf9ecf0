#include "artstvg/temporal_decoder.hpp"

#include <algorithm>
#include <cmath>

namespace artstvg {

namespace {

std::atomic<std::size_t> g_roi_fallbacks{0};

constexpr double kCenterWeight = 1e-3;

std::size_t center_cell(double cx, double cy, std::size_t grid_h, std::size_t grid_w) {
  auto axis = [](double v, std::size_t n) -> std::size_t {
    if (!std::isfinite(v)) return n / 2;
    const double idx = std::floor(std::clamp(v, 0.0, 1.0) * static_cast<double>(n));
    return std::min(static_cast<std::size_t>(std::max(idx, 0.0)), n - 1);
  };
  return axis(cy, grid_h) * grid_w + axis(cx, grid_w);
}

void check_motion(const Tensor& motion, std::size_t grid_h, std::size_t grid_w) {
  if (motion.rank() != 2 || motion.rows() != grid_h * grid_w) {
    throw ShapeError("roi_pool: motion " + shape_str(motion.shape()) + " does not match a " +
                     std::to_string(grid_h) + "x" + std::to_string(grid_w) + " grid");
  }
}

}  // namespace

std::size_t roi_fallback_count() { return g_roi_fallbacks.load(); }
void reset_roi_fallback_count() { g_roi_fallbacks = 0; }

Tensor roi_pool(const Tensor& motion, const Box& box, std::size_t grid_h, std::size_t grid_w) {
  check_motion(motion, grid_h, grid_w);
  const std::size_t HW = grid_h * grid_w;
  std::vector<double> weights(HW, 0.0);
  const double x1 = std::max(0.0, box.x1()), x2 = std::min(1.0, box.x2());
  const double y1 = std::max(0.0, box.y1()), y2 = std::min(1.0, box.y2());
  std::size_t inside = 0;
  if (x2 > x1 && y2 > y1) {
    for (std::size_t r = 0; r < grid_h; ++r) {
      const double cy = (static_cast<double>(r) + 0.5) / static_cast<double>(grid_h);
      if (cy < y1 || cy > y2) continue;
      for (std::size_t c = 0; c < grid_w; ++c) {
        const double cx = (static_cast<double>(c) + 0.5) / static_cast<double>(grid_w);
        if (cx < x1 || cx > x2) continue;
        weights[r * grid_w + c] = 1.0;
        ++inside;
      }
    }
  }
  if (inside == 0) {
    ++g_roi_fallbacks;
    weights[center_cell(box.cx, box.cy, grid_h, grid_w)] = 1.0;
    inside = 1;
  }
  for (auto& w : weights) w /= static_cast<double>(inside);
  return matmul(Tensor::from({1, HW}, std::move(weights)), motion);
}

Tensor soft_roi_pool(const Tensor& motion, const Tensor& box, std::size_t grid_h,
                     std::size_t grid_w, double tau) {
  check_motion(motion, grid_h, grid_w);
  if (box.size() != 4) throw ShapeError("soft_roi_pool: box must have 4 values");
  const std::size_t HW = grid_h * grid_w;
  std::vector<double> gx(HW), gy(HW);
  for (std::size_t r = 0; r < grid_h; ++r) {
    for (std::size_t c = 0; c < grid_w; ++c) {
      gx[r * grid_w + c] = static_cast<double>(c) + 0.5;
      gy[r * grid_w + c] = static_cast<double>(r) + 0.5;
    }
  }
  const Tensor cell_x = Tensor::from({HW, 1}, std::move(gx));
  const Tensor cell_y = Tensor::from({HW, 1}, std::move(gy));
  const Tensor b = reshape(box, {1, 4});
  const Tensor cx = slice_cols(b, 0, 1) * static_cast<double>(grid_w);
  const Tensor cy = slice_cols(b, 1, 1) * static_cast<double>(grid_h);
  const Tensor hw = slice_cols(b, 2, 1) * (0.5 * static_cast<double>(grid_w));
  const Tensor hh = slice_cols(b, 3, 1) * (0.5 * static_cast<double>(grid_h));
  const double inv_tau = 1.0 / tau;
  const Tensor wx = sigmoid((cell_x - (cx - hw)) * inv_tau) * sigmoid(((cx + hw) - cell_x) * inv_tau);
  const Tensor wy = sigmoid((cell_y - (cy - hh)) * inv_tau) * sigmoid(((cy + hh) - cell_y) * inv_tau);
  const Tensor w = wx * wy;  // HW x 1

  const std::size_t center = center_cell(box[0], box[1], grid_h, grid_w);
  const Tensor numerator =
      matmul(transpose(w), motion) + slice_rows(motion, center, 1) * kCenterWeight;
  return numerator / (sum(w) + kCenterWeight);
}

TemporalDecoder::TemporalDecoder(const DecoderConfig& config, Rng& rng) : config_(config) {
  config_.validate();
  const std::size_t C = config_.width;
  for (std::size_t k = 0; k < config_.blocks; ++k) {
    blocks.push_back(DecoderBlock::init(C, config_.heads, C * config_.mlp_ratio, rng));
  }
  const std::size_t widths[] = {C, C, C, 2};
  head = Mlp::init(widths, rng);
}

MemoryBank TemporalDecoder::make_bank() const {
  return MemoryBank(BankKind::kTemporal, config_.blocks, config_.width, config_.memory_capacity);
}

Tensor TemporalDecoder::context(const MultimodalFeature& feature, const Tensor& pooled_motion,
                                std::vector<double>& key_bias) const {
  const Tensor& motion =
      config_.temporal_context == TemporalContext::kCascaded ? pooled_motion : feature.motion;
  key_bias.assign(motion.rows(), 0.0);
  const auto text_bias = feature.text_key_bias();
  key_bias.insert(key_bias.end(), text_bias.begin(), text_bias.end());
  return concat_rows({motion, feature.text});
}

Tensor TemporalDecoder::decode(const Tensor& context, std::span<const double> key_bias,
                               MemoryBank& bank, std::size_t frame, TemporalTrace* trace) const {
  const BoundaryRule rule = config_.boundary;
  const Selector select = [rule](const MemoryBank& b, std::size_t k) {
    return select_temporal(b, k, rule);
  };
  return run_decoder_blocks(blocks, config_, config_.temporal_memory, select, bank, frame, context,
                            key_bias, trace ? &trace->blocks : nullptr);
}

Tensor TemporalDecoder::logits(const Tensor& query) const { return head(query); }

void TemporalDecoder::collect(ParameterSet& set, const std::string& prefix) const {
  for (std::size_t k = 0; k < blocks.size(); ++k) {
    blocks[k].collect(set, prefix + ".block" + std::to_string(k));
  }
  head.collect(set, prefix + ".head");
}

}  // namespace artstvg
