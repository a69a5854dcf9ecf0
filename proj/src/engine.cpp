#include "artstvg/engine.hpp"

#include <algorithm>
#include <cmath>

#include "artstvg/binary_io.hpp"
#include "json.hpp"

namespace artstvg {

namespace {

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

std::vector<double> frame_softmax(std::span<const double> x) {
  const double m = *std::max_element(x.begin(), x.end());
  std::vector<double> p(x.size());
  double z = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) z += (p[i] = std::exp(x[i] - m));
  for (auto& v : p) v /= z;
  return p;
}

void put_bank(TensorArchive& a, const std::string& prefix, const MemoryBank& bank) {
  a.put_u64s(prefix + ".meta", {bank.partitions(), bank.width(),
                                bank.capacity() ? *bank.capacity() : 0});
  for (std::size_t k = 0; k < bank.partitions(); ++k) {
    const auto& part = bank.partition(k);
    std::vector<double> values;
    std::vector<std::uint64_t> frames;
    for (const auto& e : part) {
      values.insert(values.end(), e.vector.data().begin(), e.vector.data().end());
      frames.push_back(e.frame);
    }
    const std::string base = prefix + ".k" + std::to_string(k);
    a.put(base + ".values", {part.size(), bank.width()}, std::move(values));
    a.put_u64s(base + ".frames", frames);
  }
}

MemoryBank get_bank(const TensorArchive& a, const std::string& prefix, BankKind kind,
                    const MemoryBank& expected) {
  const auto meta = a.get_u64s(prefix + ".meta");
  if (meta.size() != 3 || meta[0] != expected.partitions() || meta[1] != expected.width()) {
    throw FormatError("stream bank '" + prefix + "' does not match the model");
  }
  std::optional<std::size_t> capacity;
  if (meta[2] > 0) capacity = meta[2];
  MemoryBank bank(kind, meta[0], meta[1], capacity);
  for (std::size_t k = 0; k < bank.partitions(); ++k) {
    const std::string base = prefix + ".k" + std::to_string(k);
    const auto& values = a.get(base + ".values");
    const auto frames = a.get_u64s(base + ".frames");
    const std::size_t C = bank.width();
    if (values.values.size() != frames.size() * C) {
      throw FormatError("stream bank '" + base + "' is inconsistent");
    }
    for (std::size_t i = 0; i < frames.size(); ++i) {
      bank.insert(k,
                  Tensor::from({1, C}, {values.values.begin() + i * C,
                                        values.values.begin() + (i + 1) * C}),
                  frames[i]);
    }
  }
  return bank;
}

}  // namespace

void ModelConfig::validate() const {
  encoder.validate();
  decoder.validate();
  if (encoder.width != decoder.width) {
    throw std::invalid_argument("model: encoder and decoder widths differ");
  }
}

Model::Model(const ModelConfig& config, std::uint64_t seed)
    : config_((config.validate(), config)),
      init_rng_(seed),
      encoder(config_.encoder, init_rng_),
      spatial(config_.decoder, init_rng_),
      temporal(config_.decoder, init_rng_) {}

ParameterSet Model::parameters() const {
  ParameterSet set;
  encoder.collect(set, "encoder");
  spatial.collect(set, "spatial");
  temporal.collect(set, "temporal");
  return set;
}

void Model::save(TensorArchive& archive) const {
  const ParameterSet params = parameters();
  for (const auto& e : params.entries()) archive.put("param." + e.name, e.tensor);
}

void Model::load(const TensorArchive& archive) {
  ParameterSet params = parameters();
  for (auto& e : params.entries()) archive.load_into("param." + e.name, e.tensor);
}

double FrameOutput::start_score() const { return logistic(start_logit); }
double FrameOutput::end_score() const { return logistic(end_logit); }

StreamState start_stream(const Model& model) {
  StreamState s;
  s.spatial_bank = model.spatial.make_bank();
  s.temporal_bank = model.temporal.make_bank();
  return s;
}

FrameForward forward_frame(const Model& model, StreamState& state, std::size_t frame_index,
                           std::span<const double> grid, const EncodedQuery& query,
                           const ForwardOptions& options) {
  if (frame_index != state.cursor) {
    throw StreamOrderError("frame " + std::to_string(frame_index) + " presented, expected " +
                           std::to_string(state.cursor));
  }
  const auto& ec = model.encoder.config();
  const auto& dc = model.spatial.config();
  if (grid.size() != ec.cells() * ec.raw_channels) {
    throw ShapeError("frame has " + std::to_string(grid.size()) + " values, expected " +
                     std::to_string(ec.cells() * ec.raw_channels));
  }
  std::vector<double> motion(grid.size(), 0.0);
  if (state.cursor > 0) {
    for (std::size_t j = 0; j < grid.size(); ++j) motion[j] = grid[j] - state.previous_grid[j];
  }

  const MultimodalFeature mm = model.encoder(grid, motion, query.tokens, query.mask);
  const Tensor q = model.spatial.decode(mm, state.spatial_bank, frame_index, options.spatial_trace);
  const Tensor box = model.spatial.box(q);

  Tensor pooled;
  if (dc.temporal_context == TemporalContext::kCascaded) {
    if (options.teacher_box) {
      pooled = roi_pool(mm.motion, *options.teacher_box, ec.grid_h, ec.grid_w);
    } else if (options.soft_roi) {
      pooled = soft_roi_pool(mm.motion, box, ec.grid_h, ec.grid_w, dc.roi_tau);
    } else {
      pooled = roi_pool(mm.motion, Box{box[0], box[1], box[2], box[3]}, ec.grid_h, ec.grid_w);
    }
  }
  std::vector<double> bias;
  const Tensor context = model.temporal.context(mm, pooled, bias);
  const Tensor p =
      model.temporal.decode(context, bias, state.temporal_bank, frame_index, options.temporal_trace);
  Tensor logits = model.temporal.logits(p);

  state.previous_grid.assign(grid.begin(), grid.end());
  ++state.cursor;
  return {box, logits};
}

FrameOutput step(const Model& model, StreamState& state, std::size_t frame_index,
                 std::span<const double> grid, const EncodedQuery& query) {
  reset_allocation_peak();
  const std::size_t live = allocation_stats().live_bytes;
  FrameOutput out;
  {
    const FrameForward f = forward_frame(model, state, frame_index, grid, query);
    out.box = {f.box[0], f.box[1], f.box[2], f.box[3]};
    out.start_logit = f.logits[0];
    out.end_logit = f.logits[1];
  }
  state.last_step_peak_bytes = allocation_stats().peak_bytes - live;
  state.outputs.push_back(out);
  return out;
}

Segment decode_segment(std::span<const double> start_scores, std::span<const double> end_scores) {
  if (start_scores.size() != end_scores.size()) {
    throw std::invalid_argument("decode_segment: score lists differ in length");
  }
  if (start_scores.empty()) throw std::invalid_argument("decode_segment: empty score lists");
  const auto ps = frame_softmax(start_scores);
  const auto pe = frame_softmax(end_scores);
  std::size_t arg_s = 0;  // best start in [0, e], earliest on ties
  Segment best{0, 0};
  double best_value = -1.0;
  for (std::size_t e = 0; e < pe.size(); ++e) {
    if (ps[e] > ps[arg_s]) arg_s = e;
    const double v = ps[arg_s] * pe[e];
    if (v > best_value || (v == best_value && static_cast<int>(arg_s) < best.start)) {
      best_value = v;
      best = {static_cast<int>(arg_s), static_cast<int>(e)};
    }
  }
  return best;
}

TubePrediction finish_stream(const StreamState& state) {
  if (state.outputs.empty()) throw std::invalid_argument("ground: empty video");
  TubePrediction t;
  for (const auto& o : state.outputs) {
    t.boxes.push_back(o.box);
    t.start_logits.push_back(o.start_logit);
    t.end_logits.push_back(o.end_logit);
  }
  t.segment = decode_segment(t.start_logits, t.end_logits);
  return t;
}

TubePrediction ground(const Model& model, std::span<const std::vector<double>> frames,
                      const EncodedQuery& query) {
  if (frames.empty()) throw std::invalid_argument("ground: empty video");
  StreamState state = start_stream(model);
  for (std::size_t i = 0; i < frames.size(); ++i) step(model, state, i, frames[i], query);
  return finish_stream(state);
}

TubePrediction ground(const Model& model, const SyntheticEpisode& episode) {
  std::vector<std::vector<double>> frames;
  frames.reserve(episode.length());
  for (const auto& f : episode.frames) frames.push_back(f.grid);
  return ground(model, frames, encode_query_tokens(episode, model.encoder.config().text_len));
}

void save_stream(const StreamState& state, TensorArchive& archive) {
  archive.put_u64("stream.cursor", state.cursor);
  archive.put("stream.previous_grid", {state.previous_grid.size()}, state.previous_grid);
  std::vector<double> outputs;
  for (const auto& o : state.outputs) {
    outputs.insert(outputs.end(), {o.box.cx, o.box.cy, o.box.w, o.box.h, o.start_logit, o.end_logit});
  }
  archive.put("stream.outputs", {state.outputs.size(), 6}, std::move(outputs));
  put_bank(archive, "stream.spatial", state.spatial_bank);
  put_bank(archive, "stream.temporal", state.temporal_bank);
}

StreamState load_stream(const Model& model, const TensorArchive& archive) {
  StreamState s = start_stream(model);
  s.cursor = archive.get_u64("stream.cursor");
  s.previous_grid = archive.get("stream.previous_grid").values;
  const auto& out = archive.get("stream.outputs");
  if (out.shape.size() != 2 || out.shape[1] != 6 || out.shape[0] != s.cursor) {
    throw FormatError("stream outputs do not match the cursor");
  }
  for (std::size_t i = 0; i < out.shape[0]; ++i) {
    const double* r = out.values.data() + 6 * i;
    s.outputs.push_back({{r[0], r[1], r[2], r[3]}, r[4], r[5]});
  }
  s.spatial_bank = get_bank(archive, "stream.spatial", BankKind::kSpatial, s.spatial_bank);
  s.temporal_bank = get_bank(archive, "stream.temporal", BankKind::kTemporal, s.temporal_bank);
  return s;
}

void write_tube_jsonl(std::ostream& out, const TubePrediction& tube) {
  for (std::size_t i = 0; i < tube.boxes.size(); ++i) {
    const auto& b = tube.boxes[i];
    nlohmann::json rec = {{"frame", i},
                          {"box", {b.cx, b.cy, b.w, b.h}},
                          {"hs", logistic(tube.start_logits[i])},
                          {"he", logistic(tube.end_logits[i])}};
    out << rec.dump() << '\n';
  }
  nlohmann::json trailer = {{"segment", {tube.segment.start, tube.segment.end}}};
  out << trailer.dump() << '\n';
}

}  // namespace artstvg
