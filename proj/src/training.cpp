#include "artstvg/training.hpp"

#include <atomic>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>

#include "artstvg/binary_io.hpp"

namespace artstvg {

namespace {

std::atomic<std::size_t> g_empty_masks{0};

Tensor column(const Tensor& t, std::size_t c) { return slice_cols(t, c, 1); }

Tensor constant_column(const std::vector<Box>& boxes, double (*f)(const Box&)) {
  std::vector<double> v(boxes.size());
  for (std::size_t i = 0; i < boxes.size(); ++i) v[i] = f(boxes[i]);
  return Tensor::from({boxes.size(), 1}, std::move(v));
}

}  // namespace

std::vector<double> frame_target(std::size_t frames, int index, double sigma) {
  if (frames == 0) throw std::invalid_argument("frame_target: no frames");
  if (index < 0 || static_cast<std::size_t>(index) >= frames) {
    throw std::out_of_range("frame_target: index " + std::to_string(index) + " outside " +
                            std::to_string(frames) + " frames");
  }
  std::vector<double> t(frames, 0.0);
  if (sigma <= 0.0) {
    t[static_cast<std::size_t>(index)] = 1.0;
    return t;
  }
  for (std::size_t i = 0; i < frames; ++i) {
    const double d = (static_cast<double>(i) - index) / sigma;
    t[i] = std::exp(-0.5 * d * d);
  }
  const double z = std::accumulate(t.begin(), t.end(), 0.0);
  for (auto& v : t) v /= z;
  return t;
}

Tensor kl_loss(std::span<const double> target, const Tensor& scores) {
  if (target.size() != scores.size()) {
    throw ShapeError("kl_loss: target has " + std::to_string(target.size()) + " frames, scores " +
                     std::to_string(scores.size()));
  }
  const std::size_t T = target.size();
  double entropy_term = 0.0;  // sum t log t
  for (double t : target) {
    if (t < 0.0) throw std::invalid_argument("kl_loss: negative target mass");
    if (t > 0.0) entropy_term += t * std::log(t);
  }
  const Tensor logq = log_softmax(reshape(scores, {T, 1}), 0);
  const Tensor cross = sum(logq * Tensor::from({T, 1}, {target.begin(), target.end()}));
  return add_scalar(-cross, entropy_term);
}

std::size_t empty_mask_count() { return g_empty_masks.load(); }
void reset_empty_mask_count() { g_empty_masks = 0; }

double giou(const Box& a, const Box& b) {
  const double iw = std::max(0.0, std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1()));
  const double ih = std::max(0.0, std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1()));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  const double enclose = (std::max(a.x2(), b.x2()) - std::min(a.x1(), b.x1())) *
                         (std::max(a.y2(), b.y2()) - std::min(a.y1(), b.y1()));
  return inter / uni - (enclose - uni) / enclose;
}

BoxLosses box_losses(std::span<const Box> gt, const Tensor& pred, const std::vector<bool>& mask,
                     const LossConfig& config) {
  const std::size_t T = gt.size();
  if (pred.rows() != T || pred.cols() != 4 || mask.size() != T) {
    throw ShapeError("box_losses: expected " + std::to_string(T) + "x4 predictions and " +
                     std::to_string(T) + " mask entries, got " + shape_str(pred.shape()) +
                     " and " + std::to_string(mask.size()));
  }
  std::vector<std::size_t> rows;
  std::vector<Box> target;
  for (std::size_t i = 0; i < T; ++i) {
    if (!mask[i]) continue;
    rows.push_back(i);
    target.push_back(gt[i]);
  }
  if (rows.empty()) {
    ++g_empty_masks;
    return {Tensor::scalar(0.0), Tensor::scalar(0.0)};
  }
  const std::size_t n = rows.size();
  const Tensor p = gather_rows(pred, rows);
  std::vector<double> flat;
  flat.reserve(4 * n);
  for (const auto& b : target) flat.insert(flat.end(), {b.cx, b.cy, b.w, b.h});
  const Tensor g = Tensor::from({n, 4}, std::move(flat));
  Tensor l1 = mean(smooth_l1(p - g, config.smooth_l1_beta));

  const Tensor pcx = column(p, 0), pcy = column(p, 1), pw = column(p, 2), ph = column(p, 3);
  const Tensor px1 = pcx - pw * 0.5, px2 = pcx + pw * 0.5;
  const Tensor py1 = pcy - ph * 0.5, py2 = pcy + ph * 0.5;
  const Tensor gx1 = constant_column(target, [](const Box& b) { return b.x1(); });
  const Tensor gx2 = constant_column(target, [](const Box& b) { return b.x2(); });
  const Tensor gy1 = constant_column(target, [](const Box& b) { return b.y1(); });
  const Tensor gy2 = constant_column(target, [](const Box& b) { return b.y2(); });
  const Tensor garea = constant_column(target, [](const Box& b) { return b.area(); });

  const Tensor iw = relu(minimum(px2, gx2) - maximum(px1, gx1));
  const Tensor ih = relu(minimum(py2, gy2) - maximum(py1, gy1));
  const Tensor inter = iw * ih;
  const Tensor uni = pw * ph + garea - inter;
  Tensor score = inter / uni;
  if (config.iou == IouLoss::kGiou) {
    const Tensor enclose =
        (maximum(px2, gx2) - minimum(px1, gx1)) * (maximum(py2, gy2) - minimum(py1, gy1));
    score = score - (enclose - uni) / enclose;
  }
  return {l1, mean(1.0 - score)};
}

GroundTruth GroundTruth::of(const SyntheticEpisode& episode) {
  return {episode.length(), episode.gt_segment, episode.gt_boxes};
}

std::vector<Box> GroundTruth::frame_boxes() const {
  std::vector<Box> out(frames);
  for (int f = segment.start; f <= segment.end; ++f) {
    out[static_cast<std::size_t>(f)] = boxes[static_cast<std::size_t>(f - segment.start)];
  }
  return out;
}

std::vector<bool> GroundTruth::mask() const {
  std::vector<bool> m(frames, false);
  for (int f = segment.start; f <= segment.end; ++f) m[static_cast<std::size_t>(f)] = true;
  return m;
}

LossBreakdown total_loss(const Tensor& boxes, const Tensor& start_scores,
                         const Tensor& end_scores, const GroundTruth& gt,
                         const LossConfig& config) {
  if (gt.boxes.size() != static_cast<std::size_t>(gt.segment.length())) {
    throw std::invalid_argument("total_loss: ground truth needs one box per segment frame");
  }
  const Tensor kl_s = kl_loss(frame_target(gt.frames, gt.segment.start, config.target_sigma),
                              start_scores);
  const Tensor kl_e =
      kl_loss(frame_target(gt.frames, gt.segment.end, config.target_sigma), end_scores);
  const auto frame_boxes = gt.frame_boxes();
  const BoxLosses b = box_losses(frame_boxes, boxes, gt.mask(), config);
  const auto& w = config.weights;
  LossBreakdown out;
  out.total = (kl_s + kl_e) * w.lambda_k + b.l1 * w.lambda_l + b.iou * w.lambda_u;
  out.kl_s = kl_s.item();
  out.kl_e = kl_e.item();
  out.l1 = b.l1.item();
  out.iou = b.iou.item();
  return out;
}

EpisodeForward forward_episode(const Model& model, const SyntheticEpisode& episode, bool soft_roi,
                               bool teacher_forcing) {
  const EncodedQuery query = encode_query_tokens(episode, model.encoder.config().text_len);
  StreamState state = start_stream(model);
  std::vector<Tensor> boxes, starts, ends;
  for (std::size_t i = 0; i < episode.length(); ++i) {
    ForwardOptions opt;
    opt.soft_roi = soft_roi;
    if (teacher_forcing && episode.gt_segment.contains(static_cast<int>(i))) {
      opt.teacher_box = episode.gt_box(static_cast<int>(i));
    }
    const FrameForward f = forward_frame(model, state, i, episode.frames[i].grid, query, opt);
    boxes.push_back(f.box);
    starts.push_back(slice_cols(f.logits, 0, 1));
    ends.push_back(slice_cols(f.logits, 1, 1));
  }
  return {concat_rows(boxes), concat_rows(starts), concat_rows(ends)};
}

Adam::Adam(const ParameterSet& params, double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& e : params.entries()) {
    names_.push_back(e.name);
    m_.emplace_back(e.tensor.size(), 0.0);
    v_.emplace_back(e.tensor.size(), 0.0);
  }
}

void Adam::step(ParameterSet& params, double lr) {
  auto& entries = params.entries();
  if (entries.size() != names_.size()) throw std::logic_error("Adam: parameter set changed");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t p = 0; p < entries.size(); ++p) {
    Tensor& t = entries[p].tensor;
    if (!t.has_grad()) continue;
    const auto g = t.grad();
    auto x = t.mutable_data();
    auto& m = m_[p];
    auto& v = v_[p];
    for (std::size_t i = 0; i < x.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      x[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

void Adam::save(TensorArchive& archive) const {
  archive.put_u64("adam.t", t_);
  for (std::size_t p = 0; p < names_.size(); ++p) {
    archive.put("adam.m." + names_[p], {m_[p].size()}, m_[p]);
    archive.put("adam.v." + names_[p], {v_[p].size()}, v_[p]);
  }
}

void Adam::load(const TensorArchive& archive) {
  t_ = archive.get_u64("adam.t");
  for (std::size_t p = 0; p < names_.size(); ++p) {
    const auto& m = archive.get("adam.m." + names_[p]).values;
    const auto& v = archive.get("adam.v." + names_[p]).values;
    if (m.size() != m_[p].size() || v.size() != v_[p].size()) {
      throw FormatError("optimizer state for '" + names_[p] + "' has the wrong size");
    }
    m_[p] = m;
    v_[p] = v;
  }
}

double clip_gradients(ParameterSet& params, double max_norm) {
  double sq = 0.0;
  for (const auto& e : params.entries()) {
    for (double g : e.tensor.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (auto& e : params.entries()) {
      if (!e.tensor.has_grad()) continue;
      for (auto& g : e.tensor.impl()->grad) g *= s;
    }
  }
  return norm;
}

Trainer::Trainer(Model& model, TrainConfig config, std::vector<SyntheticEpisode> episodes)
    : model_(model),
      config_(std::move(config)),
      episodes_(std::move(episodes)),
      params_(model.parameters()),
      adam_(params_),
      rng_(config_.seed) {
  if (episodes_.empty()) throw std::invalid_argument("train: need at least one episode");
  if (config_.learning_rate < 0.0) throw std::invalid_argument("train: negative learning rate");
  next_epoch();
}

void Trainer::next_epoch() {
  order_.resize(episodes_.size());
  std::iota(order_.begin(), order_.end(), 0);
  if (config_.shuffle) rng_.shuffle(order_);
  position_ = 0;
  ++epoch_;
}

void Trainer::write_dump(const std::string& reason, std::size_t episode) const {
  if (config_.dump_path.empty()) return;
  std::ofstream out(config_.dump_path);
  out << "reason: " << reason << "\nstep: " << step_ << "\nepisode: " << episode << "\n";
  out << std::setprecision(17);
  for (const auto& e : params_.entries()) {
    double norm = 0.0, gnorm = 0.0;
    bool finite = true;
    for (double v : e.tensor.data()) {
      norm += v * v;
      finite = finite && std::isfinite(v);
    }
    for (double g : e.tensor.grad()) gnorm += g * g;
    out << e.name << " norm=" << std::sqrt(norm) << " grad_norm=" << std::sqrt(gnorm)
        << (finite ? "" : " NONFINITE") << "\n";
  }
}

StepRecord Trainer::step() {
  if (position_ >= order_.size()) next_epoch();
  const std::size_t index = order_[position_];
  const auto& episode = episodes_[index];
  StepRecord rec;
  rec.step = step_;
  params_.zero_grad();
  try {
    Tape tape;
    TapeScope scope(tape);
    const EpisodeForward f =
        forward_episode(model_, episode, /*soft_roi=*/true, config_.teacher_forcing);
    const LossBreakdown loss = total_loss(f.boxes, f.start_logits, f.end_logits,
                                          GroundTruth::of(episode), config_.loss);
    rec.loss = loss.total.item();
    rec.kl_s = loss.kl_s;
    rec.kl_e = loss.kl_e;
    rec.l1 = loss.l1;
    rec.iou = loss.iou;
    if (!std::isfinite(rec.loss)) throw NumericError("non-finite loss");
    tape.backward(loss.total);
  } catch (const NumericError& e) {
    write_dump(e.what(), index);
    throw TrainingAborted("training aborted at step " + std::to_string(step_) + ": " + e.what());
  }
  rec.grad_norm = clip_gradients(params_, config_.clip_norm);
  if (!std::isfinite(rec.grad_norm)) {
    write_dump("non-finite gradient", index);
    throw TrainingAborted("training aborted at step " + std::to_string(step_) +
                          ": non-finite gradient");
  }
  adam_.step(params_, config_.learning_rate);
  ++step_;
  ++position_;
  if (position_ == order_.size() && config_.checkpoint_every > 0 &&
      !config_.checkpoint_path.empty() && epoch_ % config_.checkpoint_every == 0) {
    save_checkpoint(config_.checkpoint_path);
  }
  return rec;
}

std::vector<StepRecord> Trainer::run(const std::function<void(const StepRecord&)>& on_step) {
  std::ofstream log;
  if (!config_.log_path.empty()) {
    log.open(config_.log_path, step_ == 0 ? std::ios::trunc : std::ios::app);
    if (!log) throw std::runtime_error("cannot open metrics log " + config_.log_path);
    if (step_ == 0) log << kMetricsHeader << "\n";
    log << std::setprecision(10);
  }
  std::vector<StepRecord> records;
  while (step_ < config_.steps) {
    const StepRecord r = step();
    if (log.is_open()) {
      log << r.step << "," << r.loss << "," << r.kl_s << "," << r.kl_e << "," << r.l1 << ","
          << r.iou << "\n";
    }
    if (on_step) on_step(r);
    records.push_back(r);
  }
  return records;
}

void Trainer::save_checkpoint(const std::string& path) const {
  TensorArchive a;
  model_.save(a);
  adam_.save(a);
  const auto s = rng_.state();
  a.put_u64s("train.rng", {s.begin(), s.end()});
  a.put_u64("train.step", step_);
  a.put_u64("train.epoch", epoch_);
  a.put_u64("train.position", position_);
  a.put_u64s("train.order", order_);
  a.save(path);
}

void Trainer::load_checkpoint(const std::string& path) {
  const TensorArchive a = TensorArchive::load(path);
  model_.load(a);
  adam_.load(a);
  const auto s = a.get_u64s("train.rng");
  if (s.size() != 4) throw FormatError("checkpoint RNG state has the wrong size");
  rng_.set_state({s[0], s[1], s[2], s[3]});
  step_ = a.get_u64("train.step");
  epoch_ = a.get_u64("train.epoch");
  position_ = a.get_u64("train.position");
  order_ = a.get_u64s("train.order");
  if (order_.size() != episodes_.size() || position_ > order_.size()) {
    throw FormatError("checkpoint data order does not match the dataset");
  }
}

}  // namespace artstvg
