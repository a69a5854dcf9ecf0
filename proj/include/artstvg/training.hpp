#pragma once

// Losses, optimizer and the training loop.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "artstvg/archive.hpp"
#include "artstvg/engine.hpp"

namespace artstvg {

struct LossWeights {
  double lambda_k = 10.0;  // KL terms
  double lambda_l = 5.0;   // smooth-L1
  double lambda_u = 3.0;   // IoU
};

enum class IouLoss { kGiou, kIou };

struct LossConfig {
  LossWeights weights;
  /// Std-dev (frames) of the Gaussian smoothing of the start/end targets;
  /// 0 gives a one-hot target.
  double target_sigma = 1.0;
  double smooth_l1_beta = 0.1;
  IouLoss iou = IouLoss::kGiou;
};

/// Distribution over `frames` peaked at `index`.
std::vector<double> frame_target(std::size_t frames, int index, double sigma);

/// KL(target || softmax over frames of scores). scores: T values.
Tensor kl_loss(std::span<const double> target, const Tensor& scores);

/// Number of box_losses calls that had nothing to supervise.
std::size_t empty_mask_count();
void reset_empty_mask_count();

struct BoxLosses {
  Tensor l1;
  Tensor iou;
};

/// pred: T x 4 boxes. gt: T boxes, only read where mask is true.
BoxLosses box_losses(std::span<const Box> gt, const Tensor& pred, const std::vector<bool>& mask,
                     const LossConfig& config = {});

/// Generalized IoU of two boxes (plain IoU minus the empty share of the
/// smallest enclosing box).
double giou(const Box& a, const Box& b);

struct GroundTruth {
  std::size_t frames = 0;
  Segment segment;
  std::vector<Box> boxes;  // one per segment frame

  static GroundTruth of(const SyntheticEpisode& episode);
  /// Per-frame boxes and supervision mask over all frames.
  std::vector<Box> frame_boxes() const;
  std::vector<bool> mask() const;
};

struct LossBreakdown {
  Tensor total;
  double kl_s = 0.0;
  double kl_e = 0.0;
  double l1 = 0.0;
  double iou = 0.0;
};

/// boxes: T x 4, start/end: T scores (logits).
LossBreakdown total_loss(const Tensor& boxes, const Tensor& start_scores,
                         const Tensor& end_scores, const GroundTruth& gt,
                         const LossConfig& config = {});

struct EpisodeForward {
  Tensor boxes;         // T x 4
  Tensor start_logits;  // T x 1
  Tensor end_logits;    // T x 1
};

/// Runs the model over a whole episode with graph tracking. Memory stays
/// connected across frames, so gradients flow through the banks.
EpisodeForward forward_episode(const Model& model, const SyntheticEpisode& episode,
                               bool soft_roi = true, bool teacher_forcing = false);

class Adam {
 public:
  Adam() = default;
  Adam(const ParameterSet& params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  /// Applies one update from the parameters' current gradients.
  void step(ParameterSet& params, double lr);
  std::uint64_t steps() const { return t_; }

  void save(TensorArchive& archive) const;
  void load(const TensorArchive& archive);

 private:
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  std::uint64_t t_ = 0;
  std::vector<std::string> names_;
  std::vector<std::vector<double>> m_, v_;
};

/// Scales all gradients so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
double clip_gradients(ParameterSet& params, double max_norm);

struct TrainConfig {
  double learning_rate = 1e-4;
  double clip_norm = 1.0;
  std::size_t steps = 1000;
  std::uint64_t seed = 0;
  LossConfig loss;
  bool shuffle = true;
  bool teacher_forcing = false;
  /// Write a checkpoint every this many epochs (0: never).
  std::size_t checkpoint_every = 0;
  std::string checkpoint_path;
  std::string log_path;  // CSV metrics log (empty: none)
  std::string dump_path; // diagnostics written when training aborts
};

class TrainingAborted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StepRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double kl_s = 0.0;
  double kl_e = 0.0;
  double l1 = 0.0;
  double iou = 0.0;
  double grad_norm = 0.0;
};

class Trainer {
 public:
  Trainer(Model& model, TrainConfig config, std::vector<SyntheticEpisode> episodes);

  /// One optimization step on the next episode in the epoch order.
  StepRecord step();
  /// Runs until `config.steps` total steps have been taken.
  std::vector<StepRecord> run(const std::function<void(const StepRecord&)>& on_step = {});

  std::size_t steps_done() const { return step_; }
  std::size_t epoch() const { return epoch_; }

  void save_checkpoint(const std::string& path) const;
  /// Restores parameters, optimizer moments, RNG and data position.
  void load_checkpoint(const std::string& path);

 private:
  void next_epoch();
  void write_dump(const std::string& reason, std::size_t episode) const;

  Model& model_;
  TrainConfig config_;
  std::vector<SyntheticEpisode> episodes_;
  ParameterSet params_;
  Adam adam_;
  Rng rng_;
  std::vector<std::uint64_t> order_;
  std::size_t position_ = 0;
  std::size_t epoch_ = 0;
  std::size_t step_ = 0;
};

inline constexpr const char* kMetricsHeader = "step,loss,kl_s,kl_e,l1,iou";

}  // namespace artstvg
