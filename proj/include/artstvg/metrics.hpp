#pragma once

// Grounding metrics, evaluation reports and the ablation harness.

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "artstvg/engine.hpp"
#include "artstvg/training.hpp"

namespace artstvg {

/// Intersection over union of two boxes; both need positive width/height.
double box_iou(const Box& a, const Box& b);

/// Frame-count IoU of two inclusive segments.
double t_iou(const Segment& gt, const Segment& pred);

/// A segment plus one box per frame of it (boxes[i] is frame segment.start+i).
struct Tube {
  Segment segment;
  std::vector<Box> boxes;

  const Box& at(int frame) const;
};

/// Sum of per-frame box IoU over the frames both tubes cover, divided by
/// the number of frames either covers.
double v_iou(const Tube& gt, const Tube& pred);

/// Predicted tube: the decoded segment with the boxes predicted for it.
Tube predicted_tube(const TubePrediction& prediction);
Tube ground_truth_tube(const SyntheticEpisode& episode);
/// Perfect stub prediction: the ground-truth segment and boxes.
TubePrediction oracle_prediction(const SyntheticEpisode& episode);

struct SampleRow {
  std::size_t index = 0;
  Segment gt;
  Segment pred;
  double t_iou = 0.0;
  double v_iou = 0.0;
};

struct EvalReport {
  double m_tiou = 0.0;
  double m_viou = 0.0;
  double viou_at_03 = 0.0;
  double viou_at_05 = 0.0;
  std::vector<SampleRow> rows;

  std::string to_json() const;
  std::string to_text() const;
};

inline constexpr double kViouThresholds[] = {0.3, 0.5};

EvalReport make_report(std::vector<SampleRow> rows);
EvalReport evaluate_predictions(std::span<const TubePrediction> predictions,
                                std::span<const SyntheticEpisode> episodes);
EvalReport evaluate(const Model& model, std::span<const SyntheticEpisode> episodes);

// ---------------------------------------------------------------------------
// Ablation harness.

/// Axes of an ablation grid. Every combination becomes one variant.
struct AblationGrid {
  std::vector<MemoryMode> temporal_memory = {MemoryMode::kSelective};
  std::vector<MemoryMode> spatial_memory = {MemoryMode::kSelective};
  std::vector<TemporalContext> temporal_context = {TemporalContext::kCascaded};
  std::vector<std::size_t> n_s = {32};
};

struct Variant {
  std::string name;
  ModelConfig model;
};

std::string mode_name(MemoryMode mode);
std::string context_name(TemporalContext context);
std::string variant_name(const DecoderConfig& config);

/// Cross product of the grid axes applied on top of `base`.
std::vector<Variant> expand_grid(const AblationGrid& grid, const ModelConfig& base);

struct AblationRow {
  std::string variant;
  std::uint64_t seed = 0;
  EvalReport report;
};

/// "better" should beat "worse" on `metric` (m_tIoU or m_vIoU); with
/// allow_equal a tie also counts.
struct Direction {
  std::string better;
  std::string worse;
  std::string metric;
  bool allow_equal = false;
};

struct Verdict {
  Direction direction;
  std::size_t seeds_agreeing = 0;
  std::size_t seeds_total = 0;
  bool holds() const { return 2 * seeds_agreeing > seeds_total; }
};

struct AblationResult {
  std::vector<AblationRow> rows;
  std::vector<Verdict> verdicts;

  const AblationRow* find(const std::string& variant, std::uint64_t seed) const;
  /// Mean of a metric over the seeds of a variant.
  double mean(const std::string& variant, const std::string& metric) const;
  std::string to_text() const;
  std::string to_json() const;
};

double metric_value(const EvalReport& report, const std::string& metric);

struct AblationSetup {
  ModelConfig base;
  TrainConfig train;  // steps, learning rate and loss shared by every variant
  std::vector<SyntheticEpisode> train_episodes;
  std::vector<SyntheticEpisode> test_episodes;
  std::vector<std::uint64_t> seeds = {1, 2, 3};
};

/// Trains and evaluates every variant for every seed. The seed fixes model
/// initialization and data order, so variants differ only in the varied
/// axis. Variants already present in `cache` (by name and seed) are reused.
AblationResult ablate(const std::vector<Variant>& variants, const AblationSetup& setup,
                      const std::vector<Direction>& directions = {},
                      const std::function<void(const AblationRow&)>& on_row = {},
                      std::map<std::pair<std::string, std::uint64_t>, EvalReport>* cache = nullptr);

/// The comparison suite: the base model, each memory mode swapped out on
/// its own, the parallel decoder, and `base` at every N_s in `n_s_sweep`.
std::vector<Variant> reference_variants(const ModelConfig& base,
                                        const std::vector<std::size_t>& n_s_sweep = {});
/// Expected orderings between the reference variants: selective > none >
/// all temporal memory (m_tIoU), selective >= all >= none spatial memory
/// (m_tIoU), cascaded > parallel (m_vIoU).
std::vector<Direction> reference_directions(const ModelConfig& base);
/// Directions whose two variants both appear in `variants`.
std::vector<Direction> applicable_directions(const std::vector<Direction>& directions,
                                             const std::vector<Variant>& variants);

/// Verdicts from existing rows.
std::vector<Verdict> judge(const std::vector<AblationRow>& rows,
                           const std::vector<Direction>& directions);

}  // namespace artstvg
