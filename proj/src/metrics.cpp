#include "artstvg/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace artstvg {

namespace {

std::string fixed(double v, int precision = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, v);
  return buf;
}

std::string pad(const std::string& s, std::size_t width) {
  return s.size() >= width ? s : s + std::string(width - s.size(), ' ');
}

std::string lpad(const std::string& s, std::size_t width) {
  return s.size() >= width ? s : std::string(width - s.size(), ' ') + s;
}

nlohmann::json report_json(const EvalReport& r, bool with_rows) {
  nlohmann::json j = {{"m_tIoU", r.m_tiou},
                      {"m_vIoU", r.m_viou},
                      {"vIoU@0.3", r.viou_at_03},
                      {"vIoU@0.5", r.viou_at_05},
                      {"samples", r.rows.size()}};
  if (with_rows) {
    auto rows = nlohmann::json::array();
    for (const auto& s : r.rows) {
      rows.push_back({{"index", s.index},
                      {"gt", {s.gt.start, s.gt.end}},
                      {"pred", {s.pred.start, s.pred.end}},
                      {"tIoU", s.t_iou},
                      {"vIoU", s.v_iou}});
    }
    j["rows"] = std::move(rows);
  }
  return j;
}

}  // namespace

double box_iou(const Box& a, const Box& b) {
  if (!(a.w > 0.0 && a.h > 0.0 && b.w > 0.0 && b.h > 0.0)) {
    throw std::invalid_argument("box_iou: boxes need positive width and height");
  }
  const double iw = std::max(0.0, std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1()));
  const double ih = std::max(0.0, std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1()));
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

double t_iou(const Segment& gt, const Segment& pred) {
  if (gt.start > gt.end || pred.start > pred.end) {
    throw std::invalid_argument("t_iou: segment start after end");
  }
  const int inter = std::max(0, std::min(gt.end, pred.end) - std::max(gt.start, pred.start) + 1);
  const int uni = gt.length() + pred.length() - inter;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

const Box& Tube::at(int frame) const {
  if (!segment.contains(frame) || boxes.size() != static_cast<std::size_t>(segment.length())) {
    throw std::out_of_range("tube has no box for frame " + std::to_string(frame));
  }
  return boxes[static_cast<std::size_t>(frame - segment.start)];
}

double v_iou(const Tube& gt, const Tube& pred) {
  if (gt.segment.start > gt.segment.end || pred.segment.start > pred.segment.end) {
    throw std::invalid_argument("v_iou: segment start after end");
  }
  const int lo = std::max(gt.segment.start, pred.segment.start);
  const int hi = std::min(gt.segment.end, pred.segment.end);
  const double uni_frames =
      static_cast<double>(gt.segment.length() + pred.segment.length() - std::max(0, hi - lo + 1));
  double total = 0.0;
  for (int f = lo; f <= hi; ++f) total += box_iou(gt.at(f), pred.at(f));
  return total / uni_frames;
}

Tube predicted_tube(const TubePrediction& p) {
  Tube t;
  t.segment = p.segment;
  for (int f = p.segment.start; f <= p.segment.end; ++f) {
    t.boxes.push_back(p.boxes.at(static_cast<std::size_t>(f)));
  }
  return t;
}

Tube ground_truth_tube(const SyntheticEpisode& episode) {
  return {episode.gt_segment, episode.gt_boxes};
}

EvalReport make_report(std::vector<SampleRow> rows) {
  EvalReport r;
  r.rows = std::move(rows);
  if (r.rows.empty()) return r;
  double at03 = 0.0, at05 = 0.0;
  for (const auto& s : r.rows) {
    r.m_tiou += s.t_iou;
    r.m_viou += s.v_iou;
    at03 += s.v_iou > kViouThresholds[0] ? 1.0 : 0.0;
    at05 += s.v_iou > kViouThresholds[1] ? 1.0 : 0.0;
  }
  const double n = static_cast<double>(r.rows.size());
  r.m_tiou /= n;
  r.m_viou /= n;
  r.viou_at_03 = at03 / n;
  r.viou_at_05 = at05 / n;
  return r;
}

TubePrediction oracle_prediction(const SyntheticEpisode& episode) {
  TubePrediction p;
  const std::size_t n = episode.length();
  p.boxes.assign(n, Box{0.5, 0.5, 0.5, 0.5});
  p.start_logits.assign(n, -1.0);
  p.end_logits.assign(n, -1.0);
  const Segment seg = episode.gt_segment;
  for (int f = seg.start; f <= seg.end; ++f) p.boxes[f] = episode.gt_box(f);
  p.start_logits[seg.start] = 1.0;
  p.end_logits[seg.end] = 1.0;
  p.segment = seg;
  return p;
}

EvalReport evaluate_predictions(std::span<const TubePrediction> predictions,
                                std::span<const SyntheticEpisode> episodes) {
  if (predictions.size() != episodes.size()) {
    throw std::invalid_argument("evaluate: prediction and episode counts differ");
  }
  std::vector<SampleRow> rows;
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    const Tube gt = ground_truth_tube(episodes[i]);
    const Tube pred = predicted_tube(predictions[i]);
    rows.push_back({i, gt.segment, pred.segment, t_iou(gt.segment, pred.segment), v_iou(gt, pred)});
  }
  return make_report(std::move(rows));
}

EvalReport evaluate(const Model& model, std::span<const SyntheticEpisode> episodes) {
  std::vector<TubePrediction> predictions;
  predictions.reserve(episodes.size());
  for (const auto& e : episodes) predictions.push_back(ground(model, e));
  return evaluate_predictions(predictions, episodes);
}

std::string EvalReport::to_json() const { return report_json(*this, true).dump(2); }

std::string EvalReport::to_text() const {
  std::ostringstream out;
  out << lpad("m_tIoU", 8) << lpad("m_vIoU", 8) << lpad("vIoU@0.3", 10) << lpad("vIoU@0.5", 10)
      << "\n";
  out << lpad(fixed(100 * m_tiou), 8) << lpad(fixed(100 * m_viou), 8)
      << lpad(fixed(100 * viou_at_03), 10) << lpad(fixed(100 * viou_at_05), 10) << "\n";
  return out.str();
}

// ---------------------------------------------------------------------------

std::string mode_name(MemoryMode mode) {
  switch (mode) {
    case MemoryMode::kNone: return "none";
    case MemoryMode::kAll: return "all";
    case MemoryMode::kSelective: return "selective";
  }
  return "?";
}

std::string context_name(TemporalContext context) {
  return context == TemporalContext::kCascaded ? "cascaded" : "parallel";
}

std::string variant_name(const DecoderConfig& c) {
  return "tm=" + mode_name(c.temporal_memory) + " sm=" + mode_name(c.spatial_memory) + " " +
         context_name(c.temporal_context) + " ns=" + std::to_string(c.n_s);
}

std::vector<Variant> expand_grid(const AblationGrid& grid, const ModelConfig& base) {
  std::vector<Variant> out;
  for (auto tm : grid.temporal_memory) {
    for (auto sm : grid.spatial_memory) {
      for (auto ctx : grid.temporal_context) {
        for (auto ns : grid.n_s) {
          ModelConfig m = base;
          m.decoder.temporal_memory = tm;
          m.decoder.spatial_memory = sm;
          m.decoder.temporal_context = ctx;
          m.decoder.n_s = ns;
          out.push_back({variant_name(m.decoder), m});
        }
      }
    }
  }
  return out;
}

double metric_value(const EvalReport& r, const std::string& metric) {
  if (metric == "m_tIoU") return r.m_tiou;
  if (metric == "m_vIoU") return r.m_viou;
  if (metric == "vIoU@0.3") return r.viou_at_03;
  if (metric == "vIoU@0.5") return r.viou_at_05;
  throw std::invalid_argument("unknown metric '" + metric + "'");
}

const AblationRow* AblationResult::find(const std::string& variant, std::uint64_t seed) const {
  for (const auto& r : rows) {
    if (r.variant == variant && r.seed == seed) return &r;
  }
  return nullptr;
}

double AblationResult::mean(const std::string& variant, const std::string& metric) const {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& r : rows) {
    if (r.variant != variant) continue;
    total += metric_value(r.report, metric);
    ++n;
  }
  if (n == 0) throw std::invalid_argument("no rows for variant '" + variant + "'");
  return total / static_cast<double>(n);
}

std::vector<Verdict> judge(const std::vector<AblationRow>& rows,
                           const std::vector<Direction>& directions) {
  std::vector<Verdict> out;
  for (const auto& d : directions) {
    Verdict v{d, 0, 0};
    for (const auto& a : rows) {
      if (a.variant != d.better) continue;
      for (const auto& b : rows) {
        if (b.variant != d.worse || b.seed != a.seed) continue;
        const double x = metric_value(a.report, d.metric);
        const double y = metric_value(b.report, d.metric);
        ++v.seeds_total;
        if (x > y || (d.allow_equal && x == y)) ++v.seeds_agreeing;
      }
    }
    out.push_back(v);
  }
  return out;
}

std::string AblationResult::to_text() const {
  std::vector<std::string> names;
  for (const auto& r : rows) {
    if (std::find(names.begin(), names.end(), r.variant) == names.end()) names.push_back(r.variant);
  }
  std::size_t width = 8;
  for (const auto& n : names) width = std::max(width, n.size() + 2);
  std::ostringstream out;
  out << pad("variant", width) << lpad("seed", 6) << lpad("m_tIoU", 8) << lpad("m_vIoU", 8)
      << lpad("vIoU@0.3", 10) << lpad("vIoU@0.5", 10) << "\n";
  for (const auto& n : names) {
    for (const auto& r : rows) {
      if (r.variant != n) continue;
      out << pad(n, width) << lpad(std::to_string(r.seed), 6)
          << lpad(fixed(100 * r.report.m_tiou), 8) << lpad(fixed(100 * r.report.m_viou), 8)
          << lpad(fixed(100 * r.report.viou_at_03), 10)
          << lpad(fixed(100 * r.report.viou_at_05), 10) << "\n";
    }
    out << pad(n, width) << lpad("mean", 6) << lpad(fixed(100 * mean(n, "m_tIoU")), 8)
        << lpad(fixed(100 * mean(n, "m_vIoU")), 8) << lpad(fixed(100 * mean(n, "vIoU@0.3")), 10)
        << lpad(fixed(100 * mean(n, "vIoU@0.5")), 10) << "\n";
  }
  if (!verdicts.empty()) {
    out << "\n";
    for (const auto& v : verdicts) {
      out << (v.holds() ? "HOLDS " : "FAILS ") << "[" << v.direction.better
          << (v.direction.allow_equal ? "] >= [" : "] > [") << v.direction.worse << "] on "
          << v.direction.metric << ": " << v.seeds_agreeing << "/" << v.seeds_total
          << " seeds\n";
    }
  }
  return out.str();
}

std::string AblationResult::to_json() const {
  nlohmann::json j;
  j["rows"] = nlohmann::json::array();
  for (const auto& r : rows) {
    j["rows"].push_back(
        {{"variant", r.variant}, {"seed", r.seed}, {"metrics", report_json(r.report, false)}});
  }
  j["verdicts"] = nlohmann::json::array();
  for (const auto& v : verdicts) {
    j["verdicts"].push_back({{"better", v.direction.better},
                             {"worse", v.direction.worse},
                             {"metric", v.direction.metric},
                             {"allow_equal", v.direction.allow_equal},
                             {"seeds_agreeing", v.seeds_agreeing},
                             {"seeds_total", v.seeds_total},
                             {"holds", v.holds()}});
  }
  return j.dump(2);
}

AblationResult ablate(const std::vector<Variant>& variants, const AblationSetup& setup,
                      const std::vector<Direction>& directions,
                      const std::function<void(const AblationRow&)>& on_row,
                      std::map<std::pair<std::string, std::uint64_t>, EvalReport>* cache) {
  AblationResult result;
  for (const auto& v : variants) {
    for (auto seed : setup.seeds) {
      AblationRow row{v.name, seed, {}};
      const auto key = std::make_pair(v.name, seed);
      if (cache && cache->count(key)) {
        row.report = cache->at(key);
      } else {
        Model model(v.model, seed);
        TrainConfig tc = setup.train;
        tc.seed = seed;
        tc.checkpoint_every = 0;
        tc.log_path.clear();
        Trainer trainer(model, tc, setup.train_episodes);
        trainer.run();
        row.report = evaluate(model, setup.test_episodes);
        if (cache) (*cache)[key] = row.report;
      }
      if (on_row) on_row(row);
      result.rows.push_back(std::move(row));
    }
  }
  result.verdicts = judge(result.rows, directions);
  return result;
}

std::vector<Variant> reference_variants(const ModelConfig& base,
                                        const std::vector<std::size_t>& n_s_sweep) {
  std::vector<Variant> out;
  auto add = [&out](const ModelConfig& m) {
    const std::string name = variant_name(m.decoder);
    for (const auto& v : out) {
      if (v.name == name) return;
    }
    out.push_back({name, m});
  };
  add(base);
  for (auto mode : {MemoryMode::kNone, MemoryMode::kAll}) {
    ModelConfig m = base;
    m.decoder.temporal_memory = mode;
    add(m);
  }
  for (auto mode : {MemoryMode::kAll, MemoryMode::kNone}) {
    ModelConfig m = base;
    m.decoder.spatial_memory = mode;
    add(m);
  }
  ModelConfig parallel = base;
  parallel.decoder.temporal_context = TemporalContext::kParallel;
  add(parallel);
  for (auto ns : n_s_sweep) {
    ModelConfig m = base;
    m.decoder.n_s = ns;
    add(m);
  }
  return out;
}

std::vector<Direction> reference_directions(const ModelConfig& base) {
  auto with = [&base](auto edit) {
    DecoderConfig d = base.decoder;
    edit(d);
    return variant_name(d);
  };
  const std::string sel = with([](DecoderConfig& d) {
    d.temporal_memory = MemoryMode::kSelective;
    d.spatial_memory = MemoryMode::kSelective;
    d.temporal_context = TemporalContext::kCascaded;
  });
  auto tm = [&](MemoryMode m) {
    return with([m](DecoderConfig& d) {
      d.temporal_memory = m;
      d.spatial_memory = MemoryMode::kSelective;
      d.temporal_context = TemporalContext::kCascaded;
    });
  };
  auto sm = [&](MemoryMode m) {
    return with([m](DecoderConfig& d) {
      d.temporal_memory = MemoryMode::kSelective;
      d.spatial_memory = m;
      d.temporal_context = TemporalContext::kCascaded;
    });
  };
  const std::string parallel = with([](DecoderConfig& d) {
    d.temporal_memory = MemoryMode::kSelective;
    d.spatial_memory = MemoryMode::kSelective;
    d.temporal_context = TemporalContext::kParallel;
  });
  return {
      {sel, tm(MemoryMode::kNone), "m_tIoU", false},
      {tm(MemoryMode::kNone), tm(MemoryMode::kAll), "m_tIoU", false},
      {sel, sm(MemoryMode::kAll), "m_tIoU", true},
      {sm(MemoryMode::kAll), sm(MemoryMode::kNone), "m_tIoU", true},
      {sel, parallel, "m_vIoU", false},
  };
}

std::vector<Direction> applicable_directions(const std::vector<Direction>& directions,
                                             const std::vector<Variant>& variants) {
  auto has = [&variants](const std::string& name) {
    return std::any_of(variants.begin(), variants.end(),
                       [&name](const Variant& v) { return v.name == name; });
  };
  std::vector<Direction> out;
  for (const auto& d : directions) {
    if (has(d.better) && has(d.worse)) out.push_back(d);
  }
  return out;
}

}  // namespace artstvg
