// Acceptance suite: one PASS/FAIL line per criterion.
//
//   artstvg_acceptance            run criteria 1-8
//   artstvg_acceptance 3 5        run a subset

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "artstvg/cli.hpp"
#include "artstvg/metrics.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace artstvg;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::vector<double> random_vector(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

Tensor row(const std::vector<double>& v) { return Tensor::from({1, v.size()}, v); }

Box random_box(Rng& rng) {
  const double w = 0.02 + 0.5 * rng.uniform(), h = 0.02 + 0.5 * rng.uniform();
  return Box{w / 2 + (1 - w) * rng.uniform(), h / 2 + (1 - h) * rng.uniform(), w, h};
}

Segment random_segment(Rng& rng, int T) {
  int a = static_cast<int>(rng.below(T)), b = static_cast<int>(rng.below(T));
  if (a > b) std::swap(a, b);
  return {a, b};
}

EncodedQuery query_of(const Model& m, const SyntheticEpisode& ep) {
  return encode_query_tokens(ep.query_tokens, m.config().encoder.text_len);
}

// 1 ------------------------------------------------------------------------

Outcome gradient_integrity() {
  const auto t0 = Clock::now();
  const testing::Micro micro;
  Model model(micro.config, 11);
  Rng rng(3);
  testing::Micro::offset_biases(model, rng);
  const auto ep = micro.episode(12);
  const auto gt = GroundTruth::of(ep);
  const ParameterSet params = model.parameters();
  std::vector<std::pair<std::string, Tensor>> list;
  for (const auto& e : params.entries()) list.emplace_back(e.name, e.tensor);
  const auto checks = testing::check_gradients(
      [&] {
        const auto f = forward_episode(model, ep);
        return total_loss(f.boxes, f.start_logits, f.end_logits, gt).total;
      },
      list, 1e-5);
  Outcome o;
  std::size_t good = 0, motion = 0;
  std::string worst_name;
  double worst = 0.0;
  for (const auto& c : checks) {
    if (c.ok(1e-3)) ++good;
    if (c.name.find("motion") != std::string::npos) {
      ++motion;
      if (c.analytic_norm <= 0.0) o.pass = false;
    }
    // Structurally zero gradients (e.g. a shift cancelled by softmax) are
    // compared on the absolute floor instead.
    const bool zero = c.analytic_norm < 1e-7 && c.numeric_norm < 1e-7;
    if (!zero && c.error > worst) {
      worst = c.error;
      worst_name = c.name;
    }
  }
  const double secs = seconds_since(t0);
  o.pass = o.pass && good == checks.size() && motion > 0 && secs < 120.0;
  o.detail = fmt::format("{}/{} tensors within 1e-3 ({} motion-path), worst nonzero {:.2e} at {}, {:.1f} s",
                         good, checks.size(), motion, worst, worst_name, secs);
  return o;
}

// 2 ------------------------------------------------------------------------

double mean_loss(const Model& model, const std::vector<SyntheticEpisode>& eps) {
  double sum = 0.0;
  for (const auto& ep : eps) {
    const auto f = forward_episode(model, ep);
    sum += total_loss(f.boxes, f.start_logits, f.end_logits, GroundTruth::of(ep)).total.item();
  }
  return sum / static_cast<double>(eps.size());
}

Outcome overfit() {
  const auto t0 = Clock::now();
  const WorldConfig world;  // T = 32
  std::vector<SyntheticEpisode> eps;
  for (std::uint64_t i = 0; i < 8; ++i) eps.push_back(generate_episode(world, 100 + i));
  Model model(ModelConfig{}, 1);
  const double initial = mean_loss(model, eps);
  TrainConfig tc;
  tc.learning_rate = 1e-3;
  tc.steps = 2000;
  tc.seed = 1;
  Trainer trainer(model, tc, eps);
  constexpr std::size_t kFirstCheck = 500, kEvery = 50;
  double ratio = 1.0;
  EvalReport report;
  while (trainer.steps_done() < tc.steps) {
    trainer.step();
    const std::size_t s = trainer.steps_done();
    if (s < kFirstCheck || (s % kEvery != 0 && s != tc.steps)) continue;
    ratio = mean_loss(model, eps) / initial;
    report = evaluate(model, eps);
    std::cout << fmt::format("  step {:4}: loss ratio {:.4f}  m_tIoU {:.4f}  m_vIoU {:.4f}\n", s, ratio,
                             report.m_tiou, report.m_viou)
              << std::flush;
    if (ratio <= 0.1 && report.m_viou >= 0.8 && report.m_tiou >= 0.8) break;
  }
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = ratio <= 0.1 && report.m_viou >= 0.8 && report.m_tiou >= 0.8 && secs < 900.0;
  o.detail = fmt::format("{} steps, loss {:.4f} -> ratio {:.4f}, m_tIoU {:.4f}, m_vIoU {:.4f}, {:.0f} s",
                         trainer.steps_done(), initial, ratio, report.m_tiou, report.m_viou, secs);
  return o;
}

// 3 ------------------------------------------------------------------------

Outcome memory_selection() {
  Rng rng(1001);
  std::size_t spatial_ok = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t width = 2 + rng.below(32);
    const std::size_t n = 1 + rng.below(200);
    const std::size_t n_s = 1 + rng.below(40);
    MemoryBank bank(BankKind::kSpatial, 1, width);
    std::vector<double> last;
    for (std::size_t f = 0; f < n; ++f) {
      // Repeated vectors create exact score ties.
      const auto v = (!last.empty() && rng.uniform() < 0.2) ? last : random_vector(rng, width);
      bank.insert(0, row(v), f);
      last = v;
    }
    const auto text = random_vector(rng, width);
    if (select_spatial(bank, 0, text, n_s).source_indices == oracle::top_ns_frames(bank, 0, text, n_s)) {
      ++spatial_ok;
    }
  }
  std::size_t temporal_ok = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t clusters = 2 + rng.below(4);
    const auto plant = oracle::plant_clusters(rng, 32, clusters, 4, 12, 0.05);
    MemoryBank bank(BankKind::kTemporal, 1, 32);
    for (std::size_t i = 0; i < plant.vectors.size(); ++i) bank.insert(0, row(plant.vectors[i]), i);
    std::vector<std::size_t> expect;
    for (std::size_t f = plant.boundaries.back() + 1; f < plant.vectors.size(); ++f) expect.push_back(f);
    if (select_temporal(bank, 0).source_indices == expect) ++temporal_ok;
  }
  Outcome o;
  o.pass = spatial_ok == 1000 && temporal_ok == 100;
  o.detail = fmt::format("spatial {}/1000 equal to full sort, temporal {}/100 planted suffixes", spatial_ok,
                         temporal_ok);
  return o;
}

// 4 ------------------------------------------------------------------------

Outcome metric_oracles() {
  Rng rng(2002);
  double box_err = 0.0, t_err = 0.0, v_err = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const Box a = random_box(rng), b = rng.uniform() < 0.1 ? a : random_box(rng);
    box_err = std::max(box_err, std::abs(box_iou(a, b) - oracle::box_iou(a, b)));
  }
  for (int i = 0; i < 1000; ++i) {
    const int T = 1 + static_cast<int>(rng.below(120));
    const Segment g = random_segment(rng, T), p = random_segment(rng, T);
    t_err = std::max(t_err, std::abs(t_iou(g, p) - oracle::t_iou(g, p)));
  }
  for (int i = 0; i < 1000; ++i) {
    const int T = 1 + static_cast<int>(rng.below(60));
    Tube g{random_segment(rng, T), {}}, p{random_segment(rng, T), {}};
    for (int f = g.segment.start; f <= g.segment.end; ++f) g.boxes.push_back(random_box(rng));
    for (int f = p.segment.start; f <= p.segment.end; ++f) p.boxes.push_back(random_box(rng));
    const double want = oracle::v_iou(
        g.segment, p.segment, [&](int f) { return g.at(f); }, [&](int f) { return p.at(f); });
    v_err = std::max(v_err, std::abs(v_iou(g, p) - want));
  }
  // Report invariants on reports built from random predictions.
  std::size_t reports = 0, broken = 0;
  const WorldConfig world;
  for (int r = 0; r < 50; ++r) {
    std::vector<SyntheticEpisode> eps;
    std::vector<TubePrediction> preds;
    const std::size_t n = 1 + rng.below(6);
    for (std::size_t i = 0; i < n; ++i) {
      eps.push_back(generate_episode(world, rng.next_u64()));
      TubePrediction p = oracle_prediction(eps.back());
      const int T = static_cast<int>(eps.back().length());
      if (rng.uniform() < 0.7) {
        p.segment = random_segment(rng, T);
        p.boxes.assign(T, Box{});
        for (auto& b : p.boxes) b = random_box(rng);
      }
      preds.push_back(std::move(p));
    }
    const auto rep = evaluate_predictions(preds, eps);
    ++reports;
    bool ok = rep.viou_at_05 <= rep.viou_at_03 && rep.m_viou <= rep.m_tiou + 1e-12;
    for (const auto& row : rep.rows) ok = ok && row.v_iou <= row.t_iou + 1e-12;
    if (!ok) ++broken;
  }
  Outcome o;
  o.pass = box_err <= 1e-9 && t_err <= 1e-9 && v_err <= 1e-9 && broken == 0;
  o.detail = fmt::format("max error box {:.1e} tIoU {:.1e} vIoU {:.1e}; invariants held on {}/{} reports",
                         box_err, t_err, v_err, reports - broken, reports);
  return o;
}

// 5 ------------------------------------------------------------------------

Outcome segment_decoding() {
  Rng rng(3003);
  std::size_t same = 0;
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t T = 1 + rng.below(200);
    std::vector<double> hs(T), he(T);
    for (auto* v : {&hs, &he}) {
      for (auto& x : *v) x = rng.uniform() < 0.3 ? double(rng.below(3)) : 4.0 * rng.normal();
    }
    if (decode_segment(hs, he) == oracle::decode_segment(hs, he)) ++same;
  }
  Outcome o;
  o.pass = same == 500;
  o.detail = fmt::format("{}/500 lists equal to exhaustive enumeration", same);
  return o;
}

// 6 ------------------------------------------------------------------------

bool same_output(const FrameOutput& a, const FrameOutput& b) {
  return a.box == b.box && a.start_logit == b.start_logit && a.end_logit == b.end_logit;
}

Outcome streaming() {
  const Model model(ModelConfig{}, 21);
  WorldConfig world;
  const auto ep = generate_episode(world, 22);
  const auto q = query_of(model, ep);
  std::vector<std::vector<double>> grids;
  for (const auto& f : ep.frames) grids.push_back(f.grid);
  const auto base = ground(model, grids, q);

  // (a) causality
  std::size_t causal_ok = 0;
  Rng rng(23);
  for (std::size_t i = 0; i + 1 < grids.size(); ++i) {
    auto mutated = grids;
    for (auto& v : mutated[i + 1]) v = rng.normal();
    const auto out = ground(model, mutated, q);
    bool ok = true;
    for (std::size_t j = 0; j <= i; ++j) {
      ok = ok && out.boxes[j] == base.boxes[j] && out.start_logits[j] == base.start_logits[j] &&
           out.end_logits[j] == base.end_logits[j];
    }
    if (ok) ++causal_ok;
  }

  // (b) resume
  StreamState full = start_stream(model);
  for (std::size_t i = 0; i < grids.size(); ++i) step(model, full, i, grids[i], q);
  std::size_t resume_ok = 0, cuts = 0;
  for (std::size_t cut = 1; cut < grids.size(); cut += 5) {
    ++cuts;
    StreamState first = start_stream(model);
    for (std::size_t i = 0; i < cut; ++i) step(model, first, i, grids[i], q);
    TensorArchive archive;
    save_stream(first, archive);
    StreamState resumed = load_stream(model, TensorArchive::parse(archive.serialize()));
    for (std::size_t i = cut; i < grids.size(); ++i) step(model, resumed, i, grids[i], q);
    bool ok = resumed.outputs.size() == full.outputs.size() &&
              finish_stream(resumed).segment == finish_stream(full).segment;
    for (std::size_t i = 0; ok && i < full.outputs.size(); ++i) ok = same_output(resumed.outputs[i], full.outputs[i]);
    if (ok) ++resume_ok;
  }

  // (c) per-step peak versus video length
  struct Scaling {
    std::vector<double> peaks;
    std::vector<std::string> lines;
    bool linear = true;
  };
  const auto scaling = [&](const Model& m) {
    Scaling s;
    const auto& dc = m.config().decoder;
    for (std::size_t T : {32u, 128u, 512u}) {
      WorldConfig wc;
      wc.frames = T;
      const auto long_ep = generate_episode(wc, 24);
      const auto lq = query_of(m, long_ep);
      StreamState st = start_stream(m);
      std::size_t peak = 0, longest = 0;
      for (std::size_t i = 0; i < T; ++i) {
        step(m, st, i, long_ep.frames[i].grid, lq);
        peak = std::max(peak, st.last_step_peak_bytes);
        if (dc.temporal_memory != MemoryMode::kSelective) continue;
        for (std::size_t k = 0; k < dc.blocks; ++k) longest = std::max(longest, select_temporal(st.temporal_bank, k, dc.boundary).size());
      }
      s.peaks.push_back(static_cast<double>(peak));
      const std::size_t per_frame = dc.blocks * dc.width;
      const std::size_t kept = dc.memory_capacity ? std::min<std::size_t>(T, *dc.memory_capacity) : T;
      s.linear = s.linear && st.spatial_bank.stored_values() == kept * per_frame &&
                 st.temporal_bank.stored_values() == kept * per_frame;
      s.lines.push_back(fmt::format("T={} peak {} B, bank {} values, longest temporal selection {}", T, peak,
                                    st.spatial_bank.stored_values() + st.temporal_bank.stored_values(), longest));
    }
    return s;
  };
  const auto spread_of = [](const std::vector<double>& v) {
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    return (*hi - *lo) / *lo;
  };
  const Scaling scale = scaling(model);
  const double spread = spread_of(scale.peaks);
  const bool linear = scale.linear;
  const auto& lines = scale.lines;
  if (spread > 0.01) {
    // Diagnostic only: the same streams with a bounded bank.
    ModelConfig capped = model.config();
    capped.decoder.memory_capacity = capped.decoder.n_s;
    const Scaling c = scaling(Model(capped, 21));
    std::cout << fmt::format("  diagnostic, memory_capacity={}: peak spread {:.3f}% ({})\n",
                             *capped.decoder.memory_capacity, 100.0 * spread_of(c.peaks), fmt::join(c.lines, "; "));
  }

  Outcome o;
  const std::size_t steps = grids.size() - 1;
  o.pass = causal_ok == steps && resume_ok == cuts && spread <= 0.01 && linear;
  o.detail = fmt::format("causal {}/{}, resume {}/{}, peak spread {:.3f}% ({}), banks linear: {}", causal_ok,
                         steps, resume_ok, cuts, 100.0 * spread, fmt::join(lines, "; "), linear ? "yes" : "no");
  return o;
}

// 7 ------------------------------------------------------------------------

Outcome ablation() {
  const auto t0 = Clock::now();
  AblationSetup setup;
  // Multi-event benchmark: 3 scripted events per episode, and videos longer
  // than the default N_s = 32 so that spatial selection prunes.
  WorldConfig world;
  world.frames = 64;
  setup.train_episodes = make_episodes(world, 700, 32);
  setup.test_episodes = make_episodes(world, test_seed(700), 32);
  setup.train.learning_rate = 1e-3;
  setup.train.steps = 600;
  setup.seeds = {1, 2, 3};
  const std::vector<std::size_t> sweep = {1, 8, 16, 32};
  const auto variants = reference_variants(setup.base, sweep);
  const auto directions = applicable_directions(reference_directions(setup.base), variants);
  const auto result = ablate(variants, setup, directions, [&](const AblationRow& r) {
    std::cout << fmt::format("  {} seed {}: m_tIoU {:.4f} m_vIoU {:.4f} ({:.0f} s)\n", r.variant, r.seed,
                             r.report.m_tiou, r.report.m_viou, seconds_since(t0))
              << std::flush;
  });
  std::istringstream table(result.to_text());
  for (std::string line; std::getline(table, line);) std::cout << "  " << line << "\n";
  std::cout << "  N_s sweep (mean over seeds)\n  N_s  m_tIoU  m_vIoU\n";
  for (auto ns : sweep) {
    DecoderConfig d = setup.base.decoder;
    d.n_s = ns;
    const std::string name = variant_name(d);
    std::cout << fmt::format("  {:>3}  {:6.2f}  {:6.2f}\n", ns, 100.0 * result.mean(name, "m_tIoU"),
                             100.0 * result.mean(name, "m_vIoU"));
  }
  const double secs = seconds_since(t0);
  Outcome o;
  std::size_t held = 0;
  for (const auto& v : result.verdicts) held += v.holds() ? 1 : 0;
  o.pass = held == result.verdicts.size() && !result.verdicts.empty() && secs < 7200.0;
  o.detail = fmt::format("{}/{} directions held by seed majority, {} runs, {:.0f} s", held,
                         result.verdicts.size(), result.rows.size(), secs);
  return o;
}

// 8 ------------------------------------------------------------------------

std::size_t file_hash(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  const std::string bytes(std::istreambuf_iterator<char>(f), {});
  return std::hash<std::string>{}(bytes);
}

Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / "artstvg_acceptance_cli";
  fs::remove_all(root);
  std::vector<std::map<std::string, std::size_t>> hashes;
  for (int round = 0; round < 2; ++round) {
    const fs::path dir = root / std::to_string(round);
    fs::create_directories(dir);
    const auto at = [&](const std::string& n) { return (dir / n).string(); };
    std::ofstream(at("run.ini")) << "[run]\nseed = 9\nepisodes = 4\neval_episodes = 3\n"
                                    "[model]\nwidth = 16\nheads = 2\n"
                                    "[train]\nsteps = 6\nlearning_rate = 1e-3\n"
                                    "[ablate]\nseeds = 1, 2\ntemporal_memory = selective, none\n";
    const std::vector<std::vector<std::string>> commands = {
        {"gen", "--out", at("train.artge")},
        {"gen", "--split", "test", "--out", at("test.artge")},
        {"train", "--data", at("train.artge"), "--out", at("model.artc")},
        {"eval", "--checkpoint", at("model.artc"), "--data", at("test.artge"), "--out", at("eval.json")},
        {"ground", "--checkpoint", at("model.artc"), "--data", at("test.artge"), "--out", at("tube.jsonl")},
        {"ablate", "--steps", "2", "--data", at("train.artge"), "--out", at("ablation.txt")},
    };
    for (auto args : commands) {
      args.insert(args.begin() + 1, {"--config", at("run.ini")});
      std::ostringstream out, err;
      if (run_cli(args, out, err) != kExitOk) return {false, "command failed: " + args[0] + ": " + err.str()};
    }
    std::map<std::string, std::size_t> h;
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.path().filename() != "run.ini") h[e.path().filename().string()] = file_hash(e.path());
    }
    hashes.push_back(std::move(h));
  }
  std::size_t same = 0;
  std::vector<std::string> differ;
  for (const auto& [name, h] : hashes[0]) {
    const auto it = hashes[1].find(name);
    if (it != hashes[1].end() && it->second == h) ++same;
    else differ.push_back(name);
  }
  fs::remove_all(root);
  Outcome o;
  o.pass = differ.empty() && hashes[0].size() == hashes[1].size() && same >= 10;
  o.detail = fmt::format("{}/{} artifacts hash-identical across two runs{}", same, hashes[0].size(),
                         differ.empty() ? "" : " (differ: " + fmt::format("{}", fmt::join(differ, ", ")) + ")");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"gradient integrity", gradient_integrity},
      {"overfit", overfit},
      {"memory selection oracles", memory_selection},
      {"metric oracles", metric_oracles},
      {"segment decoding", segment_decoding},
      {"streaming contracts", streaming},
      {"directional ablation", ablation},
      {"determinism", determinism},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    std::cout << fmt::format("[{}] {} ...\n", id, criteria[i].first) << std::flush;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    all = all && o.pass;
    std::cout << fmt::format("criterion {}: {} - {}: {}\n", id, o.pass ? "PASS" : "FAIL", criteria[i].first,
                             o.detail)
              << std::flush;
  }
  return all ? 0 : 1;
}
