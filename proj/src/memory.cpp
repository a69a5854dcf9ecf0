#include "artstvg/memory.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace artstvg {

MemoryBank::MemoryBank(BankKind kind, std::size_t partitions, std::size_t width,
                       std::optional<std::size_t> capacity)
    : kind_(kind), width_(width), capacity_(capacity), parts_(partitions) {
  if (partitions < 1) throw std::invalid_argument("memory bank needs at least one partition");
  if (capacity_ && *capacity_ < 1) throw std::invalid_argument("memory capacity must be >= 1");
}

void MemoryBank::insert(std::size_t k, Tensor vector, std::size_t frame) {
  if (k >= parts_.size()) {
    throw std::out_of_range("partition " + std::to_string(k) + " out of range for " +
                            std::to_string(parts_.size()) + " partitions");
  }
  if (vector.size() != width_) {
    throw ShapeError("memory vector of shape " + shape_str(vector.shape()) +
                     " does not match bank width " + std::to_string(width_));
  }
  auto& part = parts_[k];
  part.push_back({std::move(vector), frame});
  if (capacity_ && part.size() > *capacity_) part.pop_front();
}

const std::deque<MemoryEntry>& MemoryBank::partition(std::size_t k) const {
  if (k >= parts_.size()) {
    throw std::out_of_range("partition " + std::to_string(k) + " out of range");
  }
  return parts_[k];
}

std::size_t MemoryBank::stored_values() const {
  std::size_t n = 0;
  for (const auto& p : parts_) n += p.size() * width_;
  return n;
}

void MemoryBank::detach() {
  for (auto& p : parts_) {
    for (auto& e : p) e.vector = e.vector.detach();
  }
}

double cosine(std::span<const double> a, std::span<const double> b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na < 1e-24 || nb < 1e-24) return 0.0;
  return dot / std::sqrt(na * nb);
}

std::vector<double> pooled_text(const Tensor& text, const std::vector<bool>& mask) {
  const std::size_t rows = text.rows();
  const std::size_t C = text.cols();
  if (mask.size() != rows) throw ShapeError("pooled_text: mask length does not match text rows");
  std::vector<double> out(C, 0.0);
  std::size_t n = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    ++n;
    for (std::size_t c = 0; c < C; ++c) out[c] += text.data()[r * C + c];
  }
  if (n > 0) {
    for (auto& v : out) v /= static_cast<double>(n);
  }
  return out;
}

SelectedMemory select_spatial(const MemoryBank& bank, std::size_t k, const Tensor& text,
                              const std::vector<bool>& mask, std::size_t n_s, Similarity similarity) {
  return select_spatial(bank, k, pooled_text(text, mask), n_s, similarity);
}

SelectedMemory select_spatial(const MemoryBank& bank, std::size_t k,
                              std::span<const double> text_query, std::size_t n_s,
                              Similarity similarity) {
  const auto& part = bank.partition(k);
  if (part.empty()) {
    throw std::logic_error("select_spatial on empty partition " + std::to_string(k));
  }
  if (text_query.size() != bank.width()) throw ShapeError("select_spatial: text width mismatch");
  std::vector<std::size_t> chosen(part.size());
  std::iota(chosen.begin(), chosen.end(), 0);
  if (part.size() > n_s) {
    std::vector<double> score(part.size());
    for (std::size_t i = 0; i < part.size(); ++i) {
      const auto v = part[i].vector.data();
      if (similarity == Similarity::kCosine) {
        score[i] = cosine(v, text_query);
      } else {
        score[i] = std::inner_product(v.begin(), v.end(), text_query.begin(), 0.0);
      }
    }
    std::stable_sort(chosen.begin(), chosen.end(),
                     [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
    chosen.resize(n_s);
    std::sort(chosen.begin(), chosen.end());
  }
  SelectedMemory out;
  for (auto i : chosen) {
    out.vectors.push_back(part[i].vector);
    out.source_indices.push_back(part[i].frame);
  }
  return out;
}

std::vector<std::size_t> detect_boundaries(std::span<const std::vector<double>> vectors,
                                           const BoundaryRule& rule) {
  std::vector<std::size_t> out;
  if (vectors.size() < 3) return out;
  std::vector<double> sim(vectors.size() - 1);
  for (std::size_t j = 0; j + 1 < vectors.size(); ++j) sim[j] = cosine(vectors[j], vectors[j + 1]);
  double threshold = 0.0;
  if (rule.absolute_threshold) {
    threshold = *rule.absolute_threshold;
  } else {
    const double n = static_cast<double>(sim.size());
    const double mu = std::accumulate(sim.begin(), sim.end(), 0.0) / n;
    double var = 0.0;
    for (double s : sim) var += (s - mu) * (s - mu);
    const double sigma = std::sqrt(var / n);
    if (sigma <= 1e-12) return out;
    threshold = mu - rule.alpha * sigma;
  }
  // With two similarities mu - sigma equals the smaller one exactly, so
  // rounding alone would decide a strict comparison; require a real dip.
  constexpr double kMargin = 1e-12;
  for (std::size_t j = 0; j < sim.size(); ++j) {
    if (sim[j] < threshold - kMargin) out.push_back(j);
  }
  return out;
}

std::vector<std::size_t> detect_boundaries(const std::deque<MemoryEntry>& partition,
                                           const BoundaryRule& rule) {
  std::vector<std::vector<double>> values;
  values.reserve(partition.size());
  for (const auto& e : partition) values.emplace_back(e.vector.data().begin(), e.vector.data().end());
  return detect_boundaries(values, rule);
}

SelectedMemory select_temporal(const MemoryBank& bank, std::size_t k, const BoundaryRule& rule) {
  const auto& part = bank.partition(k);
  const auto boundaries = detect_boundaries(part, rule);
  const std::size_t first = boundaries.empty() ? 0 : boundaries.back() + 1;
  SelectedMemory out;
  for (std::size_t i = first; i < part.size(); ++i) {
    out.vectors.push_back(part[i].vector);
    out.source_indices.push_back(part[i].frame);
  }
  return out;
}

SelectedMemory select_all(const MemoryBank& bank, std::size_t k) {
  SelectedMemory out;
  for (const auto& e : bank.partition(k)) {
    out.vectors.push_back(e.vector);
    out.source_indices.push_back(e.frame);
  }
  return out;
}

}  // namespace artstvg
