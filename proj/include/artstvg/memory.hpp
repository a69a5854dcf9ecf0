#pragma once

// Spatial and temporal memory banks. A bank has one partition per decoder
// block; every frame appends the block's incoming query to its partition.
//
// Block indices in this API are 0-based (partition k serves decoder block
// k+1 in 1-based numbering).

#include <deque>
#include <optional>
#include <span>
#include <vector>

#include "artstvg/tensor.hpp"

namespace artstvg {

enum class BankKind { kSpatial, kTemporal };

/// How a decoder consults its bank.
enum class MemoryMode {
  kNone,       // no memory cross-attention
  kAll,        // attend to every stored memory
  kSelective,  // text top-N_s (spatial) or current-event suffix (temporal)
};

enum class Similarity { kCosine, kDot };

struct MemoryEntry {
  Tensor vector;  // 1 x C
  std::size_t frame = 0;
};

class MemoryBank {
 public:
  MemoryBank() = default;
  MemoryBank(BankKind kind, std::size_t partitions, std::size_t width,
             std::optional<std::size_t> capacity = std::nullopt);

  /// Appends `vector` to partition k, evicting the oldest entry when a
  /// capacity is set and exceeded.
  void insert(std::size_t k, Tensor vector, std::size_t frame);

  BankKind kind() const { return kind_; }
  std::size_t partitions() const { return parts_.size(); }
  std::size_t width() const { return width_; }
  std::optional<std::size_t> capacity() const { return capacity_; }
  const std::deque<MemoryEntry>& partition(std::size_t k) const;
  std::size_t size(std::size_t k) const { return partition(k).size(); }
  /// Total stored scalars, for memory accounting.
  std::size_t stored_values() const;

  /// Replaces every stored tensor with a detached copy.
  void detach();

 private:
  BankKind kind_ = BankKind::kSpatial;
  std::size_t width_ = 0;
  std::optional<std::size_t> capacity_;
  std::vector<std::deque<MemoryEntry>> parts_;
};

struct SelectedMemory {
  std::vector<Tensor> vectors;
  std::vector<std::size_t> source_indices;  // frames, strictly increasing

  bool empty() const { return vectors.empty(); }
  std::size_t size() const { return vectors.size(); }
};

/// Cosine similarity; 0 when either vector has (near) zero norm.
double cosine(std::span<const double> a, std::span<const double> b);

/// Mean of the unmasked rows of a text feature (N_t x C).
std::vector<double> pooled_text(const Tensor& text, const std::vector<bool>& mask);

/// Scores each memory of partition k against the pooled text and keeps the
/// n_s best (all when fewer), returned in frame order. Ties prefer the
/// earlier frame.
SelectedMemory select_spatial(const MemoryBank& bank, std::size_t k, const Tensor& text,
                              const std::vector<bool>& mask, std::size_t n_s,
                              Similarity similarity = Similarity::kCosine);
SelectedMemory select_spatial(const MemoryBank& bank, std::size_t k,
                              std::span<const double> text_query, std::size_t n_s,
                              Similarity similarity = Similarity::kCosine);

struct BoundaryRule {
  /// Relative rule: boundary where s_j < mean - alpha * stddev.
  double alpha = 1.0;
  /// When set, boundary where s_j < threshold instead.
  std::optional<double> absolute_threshold;
};

/// Adjacent-similarity dips. Returns positions j (0-based) such that a
/// boundary lies between vectors j and j+1. Empty for fewer than 3 vectors
/// or when the similarities have zero spread.
std::vector<std::size_t> detect_boundaries(std::span<const std::vector<double>> vectors,
                                           const BoundaryRule& rule = {});
std::vector<std::size_t> detect_boundaries(const std::deque<MemoryEntry>& partition,
                                           const BoundaryRule& rule = {});

/// Memories after the last detected boundary (the whole partition when there
/// is none): the event that contains the newest frame.
SelectedMemory select_temporal(const MemoryBank& bank, std::size_t k, const BoundaryRule& rule = {});

/// Every memory of partition k in frame order.
SelectedMemory select_all(const MemoryBank& bank, std::size_t k);

}  // namespace artstvg
