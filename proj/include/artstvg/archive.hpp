#pragma once

// Named-tensor container (.artc): "ARTC", u16 version, u32 entry count, then
// per entry a u16-length name, u8 rank, u64 dims and little-endian f64
// values. Used for model checkpoints and serialized stream state.

#include <cstdint>
#include <string>
#include <vector>

#include "artstvg/tensor.hpp"

namespace artstvg {

inline constexpr std::uint16_t kArchiveVersion = 1;

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

class TensorArchive {
 public:
  /// Adds or replaces an entry.
  void put(const std::string& name, Shape shape, std::vector<double> values);
  void put(const std::string& name, const Tensor& tensor);
  void put_scalar(const std::string& name, double value);
  /// Exact storage of a u64 as two u32 halves.
  void put_u64(const std::string& name, std::uint64_t value);
  void put_u64s(const std::string& name, const std::vector<std::uint64_t>& values);

  bool contains(const std::string& name) const;
  const NamedArray& get(const std::string& name) const;
  double get_scalar(const std::string& name) const;
  std::uint64_t get_u64(const std::string& name) const;
  std::vector<std::uint64_t> get_u64s(const std::string& name) const;
  /// Copies the entry into `tensor`, which must have the same shape.
  void load_into(const std::string& name, Tensor& tensor) const;

  const std::vector<NamedArray>& entries() const { return entries_; }

  std::vector<unsigned char> serialize() const;
  static TensorArchive parse(const std::vector<unsigned char>& bytes);
  void save(const std::string& path) const;
  static TensorArchive load(const std::string& path);

 private:
  std::vector<NamedArray> entries_;
};

}  // namespace artstvg
