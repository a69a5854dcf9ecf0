#include "artstvg/archive.hpp"

#include <algorithm>

#include "artstvg/binary_io.hpp"

namespace artstvg {

namespace {

constexpr char kMagic[] = "ARTC";

std::size_t element_count(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

}  // namespace

void TensorArchive::put(const std::string& name, Shape shape, std::vector<double> values) {
  if (element_count(shape) != values.size()) {
    throw ShapeError("archive entry '" + name + "': shape " + shape_str(shape) + " holds " +
                     std::to_string(element_count(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  for (auto& e : entries_) {
    if (e.name == name) {
      e.shape = std::move(shape);
      e.values = std::move(values);
      return;
    }
  }
  entries_.push_back({name, std::move(shape), std::move(values)});
}

void TensorArchive::put(const std::string& name, const Tensor& tensor) {
  put(name, tensor.shape(), {tensor.data().begin(), tensor.data().end()});
}

void TensorArchive::put_scalar(const std::string& name, double value) { put(name, {}, {value}); }

void TensorArchive::put_u64(const std::string& name, std::uint64_t value) {
  put_u64s(name, {value});
}

void TensorArchive::put_u64s(const std::string& name, const std::vector<std::uint64_t>& values) {
  std::vector<double> halves;
  halves.reserve(2 * values.size());
  for (auto v : values) {
    halves.push_back(static_cast<double>(v >> 32));
    halves.push_back(static_cast<double>(v & 0xffffffffULL));
  }
  put(name, {values.size(), 2}, std::move(halves));
}

bool TensorArchive::contains(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(),
                     [&](const NamedArray& e) { return e.name == name; });
}

const NamedArray& TensorArchive::get(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e;
  }
  throw FormatError("archive has no entry '" + name + "'");
}

double TensorArchive::get_scalar(const std::string& name) const {
  const auto& e = get(name);
  if (e.values.size() != 1) throw FormatError("archive entry '" + name + "' is not a scalar");
  return e.values[0];
}

std::uint64_t TensorArchive::get_u64(const std::string& name) const {
  const auto v = get_u64s(name);
  if (v.size() != 1) throw FormatError("archive entry '" + name + "' is not a single u64");
  return v[0];
}

std::vector<std::uint64_t> TensorArchive::get_u64s(const std::string& name) const {
  const auto& e = get(name);
  if (e.shape.size() != 2 || e.shape[1] != 2) {
    throw FormatError("archive entry '" + name + "' is not a u64 table");
  }
  std::vector<std::uint64_t> out(e.shape[0]);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = (static_cast<std::uint64_t>(e.values[2 * i]) << 32) |
             static_cast<std::uint64_t>(e.values[2 * i + 1]);
  }
  return out;
}

void TensorArchive::load_into(const std::string& name, Tensor& tensor) const {
  const auto& e = get(name);
  if (e.shape != tensor.shape()) {
    throw FormatError("archive entry '" + name + "' has shape " + shape_str(e.shape) +
                      ", expected " + shape_str(tensor.shape()));
  }
  std::copy(e.values.begin(), e.values.end(), tensor.mutable_data().begin());
}

std::vector<unsigned char> TensorArchive::serialize() const {
  ByteWriter w;
  w.put_raw(kMagic);
  w.put(kArchiveVersion);
  w.put(static_cast<std::uint32_t>(entries_.size()));
  for (const auto& e : entries_) {
    w.put_string(e.name);
    w.put(static_cast<std::uint8_t>(e.shape.size()));
    w.put_all<std::uint64_t>(e.shape);
    w.put_all<double>(e.values);
  }
  return w.bytes();
}

TensorArchive TensorArchive::parse(const std::vector<unsigned char>& bytes) {
  ByteReader r(bytes);
  if (r.get_raw(4) != kMagic) throw FormatError("not an ARTC archive (bad magic)");
  const auto version = r.get<std::uint16_t>();
  if (version != kArchiveVersion) {
    throw FormatError("unsupported archive version " + std::to_string(version));
  }
  const auto count = r.get<std::uint32_t>();
  TensorArchive a;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedArray e;
    e.name = r.get_string();
    const auto rank = r.get<std::uint8_t>();
    for (std::uint8_t d = 0; d < rank; ++d) e.shape.push_back(r.get<std::uint64_t>());
    const std::size_t n = element_count(e.shape);
    if (n > r.remaining() / sizeof(double)) {
      throw FormatError("archive entry '" + e.name + "' is truncated");
    }
    e.values.resize(n);
    for (auto& v : e.values) v = r.get<double>();
    a.entries_.push_back(std::move(e));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after archive entries");
  return a;
}

void TensorArchive::save(const std::string& path) const { write_file_bytes(path, serialize()); }

TensorArchive TensorArchive::load(const std::string& path) { return parse(read_file_bytes(path)); }

}  // namespace artstvg
