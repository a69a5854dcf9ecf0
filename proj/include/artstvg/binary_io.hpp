#pragma once

// Little-endian binary encoding shared by the dataset and checkpoint
// containers.

#include <bit>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

namespace artstvg {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

template <typename T>
T to_little(T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
    std::memcpy(&v, b, sizeof(T));
    return v;
  }
}

}  // namespace detail

class ByteWriter {
 public:
  template <typename T>
  void put(T v) {
    v = detail::to_little(v);
    const auto* p = reinterpret_cast<const unsigned char*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }
  void put_raw(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  void put_string(std::string_view s) {
    put(static_cast<std::uint16_t>(s.size()));
    put_raw(s);
  }
  template <typename T, typename Range>
  void put_all(const Range& r) {
    for (const auto& v : r) put(static_cast<T>(v));
  }

  const std::vector<unsigned char>& bytes() const { return bytes_; }
  std::size_t size() const { return bytes_.size(); }

 private:
  std::vector<unsigned char> bytes_;
};

class ByteReader {
 public:
  ByteReader(const unsigned char* data, std::size_t size) : data_(data), size_(size) {}
  explicit ByteReader(const std::vector<unsigned char>& v) : ByteReader(v.data(), v.size()) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, data_ + pos_, sizeof(T));
    pos_ += sizeof(T);
    return detail::to_little(v);
  }
  std::string get_raw(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
    pos_ += n;
    return s;
  }
  std::string get_string() { return get_raw(get<std::uint16_t>()); }

  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return size_ - pos_; }
  void seek(std::size_t pos) {
    if (pos > size_) throw FormatError("seek past end of buffer");
    pos_ = pos;
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > size_) throw FormatError("unexpected end of data");
  }

  const unsigned char* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

std::vector<unsigned char> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const std::vector<unsigned char>& bytes);

}  // namespace artstvg
