#pragma once

// Little-endian binary helpers shared by the model, datastore and index
// file formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "knnlm/common.hpp"

namespace knnlm::io {

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts are unsupported");

class Writer {
 public:
  explicit Writer(const std::string& path) : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw Error("cannot open for writing: " + path);
  }

  void magic(std::string_view m) { out_.write(m.data(), static_cast<std::streamsize>(m.size())); }

  template <typename T>
    requires std::is_arithmetic_v<T>
  void scalar(T v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }

  template <typename T>
    requires std::is_arithmetic_v<T>
  void array(std::span<const T> v) {
    out_.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size_bytes()));
  }

  void finish() {
    out_.flush();
    if (!out_) throw Error("write failed: " + path_);
    out_.close();
  }

 private:
  std::string path_;
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw Error("cannot open for reading: " + path);
    in_.seekg(0, std::ios::end);
    size_ = static_cast<std::uint64_t>(in_.tellg());
    in_.seekg(0);
  }

  std::uint64_t size() const { return size_; }
  std::uint64_t remaining() { return size_ - static_cast<std::uint64_t>(in_.tellg()); }

  void expect_magic(std::string_view m) {
    std::string got(m.size(), '\0');
    raw(got.data(), got.size());
    if (got != m) throw FormatError(path_ + ": bad magic, expected " + std::string(m));
  }

  template <typename T>
    requires std::is_arithmetic_v<T>
  T scalar() {
    T v{};
    raw(&v, sizeof(T));
    return v;
  }

  template <typename T>
    requires std::is_arithmetic_v<T>
  std::vector<T> array(std::uint64_t count) {
    if (count > remaining() / sizeof(T)) throw FormatError(path_ + ": truncated file");
    std::vector<T> v(count);
    raw(v.data(), count * sizeof(T));
    return v;
  }

  void expect_end() {
    if (remaining() != 0) throw FormatError(path_ + ": trailing bytes after payload");
  }

 private:
  void raw(void* dst, std::uint64_t n) {
    if (n > remaining()) throw FormatError(path_ + ": truncated file");
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (!in_) throw FormatError(path_ + ": read failed");
  }

  std::string path_;
  std::ifstream in_;
  std::uint64_t size_ = 0;
};

}  // namespace knnlm::io
