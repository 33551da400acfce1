// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace qlip {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Little-endian byte sink for the binary file formats.
class ByteWriter {
 public:
  void magic(std::string_view four_cc);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(double v);  // narrows to IEEE single
  void f64(double v);

  const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  ByteReader(std::string bytes, std::string what);

  void expect_magic(std::string_view four_cc);
  std::uint32_t u32();
  std::uint64_t u64();
  double f32();
  double f64();
  bool at_end() const { return pos_ == buf_.size(); }
  void expect_end() const;
  std::size_t remaining() const { return buf_.size() - pos_; }

 private:
  const unsigned char* take(std::size_t n);

  std::string buf_;
  std::string what_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::filesystem::path& path);
/// Writes to a sibling temporary file and renames it into place.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

/// Rounds through IEEE single precision.
double round_to_f32(double v);

}  // namespace qlip
