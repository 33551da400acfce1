// SPDX-License-Identifier: Apache-2.0
#include "qlip/binary_io.hpp"

#include <bit>
#include <fstream>
#include <iterator>

namespace qlip {

void ByteWriter::magic(std::string_view four_cc) { buf_.append(four_cc); }

void ByteWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void ByteWriter::u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void ByteWriter::f32(double v) { u32(std::bit_cast<std::uint32_t>(static_cast<float>(v))); }

void ByteWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

ByteReader::ByteReader(std::string bytes, std::string what)
    : buf_(std::move(bytes)), what_(std::move(what)) {}

const unsigned char* ByteReader::take(std::size_t n) {
  if (buf_.size() - pos_ < n) {
    throw FormatError(what_ + ": truncated at byte " + std::to_string(pos_));
  }
  const auto* p = reinterpret_cast<const unsigned char*>(buf_.data() + pos_);
  pos_ += n;
  return p;
}

void ByteReader::expect_magic(std::string_view four_cc) {
  const auto* p = take(four_cc.size());
  if (std::string_view(reinterpret_cast<const char*>(p), four_cc.size()) != four_cc) {
    throw FormatError(what_ + ": bad magic, expected '" + std::string(four_cc) + "'");
  }
}

std::uint32_t ByteReader::u32() {
  const auto* p = take(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

std::uint64_t ByteReader::u64() {
  const auto* p = take(8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

double ByteReader::f32() { return static_cast<double>(std::bit_cast<float>(u32())); }

double ByteReader::f64() { return std::bit_cast<double>(u64()); }

void ByteReader::expect_end() const {
  if (pos_ != buf_.size()) {
    throw FormatError(what_ + ": " + std::to_string(buf_.size() - pos_) + " trailing bytes");
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

double round_to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace qlip
