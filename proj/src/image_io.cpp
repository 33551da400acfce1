// SPDX-License-Identifier: Apache-2.0
#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <memory>

#include "qlip/image.hpp"

namespace qlip {

namespace fs = std::filesystem;

namespace {

std::vector<unsigned char> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageDecodeError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

class PnmReader {
 public:
  explicit PnmReader(const std::vector<unsigned char>& bytes) : b_(bytes) {}

  void skip_space() {
    while (pos_ < b_.size()) {
      if (b_[pos_] == '#') {
        while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
      } else if (std::isspace(b_[pos_])) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  long number() {
    skip_space();
    if (pos_ >= b_.size() || !std::isdigit(b_[pos_])) throw ImageDecodeError("PPM: malformed header");
    long v = 0;
    while (pos_ < b_.size() && std::isdigit(b_[pos_])) {
      v = v * 10 + (b_[pos_++] - '0');
      if (v > (1L << 30)) throw ImageDecodeError("PPM: value out of range");
    }
    return v;
  }

  std::size_t pos_ = 2;
  const std::vector<unsigned char>& b_;
};

Image decode_ppm(const std::vector<unsigned char>& bytes) {
  const bool binary = bytes[1] == '6';
  PnmReader r(bytes);
  const long w = r.number(), h = r.number(), maxval = r.number();
  if (w < 1 || h < 1 || maxval < 1 || maxval > 65535) throw ImageDecodeError("PPM: bad header values");
  Image img(static_cast<int>(h), static_cast<int>(w));
  const double scale = static_cast<double>(maxval);
  const std::size_t n = static_cast<std::size_t>(w) * h;
  if (binary) {
    ++r.pos_;  // the single whitespace byte after maxval
    const std::size_t bps = maxval < 256 ? 1 : 2;
    if (bytes.size() < r.pos_ + n * 3 * bps) throw ImageDecodeError("PPM: truncated pixel data");
    const unsigned char* p = bytes.data() + r.pos_;
    for (std::size_t i = 0; i < n; ++i) {
      for (int c = 0; c < 3; ++c) {
        unsigned v = bps == 1 ? p[0] : (static_cast<unsigned>(p[0]) << 8 | p[1]);
        p += bps;
        if (v > static_cast<unsigned>(maxval)) throw ImageDecodeError("PPM: sample exceeds maxval");
        img.data[c * n + i] = v / scale;
      }
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      for (int c = 0; c < 3; ++c) {
        const long v = r.number();
        if (v > maxval) throw ImageDecodeError("PPM: sample exceeds maxval");
        img.data[c * n + i] = static_cast<double>(v) / scale;
      }
    }
  }
  return img;
}

struct PngMemory {
  const std::vector<unsigned char>* bytes;
  std::size_t pos;
};

void png_read_mem(png_structp png, png_bytep out, png_size_t len) {
  auto* src = static_cast<PngMemory*>(png_get_io_ptr(png));
  if (src->pos + len > src->bytes->size()) png_error(png, "truncated PNG");
  std::copy_n(src->bytes->data() + src->pos, len, out);
  src->pos += len;
}

void png_error_fn(png_structp png, png_const_charp) { std::longjmp(png_jmpbuf(png), 1); }
void png_warning_fn(png_structp, png_const_charp) {}

Image decode_png(const std::vector<unsigned char>& bytes) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_fn, png_warning_fn);
  if (!png) throw ImageDecodeError("PNG: cannot allocate decoder");
  png_infop info = png_create_info_struct(png);
  PngMemory src{&bytes, 0};
  // Everything that must survive a longjmp lives outside the setjmp scope.
  std::vector<unsigned char> pixels;
  std::vector<png_bytep> rows;
  png_uint_32 w = 0, h = 0;
  int depth = 0;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageDecodeError("PNG: corrupt or truncated data");
  }
  png_set_read_fn(png, &src, png_read_mem);
  png_read_info(png, info);
  w = png_get_image_width(png, info);
  h = png_get_image_height(png, info);
  const int color = png_get_color_type(png, info);
  depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
  if (depth == 16) png_set_swap(png);  // little-endian 16-bit samples
  png_read_update_info(png, info);
  depth = png_get_bit_depth(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  pixels.resize(stride * h);
  rows.resize(h);
  for (png_uint_32 y = 0; y < h; ++y) rows[y] = pixels.data() + y * stride;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  Image img(static_cast<int>(h), static_cast<int>(w));
  const std::size_t n = static_cast<std::size_t>(w) * h;
  for (png_uint_32 y = 0; y < h; ++y) {
    for (png_uint_32 x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        double v;
        if (depth == 16) {
          const unsigned char* p = rows[y] + (x * 3 + c) * 2;
          v = (p[0] | (static_cast<unsigned>(p[1]) << 8)) / 65535.0;
        } else {
          v = rows[y][x * 3 + c] / 255.0;
        }
        img.data[c * n + static_cast<std::size_t>(y) * w + x] = v;
      }
    }
  }
  return img;
}

}  // namespace

Image load_image(const fs::path& path) {
  const auto bytes = read_bytes(path);
  static constexpr unsigned char kPngSig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  if (bytes.size() >= 8 && std::equal(kPngSig, kPngSig + 8, bytes.begin())) return decode_png(bytes);
  if (bytes.size() >= 2 && bytes[0] == 'P' && (bytes[1] == '6' || bytes[1] == '3')) return decode_ppm(bytes);
  throw ImageDecodeError("unrecognized image format: " + path.string());
}

std::string encode_ppm(const Image& img) {
  std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.reserve(out.size() + static_cast<std::size_t>(img.width) * img.height * 3);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(img.at(c, y, x), 0.0, 1.0);
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
      }
    }
  }
  return out;
}

void save_ppm(const Image& img, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  const auto bytes = encode_ppm(img);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

ImageDirectory::ImageDirectory(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw std::invalid_argument("not a directory: " + dir.string());
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    if (entry.path().filename().string().starts_with(".")) continue;
    files_.push_back(entry.path());
  }
  if (files_.empty()) throw std::invalid_argument("image directory is empty: " + dir.string());
  std::sort(files_.begin(), files_.end(),
            [](const fs::path& a, const fs::path& b) { return a.filename().string() < b.filename().string(); });
}

std::optional<NamedImage> ImageDirectory::next() {
  while (cursor_ < files_.size()) {
    const fs::path& p = files_[cursor_++];
    try {
      return NamedImage{p.stem().string(), p, load_image(p)};
    } catch (const std::exception& e) {
      warnings_.push_back({p, e.what()});
    }
  }
  return std::nullopt;
}

std::vector<NamedImage> ImageDirectory::load_all() {
  std::vector<NamedImage> out;
  while (auto img = next()) out.push_back(std::move(*img));
  return out;
}

}  // namespace qlip
