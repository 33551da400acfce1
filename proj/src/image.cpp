// SPDX-License-Identifier: Apache-2.0
#include "qlip/image.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace qlip {

Image::Image(int h, int w) : height(h), width(w) {
  if (h < 1 || w < 1) {
    throw std::invalid_argument("Image: dimensions must be positive, got " + std::to_string(h) +
                                "x" + std::to_string(w));
  }
  data.assign(static_cast<std::size_t>(kChannels) * h * w, 0.0);
}

Image Image::filled(int h, int w, double value) {
  Image img(h, w);
  std::fill(img.data.begin(), img.data.end(), value);
  return img;
}

Image sub_image(const Image& img, int top, int left, int height, int width) {
  if (top < 0 || left < 0 || top + height > img.height || left + width > img.width) {
    throw std::out_of_range("sub_image: rectangle outside image");
  }
  Image out(height, width);
  for (int c = 0; c < Image::kChannels; ++c)
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) out.at(c, y, x) = img.at(c, top + y, left + x);
  return out;
}

// ---------------------------------------------------------------------------
// Resampling

namespace {

double catmull_rom(double x) {
  constexpr double a = -0.5;
  x = std::abs(x);
  if (x < 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
  return 0.0;
}

double triangle(double x) {
  x = std::abs(x);
  return x < 1.0 ? 1.0 - x : 0.0;
}

struct Taps {
  int first = 0;
  std::vector<double> weights;
};

// Normalized filter taps for every output sample along one axis.
std::vector<Taps> axis_taps(int in_size, int out_size, ResampleMethod method) {
  const double ratio = static_cast<double>(in_size) / out_size;
  const double filter_scale = std::max(1.0, ratio);
  const double base_support = method == ResampleMethod::Bicubic ? 2.0 : 1.0;
  const double support = base_support * filter_scale;
  std::vector<Taps> taps(out_size);
  for (int i = 0; i < out_size; ++i) {
    const double center = (i + 0.5) * ratio;
    const int lo = std::max(0, static_cast<int>(std::floor(center - support)));
    const int hi = std::min(in_size - 1, static_cast<int>(std::ceil(center + support)));
    Taps& t = taps[i];
    t.first = lo;
    double total = 0.0;
    for (int j = lo; j <= hi; ++j) {
      const double d = (j + 0.5 - center) / filter_scale;
      const double w = method == ResampleMethod::Bicubic ? catmull_rom(d) : triangle(d);
      t.weights.push_back(w);
      total += w;
    }
    for (auto& w : t.weights) w /= total;
  }
  return taps;
}

}  // namespace

Image resize_exact(const Image& img, int height, int width, ResampleMethod method) {
  if (height == img.height && width == img.width) return img;
  const auto htaps = axis_taps(img.width, width, method);
  const auto vtaps = axis_taps(img.height, height, method);

  // Horizontal pass into an intermediate of size img.height x width.
  Image mid(img.height, width);
#pragma omp parallel for schedule(static)
  for (int cy = 0; cy < Image::kChannels * img.height; ++cy) {
    const int c = cy / img.height, y = cy % img.height;
    for (int x = 0; x < width; ++x) {
      const Taps& t = htaps[x];
      double s = 0.0;
      for (std::size_t k = 0; k < t.weights.size(); ++k) s += t.weights[k] * img.at(c, y, t.first + static_cast<int>(k));
      mid.at(c, y, x) = s;
    }
  }
  Image out(height, width);
#pragma omp parallel for schedule(static)
  for (int cy = 0; cy < Image::kChannels * height; ++cy) {
    const int c = cy / height, y = cy % height;
    const Taps& t = vtaps[y];
    for (int x = 0; x < width; ++x) {
      double s = 0.0;
      for (std::size_t k = 0; k < t.weights.size(); ++k) s += t.weights[k] * mid.at(c, t.first + static_cast<int>(k), x);
      out.at(c, y, x) = std::clamp(s, 0.0, 1.0);
    }
  }
  return out;
}

Image resize(const Image& img, int target_short_edge, ResampleMethod method, int patch_size) {
  if (target_short_edge < patch_size) {
    throw std::invalid_argument("resize: target " + std::to_string(target_short_edge) +
                                " is smaller than the patch size " + std::to_string(patch_size));
  }
  const int short_edge = std::min(img.height, img.width);
  const double f = static_cast<double>(target_short_edge) / short_edge;
  int h, w;
  if (img.height <= img.width) {
    h = target_short_edge;
    w = static_cast<int>(std::lround(img.width * f));
  } else {
    w = target_short_edge;
    h = static_cast<int>(std::lround(img.height * f));
  }
  return resize_exact(img, h, w, method);
}

// ---------------------------------------------------------------------------
// Cropping and covers

Image center_crop(const Image& img, int height, int width) {
  if (height > img.height || width > img.width) {
    throw std::invalid_argument("center_crop: target larger than image");
  }
  const int top = (img.height - height) / 2;
  const int left = (img.width - width) / 2;
  return sub_image(img, top, left, height, width);
}

CroppedImage crop_to_patch_multiple(const Image& img, int patch_size, int block_size) {
  if (img.height < patch_size || img.width < patch_size) {
    throw std::invalid_argument("crop_to_patch_multiple: image " + std::to_string(img.height) +
                                "x" + std::to_string(img.width) + " smaller than one patch");
  }
  if (block_size < 1 || (block_size & (block_size - 1)) != 0) {
    throw std::invalid_argument("block size must be a power of two");
  }
  PatchGeometry geom{.patch_size = patch_size,
                     .rows = img.height / patch_size,
                     .cols = img.width / patch_size,
                     .block_size = block_size};
  return {center_crop(img, geom.height_px(), geom.width_px()), geom};
}

bool BlockCover::in_grid(PatchCoord p) const {
  return p.row >= origin_row && p.row < origin_row + grid_rows * block_size &&
         p.col >= origin_col && p.col < origin_col + grid_cols * block_size;
}

BlockCover maximal_block_cover(const PatchGeometry& geom) {
  BlockCover cover;
  cover.block_size = geom.block_size;
  cover.grid_rows = geom.rows / geom.block_size;
  cover.grid_cols = geom.cols / geom.block_size;
  if (cover.grid_rows == 0 || cover.grid_cols == 0) {
    cover.grid_rows = cover.grid_cols = 0;
  } else {
    cover.origin_row = (geom.rows - cover.grid_rows * geom.block_size) / 2;
    cover.origin_col = (geom.cols - cover.grid_cols * geom.block_size) / 2;
  }
  for (int r = 0; r < geom.rows; ++r) {
    for (int c = 0; c < geom.cols; ++c) {
      if (!cover.in_grid({r, c})) cover.border_patches.push_back({r, c});
    }
  }
  return cover;
}

// ---------------------------------------------------------------------------
// Detail score

namespace {

std::vector<double> scaled_luminance(const Image& img, double scale) {
  std::vector<double> lum(static_cast<std::size_t>(img.height) * img.width);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      lum[static_cast<std::size_t>(y) * img.width + x] =
          scale * (0.299 * img.at(0, y, x) + 0.587 * img.at(1, y, x) + 0.114 * img.at(2, y, x));
    }
  }
  return lum;
}

inline double forward_grad(const std::vector<double>& lum, int w, int y, int x) {
  const double here = lum[static_cast<std::size_t>(y) * w + x];
  return (lum[static_cast<std::size_t>(y) * w + x + 1] - here) +
         (lum[static_cast<std::size_t>(y + 1) * w + x] - here);
}

}  // namespace

double detail_score(const Image& region, double pixel_scale) {
  if (region.height < 2 || region.width < 2) return 0.0;
  const auto lum = scaled_luminance(region, pixel_scale);
  double best = -std::numeric_limits<double>::infinity();
#pragma omp parallel for reduction(max : best) schedule(static) if (region.height * region.width > 65536)
  for (int y = 0; y < region.height - 1; ++y) {
    for (int x = 0; x < region.width - 1; ++x) best = std::max(best, forward_grad(lum, region.width, y, x));
  }
  return best;
}

namespace serial {
double detail_score(const Image& region, double pixel_scale) {
  if (region.height < 2 || region.width < 2) return 0.0;
  const auto lum = scaled_luminance(region, pixel_scale);
  double best = -std::numeric_limits<double>::infinity();
  for (int y = 0; y < region.height - 1; ++y)
    for (int x = 0; x < region.width - 1; ++x) best = std::max(best, forward_grad(lum, region.width, y, x));
  return best;
}
}  // namespace serial

GradientMap gradient_map(const Image& img, double pixel_scale) {
  GradientMap g{.height = img.height, .width = img.width, .values = {}};
  if (img.height < 2 || img.width < 2) return g;
  const auto lum = scaled_luminance(img, pixel_scale);
  const int gw = img.width - 1;
  g.values.resize(static_cast<std::size_t>(img.height - 1) * gw);
#pragma omp parallel for schedule(static)
  for (int y = 0; y < img.height - 1; ++y)
    for (int x = 0; x < gw; ++x) g.values[static_cast<std::size_t>(y) * gw + x] = forward_grad(lum, img.width, y, x);
  return g;
}

double GradientMap::region_max(int top, int left, int h, int w) const {
  if (h < 2 || w < 2) return 0.0;
  const int gw = width - 1;
  double best = -std::numeric_limits<double>::infinity();
  for (int y = top; y < top + h - 1; ++y) {
    const double* row = values.data() + static_cast<std::size_t>(y) * gw;
    for (int x = left; x < left + w - 1; ++x) best = std::max(best, row[x]);
  }
  return best;
}

}  // namespace qlip
