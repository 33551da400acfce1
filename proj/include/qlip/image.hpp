// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace qlip {

/// Three-channel planar raster with values in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<double> data;  // channel-major: data[(c * height + y) * width + x]

  static constexpr int kChannels = 3;

  Image() = default;
  Image(int h, int w);
  static Image filled(int h, int w, double value);

  double& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  double at(int c, int y, int x) const {
    return data[(static_cast<std::size_t>(c) * height + y) * width + x];
  }

  friend bool operator==(const Image&, const Image&) = default;
};

Image sub_image(const Image& img, int top, int left, int height, int width);

enum class ResampleMethod { Bilinear, Bicubic };

/// Scales so the shorter edge becomes `target_short_edge`; the other edge is
/// rounded to the nearest pixel. Bicubic uses the Catmull-Rom kernel; when
/// shrinking, the kernel support widens with the scale factor (area-aware
/// filtering). Output values are clamped to [0, 1].
Image resize(const Image& img, int target_short_edge, ResampleMethod method, int patch_size = 14);
Image resize_exact(const Image& img, int height, int width, ResampleMethod method);

struct PatchGeometry {
  int patch_size = 14;
  int rows = 0;
  int cols = 0;
  int block_size = 16;  // patches per side of a quadtree block

  int height_px() const { return rows * patch_size; }
  int width_px() const { return cols * patch_size; }
  int patch_count() const { return rows * cols; }
  friend bool operator==(const PatchGeometry&, const PatchGeometry&) = default;
};

struct CroppedImage {
  Image image;
  PatchGeometry geometry;
};

/// Center crop to the largest patch multiple. An odd remainder loses its
/// extra pixel at the bottom/right.
CroppedImage crop_to_patch_multiple(const Image& img, int patch_size = 14, int block_size = 16);

Image center_crop(const Image& img, int height, int width);

struct PatchCoord {
  int row = 0;
  int col = 0;
  friend bool operator==(PatchCoord, PatchCoord) = default;
  friend auto operator<=>(PatchCoord, PatchCoord) = default;
};

/// Centered grid of block_size x block_size patch blocks plus the patches
/// left over around it.
struct BlockCover {
  int grid_rows = 0;
  int grid_cols = 0;
  int origin_row = 0;  // patch offset of the grid
  int origin_col = 0;
  int block_size = 16;
  std::vector<PatchCoord> border_patches;  // raster order

  int block_count() const { return grid_rows * grid_cols; }
  bool in_grid(PatchCoord p) const;
};

BlockCover maximal_block_cover(const PatchGeometry& geom);

/// Luminance values are multiplied by this before differencing so the
/// selection threshold reads in 0..255 pixel units.
inline constexpr double kDetailPixelScale = 255.0;

/// Largest signed forward-difference gradient dL/dx + dL/dy of the
/// luminance 0.299R + 0.587G + 0.114B, scanned over every pixel except the
/// last row and column. Regions one pixel thin score 0.
double detail_score(const Image& region, double pixel_scale = kDetailPixelScale);

namespace serial {
double detail_score(const Image& region, double pixel_scale = kDetailPixelScale);
}

/// Per-pixel forward-difference map (height-1) x (width-1) of the scaled
/// luminance; detail_score of any sub-rectangle equals the max of this map
/// over the rectangle minus its last row and column.
struct GradientMap {
  int height = 0;  // of the source image
  int width = 0;
  std::vector<double> values;  // (height-1) * (width-1)

  double region_max(int top, int left, int height, int width) const;
};

GradientMap gradient_map(const Image& img, double pixel_scale = kDetailPixelScale);

// ---------------------------------------------------------------------------
// Decoding

class ImageDecodeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Decodes PPM (P3/P6) or PNG, chosen by file signature.
Image load_image(const std::filesystem::path& path);
void save_ppm(const Image& img, const std::filesystem::path& path);
std::string encode_ppm(const Image& img);

struct NamedImage {
  std::string id;  // file stem
  std::filesystem::path path;
  Image image;
};

struct LoadWarning {
  std::filesystem::path path;
  std::string message;
};

/// Lexicographically ordered, lazily decoded directory of images.
/// Undecodable files are skipped and recorded in warnings().
class ImageDirectory {
 public:
  explicit ImageDirectory(const std::filesystem::path& dir);

  std::optional<NamedImage> next();
  std::vector<NamedImage> load_all();

  const std::vector<std::filesystem::path>& files() const { return files_; }
  const std::vector<LoadWarning>& warnings() const { return warnings_; }

 private:
  std::vector<std::filesystem::path> files_;
  std::size_t cursor_ = 0;
  std::vector<LoadWarning> warnings_;
};

}  // namespace qlip
