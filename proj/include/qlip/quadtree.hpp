// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "qlip/image.hpp"

namespace qlip {

enum class SelectionKind { Derivative, Random, NeverMerge };

/// Decides which quadtree nodes stop subdividing.
///
///  - Derivative: a node is a leaf when detail_score(region) < alpha.
///  - Random: a node is a leaf when a uniform draw falls below alpha, which
///    is then a merge probability in [0, 1]. Draws are taken in preorder.
///  - NeverMerge: subdivide down to single patches.
///
/// Single-patch nodes are always leaves.
struct SelectionPolicy {
  SelectionKind kind = SelectionKind::NeverMerge;
  double alpha = 0.0;
  std::uint64_t seed = 0;

  static SelectionPolicy derivative(double alpha);
  static SelectionPolicy random(double merge_probability, std::uint64_t seed);
  static SelectionPolicy never_merge();

  void validate() const;
  // "derivative:0.5", "random:0.1", "never_merge"
  std::string label() const;
  static SelectionPolicy parse(std::string_view text, std::uint64_t seed = 0);
};

/// Square region measured in patches.
struct PatchRect {
  int top = 0;
  int left = 0;
  int size = 1;
  friend bool operator==(PatchRect, PatchRect) = default;
  friend auto operator<=>(PatchRect, PatchRect) = default;
};

struct QuadNode {
  PatchRect region;
  std::vector<QuadNode> children;  // empty or exactly four: TL, TR, BL, BR

  bool is_leaf() const { return children.empty(); }
  std::size_t leaf_count() const;
  void collect_leaves(std::vector<PatchRect>& out) const;
};

/// Builds the tree for a square block of 2^P x 2^P patches. Node regions are
/// relative to the block. Throws std::invalid_argument when the block is not
/// a power-of-two number of patches on a side.
QuadNode build_quadtree(const Image& block, int patch_size, const SelectionPolicy& policy);

/// Same tree, reading scores from a precomputed gradient map of the whole
/// image; `top`/`left` give the block's patch offset. Node regions are in
/// image patch coordinates.
QuadNode build_quadtree(const GradientMap& grads, int top, int left, int side, int patch_size,
                        const SelectionPolicy& policy);

/// Box-filters a k*patch_size square (k a power of two) down to one patch.
/// Returns patch_size * patch_size * 3 values in (y, x, channel) order.
std::vector<double> downsample_leaf(const Image& leaf, int patch_size);

struct LayoutEntry {
  int top = 0;   // patch row
  int left = 0;  // patch column
  int size = 1;  // side length in patches
  double center_x = 0.0;  // horizontal, in [-1, 1]
  double center_y = 0.0;  // vertical, in [-1, 1]
  bool border = false;    // passed through outside the block grid
  std::vector<double> pixels;  // patch_size^2 * 3, (y, x, channel)

  friend bool operator==(const LayoutEntry&, const LayoutEntry&) = default;
};

/// Token sequence for one image, raster-ordered by (top, left).
struct PatchLayout {
  PatchGeometry geometry;
  std::vector<LayoutEntry> entries;

  std::size_t token_count() const { return entries.size(); }
  friend bool operator==(const PatchLayout&, const PatchLayout&) = default;
};

/// Normalized center of a square patch region along one axis, so that a
/// single patch at index j of an n-patch axis lands at -1 + 2j/(n-1).
/// Merged leaves sit at the geometric center of their region.
double normalized_center(int offset_patches, int size_patches, int extent_patches);

/// Quadtree patchification. Every cover block contributes its pruned leaves
/// (downsampled to one patch); every border patch passes through unchanged.
/// Random policies draw from a per-block stream derived from
/// (policy.seed, block row, block col).
PatchLayout patchify(const Image& img, const PatchGeometry& geom, const BlockCover& cover,
                     const SelectionPolicy& policy);

/// Plain uniform grid patchification.
PatchLayout uniform_grid_layout(const Image& img, const PatchGeometry& geom);

/// Draws entry outlines over the image: red for merged leaves, green for
/// single-patch leaves inside blocks, blue for border patches.
Image render_layout(const Image& img, const PatchLayout& layout);

// Layout export ------------------------------------------------------------

/// Text manifest: header lines then one "top left size center_x center_y"
/// record per entry.
std::string encode_manifest(const PatchLayout& layout);
/// Parses a manifest; pixels are left empty and border flags are derived
/// from the maximal block cover of the recorded geometry.
PatchLayout decode_manifest(std::string_view text);

/// "QPAT" | version u32 | entries u32 | patch_size u32 | f32 pixels.
std::string encode_patch_file(const PatchLayout& layout);
/// Fills pixels of `layout` from a patch file; entry count must match.
void decode_patch_file(std::string_view bytes, PatchLayout& layout);

void write_layout(const PatchLayout& layout, const std::filesystem::path& dir);

}  // namespace qlip
