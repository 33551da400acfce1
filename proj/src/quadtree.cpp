// SPDX-License-Identifier: Apache-2.0
#include "qlip/quadtree.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <stdexcept>

#include "qlip/rng.hpp"

namespace qlip {

// ---------------------------------------------------------------------------
// Policies

SelectionPolicy SelectionPolicy::derivative(double alpha) {
  SelectionPolicy p{SelectionKind::Derivative, alpha, 0};
  p.validate();
  return p;
}

SelectionPolicy SelectionPolicy::random(double merge_probability, std::uint64_t seed) {
  SelectionPolicy p{SelectionKind::Random, merge_probability, seed};
  p.validate();
  return p;
}

SelectionPolicy SelectionPolicy::never_merge() { return {SelectionKind::NeverMerge, 0.0, 0}; }

void SelectionPolicy::validate() const {
  if (kind == SelectionKind::Derivative && !std::isfinite(alpha)) {
    throw std::invalid_argument("derivative policy needs a finite alpha");
  }
  if (kind == SelectionKind::Random && !(alpha >= 0.0 && alpha <= 1.0)) {
    throw std::invalid_argument("random policy merge probability must lie in [0, 1], got " +
                                std::to_string(alpha));
  }
}

namespace {
std::string short_number(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}
}  // namespace

std::string SelectionPolicy::label() const {
  switch (kind) {
    case SelectionKind::Derivative: return "derivative:" + short_number(alpha);
    case SelectionKind::Random: return "random:" + short_number(alpha);
    case SelectionKind::NeverMerge: return "never_merge";
  }
  return "unknown";
}

SelectionPolicy SelectionPolicy::parse(std::string_view text, std::uint64_t seed) {
  if (text == "never_merge" || text == "ugp") return never_merge();
  const auto colon = text.find(':');
  if (colon == std::string_view::npos) {
    throw std::invalid_argument("policy '" + std::string(text) +
                                "' must be never_merge, derivative:<alpha> or random:<p>");
  }
  const auto kind = text.substr(0, colon);
  const auto num = text.substr(colon + 1);
  double value = 0.0;
  auto [ptr, ec] = std::from_chars(num.data(), num.data() + num.size(), value);
  if (ec != std::errc() || ptr != num.data() + num.size()) {
    throw std::invalid_argument("policy '" + std::string(text) + "' has a malformed number");
  }
  if (kind == "derivative") return derivative(value);
  if (kind == "random") return random(value, seed);
  throw std::invalid_argument("unknown policy kind '" + std::string(kind) + "'");
}

// ---------------------------------------------------------------------------
// Trees

std::size_t QuadNode::leaf_count() const {
  if (is_leaf()) return 1;
  std::size_t n = 0;
  for (const auto& c : children) n += c.leaf_count();
  return n;
}

void QuadNode::collect_leaves(std::vector<PatchRect>& out) const {
  if (is_leaf()) {
    out.push_back(region);
    return;
  }
  for (const auto& c : children) c.collect_leaves(out);
}

namespace {

bool is_power_of_two(int n) { return n > 0 && (n & (n - 1)) == 0; }

template <class Score>
QuadNode grow(PatchRect region, const SelectionPolicy& policy, Rng& rng, const Score& score) {
  QuadNode node{region, {}};
  if (region.size == 1) return node;
  bool leaf = false;
  switch (policy.kind) {
    case SelectionKind::Derivative: leaf = score(region) < policy.alpha; break;
    case SelectionKind::Random: leaf = rng.uniform() < policy.alpha; break;
    case SelectionKind::NeverMerge: leaf = false; break;
  }
  if (leaf) return node;
  const int h = region.size / 2;
  node.children.reserve(4);
  node.children.push_back(grow({region.top, region.left, h}, policy, rng, score));
  node.children.push_back(grow({region.top, region.left + h, h}, policy, rng, score));
  node.children.push_back(grow({region.top + h, region.left, h}, policy, rng, score));
  node.children.push_back(grow({region.top + h, region.left + h, h}, policy, rng, score));
  return node;
}

}  // namespace

QuadNode build_quadtree(const Image& block, int patch_size, const SelectionPolicy& policy) {
  policy.validate();
  if (block.height != block.width || block.height % patch_size != 0 ||
      !is_power_of_two(block.height / patch_size)) {
    throw std::invalid_argument("build_quadtree: block " + std::to_string(block.height) + "x" +
                                std::to_string(block.width) +
                                " is not a square power-of-two number of patches");
  }
  Rng rng(policy.seed);
  auto score = [&](PatchRect r) {
    return detail_score(sub_image(block, r.top * patch_size, r.left * patch_size,
                                  r.size * patch_size, r.size * patch_size));
  };
  return grow({0, 0, block.height / patch_size}, policy, rng, score);
}

QuadNode build_quadtree(const GradientMap& grads, int top, int left, int side, int patch_size,
                        const SelectionPolicy& policy) {
  policy.validate();
  if (!is_power_of_two(side)) {
    throw std::invalid_argument("build_quadtree: block side " + std::to_string(side) +
                                " is not a power of two");
  }
  if ((top + side) * patch_size > grads.height || (left + side) * patch_size > grads.width) {
    throw std::invalid_argument("build_quadtree: block outside image");
  }
  Rng rng(policy.seed);
  auto score = [&](PatchRect r) {
    return grads.region_max(r.top * patch_size, r.left * patch_size, r.size * patch_size,
                            r.size * patch_size);
  };
  return grow({top, left, side}, policy, rng, score);
}

std::vector<double> downsample_leaf(const Image& leaf, int patch_size) {
  if (leaf.height != leaf.width || leaf.height % patch_size != 0 ||
      !is_power_of_two(leaf.height / patch_size)) {
    throw std::invalid_argument("downsample_leaf: leaf is not a power-of-two multiple of the patch");
  }
  const int k = leaf.height / patch_size;
  const double inv = 1.0 / static_cast<double>(k * k);
  std::vector<double> out(static_cast<std::size_t>(patch_size) * patch_size * 3);
  for (int y = 0; y < patch_size; ++y) {
    for (int x = 0; x < patch_size; ++x) {
      for (int c = 0; c < 3; ++c) {
        double s = 0.0;
        for (int dy = 0; dy < k; ++dy)
          for (int dx = 0; dx < k; ++dx) s += leaf.at(c, y * k + dy, x * k + dx);
        out[(static_cast<std::size_t>(y) * patch_size + x) * 3 + c] = k == 1 ? s : s * inv;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Layouts

double normalized_center(int offset_patches, int size_patches, int extent_patches) {
  if (extent_patches <= 1) return 0.0;
  // Center measured from the middle of the first patch, in patches. For a
  // single patch this is exactly its index.
  const double center = offset_patches + size_patches / 2.0 - 0.5;
  return -1.0 + 2.0 * center / (extent_patches - 1);
}

namespace {

LayoutEntry make_entry(const Image& img, const PatchGeometry& geom, PatchRect r, bool border) {
  const int ps = geom.patch_size;
  LayoutEntry e;
  e.top = r.top;
  e.left = r.left;
  e.size = r.size;
  e.border = border;
  e.center_x = normalized_center(r.left, r.size, geom.cols);
  e.center_y = normalized_center(r.top, r.size, geom.rows);
  e.pixels = downsample_leaf(sub_image(img, r.top * ps, r.left * ps, r.size * ps, r.size * ps), ps);
  return e;
}

void check_image(const Image& img, const PatchGeometry& geom) {
  if (img.height != geom.height_px() || img.width != geom.width_px()) {
    throw std::invalid_argument("layout: image " + std::to_string(img.height) + "x" +
                                std::to_string(img.width) + " does not match patch geometry " +
                                std::to_string(geom.rows) + "x" + std::to_string(geom.cols));
  }
}

}  // namespace

PatchLayout patchify(const Image& img, const PatchGeometry& geom, const BlockCover& cover,
                     const SelectionPolicy& policy) {
  policy.validate();
  check_image(img, geom);
  if (cover.block_size != geom.block_size ||
      cover.origin_row + cover.grid_rows * cover.block_size > geom.rows ||
      cover.origin_col + cover.grid_cols * cover.block_size > geom.cols) {
    throw std::invalid_argument("patchify: block cover does not fit the patch geometry");
  }

  GradientMap grads;
  if (policy.kind == SelectionKind::Derivative) {
    grads = gradient_map(img);
  } else {
    grads.height = img.height;  // extents only; scores are never read
    grads.width = img.width;
  }

  const int nblocks = cover.block_count();
  std::vector<std::vector<LayoutEntry>> per_block(nblocks);
  std::vector<std::string> errors(nblocks);
#pragma omp parallel for schedule(dynamic)
  for (int b = 0; b < nblocks; ++b) try {
    const int br = b / cover.grid_cols, bc = b % cover.grid_cols;
    SelectionPolicy local = policy;
    if (policy.kind == SelectionKind::Random) {
      local.seed = derive_seed(policy.seed, {static_cast<std::uint64_t>(br), static_cast<std::uint64_t>(bc)});
    }
    const int top = cover.origin_row + br * cover.block_size;
    const int left = cover.origin_col + bc * cover.block_size;
    const QuadNode tree = build_quadtree(grads, top, left, cover.block_size, geom.patch_size, local);
    std::vector<PatchRect> leaves;
    tree.collect_leaves(leaves);
    for (const auto& r : leaves) per_block[b].push_back(make_entry(img, geom, r, false));
  } catch (const std::exception& e) {
    errors[b] = e.what();
  }
  for (const auto& e : errors) {
    if (!e.empty()) throw std::runtime_error("patchify: " + e);
  }

  PatchLayout layout{geom, {}};
  for (auto& entries : per_block) {
    for (auto& e : entries) layout.entries.push_back(std::move(e));
  }
  for (const auto& p : cover.border_patches) {
    layout.entries.push_back(make_entry(img, geom, {p.row, p.col, 1}, true));
  }
  std::sort(layout.entries.begin(), layout.entries.end(), [](const LayoutEntry& a, const LayoutEntry& b) {
    return std::pair(a.top, a.left) < std::pair(b.top, b.left);
  });
  return layout;
}

PatchLayout uniform_grid_layout(const Image& img, const PatchGeometry& geom) {
  check_image(img, geom);
  const int ps = geom.patch_size;
  PatchLayout layout{geom, {}};
  layout.entries.reserve(geom.patch_count());
  for (int r = 0; r < geom.rows; ++r) {
    for (int c = 0; c < geom.cols; ++c) {
      LayoutEntry e;
      e.top = r;
      e.left = c;
      e.size = 1;
      e.center_x = geom.cols > 1 ? -1.0 + 2.0 * c / (geom.cols - 1) : 0.0;
      e.center_y = geom.rows > 1 ? -1.0 + 2.0 * r / (geom.rows - 1) : 0.0;
      e.pixels.resize(static_cast<std::size_t>(ps) * ps * 3);
      for (int y = 0; y < ps; ++y)
        for (int x = 0; x < ps; ++x)
          for (int ch = 0; ch < 3; ++ch)
            e.pixels[(static_cast<std::size_t>(y) * ps + x) * 3 + ch] = img.at(ch, r * ps + y, c * ps + x);
      layout.entries.push_back(std::move(e));
    }
  }
  return layout;
}

Image render_layout(const Image& img, const PatchLayout& layout) {
  Image out = img;
  const int ps = layout.geometry.patch_size;
  auto paint = [&](int y, int x, const double (&rgb)[3]) {
    if (y < 0 || x < 0 || y >= out.height || x >= out.width) return;
    for (int c = 0; c < 3; ++c) out.at(c, y, x) = rgb[c];
  };
  static constexpr double kMerged[3] = {1.0, 0.0, 0.0};
  static constexpr double kSingle[3] = {0.0, 1.0, 0.0};
  static constexpr double kBorder[3] = {0.0, 0.0, 1.0};
  for (const auto& e : layout.entries) {
    const auto& color = e.border ? kBorder : (e.size > 1 ? kMerged : kSingle);
    const int y0 = e.top * ps, x0 = e.left * ps, side = e.size * ps;
    for (int d = 0; d < side; ++d) {
      paint(y0, x0 + d, color);
      paint(y0 + side - 1, x0 + d, color);
      paint(y0 + d, x0, color);
      paint(y0 + d, x0 + side - 1, color);
    }
  }
  return out;
}

}  // namespace qlip
