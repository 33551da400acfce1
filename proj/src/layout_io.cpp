// SPDX-License-Identifier: Apache-2.0
#include <fmt/format.h>

#include <charconv>
#include <sstream>

#include "qlip/binary_io.hpp"
#include "qlip/quadtree.hpp"

namespace qlip {

namespace {

constexpr std::uint32_t kPatchFileVersion = 1;
constexpr std::string_view kManifestTag = "qlip-layout";
constexpr int kManifestVersion = 1;

}  // namespace

std::string encode_manifest(const PatchLayout& layout) {
  const auto& g = layout.geometry;
  std::string out = fmt::format("{} {}\n", kManifestTag, kManifestVersion);
  out += fmt::format("patch_size {}\n", g.patch_size);
  out += fmt::format("patches {} {}\n", g.rows, g.cols);
  out += fmt::format("block_size {}\n", g.block_size);
  out += fmt::format("tokens {}\n", layout.token_count());
  out += "# top left size_patches center_x center_y\n";
  for (const auto& e : layout.entries) {
    out += fmt::format("{} {} {} {} {}\n", e.top, e.left, e.size, e.center_x, e.center_y);
  }
  return out;
}

PatchLayout decode_manifest(std::string_view text) {
  std::istringstream in{std::string(text)};
  auto fail = [](const std::string& why) -> FormatError { return FormatError("layout manifest: " + why); };
  std::string tag;
  int version = 0;
  if (!(in >> tag >> version) || tag != kManifestTag) throw fail("missing header");
  if (version != kManifestVersion) throw fail("unsupported version " + std::to_string(version));

  PatchLayout layout;
  std::size_t tokens = 0;
  std::string key;
  auto expect = [&](std::string_view want) {
    if (!(in >> key) || key != want) throw fail("expected '" + std::string(want) + "'");
  };
  expect("patch_size");
  in >> layout.geometry.patch_size;
  expect("patches");
  in >> layout.geometry.rows >> layout.geometry.cols;
  expect("block_size");
  in >> layout.geometry.block_size;
  expect("tokens");
  in >> tokens;
  if (!in) throw fail("malformed header values");
  std::string line;
  std::getline(in, line);
  while (in.peek() == '#') std::getline(in, line);
  for (std::size_t i = 0; i < tokens; ++i) {
    LayoutEntry e;
    if (!(in >> e.top >> e.left >> e.size >> e.center_x >> e.center_y)) {
      throw fail("record " + std::to_string(i) + " missing or malformed");
    }
    layout.entries.push_back(std::move(e));
  }
  if (in >> key) throw fail("trailing content after " + std::to_string(tokens) + " records");
  // Border entries are not recorded; they are whatever lies outside the maximal cover.
  if (layout.geometry.patch_size < 1 || layout.geometry.rows < 1 || layout.geometry.cols < 1 ||
      layout.geometry.block_size < 1) {
    throw fail("non-positive geometry");
  }
  const auto cover = maximal_block_cover(layout.geometry);
  for (auto& e : layout.entries) e.border = !cover.in_grid({e.top, e.left});
  return layout;
}

std::string encode_patch_file(const PatchLayout& layout) {
  const auto ps = static_cast<std::uint32_t>(layout.geometry.patch_size);
  ByteWriter w;
  w.magic("QPAT");
  w.u32(kPatchFileVersion);
  w.u32(static_cast<std::uint32_t>(layout.token_count()));
  w.u32(ps);
  for (const auto& e : layout.entries) {
    if (e.pixels.size() != static_cast<std::size_t>(ps) * ps * 3) {
      throw std::invalid_argument("encode_patch_file: entry without patch pixels");
    }
    for (double v : e.pixels) w.f32(v);
  }
  return w.bytes();
}

void decode_patch_file(std::string_view bytes, PatchLayout& layout) {
  ByteReader r(std::string(bytes), "patch file");
  r.expect_magic("QPAT");
  if (const auto v = r.u32(); v != kPatchFileVersion) {
    throw FormatError("patch file: unsupported version " + std::to_string(v));
  }
  const auto count = r.u32();
  const auto ps = r.u32();
  if (count != layout.token_count()) {
    throw FormatError("patch file: " + std::to_string(count) + " entries, manifest has " +
                      std::to_string(layout.token_count()));
  }
  if (ps != static_cast<std::uint32_t>(layout.geometry.patch_size)) {
    throw FormatError("patch file: patch size " + std::to_string(ps) + " differs from manifest");
  }
  for (auto& e : layout.entries) {
    e.pixels.resize(static_cast<std::size_t>(ps) * ps * 3);
    for (auto& v : e.pixels) v = r.f32();
  }
  r.expect_end();
}

void write_layout(const PatchLayout& layout, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_file_atomic(dir / "layout.txt", encode_manifest(layout));
  write_file_atomic(dir / "patches.qpat", encode_patch_file(layout));
}

}  // namespace qlip
