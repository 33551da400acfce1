// SPDX-License-Identifier: Apache-2.0
#include "qlip/bias_metrics.hpp"

#include <fmt/format.h>
#include <omp.h>

#include <map>
#include <set>
#include <stdexcept>
#include <tuple>

namespace qlip {

CroppedImage prepare_native(const Image& img, int short_edge, const PipelineOptions& opts) {
  const Image resized = resize(img, short_edge, opts.resample, opts.patch_size);
  return crop_to_patch_multiple(resized, opts.patch_size, opts.block_size);
}

CroppedImage prepare_reference(const Image& img, const PipelineOptions& opts) {
  const int side = opts.reference_size;
  const Image square = center_crop(resize(img, side, opts.resample, opts.patch_size), side, side);
  return crop_to_patch_multiple(square, opts.patch_size, opts.block_size);
}

namespace {

PatchLayout ugp(const CroppedImage& c) { return uniform_grid_layout(c.image, c.geometry); }

void check_size(int size, const PipelineOptions& opts) {
  if (size < opts.patch_size || opts.reference_size < opts.patch_size) {
    throw std::invalid_argument("image size " + std::to_string(size) + " is below the patch size");
  }
}

}  // namespace

double interpolation_bias(const Image& img, int size, const PositionalSource& pos,
                          const EncoderWeights& weights, const PipelineOptions& opts) {
  check_size(size, opts);
  const auto native = ugp(prepare_native(img, size, opts));
  const auto reference = ugp(prepare_reference(img, opts));
  return encode_grad_wrt_positions(native, reference, pos, weights).norm();
}

double mesoscopic_similarity(const Image& img, int size, const EncoderWeights& weights,
                             const PipelineOptions& opts) {
  check_size(size, opts);
  const auto zero = PositionalSource::zero();
  const auto a = encode(ugp(prepare_native(img, size, opts)), zero, weights);
  const auto b = encode(ugp(prepare_reference(img, opts)), zero, weights);
  return cosine_similarity(a.cls, b.cls);
}

namespace {

// All rows for one (image, size) cell, in policy-major then position order.
std::vector<BiasReport> evaluate_cell(const NamedImage& item, int size, const SweepSpec& spec,
                                      const EncoderWeights& weights, const PipelineOptions& opts) {
  const auto native = prepare_native(item.image, size, opts);
  const auto reference = ugp(prepare_reference(item.image, opts));
  const auto native_ugp = ugp(native);
  const auto cover = maximal_block_cover(native.geometry);

  const auto zero = PositionalSource::zero();
  const double c_z = cosine_similarity(encode(native_ugp, zero, weights).cls, encode(reference, zero, weights).cls);

  struct PerPosition {
    double b_interp;
    double cs_ugp;
    Tensor ref_cls;
  };
  std::vector<PerPosition> per_pos;
  for (const auto& pos : spec.positions) {
    const double b = encode_grad_wrt_positions(native_ugp, reference, pos, weights).norm();
    Tensor ref_cls = encode(reference, pos, weights).cls;
    const double cs = cosine_similarity(encode(native_ugp, pos, weights).cls, ref_cls);
    per_pos.push_back({b, cs, std::move(ref_cls)});
  }

  std::vector<BiasReport> rows;
  for (const auto& policy : spec.policies) {
    const auto layout = patchify(native.image, native.geometry, cover, policy);
    for (std::size_t k = 0; k < spec.positions.size(); ++k) {
      const auto& pos = spec.positions[k];
      BiasReport r;
      r.image_id = item.id;
      r.size = size;
      r.policy = policy.label();
      r.pos_kind = std::string(to_string(pos.kind));
      r.token_count = static_cast<double>(layout.token_count());
      r.b_interp = per_pos[k].b_interp;
      r.c_z = c_z;
      r.cs_qtp = cosine_similarity(encode(layout, pos, weights).cls, per_pos[k].ref_cls);
      r.cs_ugp = per_pos[k].cs_ugp;
      rows.push_back(std::move(r));
    }
  }
  return rows;
}

}  // namespace

SweepResult sweep(const std::vector<NamedImage>& images, const SweepSpec& spec,
                  const EncoderWeights& weights, const PipelineOptions& opts) {
  if (images.empty()) throw std::invalid_argument("sweep: no images");
  if (spec.sizes.empty() || spec.policies.empty() || spec.positions.empty()) {
    throw std::invalid_argument("sweep: sizes, policies and positional kinds must be non-empty");
  }
  for (int s : spec.sizes) check_size(s, opts);
  for (const auto& pos : spec.positions) {
    if (!pos.has_parameters()) {
      throw std::invalid_argument("sweep: the zero positional source has no interpolation bias; "
                                  "c_z already covers it");
    }
    pos.validate(weights.config().width);
  }

  const std::size_t cells = images.size() * spec.sizes.size();
  std::vector<std::vector<BiasReport>> out(cells);
  std::vector<std::string> errors(cells);
  const int jobs = std::max(1, spec.jobs);
#pragma omp parallel for schedule(dynamic) num_threads(jobs)
  for (long long c = 0; c < static_cast<long long>(cells); ++c) {
    const auto& img = images[static_cast<std::size_t>(c) / spec.sizes.size()];
    const int size = spec.sizes[static_cast<std::size_t>(c) % spec.sizes.size()];
    try {
      out[c] = evaluate_cell(img, size, spec, weights, opts);
    } catch (const std::exception& e) {
      errors[c] = img.id + " @ " + std::to_string(size) + ": " + e.what();
    }
  }
  for (const auto& e : errors) {
    if (!e.empty()) throw std::runtime_error("sweep failed for " + e);
  }

  SweepResult result;
  for (auto& cell : out) {
    for (auto& r : cell) result.rows.push_back(std::move(r));
  }

  // Group means keyed by position in the (size, policy, pos) grid.
  std::map<std::tuple<std::size_t, std::size_t, std::size_t>, std::vector<const BiasReport*>> groups;
  const std::size_t per_cell = spec.policies.size() * spec.positions.size();
  for (std::size_t i = 0; i < result.rows.size(); ++i) {
    const std::size_t cell = i / per_cell, within = i % per_cell;
    const std::size_t size_idx = cell % spec.sizes.size();
    groups[{size_idx, within / spec.positions.size(), within % spec.positions.size()}].push_back(&result.rows[i]);
  }
  for (const auto& [key, members] : groups) {
    BiasReport m = *members.front();
    m.image_id = std::string(kMeanRowId);
    m.token_count = m.b_interp = m.c_z = m.cs_qtp = m.cs_ugp = 0.0;
    for (const auto* r : members) {
      m.token_count += r->token_count;
      m.b_interp += r->b_interp;
      m.c_z += r->c_z;
      m.cs_qtp += r->cs_qtp;
      m.cs_ugp += r->cs_ugp;
    }
    const double n = static_cast<double>(members.size());
    m.token_count /= n;
    m.b_interp /= n;
    m.c_z /= n;
    m.cs_qtp /= n;
    m.cs_ugp /= n;
    result.averages.push_back(std::move(m));
  }
  return result;
}

SweepResult sweep(const std::filesystem::path& dir, const SweepSpec& spec, const EncoderWeights& weights,
                  const PipelineOptions& opts) {
  ImageDirectory images(dir);
  auto loaded = images.load_all();
  if (loaded.empty()) throw std::runtime_error("no decodable images in " + dir.string());
  auto result = sweep(loaded, spec, weights, opts);
  result.warnings = images.warnings();
  return result;
}

std::string bias_csv(const std::vector<BiasReport>& rows) {
  std::string out = "image_id,size,policy,pos_kind,token_count,b_interp,c_z,cs_qtp,cs_ugp\n";
  for (const auto& r : rows) {
    out += fmt::format("{},{},{},{},{},{},{},{},{}\n", r.image_id, r.size, r.policy, r.pos_kind, r.token_count,
                       r.b_interp, r.c_z, r.cs_qtp, r.cs_ugp);
  }
  return out;
}

std::string token_csv(const std::vector<BiasReport>& rows) {
  std::string out = "image_id,size,policy,token_count\n";
  std::set<std::tuple<std::string, int, std::string>> seen;
  for (const auto& r : rows) {
    if (!seen.emplace(r.image_id, r.size, r.policy).second) continue;
    out += fmt::format("{},{},{},{}\n", r.image_id, r.size, r.policy, r.token_count);
  }
  return out;
}

}  // namespace qlip
