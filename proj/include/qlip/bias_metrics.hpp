// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "qlip/encoder.hpp"
#include "qlip/image.hpp"
#include "qlip/quadtree.hpp"

namespace qlip {

struct PipelineOptions {
  ResampleMethod resample = ResampleMethod::Bicubic;
  int patch_size = 14;
  int block_size = 16;
  int reference_size = 336;
};

/// Short edge resized to `short_edge`, then center-cropped to a patch multiple.
CroppedImage prepare_native(const Image& img, int short_edge, const PipelineOptions& opts = {});
/// Short edge resized to the reference size, then center-cropped square.
CroppedImage prepare_reference(const Image& img, const PipelineOptions& opts = {});

/// ||grad_P CS(CLS(I_N), CLS(I_ref))||_2 over the shared positional
/// parameters, both renderings patchified on the uniform grid.
double interpolation_bias(const Image& img, int size, const PositionalSource& pos,
                          const EncoderWeights& weights, const PipelineOptions& opts = {});

/// CS of zero-position CLS embeddings of I_N and I_ref.
double mesoscopic_similarity(const Image& img, int size, const EncoderWeights& weights,
                             const PipelineOptions& opts = {});

struct BiasReport {
  std::string image_id;
  int size = 0;
  std::string policy;
  std::string pos_kind;
  double token_count = 0.0;  // fractional only in averaged rows
  double b_interp = 0.0;
  double c_z = 0.0;
  double cs_qtp = 0.0;  // CLS(QtP layout at N) vs CLS(reference)
  double cs_ugp = 0.0;  // CLS(uniform layout at N) vs CLS(reference)
};

struct SweepSpec {
  std::vector<int> sizes;
  std::vector<SelectionPolicy> policies;
  std::vector<PositionalSource> positions;
  int jobs = 1;
};

struct SweepResult {
  std::vector<BiasReport> rows;      // image, size, policy, pos_kind order
  std::vector<BiasReport> averages;  // per (size, policy, pos_kind), image_id "mean"
  std::vector<LoadWarning> warnings;
};

inline constexpr std::string_view kMeanRowId = "mean";

SweepResult sweep(const std::vector<NamedImage>& images, const SweepSpec& spec,
                  const EncoderWeights& weights, const PipelineOptions& opts = {});
/// Loads the directory (lexicographic order) and sweeps it; throws if no
/// image decodes.
SweepResult sweep(const std::filesystem::path& dir, const SweepSpec& spec,
                  const EncoderWeights& weights, const PipelineOptions& opts = {});

/// image_id,size,policy,pos_kind,token_count,b_interp,c_z,cs_qtp,cs_ugp
std::string bias_csv(const std::vector<BiasReport>& rows);
/// image_id,size,policy,token_count; one row per (image, size, policy).
std::string token_csv(const std::vector<BiasReport>& rows);

}  // namespace qlip
