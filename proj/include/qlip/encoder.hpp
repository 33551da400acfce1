// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "qlip/graph.hpp"
#include "qlip/posenc.hpp"
#include "qlip/quadtree.hpp"

namespace qlip {

struct EncoderConfig {
  int depth = 2;
  int width = 64;
  int heads = 4;
  int patch_size = 14;
  std::uint64_t seed = 0;

  static constexpr int kMlpRatio = 4;

  void validate() const;
  int patch_values() const { return patch_size * patch_size * 3; }
  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

enum class PositionalKind { TableGrid, Mlp, TableBilinear, TableBicubic, Zero };

std::string_view to_string(PositionalKind kind);
PositionalKind parse_positional_kind(std::string_view text);

/// What gets added to each patch embedding. Table kinds read a
/// PositionalTable (TableGrid snaps to the nearest grid node), Mlp evaluates
/// a CoordinateMlp at the entry center, Zero adds nothing.
struct PositionalSource {
  PositionalKind kind = PositionalKind::Zero;
  const PositionalTable* table = nullptr;
  const CoordinateMlp* mlp = nullptr;

  static PositionalSource zero() { return {}; }
  static PositionalSource from_table(PositionalKind kind, const PositionalTable& t) { return {kind, &t, nullptr}; }
  static PositionalSource from_mlp(const CoordinateMlp& m) { return {PositionalKind::Mlp, nullptr, &m}; }

  void validate(int width) const;
  bool has_parameters() const { return kind != PositionalKind::Zero; }
};

/// Frozen encoder parameters.
///
/// Names and shapes (D = width, H = 4 * width, P = 3 * patch_size^2):
///   enc.cls                       1 x D
///   enc.embed.weight / .bias      P x D / 1 x D
///   enc.b<l>.ln1.gain / .bias     1 x D
///   enc.b<l>.attn.{q,k,v,o}.weight / .bias   D x D / 1 x D
///   enc.b<l>.ln2.gain / .bias     1 x D
///   enc.b<l>.mlp.fc1.weight/.bias D x H / 1 x H
///   enc.b<l>.mlp.fc2.weight/.bias H x D / 1 x D
///   enc.post_ln.gain / .bias      1 x D
/// The weight file stores them in lexicographic name order.
class EncoderWeights {
 public:
  EncoderWeights() = default;
  static EncoderWeights init(const EncoderConfig& config);

  const EncoderConfig& config() const { return config_; }
  const TensorMap& params() const { return params_; }
  TensorMap& params() { return params_; }

  void save(const std::filesystem::path& path) const;
  static EncoderWeights load(const std::filesystem::path& path);
  std::string encode() const;
  static EncoderWeights decode(std::string bytes);

  friend bool operator==(const EncoderWeights&, const EncoderWeights&) = default;

 private:
  static std::vector<std::pair<std::string, std::pair<int, int>>> shapes(const EncoderConfig& c);

  EncoderConfig config_;
  TensorMap params_;
};

struct Embeddings {
  Tensor cls;     // 1 x D, final-layer CLS after the output norm
  Tensor tokens;  // N x D
};

/// One encoder pass inside a larger graph.
struct EncoderPass {
  NodeId cls;
  NodeId tokens;
  NodeId positions;  // N x D additive positional vectors; unset for Zero
  bool has_positions = false;
};

/// Owns a graph plus the input tensors its passes need. Several passes can
/// share positional parameters, which is how similarity gradients with
/// respect to one positional source are formed.
///
/// Patch tokens attend to patch tokens only; the CLS token queries the patch
/// tokens but is never itself a key. With positions removed, a layout of
/// identical patches therefore encodes to the same CLS at any token count.
class EncoderProgram {
 public:
  explicit EncoderProgram(const EncoderWeights& weights);

  EncoderPass add_pass(const PatchLayout& layout, const PositionalSource& pos, std::string_view prefix,
                       bool trainable_positions = false);
  /// Adds a constant row vector input.
  NodeId add_constant(std::string name, Tensor value);

  Graph& graph() { return graph_; }
  const Graph& graph() const { return graph_; }
  Feed feed() const;

 private:
  const EncoderWeights* weights_;
  Graph graph_;
  TensorMap inputs_;
  const PositionalTable* table_ = nullptr;
  const CoordinateMlp* mlp_ = nullptr;
};

/// Encodes one layout. Deterministic for fixed weights.
Embeddings encode(const PatchLayout& layout, const PositionalSource& pos, const EncoderWeights& weights);

struct PositionGradient {
  double similarity = 0.0;        // CS(CLS_a, CLS_b)
  std::vector<double> gradient;   // flattened over positional parameters, lexicographic by name
  double norm() const;
};

/// Gradient of CS(CLS(a), CLS(b)) with respect to the parameters behind the
/// shared positional source: all 576 table vectors for table kinds, every
/// trainable MLP parameter for Mlp. Throws for the Zero kind.
PositionGradient encode_grad_wrt_positions(const PatchLayout& a, const PatchLayout& b,
                                           const PositionalSource& pos, const EncoderWeights& weights);

/// dot(a, b) / sqrt(|a|^2 |b|^2); exactly 1 for bitwise-equal operands.
double cosine_similarity(const Tensor& a, const Tensor& b);

}  // namespace qlip
