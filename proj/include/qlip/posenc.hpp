// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "qlip/graph.hpp"

namespace qlip {

/// Side of the frozen positional grid (336 px / 14 px patches).
inline constexpr int kGridSide = 24;
inline constexpr int kGridPoints = kGridSide * kGridSide;

/// Coordinates of grid node (i, j): x = -1 + 2i/23, y = -1 + 2j/23.
/// The first coordinate runs along table rows i, the second along columns j.
struct GridPoint {
  double x = 0.0;
  double y = 0.0;
};

GridPoint grid_coordinate(int i, int j);

/// The frozen 24 x 24 x D table of positional vectors, stored as a
/// 576 x D matrix with row index i * 24 + j.
class PositionalTable {
 public:
  PositionalTable() = default;
  explicit PositionalTable(Tensor values);

  static PositionalTable zeros(int dim);
  /// A smooth synthetic table: each component is a low-frequency
  /// trigonometric function of the node coordinates. Values are rounded to
  /// single precision so the table survives a file round trip exactly.
  static PositionalTable synthetic_smooth(int dim, std::uint64_t seed);

  int dim() const { return static_cast<int>(values_.cols()); }
  const Tensor& matrix() const { return values_; }
  Tensor& matrix() { return values_; }
  double at(int i, int j, int d) const { return values_(static_cast<std::size_t>(i) * kGridSide + j, d); }

  void save(const std::filesystem::path& path) const;
  static PositionalTable load(const std::filesystem::path& path);
  std::string encode() const;
  static PositionalTable decode(std::string bytes);

  friend bool operator==(const PositionalTable&, const PositionalTable&) = default;

 private:
  Tensor values_;
};

struct MlpConfig {
  int fourier_features = 48;
  int hidden_layers = 4;
  int hidden_width = 1024;
  int out_dim = 1024;
  double fourier_scale = 10.0;
  std::uint64_t init_seed = 0;

  void validate() const;
  friend bool operator==(const MlpConfig&, const MlpConfig&) = default;
};

/// M(x, y): Fourier features [sin(2 pi B v), cos(2 pi B v)] of v = (x, y)
/// followed by `hidden_layers` GELU layers and a linear read-out.
///
/// Parameters are named "mlp.h<k>.weight|bias" for hidden layer k and
/// "mlp.out.weight|bias" for the read-out; weights are (fan_in x fan_out).
/// The frequency matrix B (2 x fourier_features) is frozen.
class CoordinateMlp {
 public:
  CoordinateMlp() = default;
  static CoordinateMlp init(const MlpConfig& config);

  const MlpConfig& config() const { return config_; }
  const Tensor& fourier_matrix() const { return fourier_; }
  const TensorMap& params() const { return params_; }
  TensorMap& params() { return params_; }

  /// Builds the map on `coords` (n x 2) inside `graph`; returns n x D.
  NodeId build(Graph& graph, NodeId coords, bool trainable = true) const;
  /// Adds parameter and frequency bindings for graphs made by build().
  void bind(Feed& feed) const;

  Tensor forward(const Tensor& coords) const;  // n x 2 -> n x D
  Tensor forward(double x, double y) const;     // 1 x D

  /// FNV-1a over the frequency matrix bits; stable while training.
  std::uint64_t fourier_checksum() const;

  void save(const std::filesystem::path& path) const;
  static CoordinateMlp load(const std::filesystem::path& path);
  std::string encode() const;
  static CoordinateMlp decode(std::string bytes);

  static constexpr std::string_view kFourierName = "mlp.fourier";

  friend bool operator==(const CoordinateMlp&, const CoordinateMlp&) = default;

 private:
  static std::vector<std::pair<std::string, std::pair<int, int>>> layer_shapes(const MlpConfig& c);

  MlpConfig config_;
  Tensor fourier_;
  TensorMap params_;
};

/// Coordinates of all 576 grid nodes, row-major in (i, j), as a 576 x 2 tensor.
Tensor grid_coordinates();

struct GridResidual {
  double l1 = 0.0;  // mean over nodes and components of |M - E|
  double l2 = 0.0;  // same with squared error
};

GridResidual grid_residual(const CoordinateMlp& mlp, const PositionalTable& table);

enum class InterpMethod { Bilinear, Bicubic };

/// Weights over the 576 grid nodes whose combination with the table gives
/// the interpolated vector at (x, y). Out-of-grid taps clamp to the edge.
std::vector<double> interpolation_weights(double x, double y, InterpMethod method);

/// Classical interpolation of the table; exact at grid nodes.
Tensor interpolate_table(const PositionalTable& table, double x, double y, InterpMethod method);

}  // namespace qlip
