// SPDX-License-Identifier: Apache-2.0
#include "qlip/posenc.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "qlip/binary_io.hpp"
#include "qlip/rng.hpp"

namespace qlip {

GridPoint grid_coordinate(int i, int j) {
  if (i < 0 || i >= kGridSide || j < 0 || j >= kGridSide) {
    throw std::out_of_range("grid_coordinate: index (" + std::to_string(i) + ", " +
                            std::to_string(j) + ") outside 0..23");
  }
  return {-1.0 + 2.0 * i / (kGridSide - 1), -1.0 + 2.0 * j / (kGridSide - 1)};
}

Tensor grid_coordinates() {
  Tensor c = Tensor::zeros(kGridPoints, 2);
  for (int i = 0; i < kGridSide; ++i) {
    for (int j = 0; j < kGridSide; ++j) {
      const auto p = grid_coordinate(i, j);
      c(i * kGridSide + j, 0) = p.x;
      c(i * kGridSide + j, 1) = p.y;
    }
  }
  return c;
}

// ---------------------------------------------------------------------------
// Table

namespace {
constexpr std::uint32_t kTableVersion = 1;
constexpr std::uint32_t kMlpVersion = 1;
}  // namespace

PositionalTable::PositionalTable(Tensor values) : values_(std::move(values)) {
  if (values_.rows() != kGridPoints || values_.cols() < 1) {
    throw std::invalid_argument("PositionalTable: expected 576 x D values, got " +
                                shape_string(values_.shape()));
  }
  if (!values_.all_finite()) throw std::invalid_argument("PositionalTable: non-finite value");
}

PositionalTable PositionalTable::zeros(int dim) { return PositionalTable(Tensor::zeros(kGridPoints, dim)); }

PositionalTable PositionalTable::synthetic_smooth(int dim, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t = Tensor::zeros(kGridPoints, dim);
  for (int d = 0; d < dim; ++d) {
    // Two low-frequency plane waves plus a bilinear term per component.
    const double f1 = rng.uniform(0.2, 1.2), f2 = rng.uniform(0.2, 1.2);
    const double g1 = rng.uniform(-1.0, 1.0), g2 = rng.uniform(-1.0, 1.0);
    const double p1 = rng.uniform(0.0, 2.0 * std::numbers::pi), p2 = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double a1 = rng.uniform(0.2, 1.0), a2 = rng.uniform(0.1, 0.5), c = rng.uniform(-0.2, 0.2);
    for (int i = 0; i < kGridSide; ++i) {
      for (int j = 0; j < kGridSide; ++j) {
        const auto p = grid_coordinate(i, j);
        const double v = a1 * std::sin(std::numbers::pi * (f1 * p.x + g1 * p.y) + p1) +
                         a2 * std::cos(std::numbers::pi * (f2 * p.y - g2 * p.x) + p2) + c * p.x * p.y;
        t(i * kGridSide + j, d) = round_to_f32(v);
      }
    }
  }
  return PositionalTable(std::move(t));
}

std::string PositionalTable::encode() const {
  ByteWriter w;
  w.magic("QEMB");
  w.u32(kTableVersion);
  w.u32(kGridSide);
  w.u32(kGridSide);
  w.u32(static_cast<std::uint32_t>(dim()));
  for (double v : values_.values()) w.f32(v);
  return w.bytes();
}

PositionalTable PositionalTable::decode(std::string bytes) {
  ByteReader r(std::move(bytes), "positional table");
  r.expect_magic("QEMB");
  if (const auto v = r.u32(); v != kTableVersion) {
    throw FormatError("positional table: unsupported version " + std::to_string(v));
  }
  const auto rows = r.u32(), cols = r.u32(), dim = r.u32();
  if (rows != kGridSide || cols != kGridSide) {
    throw FormatError("positional table: grid " + std::to_string(rows) + "x" + std::to_string(cols) +
                      " is not 24x24");
  }
  if (dim == 0) throw FormatError("positional table: zero dimension");
  const std::size_t n = static_cast<std::size_t>(kGridPoints) * dim;
  if (r.remaining() != n * 4) {
    throw FormatError("positional table: payload holds " + std::to_string(r.remaining()) +
                      " bytes, header promises " + std::to_string(n * 4));
  }
  Tensor t = Tensor::zeros(kGridPoints, dim);
  for (auto& v : t.values()) v = r.f32();
  return PositionalTable(std::move(t));
}

void PositionalTable::save(const std::filesystem::path& path) const { write_file_atomic(path, encode()); }

PositionalTable PositionalTable::load(const std::filesystem::path& path) { return decode(read_file(path)); }

// ---------------------------------------------------------------------------
// MLP

void MlpConfig::validate() const {
  if (fourier_features < 1 || hidden_layers < 1 || hidden_width < 1 || out_dim < 1) {
    throw std::invalid_argument("MlpConfig: counts must be positive");
  }
  if (!(fourier_scale > 0.0) || !std::isfinite(fourier_scale)) {
    throw std::invalid_argument("MlpConfig: fourier_scale must be positive");
  }
}

std::vector<std::pair<std::string, std::pair<int, int>>> CoordinateMlp::layer_shapes(const MlpConfig& c) {
  std::vector<std::pair<std::string, std::pair<int, int>>> shapes;
  int fan_in = 2 * c.fourier_features;
  for (int k = 0; k < c.hidden_layers; ++k) {
    shapes.push_back({"mlp.h" + std::to_string(k), {fan_in, c.hidden_width}});
    fan_in = c.hidden_width;
  }
  shapes.push_back({"mlp.out", {fan_in, c.out_dim}});
  return shapes;
}

CoordinateMlp CoordinateMlp::init(const MlpConfig& config) {
  config.validate();
  CoordinateMlp m;
  m.config_ = config;
  Rng rng(derive_seed(config.init_seed, {0x4d4c50}));
  m.fourier_ = Tensor::zeros(2, config.fourier_features);
  for (auto& v : m.fourier_.values()) v = round_to_f32(config.fourier_scale * rng.normal());
  for (const auto& [name, shape] : layer_shapes(config)) {
    const auto [fan_in, fan_out] = shape;
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Tensor w = Tensor::zeros(fan_in, fan_out);
    for (auto& v : w.values()) v = round_to_f32(rng.uniform(-bound, bound));
    Tensor b = Tensor::zeros(1, fan_out);
    for (auto& v : b.values()) v = round_to_f32(rng.uniform(-bound, bound));
    m.params_.emplace(name + ".weight", std::move(w));
    m.params_.emplace(name + ".bias", std::move(b));
  }
  return m;
}

NodeId CoordinateMlp::build(Graph& g, NodeId coords, bool trainable) const {
  const auto freqs = g.param(std::string(kFourierName), 2, config_.fourier_features, false);
  NodeId h = g.fourier(coords, freqs);
  const auto shapes = layer_shapes(config_);
  for (std::size_t k = 0; k < shapes.size(); ++k) {
    const auto& [name, shape] = shapes[k];
    const auto w = g.param(name + ".weight", shape.first, shape.second, trainable);
    const auto b = g.param(name + ".bias", 1, shape.second, trainable);
    h = g.add_bias(g.matmul(h, w), b);
    if (k + 1 < shapes.size()) h = g.gelu(h);
  }
  return h;
}

void CoordinateMlp::bind(Feed& feed) const {
  feed[std::string(kFourierName)] = &fourier_;
  for (const auto& [name, t] : params_) feed[name] = &t;
}

Tensor CoordinateMlp::forward(const Tensor& coords) const {
  Graph g;
  const auto in = g.input("coords", coords.rows(), 2);
  const auto out = build(g, in, false);
  Feed feed;
  bind(feed);
  feed["coords"] = &coords;
  return qlip::forward(g, feed, Retain::ValuesOnly).value(out);
}

Tensor CoordinateMlp::forward(double x, double y) const { return forward(Tensor::row({x, y})); }

std::uint64_t CoordinateMlp::fourier_checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (double v : fourier_.values()) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) {
      h ^= (bits >> (8 * i)) & 0xff;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

std::string CoordinateMlp::encode() const {
  ByteWriter w;
  w.magic("QMLP");
  w.u32(kMlpVersion);
  w.u32(static_cast<std::uint32_t>(config_.fourier_features));
  w.u32(static_cast<std::uint32_t>(config_.hidden_layers));
  w.u32(static_cast<std::uint32_t>(config_.hidden_width));
  w.u32(static_cast<std::uint32_t>(config_.out_dim));
  w.f32(config_.fourier_scale);
  w.u64(config_.init_seed);
  for (double v : fourier_.values()) w.f32(v);
  for (const auto& [name, t] : params_) {
    for (double v : t.values()) w.f32(v);
  }
  return w.bytes();
}

CoordinateMlp CoordinateMlp::decode(std::string bytes) {
  ByteReader r(std::move(bytes), "MLP checkpoint");
  r.expect_magic("QMLP");
  if (const auto v = r.u32(); v != kMlpVersion) {
    throw FormatError("MLP checkpoint: unsupported version " + std::to_string(v));
  }
  MlpConfig c;
  c.fourier_features = static_cast<int>(r.u32());
  c.hidden_layers = static_cast<int>(r.u32());
  c.hidden_width = static_cast<int>(r.u32());
  c.out_dim = static_cast<int>(r.u32());
  c.fourier_scale = r.f32();
  c.init_seed = r.u64();
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("MLP checkpoint: ") + e.what());
  }
  CoordinateMlp m;
  m.config_ = c;
  m.fourier_ = Tensor::zeros(2, c.fourier_features);
  for (auto& v : m.fourier_.values()) v = r.f32();
  // std::map iteration gives the same lexicographic order encode() used.
  TensorMap params;
  for (const auto& [name, shape] : layer_shapes(c)) {
    params.emplace(name + ".weight", Tensor::zeros(shape.first, shape.second));
    params.emplace(name + ".bias", Tensor::zeros(1, shape.second));
  }
  for (auto& [name, t] : params) {
    for (auto& v : t.values()) v = r.f32();
  }
  r.expect_end();
  m.params_ = std::move(params);
  return m;
}

void CoordinateMlp::save(const std::filesystem::path& path) const { write_file_atomic(path, encode()); }

CoordinateMlp CoordinateMlp::load(const std::filesystem::path& path) { return decode(read_file(path)); }

// ---------------------------------------------------------------------------
// Residual and classical interpolation

GridResidual grid_residual(const CoordinateMlp& mlp, const PositionalTable& table) {
  if (mlp.config().out_dim != table.dim()) {
    throw std::invalid_argument("grid_residual: MLP output " + std::to_string(mlp.config().out_dim) +
                                " vs table dimension " + std::to_string(table.dim()));
  }
  const Tensor out = mlp.forward(grid_coordinates());
  GridResidual r;
  const auto& e = table.matrix();
  for (std::size_t k = 0; k < out.size(); ++k) {
    const double d = out[k] - e[k];
    r.l1 += std::abs(d);
    r.l2 += d * d;
  }
  r.l1 /= static_cast<double>(out.size());
  r.l2 /= static_cast<double>(out.size());
  return r;
}

namespace {

// Fractional grid index of a coordinate.
double grid_position(double coord) { return (coord + 1.0) * (kGridSide - 1) / 2.0; }

struct AxisTaps {
  int index[4];
  double weight[4];
  int count;
};

AxisTaps axis_taps(double coord, InterpMethod method) {
  const double u = grid_position(coord);
  const int base = std::clamp(static_cast<int>(std::floor(u)), 0, kGridSide - 2);
  const double t = u - base;
  AxisTaps a{};
  auto clampi = [](int i) { return std::clamp(i, 0, kGridSide - 1); };
  if (method == InterpMethod::Bilinear) {
    a.count = 2;
    a.index[0] = base;
    a.index[1] = base + 1;
    a.weight[0] = 1.0 - t;
    a.weight[1] = t;
  } else {
    const double t2 = t * t, t3 = t2 * t;
    a.count = 4;
    a.index[0] = clampi(base - 1);
    a.index[1] = base;
    a.index[2] = base + 1;
    a.index[3] = clampi(base + 2);
    a.weight[0] = 0.5 * (-t3 + 2.0 * t2 - t);
    a.weight[1] = 0.5 * (3.0 * t3 - 5.0 * t2 + 2.0);
    a.weight[2] = 0.5 * (-3.0 * t3 + 4.0 * t2 + t);
    a.weight[3] = 0.5 * (t3 - t2);
  }
  return a;
}

}  // namespace

std::vector<double> interpolation_weights(double x, double y, InterpMethod method) {
  const auto rows = axis_taps(x, method);
  const auto cols = axis_taps(y, method);
  std::vector<double> w(kGridPoints, 0.0);
  for (int a = 0; a < rows.count; ++a)
    for (int b = 0; b < cols.count; ++b) w[rows.index[a] * kGridSide + cols.index[b]] += rows.weight[a] * cols.weight[b];
  return w;
}

Tensor interpolate_table(const PositionalTable& table, double x, double y, InterpMethod method) {
  const auto w = interpolation_weights(x, y, method);
  const int dim = table.dim();
  Tensor out = Tensor::zeros(1, dim);
  for (int n = 0; n < kGridPoints; ++n) {
    if (w[n] == 0.0) continue;
    for (int d = 0; d < dim; ++d) out[d] += w[n] * table.matrix()(n, d);
  }
  return out;
}

}  // namespace qlip
