// SPDX-License-Identifier: Apache-2.0
#include "qlip/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "qlip/binary_io.hpp"
#include "qlip/rng.hpp"

namespace qlip {

namespace {
constexpr std::uint32_t kEncoderVersion = 1;
constexpr std::string_view kTableParam = "pos.table";
}  // namespace

void EncoderConfig::validate() const {
  if (depth < 1 || width < 1 || heads < 1 || patch_size < 1) {
    throw std::invalid_argument("EncoderConfig: counts must be positive");
  }
  if (width % heads != 0) {
    throw std::invalid_argument("EncoderConfig: width " + std::to_string(width) +
                                " not divisible by " + std::to_string(heads) + " heads");
  }
}

std::string_view to_string(PositionalKind kind) {
  switch (kind) {
    case PositionalKind::TableGrid: return "table_grid";
    case PositionalKind::Mlp: return "mlp";
    case PositionalKind::TableBilinear: return "table_bilinear";
    case PositionalKind::TableBicubic: return "table_bicubic";
    case PositionalKind::Zero: return "zero";
  }
  return "unknown";
}

PositionalKind parse_positional_kind(std::string_view text) {
  for (auto k : {PositionalKind::TableGrid, PositionalKind::Mlp, PositionalKind::TableBilinear,
                 PositionalKind::TableBicubic, PositionalKind::Zero}) {
    if (text == to_string(k)) return k;
  }
  throw std::invalid_argument("unknown positional kind '" + std::string(text) +
                              "' (table_grid, mlp, table_bilinear, table_bicubic, zero)");
}

void PositionalSource::validate(int width) const {
  switch (kind) {
    case PositionalKind::Zero:
      return;
    case PositionalKind::Mlp:
      if (mlp == nullptr) throw std::invalid_argument("mlp positional source without an MLP");
      if (mlp->config().out_dim != width) {
        throw std::invalid_argument("MLP output " + std::to_string(mlp->config().out_dim) +
                                    " does not match encoder width " + std::to_string(width));
      }
      return;
    default:
      if (table == nullptr) throw std::invalid_argument("table positional source without a table");
      if (table->dim() != width) {
        throw std::invalid_argument("table dimension " + std::to_string(table->dim()) +
                                    " does not match encoder width " + std::to_string(width));
      }
  }
}

// ---------------------------------------------------------------------------
// Weights

std::vector<std::pair<std::string, std::pair<int, int>>> EncoderWeights::shapes(const EncoderConfig& c) {
  const int d = c.width, h = EncoderConfig::kMlpRatio * c.width;
  std::vector<std::pair<std::string, std::pair<int, int>>> s;
  s.push_back({"enc.cls", {1, d}});
  s.push_back({"enc.embed.weight", {c.patch_values(), d}});
  s.push_back({"enc.embed.bias", {1, d}});
  for (int l = 0; l < c.depth; ++l) {
    const std::string b = "enc.b" + std::to_string(l) + ".";
    s.push_back({b + "ln1.gain", {1, d}});
    s.push_back({b + "ln1.bias", {1, d}});
    for (const char* m : {"q", "k", "v", "o"}) {
      s.push_back({b + "attn." + m + ".weight", {d, d}});
      s.push_back({b + "attn." + m + ".bias", {1, d}});
    }
    s.push_back({b + "ln2.gain", {1, d}});
    s.push_back({b + "ln2.bias", {1, d}});
    s.push_back({b + "mlp.fc1.weight", {d, h}});
    s.push_back({b + "mlp.fc1.bias", {1, h}});
    s.push_back({b + "mlp.fc2.weight", {h, d}});
    s.push_back({b + "mlp.fc2.bias", {1, d}});
  }
  s.push_back({"enc.post_ln.gain", {1, d}});
  s.push_back({"enc.post_ln.bias", {1, d}});
  return s;
}

EncoderWeights EncoderWeights::init(const EncoderConfig& config) {
  config.validate();
  EncoderWeights w;
  w.config_ = config;
  // One stream per parameter so adding a layer does not reshuffle the others.
  for (const auto& [name, shape] : shapes(config)) {
    Rng rng(derive_seed(config.seed, {fnv1a(name)}));
    Tensor t = Tensor::zeros(shape.first, shape.second);
    const bool is_gain = name.ends_with(".gain");
    const bool is_norm_bias = name.find("ln") != std::string::npos && name.ends_with(".bias");
    const double fan_in_scale = 1.0 / std::sqrt(static_cast<double>(shape.first));
    for (auto& v : t.values()) {
      double x;
      if (is_gain) x = 1.0 + 0.1 * rng.normal();
      else if (is_norm_bias) x = 0.1 * rng.normal();
      else if (name == "enc.cls") x = rng.normal();
      else if (name.ends_with(".bias")) x = 0.02 * rng.normal();
      else x = fan_in_scale * rng.normal();
      v = round_to_f32(x);
    }
    w.params_.emplace(name, std::move(t));
  }
  return w;
}

std::string EncoderWeights::encode() const {
  ByteWriter w;
  w.magic("QENC");
  w.u32(kEncoderVersion);
  w.u32(static_cast<std::uint32_t>(config_.depth));
  w.u32(static_cast<std::uint32_t>(config_.width));
  w.u32(static_cast<std::uint32_t>(config_.heads));
  w.u32(static_cast<std::uint32_t>(config_.patch_size));
  for (const auto& [name, t] : params_) {
    for (double v : t.values()) w.f32(v);
  }
  return w.bytes();
}

EncoderWeights EncoderWeights::decode(std::string bytes) {
  ByteReader r(std::move(bytes), "encoder weights");
  r.expect_magic("QENC");
  if (const auto v = r.u32(); v != kEncoderVersion) {
    throw FormatError("encoder weights: unsupported version " + std::to_string(v));
  }
  EncoderConfig c;
  c.depth = static_cast<int>(r.u32());
  c.width = static_cast<int>(r.u32());
  c.heads = static_cast<int>(r.u32());
  c.patch_size = static_cast<int>(r.u32());
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("encoder weights: ") + e.what());
  }
  TensorMap params;
  std::size_t expected = 0;
  for (const auto& [name, shape] : shapes(c)) {
    params.emplace(name, Tensor::zeros(shape.first, shape.second));
    expected += static_cast<std::size_t>(shape.first) * shape.second;
  }
  if (r.remaining() != expected * 4) {
    throw FormatError("encoder weights: payload holds " + std::to_string(r.remaining()) +
                      " bytes, configuration needs " + std::to_string(expected * 4));
  }
  for (auto& [name, t] : params) {
    for (auto& v : t.values()) v = r.f32();
  }
  EncoderWeights w;
  w.config_ = c;
  w.params_ = std::move(params);
  return w;
}

void EncoderWeights::save(const std::filesystem::path& path) const { write_file_atomic(path, encode()); }

EncoderWeights EncoderWeights::load(const std::filesystem::path& path) { return decode(read_file(path)); }

// ---------------------------------------------------------------------------
// Graph construction

EncoderProgram::EncoderProgram(const EncoderWeights& weights) : weights_(&weights) {
  weights.config().validate();
}

NodeId EncoderProgram::add_constant(std::string name, Tensor value) {
  const auto id = graph_.input(name, value.rows(), value.cols());
  inputs_.insert_or_assign(std::move(name), std::move(value));
  return id;
}

EncoderPass EncoderProgram::add_pass(const PatchLayout& layout, const PositionalSource& pos,
                                     std::string_view prefix, bool trainable_positions) {
  const auto& cfg = weights_->config();
  pos.validate(cfg.width);
  if (layout.geometry.patch_size != cfg.patch_size) {
    throw std::invalid_argument("layout patch size " + std::to_string(layout.geometry.patch_size) +
                                " does not match encoder patch size " + std::to_string(cfg.patch_size));
  }
  const std::size_t n = layout.token_count();
  if (n == 0) throw std::invalid_argument("cannot encode an empty layout");
  const std::size_t pv = static_cast<std::size_t>(cfg.patch_values());
  const std::size_t d = static_cast<std::size_t>(cfg.width);
  const std::string pre(prefix);
  auto& g = graph_;
  auto p = [&](const std::string& name) {
    const auto& t = weights_->params().at(name);
    return g.param(name, t.rows(), t.cols(), false);
  };

  Tensor pixels = Tensor::zeros(n, pv);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& px = layout.entries[i].pixels;
    if (px.size() != pv) throw std::invalid_argument("layout entry " + std::to_string(i) + " has no patch pixels");
    std::copy(px.begin(), px.end(), pixels.data() + i * pv);
  }
  const auto pix = add_constant(pre + "pixels", std::move(pixels));
  NodeId x = g.add_bias(g.matmul(pix, p("enc.embed.weight")), p("enc.embed.bias"));

  EncoderPass pass{};
  if (pos.kind == PositionalKind::Mlp) {
    if (mlp_ != nullptr && mlp_ != pos.mlp) throw std::invalid_argument("passes must share one MLP");
    mlp_ = pos.mlp;
    Tensor coords = Tensor::zeros(n, 2);
    for (std::size_t i = 0; i < n; ++i) {
      // Row coordinate first: M(x, y) is indexed like the table, (row, column).
      coords(i, 0) = layout.entries[i].center_y;
      coords(i, 1) = layout.entries[i].center_x;
    }
    const auto c = add_constant(pre + "coords", std::move(coords));
    pass.positions = pos.mlp->build(g, c, trainable_positions);
    pass.has_positions = true;
  } else if (pos.kind != PositionalKind::Zero) {
    if (table_ != nullptr && table_ != pos.table) throw std::invalid_argument("passes must share one table");
    table_ = pos.table;
    Tensor weights = Tensor::zeros(n, kGridPoints);
    for (std::size_t i = 0; i < n; ++i) {
      const double u = layout.entries[i].center_y, v = layout.entries[i].center_x;
      if (pos.kind == PositionalKind::TableGrid) {
        const auto snap = [](double c) {
          return std::clamp(static_cast<int>(std::lround((c + 1.0) * (kGridSide - 1) / 2.0)), 0, kGridSide - 1);
        };
        weights(i, snap(u) * kGridSide + snap(v)) = 1.0;
      } else {
        const auto method = pos.kind == PositionalKind::TableBilinear ? InterpMethod::Bilinear : InterpMethod::Bicubic;
        const auto w = interpolation_weights(u, v, method);
        std::copy(w.begin(), w.end(), weights.data() + i * kGridPoints);
      }
    }
    const auto wn = add_constant(pre + "pos_weights", std::move(weights));
    const auto table = g.param(std::string(kTableParam), kGridPoints, d, trainable_positions);
    pass.positions = g.matmul(wn, table);
    pass.has_positions = true;
  }
  if (pass.has_positions) x = g.add(x, pass.positions);

  x = g.concat_rows(p("enc.cls"), x);
  const std::size_t rows = n + 1;
  for (int l = 0; l < cfg.depth; ++l) {
    const std::string b = "enc.b" + std::to_string(l) + ".";
    auto linear = [&](NodeId in, const std::string& name) {
      return g.add_bias(g.matmul(in, p(name + ".weight")), p(name + ".bias"));
    };
    const auto h = g.layer_norm(x, p(b + "ln1.gain"), p(b + "ln1.bias"));
    const auto patches = g.slice_rows(h, 1, rows);
    const auto q = linear(h, b + "attn.q");
    const auto k = linear(patches, b + "attn.k");
    const auto v = linear(patches, b + "attn.v");
    const auto a = linear(g.attention(q, k, v, static_cast<std::size_t>(cfg.heads)), b + "attn.o");
    x = g.add(x, a);
    const auto h2 = g.layer_norm(x, p(b + "ln2.gain"), p(b + "ln2.bias"));
    const auto m = linear(g.gelu(linear(h2, b + "mlp.fc1")), b + "mlp.fc2");
    x = g.add(x, m);
  }
  pass.cls = g.layer_norm(g.slice_rows(x, 0, 1), p("enc.post_ln.gain"), p("enc.post_ln.bias"));
  pass.tokens = g.slice_rows(x, 1, rows);
  return pass;
}

Feed EncoderProgram::feed() const {
  Feed f;
  for (const auto& [name, t] : weights_->params()) f[name] = &t;
  for (const auto& [name, t] : inputs_) f[name] = &t;
  if (table_ != nullptr) f[std::string(kTableParam)] = &table_->matrix();
  if (mlp_ != nullptr) mlp_->bind(f);
  return f;
}

// ---------------------------------------------------------------------------

Embeddings encode(const PatchLayout& layout, const PositionalSource& pos, const EncoderWeights& weights) {
  EncoderProgram prog(weights);
  const auto pass = prog.add_pass(layout, pos, "x.");
  const auto ev = forward(prog.graph(), prog.feed(), Retain::ValuesOnly);
  return {ev.value(pass.cls), ev.value(pass.tokens)};
}

double PositionGradient::norm() const {
  double s = 0.0;
  for (double g : gradient) s += g * g;
  return std::sqrt(s);
}

PositionGradient encode_grad_wrt_positions(const PatchLayout& a, const PatchLayout& b,
                                           const PositionalSource& pos, const EncoderWeights& weights) {
  if (!pos.has_parameters()) {
    throw std::invalid_argument("encode_grad_wrt_positions: the zero positional source has no parameters");
  }
  EncoderProgram prog(weights);
  const auto pa = prog.add_pass(a, pos, "a.", true);
  const auto pb = prog.add_pass(b, pos, "b.", true);
  auto& g = prog.graph();
  const auto cs = g.cosine_similarity(pa.cls, pb.cls);
  const auto ev = forward(g, prog.feed());
  const auto grads = backward(g, ev, cs);
  PositionGradient out;
  out.similarity = ev.value(cs)[0];
  for (const auto& [name, t] : grads.params) {
    out.gradient.insert(out.gradient.end(), t.values().begin(), t.values().end());
  }
  return out;
}

double cosine_similarity(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine_similarity: size mismatch");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) throw std::invalid_argument("cosine_similarity: zero vector");
  return ab / std::sqrt(aa * bb);
}

}  // namespace qlip
