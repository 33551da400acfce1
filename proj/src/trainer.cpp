// SPDX-License-Identifier: Apache-2.0
#include "qlip/trainer.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <sstream>

#include "qlip/binary_io.hpp"
#include "qlip/rng.hpp"

namespace qlip {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
  if (epochs < 1 || batch_size < 1 || max_short_edge < encoder.patch_size) {
    throw std::invalid_argument("TrainConfig: epochs and batch_size must be positive and max_short_edge "
                                "at least one patch");
  }
  if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw std::invalid_argument("TrainConfig: gamma must be >= 0");
  if (!(train_merge_prob >= 0.0 && train_merge_prob <= 1.0)) {
    throw std::invalid_argument("TrainConfig: train_merge_prob must lie in [0, 1]");
  }
  if (!(base_lr >= 0.0) || !std::isfinite(base_lr)) throw std::invalid_argument("TrainConfig: base_lr must be >= 0");
  if (checkpoint_every < 0) throw std::invalid_argument("TrainConfig: checkpoint_every must be >= 0");
  encoder.validate();
  mlp.validate();
  if (mlp.out_dim != encoder.width) {
    throw std::invalid_argument("TrainConfig: mlp out_dim must equal encoder width");
  }
}

// ---------------------------------------------------------------------------
// Config parsing

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(std::string_view key, std::string_view v) {
  T out{};
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw std::invalid_argument("config: bad value '" + std::string(v) + "' for " + std::string(key));
  }
  return out;
}

}  // namespace

void apply_train_setting(TrainConfig& c, std::string_view key, std::string_view value) {
  const std::map<std::string_view, std::function<void(std::string_view)>> setters = {
      {"epochs", [&](auto v) { c.epochs = parse_number<int>(key, v); }},
      {"batch_size", [&](auto v) { c.batch_size = parse_number<int>(key, v); }},
      {"base_lr", [&](auto v) { c.base_lr = parse_number<double>(key, v); }},
      {"gamma", [&](auto v) { c.gamma = parse_number<double>(key, v); }},
      {"max_short_edge", [&](auto v) { c.max_short_edge = parse_number<int>(key, v); }},
      {"train_merge_prob", [&](auto v) { c.train_merge_prob = parse_number<double>(key, v); }},
      {"seed", [&](auto v) { c.seed = parse_number<std::uint64_t>(key, v); }},
      {"checkpoint_every", [&](auto v) { c.checkpoint_every = parse_number<int>(key, v); }},
      {"dataset", [&](auto v) { c.dataset = std::string(v); }},
      {"table", [&](auto v) { c.table = std::string(v); }},
      {"table_seed", [&](auto v) { c.table_seed = parse_number<int>(key, v); }},
      {"encoder_weights", [&](auto v) { c.encoder_weights = std::string(v); }},
      {"out_dir", [&](auto v) { c.out_dir = std::string(v); }},
      {"resume", [&](auto v) { c.resume = std::string(v); }},
      {"encoder_depth", [&](auto v) { c.encoder.depth = parse_number<int>(key, v); }},
      {"encoder_width",
       [&](auto v) {
         c.encoder.width = parse_number<int>(key, v);
         c.mlp.out_dim = c.encoder.width;
       }},
      {"encoder_heads", [&](auto v) { c.encoder.heads = parse_number<int>(key, v); }},
      {"encoder_seed", [&](auto v) { c.encoder.seed = parse_number<std::uint64_t>(key, v); }},
      {"mlp_fourier_features", [&](auto v) { c.mlp.fourier_features = parse_number<int>(key, v); }},
      {"mlp_hidden_layers", [&](auto v) { c.mlp.hidden_layers = parse_number<int>(key, v); }},
      {"mlp_hidden_width", [&](auto v) { c.mlp.hidden_width = parse_number<int>(key, v); }},
      {"mlp_fourier_scale", [&](auto v) { c.mlp.fourier_scale = parse_number<double>(key, v); }},
      {"mlp_seed", [&](auto v) { c.mlp.init_seed = parse_number<std::uint64_t>(key, v); }},
  };
  auto it = setters.find(key);
  if (it == setters.end()) throw std::invalid_argument("config: unknown key '" + std::string(key) + "'");
  it->second(value);
}

TrainConfig parse_train_config(std::string_view text, TrainConfig base) {
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string_view s = line;
    if (auto hash = s.find('#'); hash != std::string_view::npos) s = s.substr(0, hash);
    s = trim(s);
    if (s.empty()) continue;
    const auto eq = s.find('=');
    if (eq == std::string_view::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    }
    apply_train_setting(base, trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
  }
  return base;
}

// ---------------------------------------------------------------------------
// Reports

std::string loss_csv_header() { return "step,l_cls,r_l1,r_l2,grad_norm_positions,lr,total\n"; }

std::string loss_csv_row(const LossReport& r) {
  return fmt::format("{},{},{},{},{},{},{}\n", r.step, r.l_cls, r.r_l1, r.r_l2, r.grad_norm_positions, r.lr,
                     r.total);
}

// ---------------------------------------------------------------------------
// Losses

namespace {

struct PreparedSample {
  CroppedImage native;
  BlockCover cover;
  Tensor reference_cls;
};

CroppedImage native_rendering(const Image& img, int max_short_edge, const PipelineOptions& opts) {
  const int short_edge = std::min(img.height, img.width);
  if (short_edge > max_short_edge) return prepare_native(img, max_short_edge, opts);
  return crop_to_patch_multiple(img, opts.patch_size, opts.block_size);
}

Tensor reference_cls(const Image& img, const PositionalTable& table, const EncoderWeights& weights,
                     const PipelineOptions& opts) {
  const auto ref = prepare_reference(img, opts);
  const auto layout = uniform_grid_layout(ref.image, ref.geometry);
  return encode(layout, PositionalSource::from_table(PositionalKind::TableGrid, table), weights).cls;
}

struct ClsTerm {
  double loss = 0.0;
  TensorMap grads;
  double position_grad_sq = 0.0;
};

ClsTerm cls_term(const PatchLayout& layout, const Tensor& ref_cls, const CoordinateMlp& mlp,
                 const EncoderWeights& weights, bool with_grads) {
  EncoderProgram prog(weights);
  const auto pass = prog.add_pass(layout, PositionalSource::from_mlp(mlp), "p.", true);
  auto& g = prog.graph();
  const auto target = prog.add_constant("ref_cls", ref_cls);
  const auto loss = g.l2_norm(g.sub(pass.cls, target));
  const auto ev = forward(g, prog.feed(), with_grads ? Retain::All : Retain::ValuesOnly);
  ClsTerm out;
  out.loss = ev.value(loss)[0];
  if (!with_grads) return out;
  const NodeId watch[] = {pass.positions};
  auto grads = backward(g, ev, loss, watch);
  for (double v : grads.at(pass.positions).values()) out.position_grad_sq += v * v;
  out.grads = std::move(grads.params);
  return out;
}

}  // namespace

double cls_loss(const PatchLayout& layout, const Tensor& ref_cls, const CoordinateMlp& mlp,
                const EncoderWeights& weights) {
  return cls_term(layout, ref_cls, mlp, weights, false).loss;
}

double cls_loss(const Image& img, const CoordinateMlp& mlp, const PositionalTable& table,
                const EncoderWeights& weights, int max_short_edge, double merge_prob, std::uint64_t seed,
                const PipelineOptions& opts) {
  const auto native = native_rendering(img, max_short_edge, opts);
  const auto cover = maximal_block_cover(native.geometry);
  const auto layout = patchify(native.image, native.geometry, cover, SelectionPolicy::random(merge_prob, seed));
  return cls_loss(layout, reference_cls(img, table, weights, opts), mlp, weights);
}

// ---------------------------------------------------------------------------
// Residual

namespace {

struct ResidualTerm {
  double l1 = 0.0;
  double l2 = 0.0;
  TensorMap grads;
};

ResidualTerm residual_term(const CoordinateMlp& mlp, const PositionalTable& table, const Tensor& coords) {
  Graph g;
  const auto c = g.input("grid.coords", coords.rows(), 2);
  const auto target = g.input("grid.table", kGridPoints, static_cast<std::size_t>(table.dim()));
  const auto diff = g.sub(mlp.build(g, c, true), target);
  const auto l1 = g.mean_abs(diff);
  const auto l2 = g.mean_square(diff);
  Feed feed;
  mlp.bind(feed);
  feed["grid.coords"] = &coords;
  feed["grid.table"] = &table.matrix();
  const auto ev = forward(g, feed);
  ResidualTerm out;
  out.l1 = ev.value(l1)[0];
  out.l2 = ev.value(l2)[0];
  out.grads = backward(g, ev, l1).params;
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

constexpr std::uint32_t kStateVersion = 1;

void write_outputs(const fs::path& dir, const TrainState& state, const std::vector<LossReport>& reports) {
  if (dir.empty()) return;
  fs::create_directories(dir);
  write_file_atomic(dir / "state.qtrn", state.encode());
  write_file_atomic(dir / "model.qmlp", state.mlp.encode());
  std::string csv = loss_csv_header();
  for (const auto& r : reports) csv += loss_csv_row(r);
  write_file_atomic(dir / "loss.csv", csv);
}

}  // namespace

std::string TrainState::encode() const {
  const auto& c = mlp.config();
  ByteWriter w;
  w.magic("QTRN");
  w.u32(kStateVersion);
  w.u32(static_cast<std::uint32_t>(c.fourier_features));
  w.u32(static_cast<std::uint32_t>(c.hidden_layers));
  w.u32(static_cast<std::uint32_t>(c.hidden_width));
  w.u32(static_cast<std::uint32_t>(c.out_dim));
  w.f64(c.fourier_scale);
  w.u64(c.init_seed);
  w.u64(adam.step_count());
  for (double v : mlp.fourier_matrix().values()) w.f64(v);
  for (const auto& [name, t] : mlp.params()) {
    for (double v : t.values()) w.f64(v);
  }
  // Moments exist only after the first step; a flag keeps step-0 states small.
  const bool has_moments = !adam.first_moments().empty();
  w.u32(has_moments ? 1 : 0);
  if (has_moments) {
    for (const auto* moments : {&adam.first_moments(), &adam.second_moments()}) {
      for (const auto& [name, t] : *moments) {
        for (double v : t.values()) w.f64(v);
      }
    }
  }
  return w.bytes();
}

TrainState TrainState::decode(std::string bytes, const CosineSchedule& schedule, const AdamConfig& adam_cfg) {
  ByteReader r(std::move(bytes), "training state");
  r.expect_magic("QTRN");
  if (const auto v = r.u32(); v != kStateVersion) {
    throw FormatError("training state: unsupported version " + std::to_string(v));
  }
  MlpConfig c;
  c.fourier_features = static_cast<int>(r.u32());
  c.hidden_layers = static_cast<int>(r.u32());
  c.hidden_width = static_cast<int>(r.u32());
  c.out_dim = static_cast<int>(r.u32());
  c.fourier_scale = r.f64();
  c.init_seed = r.u64();
  const auto step = r.u64();
  TrainState s;
  s.mlp = CoordinateMlp::init(c);  // shapes only; every value is overwritten below
  auto& fourier = const_cast<Tensor&>(s.mlp.fourier_matrix());
  for (auto& v : fourier.values()) v = r.f64();
  for (auto& [name, t] : s.mlp.params()) {
    for (auto& v : t.values()) v = r.f64();
  }
  TensorMap m, vv;
  if (r.u32() == 1) {
    for (auto* moments : {&m, &vv}) {
      for (const auto& [name, t] : s.mlp.params()) {
        Tensor x(t.shape());
        for (auto& v : x.values()) v = r.f64();
        moments->emplace(name, std::move(x));
      }
    }
  }
  r.expect_end();
  s.adam = AdamState(adam_cfg, schedule);
  s.adam.restore(step, std::move(m), std::move(vv));
  return s;
}

// ---------------------------------------------------------------------------
// Training loops

TrainResult train(const TrainConfig& cfg, const std::vector<Image>& images, const EncoderWeights& weights,
                  const PositionalTable& table, const TrainHooks& hooks) {
  cfg.validate();
  if (images.empty()) throw std::invalid_argument("train: dataset is empty");
  if (weights.config().width != cfg.mlp.out_dim || table.dim() != cfg.mlp.out_dim) {
    throw std::invalid_argument("train: encoder width, table dimension and MLP output must agree");
  }
  PipelineOptions opts;
  opts.patch_size = weights.config().patch_size;

  const std::size_t n = images.size();
  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t steps_per_epoch = (n + bs - 1) / bs;
  const std::size_t total_steps = steps_per_epoch * static_cast<std::size_t>(cfg.epochs);
  const CosineSchedule schedule{cfg.base_lr, total_steps};

  TrainState state;
  if (!cfg.resume.empty()) {
    state = TrainState::decode(read_file(cfg.resume), schedule, AdamConfig{});
    if (!(state.mlp.config() == cfg.mlp)) throw std::invalid_argument("train: resume state has a different MLP config");
  } else {
    state.mlp = CoordinateMlp::init(cfg.mlp);
    state.adam = AdamState(AdamConfig{}, schedule);
  }

  // Image-dependent quantities that do not involve the MLP are computed once.
  std::vector<PreparedSample> samples(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto native = native_rendering(images[i], cfg.max_short_edge, opts);
    auto cover = maximal_block_cover(native.geometry);
    samples[i] = {std::move(native), std::move(cover), reference_cls(images[i], table, weights, opts)};
  }
  const Tensor coords = grid_coordinates();

  TrainResult result;
  TrainState last_good = state;
  const std::size_t end = hooks.max_steps ? std::min(total_steps, hooks.max_steps) : total_steps;
  for (std::size_t step = state.adam.step_count(); step < end; ++step) {
    const std::size_t epoch = step / steps_per_epoch, b = step % steps_per_epoch;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle(derive_seed(cfg.seed, {0x5348, epoch}));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);
    const std::size_t first = b * bs, last = std::min(n, first + bs);
    const std::size_t batch = last - first;

    std::vector<ClsTerm> terms(batch);
    std::vector<std::string> errors(batch);
#pragma omp parallel for schedule(dynamic)
    for (long long k = 0; k < static_cast<long long>(batch); ++k) {
      const std::size_t idx = order[first + k];
      try {
        const auto policy = SelectionPolicy::random(cfg.train_merge_prob, derive_seed(cfg.seed, {0x4d52, epoch, idx}));
        const auto& s = samples[idx];
        const auto layout = patchify(s.native.image, s.native.geometry, s.cover, policy);
        terms[k] = cls_term(layout, s.reference_cls, state.mlp, weights, true);
      } catch (const std::exception& e) {
        errors[k] = e.what();
      }
    }
    for (const auto& e : errors) {
      if (!e.empty()) throw std::runtime_error("train: " + e);
    }

    const double inv_batch = 1.0 / static_cast<double>(batch);
    TensorMap grads;
    double l_cls = 0.0, pos_sq = 0.0;
    for (const auto& t : terms) {
      l_cls += t.loss;
      pos_sq += t.position_grad_sq;
      for (const auto& [name, g] : t.grads) {
        auto [it, fresh] = grads.try_emplace(name, Tensor(g.shape()));
        for (std::size_t k = 0; k < g.size(); ++k) it->second[k] += g[k];
      }
    }
    l_cls *= inv_batch;
    for (auto& [name, g] : grads) {
      for (auto& v : g.values()) v *= inv_batch;
    }
    const auto residual = residual_term(state.mlp, table, coords);
    for (const auto& [name, g] : residual.grads) {
      auto& acc = grads.at(name);
      for (std::size_t k = 0; k < g.size(); ++k) acc[k] += cfg.gamma * g[k];
    }

    LossReport rep;
    rep.step = step;
    rep.l_cls = l_cls;
    rep.r_l1 = residual.l1;
    rep.r_l2 = residual.l2;
    rep.grad_norm_positions = std::sqrt(pos_sq) * inv_batch;
    rep.lr = state.adam.next_lr();
    rep.total = rep.l_cls + cfg.gamma * rep.r_l1;
    if (!std::isfinite(rep.total)) {
      write_outputs(cfg.out_dir, last_good, result.reports);
      throw TrainingAborted(step, "non-finite loss");
    }
    try {
      state.adam.step(state.mlp.params(), grads);
    } catch (const NonFiniteGradient& e) {
      write_outputs(cfg.out_dir, last_good, result.reports);
      throw TrainingAborted(step, e.what());
    }
    result.reports.push_back(rep);
    if (hooks.on_report) hooks.on_report(rep);

    if (cfg.checkpoint_every > 0 && (step + 1) % static_cast<std::size_t>(cfg.checkpoint_every) == 0) {
      write_outputs(cfg.out_dir, state, result.reports);
      last_good = state;
    }
  }
  write_outputs(cfg.out_dir, state, result.reports);
  result.mlp = state.mlp;
  return result;
}

TrainResult train(const TrainConfig& cfg, const TrainHooks& hooks) {
  cfg.validate();
  std::vector<Image> images;
  ImageDirectory dir(cfg.dataset);
  while (auto img = dir.next()) images.push_back(std::move(img->image));
  if (images.empty()) throw std::runtime_error("train: no decodable images in " + cfg.dataset.string());
  const auto table = cfg.table.empty()
                         ? PositionalTable::synthetic_smooth(cfg.mlp.out_dim, static_cast<std::uint64_t>(cfg.table_seed))
                         : PositionalTable::load(cfg.table);
  const auto weights = cfg.encoder_weights.empty() ? EncoderWeights::init(cfg.encoder)
                                                   : EncoderWeights::load(cfg.encoder_weights);
  return train(cfg, images, weights, table, hooks);
}

TrainResult fit_residual_only(CoordinateMlp mlp, const PositionalTable& table, const ResidualFitConfig& cfg) {
  if (mlp.config().out_dim != table.dim()) {
    throw std::invalid_argument("fit_residual_only: MLP output does not match table dimension");
  }
  AdamState adam(AdamConfig{}, CosineSchedule{cfg.base_lr, cfg.steps});
  const Tensor coords = grid_coordinates();
  TrainResult result;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const auto term = residual_term(mlp, table, coords);
    LossReport rep;
    rep.step = step;
    rep.r_l1 = term.l1;
    rep.r_l2 = term.l2;
    rep.lr = adam.next_lr();
    rep.total = rep.l_cls + 1.0 * rep.r_l1;
    if (!std::isfinite(rep.total)) throw TrainingAborted(step, "non-finite residual");
    adam.step(mlp.params(), term.grads);
    result.reports.push_back(rep);
  }
  result.mlp = std::move(mlp);
  return result;
}

}  // namespace qlip
