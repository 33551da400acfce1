// SPDX-License-Identifier: Apache-2.0
// End-to-end acceptance checks. One PASS/FAIL line per criterion; exit code
// is the number of failures.
#include <fmt/format.h>

#include <chrono>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>

#include "qlip/bias_metrics.hpp"
#include "qlip/binary_io.hpp"
#include "qlip/cli.hpp"
#include "qlip/trainer.hpp"
#include "support.hpp"

using namespace qlip;
using qlip::test::random_image;
using qlip::test::random_tensor;
using qlip::test::TempDir;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

class Timer {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count(); }

 private:
  std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

TensorMap materialize(const Feed& feed) {
  TensorMap out;
  for (const auto& [name, t] : feed) out.emplace(name, *t);
  return out;
}

SelectionPolicy any_policy(Rng& rng) {
  switch (rng.below(3)) {
    case 0: return SelectionPolicy::derivative(rng.uniform(-50, 300));
    case 1: return SelectionPolicy::random(rng.uniform(), rng.next());
    default: return SelectionPolicy::never_merge();
  }
}

// Every block of the cover is tiled by the leaves that fall inside it, and
// the whole patch grid is covered exactly once.
bool blocks_tiled(const PatchLayout& layout, const BlockCover& cover) {
  const auto& g = layout.geometry;
  std::vector<int> hits(static_cast<std::size_t>(g.rows * g.cols), 0);
  const int bs = cover.block_size;
  for (const auto& e : layout.entries) {
    if (!e.border) {
      const int br = (e.top - cover.origin_row) / bs, bc = (e.left - cover.origin_col) / bs;
      const int r0 = cover.origin_row + br * bs, c0 = cover.origin_col + bc * bs;
      if (e.top < r0 || e.left < c0 || e.top + e.size > r0 + bs || e.left + e.size > c0 + bs) return false;
    } else if (e.size != 1) {
      return false;
    }
    for (int r = e.top; r < e.top + e.size; ++r) {
      for (int c = e.left; c < e.left + e.size; ++c) {
        if (r < 0 || c < 0 || r >= g.rows || c >= g.cols) return false;
        ++hits[static_cast<std::size_t>(r * g.cols + c)];
      }
    }
  }
  return std::all_of(hits.begin(), hits.end(), [](int h) { return h == 1; });
}

Outcome tiling() {
  Timer timer;
  Rng rng(101);
  int bad = 0;
  for (int t = 0; t < 1000; ++t) {
    const int h = 14 * (2 + static_cast<int>(rng.below(34))), w = 14 * (2 + static_cast<int>(rng.below(34)));
    const Image img = random_image(rng, h, w);
    const PatchGeometry g{14, h / 14, w / 14, 1 << (1 + rng.below(4))};
    const auto cover = maximal_block_cover(g);
    if (!blocks_tiled(patchify(img, g, cover, any_policy(rng)), cover)) ++bad;
  }
  const double s = timer.seconds();
  return {bad == 0 && s < 60.0, fmt::format("{} of 1000 triples mis-tiled, {:.1f} s", bad, s)};
}

Outcome ugp_equivalence() {
  Rng rng(102);
  const auto crop = crop_to_patch_multiple(random_image(rng, 336, 336));
  const auto q = patchify(crop.image, crop.geometry, maximal_block_cover(crop.geometry), SelectionPolicy::never_merge());
  if (q.token_count() != 576) return {false, fmt::format("{} tokens", q.token_count())};
  int bad = 0;
  for (int i = 0; i < 576; ++i) {
    const auto& e = q.entries[static_cast<std::size_t>(i)];
    if (e.top != i / 24 || e.left != i % 24 || e.size != 1) ++bad;
    for (int y = 0; y < 14; ++y) {
      for (int x = 0; x < 14; ++x) {
        for (int c = 0; c < 3; ++c) {
          if (e.pixels[static_cast<std::size_t>((y * 14 + x) * 3 + c)] != crop.image.at(c, e.top * 14 + y, e.left * 14 + x)) ++bad;
        }
      }
    }
  }
  return {bad == 0, fmt::format("576 tokens, {} mismatches", bad)};
}

Outcome seven_leaves() {
  std::string counts;
  bool ok = true;
  for (int q = 0; q < 4; ++q) {
    Image block = Image::filled(56, 56, 0.4);
    const int y0 = (q / 2) * 28, x0 = (q % 2) * 28;
    for (int y = 0; y < 28; ++y) {
      for (int x = 0; x < 28; ++x) {
        for (int c = 0; c < 3; ++c) block.at(c, y0 + y, x0 + x) = ((x + y) % 2) ? 0.95 : 0.05;
      }
    }
    const auto n = build_quadtree(block, 14, SelectionPolicy::derivative(0.5)).leaf_count();
    ok = ok && n == 7;
    counts += fmt::format("{}{}", q ? "," : "", n);
  }
  return {ok, "leaf counts per busy quadrant: " + counts};
}

Outcome alpha_monotone() {
  Rng rng(104);
  const std::vector<double> ladder{0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 30.0, 100.0};
  int violations = 0;
  for (int t = 0; t < 100; ++t) {
    const int h = 14 * (16 + static_cast<int>(rng.below(20))), w = 14 * (16 + static_cast<int>(rng.below(20)));
    // Mix of smooth ramps and noise so that every rung of the ladder matters.
    Image img(h, w);
    const double noise = rng.uniform(0.0, 0.2), gx = rng.uniform(-0.002, 0.002), gy = rng.uniform(-0.002, 0.002);
    for (int c = 0; c < 3; ++c) {
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) img.at(c, y, x) = std::clamp(0.5 + gx * x + gy * y + noise * (rng.uniform() - 0.5), 0.0, 1.0);
      }
    }
    const auto crop = crop_to_patch_multiple(img);
    const auto cover = maximal_block_cover(crop.geometry);
    std::size_t prev = std::numeric_limits<std::size_t>::max();
    for (double a : ladder) {
      const auto n = patchify(crop.image, crop.geometry, cover, SelectionPolicy::derivative(a)).token_count();
      if (n > prev) ++violations;
      prev = n;
    }
  }
  return {violations == 0, fmt::format("{} increases over 100 images x 10 alphas", violations)};
}

Outcome covers() {
  const auto a = maximal_block_cover(crop_to_patch_multiple(Image::filled(476, 518, 0.0)).geometry);
  const auto b = maximal_block_cover(crop_to_patch_multiple(Image::filled(672, 896, 0.0)).geometry);
  const bool ok = a.grid_rows == 2 && a.grid_cols == 2 && b.grid_rows == 3 && b.grid_cols == 4;
  return {ok, fmt::format("476x518 -> {}x{}, 672x896 -> {}x{}", a.grid_rows, a.grid_cols, b.grid_rows, b.grid_cols)};
}

EncoderConfig d8_encoder(std::uint64_t seed) {
  EncoderConfig c;
  c.depth = 1;
  c.width = 8;
  c.heads = 2;
  c.seed = seed;
  return c;
}

MlpConfig d8_mlp(std::uint64_t seed) {
  MlpConfig c;
  c.fourier_features = 6;
  c.hidden_layers = 2;
  c.hidden_width = 12;
  c.out_dim = 8;
  c.init_seed = seed;
  return c;
}

PatchLayout small_layout(Rng& rng, int h, int w, const SelectionPolicy& policy) {
  const auto crop = crop_to_patch_multiple(random_image(rng, h, w), 14, 2);
  return patchify(crop.image, crop.geometry, maximal_block_cover(crop.geometry), policy);
}

Outcome gradient_integrity() {
  Timer timer;
  double mlp_worst = 0, enc_worst = 0, pos_worst = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed + 600);
    const auto mlp = CoordinateMlp::init(d8_mlp(seed));
    const auto weights = EncoderWeights::init(d8_encoder(seed));
    {
      Graph g;
      const auto c = g.input("coords", 3, 2, true);
      const auto proj = g.param("proj", 8, 1, false);
      const auto loss = g.sum(g.matmul(mlp.build(g, c, true), proj));
      Feed f;
      mlp.bind(f);
      TensorMap feed = materialize(f);
      feed["coords"] = random_tensor(rng, 3, 2);
      feed["proj"] = random_tensor(rng, 8, 1);
      std::vector<std::string> names{"coords"};
      for (const auto& [name, t] : mlp.params()) names.push_back(name);
      mlp_worst = std::max(mlp_worst, test::check_gradients(g, feed, loss, names, 24).max_rel);
    }
    {
      const auto layout = small_layout(rng, 56, 56, SelectionPolicy::random(0.3, seed));
      EncoderProgram prog(weights);
      const auto pass = prog.add_pass(layout, PositionalSource::from_mlp(mlp), "p.", true);
      auto& g = prog.graph();
      const auto target = prog.add_constant("target", random_tensor(rng, 1, 8));
      const auto loss = g.l2_norm(g.sub(pass.cls, target));
      std::vector<std::string> names;
      for (const auto& [name, t] : mlp.params()) names.push_back(name);
      enc_worst = std::max(enc_worst, test::check_gradients(g, materialize(prog.feed()), loss, names, 8).max_rel);
    }
    {
      PositionalTable table(random_tensor(rng, kGridPoints, 8, -0.5, 0.5));
      const auto a = small_layout(rng, 42, 56, SelectionPolicy::never_merge());
      const auto b = small_layout(rng, 56, 42, SelectionPolicy::derivative(rng.uniform(0, 150)));
      const auto kind = std::array{PositionalKind::TableGrid, PositionalKind::TableBilinear,
                                   PositionalKind::TableBicubic}[seed % 3];
      const auto grad = encode_grad_wrt_positions(a, b, PositionalSource::from_table(kind, table), weights);
      auto cs = [&] {
        const auto pos = PositionalSource::from_table(kind, table);
        return cosine_similarity(encode(a, pos, weights).cls, encode(b, pos, weights).cls);
      };
      for (int probe = 0; probe < 8; ++probe) {
        const std::size_t k = (rng.below(4) * 24 + rng.below(4)) * 8 + rng.below(8);
        double& v = table.matrix()[k];
        const double orig = v;
        v = orig + test::kFdStep;
        const double up = cs();
        v = orig - test::kFdStep;
        const double down = cs();
        v = orig;
        pos_worst = std::max(pos_worst, test::rel_error(grad.gradient[k], (up - down) / (2 * test::kFdStep)));
      }
    }
  }
  const double s = timer.seconds();
  const bool ok = std::max({mlp_worst, enc_worst, pos_worst}) <= test::kGradTol && s < 300;
  return {ok, fmt::format("max rel err mlp {:.2e}, encoder {:.2e}, positions {:.2e}; {:.1f} s", mlp_worst, enc_worst,
                          pos_worst, s)};
}

Outcome bias_identities() {
  const auto weights = EncoderWeights::init(EncoderConfig{});
  const int width = weights.config().width;
  const auto table = PositionalTable::synthetic_smooth(width, 7);
  Rng rng(107);
  double identical = 0;
  for (int t = 0; t < 5; ++t) {
    const auto layout = small_layout(rng, 112, 140, SelectionPolicy::derivative(rng.uniform(0, 100)));
    for (auto kind : {PositionalKind::TableGrid, PositionalKind::TableBilinear, PositionalKind::TableBicubic}) {
      identical = std::max(identical, encode_grad_wrt_positions(layout, layout, PositionalSource::from_table(kind, table), weights).norm());
    }
  }
  const Image square = random_image(rng, 400, 400);
  identical = std::max(identical, interpolation_bias(square, 336, PositionalSource::from_table(PositionalKind::TableBicubic, table), weights));
  const double cz336 = std::abs(mesoscopic_similarity(square, 336, weights) - 1.0);
  double cz_const = 0;
  for (int size = 224; size <= 700; size += 68) {
    cz_const = std::max(cz_const, std::abs(mesoscopic_similarity(Image::filled(300, 450, rng.uniform()), size, weights) - 1.0));
  }
  const bool ok = identical <= 1e-12 && cz336 <= 1e-12 && cz_const <= 1e-10;
  return {ok, fmt::format("B_interp identical {:.1e}, |C^z_336 - 1| {:.1e}, constant |C^z - 1| {:.1e}", identical,
                          cz336, cz_const)};
}

Outcome interpolation_baselines() {
  Rng rng(108);
  const PositionalTable table(random_tensor(rng, kGridPoints, 6));
  double nodes = 0, mid = 0;
  for (int i = 0; i < 24; ++i) {
    for (int j = 0; j < 24; ++j) {
      const auto p = grid_coordinate(i, j);
      for (auto m : {InterpMethod::Bilinear, InterpMethod::Bicubic}) {
        const Tensor v = interpolate_table(table, p.x, p.y, m);
        for (int d = 0; d < 6; ++d) nodes = std::max(nodes, std::abs(v[d] - table.at(i, j, d)));
      }
    }
  }
  for (int i = 0; i < 23; ++i) {
    for (int j = 0; j < 23; ++j) {
      const Tensor v = interpolate_table(table, -1.0 + (2.0 * i + 1.0) / 23.0, -1.0 + (2.0 * j + 1.0) / 23.0,
                                         InterpMethod::Bilinear);
      for (int d = 0; d < 6; ++d) {
        const double mean = (table.at(i, j, d) + table.at(i + 1, j, d) + table.at(i, j + 1, d) + table.at(i + 1, j + 1, d)) / 4;
        mid = std::max(mid, std::abs(v[d] - mean));
      }
    }
  }
  return {nodes <= 1e-12 && mid <= 1e-12, fmt::format("node error {:.1e}, midpoint error {:.1e}", nodes, mid)};
}

Outcome residual_fit() {
  Timer timer;
  MlpConfig c;
  c.fourier_features = 32;
  c.hidden_layers = 2;
  c.hidden_width = 64;
  c.out_dim = 32;
  c.fourier_scale = 1.0;
  c.init_seed = 1;
  const auto res = fit_residual_only(CoordinateMlp::init(c), PositionalTable::synthetic_smooth(32, 0), {5000, 2e-3});
  const double final_l1 = grid_residual(res.mlp, PositionalTable::synthetic_smooth(32, 0)).l1;
  bool identity = true;
  for (const auto& r : res.reports) identity = identity && r.total == r.l_cls + 1.0 * r.r_l1;
  const double s = timer.seconds();
  return {final_l1 <= 1e-3 && identity && res.reports.size() == 5000,
          fmt::format("L1 {:.3e} after {} steps (start {:.3e}), loss identity {}, {:.1f} s", final_l1,
                      res.reports.size(), res.reports.front().r_l1, identity ? "exact" : "violated", s)};
}

TrainConfig toy_train() {
  TrainConfig c;
  c.epochs = 3;
  c.batch_size = 2;
  c.base_lr = 1e-2;
  c.max_short_edge = 112;
  c.seed = 11;
  c.encoder = d8_encoder(4);
  c.mlp = d8_mlp(5);
  c.mlp.fourier_scale = 1.0;
  c.checkpoint_every = 2;
  return c;
}

Outcome determinism() {
  Rng rng(110);
  const std::vector<Image> images{random_image(rng, 70, 84), random_image(rng, 126, 98), random_image(rng, 84, 84)};
  auto cfg = toy_train();
  const auto weights = EncoderWeights::init(cfg.encoder);
  const auto table = PositionalTable::synthetic_smooth(8, 3);
  TempDir dir("acceptance_det");
  std::vector<std::string> problems;

  cfg.out_dir = dir / "a";
  const auto a = train(cfg, images, weights, table);
  cfg.out_dir = dir / "b";
  train(cfg, images, weights, table);
  if (read_file(dir / "a" / "loss.csv") != read_file(dir / "b" / "loss.csv")) problems.push_back("loss csv differs");

  TrainHooks stop;
  stop.max_steps = 3;
  cfg.out_dir = dir / "part";
  train(cfg, images, weights, table, stop);
  cfg.resume = dir / "part" / "state.qtrn";
  cfg.out_dir = dir / "rest";
  const auto rest = train(cfg, images, weights, table);
  bool resumed = rest.reports.size() + 3 == a.reports.size();
  for (std::size_t i = 0; resumed && i < rest.reports.size(); ++i) {
    resumed = loss_csv_row(rest.reports[i]) == loss_csv_row(a.reports[i + 3]);
  }
  resumed = resumed && read_file(dir / "rest" / "state.qtrn") == read_file(dir / "a" / "state.qtrn");
  if (!resumed) problems.push_back("resume diverged");

  // Every persisted format: encode, decode, encode again.
  const auto mlp = CoordinateMlp::decode(read_file(dir / "a" / "model.qmlp"));
  if (mlp.encode() != read_file(dir / "a" / "model.qmlp")) problems.push_back("qmlp");
  const CosineSchedule schedule{cfg.base_lr, a.reports.size()};
  const auto state_bytes = read_file(dir / "a" / "state.qtrn");
  if (TrainState::decode(state_bytes, schedule, AdamConfig{}).encode() != state_bytes) problems.push_back("qtrn");
  if (EncoderWeights::decode(weights.encode()).encode() != weights.encode()) problems.push_back("qenc");
  if (PositionalTable::decode(table.encode()).encode() != table.encode()) problems.push_back("qemb");
  const auto crop = crop_to_patch_multiple(images[1]);
  auto layout = patchify(crop.image, crop.geometry, maximal_block_cover(crop.geometry), SelectionPolicy::derivative(40));
  const std::string manifest = encode_manifest(layout), patches = encode_patch_file(layout);
  auto back = decode_manifest(manifest);
  decode_patch_file(patches, back);
  if (encode_manifest(back) != manifest || encode_patch_file(back) != patches) problems.push_back("layout files");
  const std::string ppm = encode_ppm(images[0]);
  save_ppm(images[0], dir / "x.ppm");
  if (encode_ppm(load_image(dir / "x.ppm")) != ppm) problems.push_back("ppm");

  std::string detail = problems.empty() ? "loss csv identical, resume exact, qmlp/qtrn/qenc/qemb/manifest/qpat/ppm round trip" : "";
  for (const auto& p : problems) detail += (detail.empty() ? "" : "; ") + p;
  return {problems.empty(), detail};
}

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

Outcome sweep_pipeline() {
  TempDir dir("acceptance_sweep");
  Rng rng(111);
  std::filesystem::create_directories(dir / "imgs");
  save_ppm(random_image(rng, 240, 300), dir / "imgs" / "first.ppm");
  save_ppm(random_image(rng, 320, 250), dir / "imgs" / "second.ppm");
  auto run_sweep = [&](const std::string& out) {
    std::ostringstream o, e;
    return run_cli({"qlip", "sweep", "--images", (dir / "imgs").string(), "--alphas", "0.0,0.5", "--sizes", "224,336",
                    "--out", (dir / out).string()},
                   o, e);
  };
  if (run_sweep("one") != kExitOk || run_sweep("two") != kExitOk) return {false, "sweep command failed"};
  const auto metrics = read_file(dir / "one" / "metrics.csv");
  const auto means = read_file(dir / "one" / "metrics_mean.csv");
  const auto rows = parse_csv(metrics);
  const auto mean_rows = parse_csv(means);
  bool identical = true;
  for (const char* f : {"metrics.csv", "metrics_mean.csv", "tokens.csv"}) {
    identical = identical && read_file(dir / "one" / f) == read_file(dir / "two" / f);
  }
  // Recompute every mean column from the per-image rows.
  std::map<std::string, std::vector<std::vector<double>>> groups;
  for (const auto& r : rows) {
    std::vector<double> v;
    for (std::size_t k = 4; k < r.size(); ++k) v.push_back(std::stod(r[k]));
    groups[r[1] + "|" + r[2] + "|" + r[3]].push_back(v);
  }
  double worst = 0;
  for (const auto& m : mean_rows) {
    const auto& members = groups[m[1] + "|" + m[2] + "|" + m[3]];
    if (members.size() != 2) return {false, "mean group without two images"};
    for (std::size_t k = 0; k < 5; ++k) {
      const double expect = (members[0][k] + members[1][k]) / 2;
      worst = std::max(worst, std::abs(std::stod(m[k + 4]) - expect));
    }
  }
  const bool ok = rows.size() == 8 && mean_rows.size() == 4 && worst <= 1e-12 && identical;
  return {ok, fmt::format("{} data rows, {} means, max mean error {:.1e}, reruns {}", rows.size(), mean_rows.size(),
                          worst, identical ? "byte-identical" : "differ")};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"quadtree tiling over 1000 triples", tiling},
      {"336 never_merge equals the uniform grid", ugp_equivalence},
      {"one busy quadrant gives 7 leaves", seven_leaves},
      {"token count non-increasing in alpha", alpha_monotone},
      {"block covers 476x518 and 672x896", covers},
      {"gradients match central differences", gradient_integrity},
      {"bias metric identities", bias_identities},
      {"interpolation baselines exact at nodes and midpoints", interpolation_baselines},
      {"residual-only fit reaches L1 <= 1e-3", residual_fit},
      {"determinism and persistence", determinism},
      {"cli sweep rows, means and reruns", sweep_pipeline},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += o.pass ? 0 : 1;
    std::cout << fmt::format("{} criterion {}: {} ({})", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, o.detail)
              << std::endl;
  }
  std::cout << fmt::format("{} of {} criteria passed\n", criteria.size() - failures, criteria.size());
  return failures;
}
