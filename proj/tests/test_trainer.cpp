// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <limits>
#include <numbers>

#include "qlip/binary_io.hpp"
#include "qlip/trainer.hpp"
#include "support.hpp"

using namespace qlip;
using qlip::test::random_image;
using qlip::test::TempDir;

namespace {

TrainConfig toy_config() {
  TrainConfig c;
  c.epochs = 2;
  c.batch_size = 2;
  c.base_lr = 1e-2;
  c.max_short_edge = 112;
  c.seed = 3;
  c.encoder.depth = 1;
  c.encoder.width = 8;
  c.encoder.heads = 2;
  c.encoder.seed = 4;
  c.mlp.fourier_features = 6;
  c.mlp.hidden_layers = 1;
  c.mlp.hidden_width = 12;
  c.mlp.out_dim = 8;
  c.mlp.fourier_scale = 1.0;
  c.mlp.init_seed = 5;
  return c;
}

std::vector<Image> toy_images(std::uint64_t seed = 9) {
  Rng rng(seed);
  return {random_image(rng, 70, 84), random_image(rng, 126, 98), random_image(rng, 84, 84)};
}

std::string csv_of(const std::vector<LossReport>& reports) {
  std::string out = loss_csv_header();
  for (const auto& r : reports) out += loss_csv_row(r);
  return out;
}

double l2_distance(const Tensor& a, const Tensor& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("config text parses with comments and rejects unknown keys") {
  const auto cfg = parse_train_config(
      "# toy run\n"
      "epochs = 3\n"
      "batch_size=5   # inline\n"
      "base_lr = 2.5e-4\n"
      "gamma = 0.5\n"
      "train_merge_prob = 0.25\n"
      "encoder_width = 16\n"
      "\n"
      "dataset = /data/imgs\n");
  CHECK(cfg.epochs == 3);
  CHECK(cfg.batch_size == 5);
  CHECK(cfg.base_lr == 2.5e-4);
  CHECK(cfg.gamma == 0.5);
  CHECK(cfg.train_merge_prob == 0.25);
  CHECK(cfg.encoder.width == 16);
  CHECK(cfg.mlp.out_dim == 16);
  CHECK(cfg.dataset == "/data/imgs");
  CHECK(cfg.max_short_edge == 560);

  CHECK_THROWS_AS(parse_train_config("learning_rate = 1"), std::invalid_argument);
  CHECK_THROWS_AS(parse_train_config("epochs = ten"), std::invalid_argument);
  CHECK_THROWS_AS(parse_train_config("epochs 10"), std::invalid_argument);
}

TEST_CASE("defaults and validation") {
  TrainConfig d;
  CHECK(d.epochs == 100);
  CHECK(d.batch_size == 14);
  CHECK(d.base_lr == 7.5e-5);
  CHECK(d.gamma == 1.0);
  CHECK(d.max_short_edge == 560);
  CHECK(d.train_merge_prob == 0.10);
  auto c = toy_config();
  c.validate();
  c.gamma = -1;
  CHECK_THROWS(c.validate());
  c = toy_config();
  c.train_merge_prob = 1.5;
  CHECK_THROWS(c.validate());
  c = toy_config();
  c.mlp.out_dim = 4;
  CHECK_THROWS(c.validate());
}

TEST_CASE("cls loss equals the distance of two explicit encodes") {
  const auto cfg = toy_config();
  const auto weights = EncoderWeights::init(cfg.encoder);
  const auto table = PositionalTable::synthetic_smooth(8, 1);
  const auto mlp = CoordinateMlp::init(cfg.mlp);
  Rng rng(2);
  const Image img = random_image(rng, 150, 200);

  const auto ref = prepare_reference(img);
  const Tensor ref_cls = encode(uniform_grid_layout(ref.image, ref.geometry),
                                PositionalSource::from_table(PositionalKind::TableGrid, table), weights)
                             .cls;
  const auto native = prepare_native(img, 112);
  const auto layout = patchify(native.image, native.geometry, maximal_block_cover(native.geometry),
                               SelectionPolicy::random(0.1, 17));
  const Tensor cls = encode(layout, PositionalSource::from_mlp(mlp), weights).cls;
  const double expected = l2_distance(cls, ref_cls);
  CHECK(cls_loss(img, mlp, table, weights, 112, 0.1, 17) == doctest::Approx(expected).epsilon(1e-12));
  CHECK(cls_loss(layout, ref_cls, mlp, weights) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("cls loss is homogeneous in the CLS difference") {
  const auto cfg = toy_config();
  const auto weights = EncoderWeights::init(cfg.encoder);
  const auto mlp = CoordinateMlp::init(cfg.mlp);
  Rng rng(3);
  const auto crop = crop_to_patch_multiple(random_image(rng, 56, 70));
  const auto layout = uniform_grid_layout(crop.image, crop.geometry);
  const Tensor cls = encode(layout, PositionalSource::from_mlp(mlp), weights).cls;
  const Tensor d = test::random_tensor(rng, 1, 8);
  Tensor once = cls, twice = cls;
  for (std::size_t i = 0; i < 8; ++i) {
    once[i] += d[i];
    twice[i] += 2 * d[i];
  }
  const double a = cls_loss(layout, once, mlp, weights), b = cls_loss(layout, twice, mlp, weights);
  CHECK(b == doctest::Approx(2 * a).epsilon(1e-10));
}

TEST_CASE("cls loss vanishes when the mlp equals the table at native size 336") {
  const auto cfg = toy_config();
  const auto weights = EncoderWeights::init(cfg.encoder);
  // A read-out-only MLP: zero weights and a bias equal to the constant table row.
  auto mlp = CoordinateMlp::init(cfg.mlp);
  Rng rng(4);
  const Tensor row = test::random_tensor(rng, 1, 8);
  for (auto& [name, t] : mlp.params()) {
    for (auto& v : t.values()) v = 0.0;
  }
  mlp.params().at("mlp.out.bias") = row;
  Tensor values = Tensor::zeros(kGridPoints, 8);
  for (int i = 0; i < kGridPoints; ++i) {
    for (int d = 0; d < 8; ++d) values(i, d) = row[d];
  }
  const PositionalTable table(values);
  const Image img = random_image(rng, 336, 336);
  CHECK(cls_loss(img, mlp, table, weights, 560, 0.0, 1) == 0.0);
}

TEST_CASE("zero learning rate leaves parameters untouched") {
  auto cfg = toy_config();
  cfg.base_lr = 0.0;
  const auto weights = EncoderWeights::init(cfg.encoder);
  const auto table = PositionalTable::synthetic_smooth(8, 1);
  const auto res = train(cfg, toy_images(), weights, table);
  CHECK(res.reports.size() == 4);
  CHECK(res.mlp == CoordinateMlp::init(cfg.mlp));
}

TEST_CASE("fixed seed gives identical report streams and the loss identity holds") {
  const auto cfg = toy_config();
  const auto weights = EncoderWeights::init(cfg.encoder);
  const auto table = PositionalTable::synthetic_smooth(8, 1);
  const auto a = train(cfg, toy_images(), weights, table);
  const auto b = train(cfg, toy_images(), weights, table);
  CHECK(csv_of(a.reports) == csv_of(b.reports));
  CHECK(a.mlp == b.mlp);
  REQUIRE(a.reports.size() == 4);
  const double total = 4.0;
  for (const auto& r : a.reports) {
    CHECK(r.total == r.l_cls + cfg.gamma * r.r_l1);
    const double closed = 0.5 * cfg.base_lr * (1.0 + std::cos(std::numbers::pi * r.step / total));
    CHECK(std::abs(r.lr - closed) <= 1e-12);
    CHECK(std::isfinite(r.grad_norm_positions));
    CHECK(r.grad_norm_positions > 0);
  }
  CHECK(a.mlp.fourier_checksum() == CoordinateMlp::init(cfg.mlp).fourier_checksum());

  auto other = cfg;
  other.seed = 99;
  CHECK(csv_of(train(other, toy_images(), weights, table).reports) != csv_of(a.reports));
}

TEST_CASE("resuming from a checkpoint reproduces the uninterrupted run") {
  auto cfg = toy_config();
  cfg.epochs = 3;
  const auto weights = EncoderWeights::init(cfg.encoder);
  const auto table = PositionalTable::synthetic_smooth(8, 2);
  TempDir dir("resume");
  cfg.out_dir = dir / "full";
  const auto full = train(cfg, toy_images(), weights, table);
  REQUIRE(full.reports.size() == 6);

  cfg.out_dir = dir / "part";
  TrainHooks hooks;
  hooks.max_steps = 2;
  const auto part = train(cfg, toy_images(), weights, table, hooks);
  CHECK(part.reports.size() == 2);

  cfg.resume = dir / "part" / "state.qtrn";
  cfg.out_dir = dir / "rest";
  const auto rest = train(cfg, toy_images(), weights, table);
  REQUIRE(rest.reports.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) CHECK(loss_csv_row(rest.reports[i]) == loss_csv_row(full.reports[i + 2]));
  CHECK(rest.mlp == full.mlp);
  CHECK(read_file(dir / "rest" / "model.qmlp") == read_file(dir / "full" / "model.qmlp"));
  CHECK(read_file(dir / "rest" / "state.qtrn") == read_file(dir / "full" / "state.qtrn"));
  CHECK(read_file(dir / "full" / "loss.csv") == csv_of(full.reports));
  CHECK(CoordinateMlp::load(dir / "full" / "model.qmlp").config() == cfg.mlp);
}

TEST_CASE("training state round trips exactly") {
  auto cfg = toy_config();
  const auto weights = EncoderWeights::init(cfg.encoder);
  const auto table = PositionalTable::synthetic_smooth(8, 2);
  TempDir dir("state");
  cfg.out_dir = dir.path();
  train(cfg, toy_images(), weights, table);
  const std::string bytes = read_file(dir / "state.qtrn");
  const CosineSchedule schedule{cfg.base_lr, 4};
  const auto state = TrainState::decode(bytes, schedule, AdamConfig{});
  CHECK(state.adam.step_count() == 4);
  CHECK(state.encode() == bytes);
  CHECK_THROWS_AS(TrainState::decode(bytes.substr(0, bytes.size() - 3), schedule, AdamConfig{}), FormatError);
  CHECK_THROWS_AS(TrainState::decode(bytes + "x", schedule, AdamConfig{}), FormatError);
}

TEST_CASE("residual term drops tenfold on one constant image") {
  auto cfg = toy_config();
  cfg.epochs = 200;
  cfg.batch_size = 1;
  cfg.base_lr = 2e-2;
  cfg.mlp.fourier_features = 32;
  cfg.mlp.hidden_layers = 2;
  cfg.mlp.hidden_width = 64;
  const auto weights = EncoderWeights::init(cfg.encoder);
  const auto table = PositionalTable::synthetic_smooth(8, 3);
  const auto res = train(cfg, {Image::filled(84, 112, 0.4)}, weights, table);
  REQUIRE(res.reports.size() == 200);
  CHECK(res.reports.back().r_l1 * 10 <= res.reports.front().r_l1);
  for (const auto& r : res.reports) CHECK(r.total == r.l_cls + r.r_l1);
}

TEST_CASE("residual-only fitting") {
  MlpConfig c;
  c.fourier_features = 8;
  c.hidden_layers = 1;
  c.hidden_width = 16;
  c.out_dim = 4;
  c.fourier_scale = 1.0;
  c.init_seed = 6;
  const auto mlp = CoordinateMlp::init(c);

  SUBCASE("zero steps change nothing") {
    const auto res = fit_residual_only(mlp, PositionalTable::synthetic_smooth(4, 1), {0, 1e-3});
    CHECK(res.reports.empty());
    CHECK(res.mlp == mlp);
  }
  SUBCASE("a zero table starts at the mean |M| and falls window by window") {
    const auto res = fit_residual_only(mlp, PositionalTable::zeros(4), {600, 3e-3});
    const Tensor out = mlp.forward(grid_coordinates());
    double mean_abs = 0;
    for (double v : out.values()) mean_abs += std::abs(v);
    mean_abs /= static_cast<double>(out.size());
    CHECK(res.reports.front().r_l1 == doctest::Approx(mean_abs).epsilon(1e-12));
    double prev = std::numeric_limits<double>::infinity();
    for (std::size_t w = 0; w < 6; ++w) {
      double s = 0;
      for (std::size_t k = 0; k < 100; ++k) s += res.reports[w * 100 + k].r_l1;
      CHECK(s < prev);
      prev = s;
    }
    for (const auto& r : res.reports) CHECK(r.total == r.l_cls + r.r_l1);
  }
  SUBCASE("mismatched dimensions are rejected") {
    CHECK_THROWS_AS(fit_residual_only(mlp, PositionalTable::zeros(8), {10, 1e-3}), std::invalid_argument);
  }
}

TEST_CASE("a non-finite loss aborts and keeps the last good state") {
  auto cfg = toy_config();
  cfg.checkpoint_every = 1;
  const auto weights = EncoderWeights::init(cfg.encoder);
  auto table = PositionalTable::synthetic_smooth(8, 1);
  table.matrix()(100, 3) = std::numeric_limits<double>::quiet_NaN();
  TempDir dir("abort");
  cfg.out_dir = dir.path();
  try {
    train(cfg, toy_images(), weights, table);
    FAIL("expected abort");
  } catch (const TrainingAborted& e) {
    CHECK(e.step() == 0);
  }
  const auto state = TrainState::decode(read_file(dir / "state.qtrn"), CosineSchedule{cfg.base_lr, 4}, AdamConfig{});
  CHECK(state.adam.step_count() == 0);
  CHECK(state.mlp == CoordinateMlp::init(cfg.mlp));
}

TEST_CASE("training from a dataset directory") {
  auto cfg = toy_config();
  cfg.epochs = 1;
  TempDir dir("dataset");
  const auto images = toy_images();
  for (std::size_t i = 0; i < images.size(); ++i) save_ppm(images[i], dir / ("img" + std::to_string(i) + ".ppm"));
  cfg.dataset = dir.path();
  cfg.table_seed = 1;
  const auto res = train(cfg);
  CHECK(res.reports.size() == 2);
  cfg.dataset = dir / "missing";
  CHECK_THROWS(train(cfg));
}

}  // TEST_SUITE
