// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "qlip/adam.hpp"
#include "qlip/bias_metrics.hpp"
#include "qlip/encoder.hpp"
#include "qlip/posenc.hpp"

namespace qlip {

struct TrainConfig {
  int epochs = 100;
  int batch_size = 14;
  double base_lr = 7.5e-5;
  double gamma = 1.0;
  int max_short_edge = 560;
  double train_merge_prob = 0.10;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // steps; 0 writes only the final checkpoint
  std::filesystem::path dataset;
  std::filesystem::path table;            // empty: synthetic table
  std::filesystem::path encoder_weights;  // empty: seeded encoder
  std::filesystem::path out_dir;          // empty: no files written
  std::filesystem::path resume;           // training-state file to continue from
  EncoderConfig encoder;
  MlpConfig mlp;
  int table_seed = 0;  // synthetic table seed when `table` is empty

  void validate() const;
};

/// Parses "key = value" lines ('#' starts a comment) on top of `base`.
/// Unknown keys are rejected.
TrainConfig parse_train_config(std::string_view text, TrainConfig base = {});
void apply_train_setting(TrainConfig& cfg, std::string_view key, std::string_view value);

struct LossReport {
  std::size_t step = 0;
  double l_cls = 0.0;
  double r_l1 = 0.0;
  double r_l2 = 0.0;
  double grad_norm_positions = 0.0;
  double lr = 0.0;
  double total = 0.0;  // l_cls + gamma * r_l1
};

std::string loss_csv_header();
std::string loss_csv_row(const LossReport& r);

/// L2 distance between the reference CLS (uniform grid at the reference size,
/// table positions) and the CLS of `layout` encoded with MLP positions.
double cls_loss(const PatchLayout& layout, const Tensor& reference_cls, const CoordinateMlp& mlp,
                const EncoderWeights& weights);

/// Convenience form that prepares both layouts from a raw image.
double cls_loss(const Image& img, const CoordinateMlp& mlp, const PositionalTable& table,
                const EncoderWeights& weights, int max_short_edge, double merge_prob, std::uint64_t seed,
                const PipelineOptions& opts = {});

class TrainingAborted : public std::runtime_error {
 public:
  TrainingAborted(std::size_t step, const std::string& why)
      : std::runtime_error("training aborted at step " + std::to_string(step) + ": " + why), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

/// Exact (f64) snapshot of a run: parameters, optimizer moments, step.
struct TrainState {
  CoordinateMlp mlp;
  AdamState adam;

  std::string encode() const;
  static TrainState decode(std::string bytes, const CosineSchedule& schedule, const AdamConfig& adam);
};

struct TrainResult {
  CoordinateMlp mlp;
  std::vector<LossReport> reports;
};

struct TrainHooks {
  std::function<void(const LossReport&)> on_report;
  std::size_t max_steps = 0;  // stop early after this many total steps (0: run to the end)
};

/// Fits the coordinate MLP against a frozen encoder and table with
/// Loss = mean-over-batch L_CLS + gamma * R. Writes model.qmlp (f32 export),
/// state.qtrn (exact state) and loss.csv into cfg.out_dir when set.
TrainResult train(const TrainConfig& cfg, const std::vector<Image>& images, const EncoderWeights& weights,
                  const PositionalTable& table, const TrainHooks& hooks = {});

/// Loads dataset, table and encoder as named in cfg, then trains.
TrainResult train(const TrainConfig& cfg, const TrainHooks& hooks = {});

struct ResidualFitConfig {
  std::size_t steps = 5000;
  double base_lr = 1e-3;
};

/// Adam on the grid residual alone (L_CLS = 0, gamma = 1), cosine schedule
/// over `steps`.
TrainResult fit_residual_only(CoordinateMlp mlp, const PositionalTable& table, const ResidualFitConfig& cfg);

}  // namespace qlip
