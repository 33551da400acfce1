// SPDX-License-Identifier: Apache-2.0
#include "qlip/cli.hpp"

#include <fmt/format.h>

#include <CLI11.hpp>
#include <cstdlib>
#include <ostream>

#include "qlip/bias_metrics.hpp"
#include "qlip/binary_io.hpp"
#include "qlip/trainer.hpp"

namespace qlip {

namespace fs = std::filesystem;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

fs::path default_out_dir() {
  if (const char* env = std::getenv(kOutDirEnv); env && *env) return env;
  return ".";
}

// Options shared by the commands that run the encoder.
struct ModelOptions {
  std::string encoder_file;
  std::string table_file;
  std::string mlp_file;
  EncoderConfig encoder;
  std::uint64_t table_seed = 0;

  void add(CLI::App* app) {
    app->add_option("--encoder", encoder_file, "QENC encoder weights (default: seeded encoder)");
    app->add_option("--table", table_file, "QEMB positional table (default: synthetic smooth table)");
    app->add_option("--mlp", mlp_file, "QMLP coordinate MLP, required for --pos mlp");
    app->add_option("--width", encoder.width, "seeded encoder width")->capture_default_str();
    app->add_option("--depth", encoder.depth, "seeded encoder depth")->capture_default_str();
    app->add_option("--heads", encoder.heads, "seeded encoder heads")->capture_default_str();
    app->add_option("--encoder-seed", encoder.seed, "seeded encoder init seed")->capture_default_str();
    app->add_option("--table-seed", table_seed, "synthetic table seed")->capture_default_str();
  }

  EncoderWeights load_encoder() const {
    return encoder_file.empty() ? EncoderWeights::init(encoder) : EncoderWeights::load(encoder_file);
  }
  PositionalTable load_table(int dim) const {
    return table_file.empty() ? PositionalTable::synthetic_smooth(dim, table_seed) : PositionalTable::load(table_file);
  }
};

std::vector<SelectionPolicy> make_policies(const std::string& kind, const std::vector<double>& alphas,
                                           std::uint64_t seed) {
  std::vector<SelectionPolicy> out;
  if (kind == "never_merge") return {SelectionPolicy::never_merge()};
  for (double a : alphas) {
    if (kind == "derivative") {
      out.push_back(SelectionPolicy::derivative(a));
    } else if (kind == "random") {
      out.push_back(SelectionPolicy::random(a, seed));
    } else {
      throw UsageError("--policy must be derivative, random or never_merge");
    }
    out.back().validate();
  }
  return out;
}

std::vector<int> default_sizes() {
  std::vector<int> s;
  for (int v = 224; v <= 700; v += 28) s.push_back(v);
  return s;
}

std::vector<double> default_alphas(const std::string& policy) {
  if (policy == "random") return {0.0, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6};
  return {0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0,
          1.1,  1.2, 1.3, 1.4, 1.5, 1.7, 1.9, 2.1, 2.5, 3.0};
}

struct SweepOptions {
  std::string images;
  std::vector<int> sizes;
  std::vector<double> alphas;
  std::string policy = "derivative";
  std::vector<std::string> pos{"table_bicubic"};
  std::uint64_t seed = 0;
  int jobs = 1;
  ModelOptions model;

  void add(CLI::App* app) {
    app->add_option("--images", images, "directory of PPM/PNG images")->required()->check(CLI::ExistingDirectory);
    app->add_option("--sizes", sizes, "short-edge sizes in pixels")->delimiter(',');
    app->add_option("--alphas", alphas, "selection thresholds")->delimiter(',');
    app->add_option("--policy", policy, "derivative, random or never_merge")->capture_default_str();
    app->add_option("--pos", pos, "positional kinds: table_grid, table_bilinear, table_bicubic, mlp")
        ->delimiter(',')
        ->capture_default_str();
    app->add_option("--seed", seed, "seed for random merging")->capture_default_str();
    app->add_option("--jobs", jobs, "parallel sweep cells")->capture_default_str()->check(CLI::PositiveNumber);
    model.add(app);
  }

  SweepResult run(std::ostream& err) const {
    const auto weights = model.load_encoder();
    const auto table = model.load_table(weights.config().width);
    CoordinateMlp mlp;
    SweepSpec spec;
    spec.sizes = sizes.empty() ? default_sizes() : sizes;
    spec.policies = make_policies(policy, alphas.empty() ? default_alphas(policy) : alphas, seed);
    spec.jobs = jobs;
    for (const auto& p : pos) {
      const auto kind = parse_positional_kind(p);
      if (kind == PositionalKind::Mlp) {
        if (model.mlp_file.empty()) throw UsageError("--pos mlp needs --mlp");
        mlp = CoordinateMlp::load(model.mlp_file);
        spec.positions.push_back(PositionalSource::from_mlp(mlp));
      } else if (kind == PositionalKind::Zero) {
        throw UsageError("--pos zero has no interpolation bias; c_z is reported for every row");
      } else {
        spec.positions.push_back(PositionalSource::from_table(kind, table));
      }
    }
    PipelineOptions opts;
    opts.patch_size = weights.config().patch_size;
    auto result = sweep(fs::path(images), spec, weights, opts);
    for (const auto& w : result.warnings) err << "warning: skipped " << w.path.string() << ": " << w.message << '\n';
    return result;
  }
};

// ---------------------------------------------------------------------------

int cmd_patchify(const std::string& image, const std::string& policy_kind, double alpha, std::uint64_t seed,
                 int block_size, int size, const std::string& out_dir, std::ostream& out) {
  const auto img = load_image(image);
  PipelineOptions opts;
  opts.block_size = block_size;
  const auto native = size > 0 ? prepare_native(img, size, opts) : crop_to_patch_multiple(img, 14, block_size);
  const auto cover = maximal_block_cover(native.geometry);
  const auto policy = make_policies(policy_kind, {alpha}, seed).front();
  const auto layout = patchify(native.image, native.geometry, cover, policy);
  write_layout(layout, out_dir);
  out << fmt::format("RESULT tokens={} patches={} blocks={}x{} policy={} out={}\n", layout.token_count(),
                     native.geometry.patch_count(), cover.grid_rows, cover.grid_cols, policy.label(), out_dir);
  return kExitOk;
}

int cmd_render(const std::string& image, const std::string& policy_kind, double alpha, std::uint64_t seed,
               int block_size, int size, const std::string& out_file, std::ostream& out) {
  const auto img = load_image(image);
  PipelineOptions opts;
  opts.block_size = block_size;
  const auto native = size > 0 ? prepare_native(img, size, opts) : crop_to_patch_multiple(img, 14, block_size);
  const auto cover = maximal_block_cover(native.geometry);
  const auto policy = make_policies(policy_kind, {alpha}, seed).front();
  const auto layout = patchify(native.image, native.geometry, cover, policy);
  const fs::path path(out_file);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_file_atomic(path, encode_ppm(render_layout(native.image, layout)));
  out << fmt::format("RESULT tokens={} out={}\n", layout.token_count(), path.string());
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Quadtree patchification, coordinate positional encodings and encoder bias metrics", "qlip"};
  app.require_subcommand(1);
  app.fallthrough(false);

  const std::string out_default = default_out_dir().string();

  // patchify / render ------------------------------------------------------
  struct LayoutArgs {
    std::string image;
    std::string policy = "derivative";
    double alpha = 0.5;
    std::uint64_t seed = 0;
    int block_size = 16;
    int size = 0;
    std::string out;
  };
  LayoutArgs pa, ra;
  auto add_layout = [](CLI::App* sub, LayoutArgs& a) {
    sub->add_option("--image", a.image, "input PPM or PNG")->required()->check(CLI::ExistingFile);
    sub->add_option("--policy", a.policy, "derivative, random or never_merge")->capture_default_str();
    sub->add_option("--alpha", a.alpha, "threshold (derivative) or merge probability (random)")
        ->capture_default_str();
    sub->add_option("--seed", a.seed, "seed for random merging")->capture_default_str();
    sub->add_option("--block-size", a.block_size, "patches per quadtree block side (power of two)")
        ->capture_default_str();
    sub->add_option("--size", a.size, "resize the short edge first (0 keeps native size)")->capture_default_str();
  };
  auto* patchify_cmd = app.add_subcommand("patchify", "write a quadtree layout manifest and patch file");
  add_layout(patchify_cmd, pa);
  pa.out = out_default;
  patchify_cmd->add_option("--out", pa.out, "output directory")->capture_default_str();

  auto* render_cmd = app.add_subcommand("render", "draw the layout over the image as PPM");
  add_layout(render_cmd, ra);
  ra.out = (fs::path(out_default) / "layout.ppm").string();
  render_cmd->add_option("--out", ra.out, "output PPM file")->capture_default_str();

  // train -----------------------------------------------------------------
  std::string config_file, train_out = out_default, dataset, table_file, encoder_file, resume;
  int epochs = 0, batch = 0, ckpt = -1;
  double lr = -1, gamma = -1;
  std::uint64_t train_seed = 0;
  std::size_t max_steps = 0;
  auto* train_cmd = app.add_subcommand("train", "fit the coordinate MLP");
  train_cmd->add_option("--config", config_file, "key = value config file")->check(CLI::ExistingFile);
  train_cmd->add_option("--dataset", dataset, "image directory");
  train_cmd->add_option("--table", table_file, "QEMB positional table");
  train_cmd->add_option("--encoder", encoder_file, "QENC encoder weights");
  train_cmd->add_option("--resume", resume, "QTRN training state to continue from");
  train_cmd->add_option("--epochs", epochs, "epochs");
  train_cmd->add_option("--batch-size", batch, "images per step");
  train_cmd->add_option("--lr", lr, "base learning rate");
  train_cmd->add_option("--gamma", gamma, "residual weight");
  train_cmd->add_option("--seed", train_seed, "shuffle and merge seed");
  train_cmd->add_option("--checkpoint-every", ckpt, "steps between checkpoints (0: final only)");
  train_cmd->add_option("--max-steps", max_steps, "stop after this many total steps");
  train_cmd->add_option("--out", train_out, "output directory")->capture_default_str();

  // eval-bias / sweep -----------------------------------------------------
  SweepOptions eval_opts, sweep_opts;
  std::string eval_out = (fs::path(out_default) / "bias.csv").string();
  std::string sweep_out = out_default;
  auto* eval_cmd = app.add_subcommand("eval-bias", "per-image bias metrics as CSV");
  eval_opts.add(eval_cmd);
  eval_cmd->add_option("--out", eval_out, "CSV path; means go to <stem>_mean.csv")->capture_default_str();
  auto* sweep_cmd = app.add_subcommand("sweep", "alpha x size sweep with token-count and metric CSVs");
  sweep_opts.add(sweep_cmd);
  sweep_cmd->add_option("--out", sweep_out, "output directory")->capture_default_str();

  // make-table ------------------------------------------------------------
  int table_dim = 64;
  std::uint64_t table_seed = 0;
  std::string table_out = (fs::path(out_default) / "table.qemb").string();
  auto* table_cmd = app.add_subcommand("make-table", "write a synthetic smooth positional table");
  table_cmd->add_option("--dim", table_dim, "vector dimension")->capture_default_str()->check(CLI::PositiveNumber);
  table_cmd->add_option("--seed", table_seed, "table seed")->capture_default_str();
  table_cmd->add_option("--out", table_out, "QEMB output file")->capture_default_str();

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help("", CLI::AppFormatMode::All);
    return kExitUsage;
  }

  try {
    if (*patchify_cmd) {
      return cmd_patchify(pa.image, pa.policy, pa.alpha, pa.seed, pa.block_size, pa.size, pa.out, out);
    }
    if (*render_cmd) return cmd_render(ra.image, ra.policy, ra.alpha, ra.seed, ra.block_size, ra.size, ra.out, out);
    if (*train_cmd) {
      TrainConfig cfg;
      if (!config_file.empty()) cfg = parse_train_config(read_file(config_file));
      if (train_cmd->count("--dataset")) cfg.dataset = dataset;
      if (train_cmd->count("--table")) cfg.table = table_file;
      if (train_cmd->count("--encoder")) cfg.encoder_weights = encoder_file;
      if (train_cmd->count("--resume")) cfg.resume = resume;
      if (train_cmd->count("--epochs")) cfg.epochs = epochs;
      if (train_cmd->count("--batch-size")) cfg.batch_size = batch;
      if (train_cmd->count("--lr")) cfg.base_lr = lr;
      if (train_cmd->count("--gamma")) cfg.gamma = gamma;
      if (train_cmd->count("--seed")) cfg.seed = train_seed;
      if (train_cmd->count("--checkpoint-every")) cfg.checkpoint_every = ckpt;
      if (train_cmd->count("--out") || cfg.out_dir.empty()) cfg.out_dir = train_out;
      if (cfg.dataset.empty()) throw UsageError("train needs a dataset (--dataset or config key 'dataset')");
      TrainHooks hooks;
      hooks.max_steps = max_steps;
      const auto result = train(cfg, hooks);
      const auto& last = result.reports.empty() ? LossReport{} : result.reports.back();
      out << fmt::format("RESULT steps={} l_cls={} r_l1={} total={} out={}\n", result.reports.size(), last.l_cls,
                         last.r_l1, last.total, cfg.out_dir.string());
      return kExitOk;
    }
    if (*eval_cmd) {
      const auto result = eval_opts.run(err);
      const fs::path path(eval_out);
      if (path.has_parent_path()) fs::create_directories(path.parent_path());
      const fs::path mean_path = path.parent_path() / (path.stem().string() + "_mean.csv");
      write_file_atomic(path, bias_csv(result.rows));
      write_file_atomic(mean_path, bias_csv(result.averages));
      out << fmt::format("RESULT rows={} means={} out={}\n", result.rows.size(), result.averages.size(),
                         path.string());
      return kExitOk;
    }
    if (*sweep_cmd) {
      const auto result = sweep_opts.run(err);
      const fs::path dir(sweep_out);
      fs::create_directories(dir);
      write_file_atomic(dir / "tokens.csv", token_csv(result.rows));
      write_file_atomic(dir / "metrics.csv", bias_csv(result.rows));
      write_file_atomic(dir / "metrics_mean.csv", bias_csv(result.averages));
      out << fmt::format("RESULT rows={} means={} out={}\n", result.rows.size(), result.averages.size(),
                         dir.string());
      return kExitOk;
    }
    if (*table_cmd) {
      const fs::path path(table_out);
      if (path.has_parent_path()) fs::create_directories(path.parent_path());
      PositionalTable::synthetic_smooth(table_dim, table_seed).save(path);
      out << fmt::format("RESULT dim={} out={}\n", table_dim, path.string());
      return kExitOk;
    }
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace qlip
