#include <chrono>
#include <iostream>
#include <optional>

#include "CLI11.hpp"

#include "fusionq/errors.hpp"
#include "fusionq/harness/harness.hpp"

namespace fs = std::filesystem;
namespace fh = fusionq::harness;
namespace ft = fusionq::train;
namespace sim = fusionq::sim;

namespace {

constexpr int kConfigError = 2;
constexpr int kRuntimeError = 3;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  std::string checkpoint;
};

fh::ExperimentConfig load(const Options& o) {
  fh::ExperimentConfig cfg = o.config.empty() ? fh::parse_config(fh::json::object()) : fh::load_config(o.config);
  if (o.seed) cfg.seed = *o.seed;
  return cfg;
}

fs::path out_dir(const Options& o) {
  fs::path dir = o.out;
  fs::create_directories(dir);
  return dir;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

fh::json metadata(const fh::ExperimentConfig& cfg) { return {{"config_hash", fh::config_hash(cfg)}, {"seed", cfg.seed}}; }

int gen_scenes(const Options& o) {
  const auto cfg = load(o);
  const fs::path dir = out_dir(o) / "scenes";
  fs::create_directories(dir);
  fh::json manifest = metadata(cfg);
  manifest["files"] = fh::json::array();
  for (bool eval : {false, true}) {
    const std::size_t n = eval ? cfg.scene.eval_sequences : cfg.scene.train_sequences;
    const auto seqs = sim::generate_dataset(cfg.scene_config(eval), n);
    for (std::size_t s = 0; s < seqs.size(); ++s) {
      const std::string name = std::string(eval ? "eval_" : "train_") + std::to_string(s) + ".jsonl";
      sim::save_sequence(seqs[s], dir / name);
      manifest["files"].push_back(name);
    }
  }
  fh::write_json(dir / "manifest.json", manifest);
  std::cout << "wrote " << manifest["files"].size() << " scene files to " << dir.string() << "\n";
  return 0;
}

int train_cmd(const Options& o) {
  const auto cfg = load(o);
  const fs::path dir = out_dir(o);
  const auto t0 = std::chrono::steady_clock::now();
  const auto data = fh::build_dataset(cfg, false);
  ft::Model model(cfg.model, sim::derive_seed(cfg.seed, 5));
  ft::TrainConfig tc = cfg.training.train;
  tc.seed = sim::derive_seed(cfg.seed, 6);
  ft::Trainer trainer(model, tc, data);
  std::vector<fh::LossRow> rows;
  for (std::size_t s = 1; s <= tc.steps; ++s) {
    const auto r = trainer.step();
    rows.push_back({s, r.loss, r.lr});
    if (s % 100 == 0 || s == tc.steps) std::cerr << "step " << s << "/" << tc.steps << " L_total=" << r.loss.total << "\n";
  }
  const fs::path ckpt = o.checkpoint.empty() ? dir / "checkpoint.bin" : fs::path(o.checkpoint);
  ft::save_checkpoint(ckpt, model.params(), trainer.optimizer(), trainer.rng(), metadata(cfg).dump());
  fh::write_loss_csv(dir / "loss.csv", rows, fh::artifact_stamp(cfg));
  fh::json meta = metadata(cfg);
  meta["steps"] = tc.steps;
  meta["frames"] = data.frame_count();
  meta["checkpoint"] = ckpt.filename().string();
  meta["effective_config"] = fh::effective_config(cfg);
  fh::write_json(dir / "train_meta.json", meta);
  fh::write_json(dir / "train_timings.json", {{"config_hash", fh::config_hash(cfg)}, {"seed", cfg.seed},
                                             {"train_seconds", seconds_since(t0)}});
  std::cout << "trained " << tc.steps << " steps; checkpoint " << ckpt.string() << "\n";
  return 0;
}

int eval_cmd(const Options& o) {
  const auto cfg = load(o);
  const fs::path dir = out_dir(o);
  const fs::path ckpt = o.checkpoint.empty() ? dir / "checkpoint.bin" : fs::path(o.checkpoint);
  if (!fs::exists(ckpt)) throw fusionq::ConfigError("checkpoint not found: " + ckpt.string());
  ft::Model model(cfg.model, sim::derive_seed(cfg.seed, 5));
  fusionq::nn::AdamState adam;
  fusionq::nn::Rng rng(0);
  const std::string meta = ft::load_checkpoint(ckpt, model.params(), adam, rng);
  if (meta != metadata(cfg).dump())
    std::cerr << "warning: checkpoint was written under a different configuration: " << meta << "\n";
  const auto t0 = std::chrono::steady_clock::now();
  const auto data = fh::build_dataset(cfg, cfg.scene.eval_split == "eval");
  const auto report = fh::evaluate_model(cfg, model, data);
  const fh::json doc = fh::report_json(cfg, report);
  fh::write_json(dir / "report.json", doc);
  fh::write_mse_csv(dir / "mse_layers.csv", report.mse_layers, fh::artifact_stamp(cfg));
  fh::write_json(dir / "timings.json", {{"config_hash", fh::config_hash(cfg)}, {"seed", cfg.seed},
                                       {"eval_seconds", seconds_since(t0)}, {"frames", report.frames}});
  std::cout << "mean AP " << report.ap.mean << " over " << report.frames << " frames\n";
  return 0;
}

int ablate_cmd(const Options& o) {
  const auto cfg = load(o);
  const fs::path dir = out_dir(o);
  const fh::json doc = fh::run_ablation(cfg, &std::cerr);
  fh::write_json(dir / "ablation.json", doc);
  for (const auto& r : doc["rows"])
    std::cout << r["formulation"].get<std::string>() << " cross_attention=" << r["cross_attention"]
              << " history=" << r["history"] << " modality=" << r["modality"].get<std::string>()
              << " mean_ap=" << r["report"]["ap"]["mean"] << "\n";
  return 0;
}

int bench_cmd(const Options& o) {
  const auto cfg = load(o);
  const fs::path dir = out_dir(o);
  sim::SceneConfig sc = cfg.bench.preset == "desk" ? sim::SceneConfig::desk() : sim::SceneConfig::long_range();
  sc.seed = sim::derive_seed(cfg.seed, 7);
  const auto seqs = sim::generate_dataset(sc, cfg.bench.sequences);
  const auto s = fh::bench_sparsity(seqs, cfg.bench.pillar_cell, cfg.bench.half_extent, cfg.bench.dense_cell,
                                    cfg.bench.dense_extent);
  fh::json doc = metadata(cfg);
  doc["preset"] = cfg.bench.preset;
  doc["pillar_cell"] = cfg.bench.pillar_cell;
  doc["dense_cell"] = cfg.bench.dense_cell;
  doc["dense_extent"] = cfg.bench.dense_extent;
  doc["frames"] = s.frames;
  doc["pillar_count_mean"] = s.pillar_count_mean;
  doc["dense_grid_count"] = s.dense_grid_count;
  doc["ratio"] = s.ratio;
  fh::write_json(dir / "sparsity.json", doc);
  std::cout << "pillars/frame " << s.pillar_count_mean << " dense " << s.dense_grid_count << " ratio " << s.ratio
            << "\n";
  return 0;
}

int report_cmd(const Options& o) {
  const fs::path dir = o.out;
  for (const auto& skipped : fh::emit_report(dir)) std::cerr << "skipped " << skipped << "\n";
  std::cout << "summary written to " << (dir / "summary.md").string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fusionq: multi-modal query fusion experiments"};
  app.require_subcommand(1);
  Options o;
  auto add_common = [&](CLI::App* sub, bool checkpoint) {
    sub->add_option("--config", o.config, "experiment config (JSON)");
    sub->add_option("--seed", o.seed, "override the config seed");
    sub->add_option("--out", o.out, "output directory")->capture_default_str();
    if (checkpoint) sub->add_option("--checkpoint", o.checkpoint, "checkpoint path (default <out>/checkpoint.bin)");
  };
  auto* gen = app.add_subcommand("gen-scenes", "write synthetic scene files");
  auto* tr = app.add_subcommand("train", "train a model; writes checkpoint and loss.csv");
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint; writes report.json and mse_layers.csv");
  auto* ab = app.add_subcommand("ablate", "train and evaluate every ablation row; writes ablation.json");
  auto* be = app.add_subcommand("bench-sparsity", "pillar versus dense-grid cell counts");
  auto* re = app.add_subcommand("report", "plots and summary from the artifacts in --out");
  add_common(gen, false);
  add_common(tr, true);
  add_common(ev, true);
  add_common(ab, false);
  add_common(be, false);
  add_common(re, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kConfigError;
  }

  try {
    if (gen->parsed()) return gen_scenes(o);
    if (tr->parsed()) return train_cmd(o);
    if (ev->parsed()) return eval_cmd(o);
    if (ab->parsed()) return ablate_cmd(o);
    if (be->parsed()) return bench_cmd(o);
    if (re->parsed()) return report_cmd(o);
  } catch (const fusionq::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return kConfigError;
}
