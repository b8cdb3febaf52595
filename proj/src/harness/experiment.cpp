#include <fstream>

#include "fusionq/errors.hpp"
#include "fusionq/harness/harness.hpp"

namespace fusionq::harness {

train::Dataset build_dataset(const ExperimentConfig& cfg, bool eval_split) {
  const bool use_eval = eval_split && cfg.scene.eval_split == "eval";
  std::vector<sim::Sequence> seqs;
  if (!use_eval && !cfg.scene.scene_file.empty()) {
    seqs.push_back(sim::load_sequence(cfg.scene.scene_file));
  } else {
    const std::size_t count = use_eval ? cfg.scene.eval_sequences : cfg.scene.train_sequences;
    seqs = sim::generate_dataset(cfg.scene_config(use_eval), count);
  }
  return train::Dataset::build(std::move(seqs), cfg.observation, sim::derive_seed(cfg.seed, use_eval ? 4 : 3));
}

std::vector<LossRow> train_model(const ExperimentConfig& cfg, train::Model& model, const train::Dataset& data,
                                 std::size_t log_every, std::ostream* progress) {
  train::TrainConfig tc = cfg.training.train;
  tc.seed = sim::derive_seed(cfg.seed, 6);
  train::Trainer trainer(model, tc, data);
  std::vector<LossRow> rows;
  const std::size_t every = std::max<std::size_t>(log_every, 1);
  for (std::size_t s = 1; s <= tc.steps; ++s) {
    const auto r = trainer.step();
    if (s % every == 0 || s == 1 || s == tc.steps) rows.push_back({s, r.loss, r.lr});
    if (progress != nullptr && (s % 100 == 0 || s == tc.steps))
      *progress << "step " << s << "/" << tc.steps << " L_total=" << r.loss.total << "\n" << std::flush;
  }
  return rows;
}

std::vector<std::size_t> evidenced_gts(const sim::SceneFrame& frame, const sim::FrameObservation& obs) {
  std::vector<char> flag(frame.gts.size(), 0);
  for (int label : frame.point_labels)
    if (label >= 0 && static_cast<std::size_t>(label) < flag.size()) flag[label] = 1;
  for (const auto& view : obs.detections_2d)
    for (const auto& d : view)
      if (d.gt_index >= 0 && static_cast<std::size_t>(d.gt_index) < flag.size()) flag[d.gt_index] = 1;
  std::vector<std::size_t> out;
  for (std::size_t g = 0; g < flag.size(); ++g)
    if (flag[g]) out.push_back(g);
  return out;
}

EvalReport evaluate_model(const ExperimentConfig& cfg, const train::Model& model, const train::Dataset& data) {
  EvalReport rep;
  std::vector<FrameResult> frames;
  MseAccumulator mse;
  const bool temporal = model.config().history_frames > 0;
  dec::HistoryQueue history(std::max<std::size_t>(model.config().history_frames, 1), model.config().history_top_k);
  double pc = 0.0, img = 0.0, pillars = 0.0, hist = 0.0;
  for (std::size_t s = 0; s < data.sequences.size(); ++s) {
    history.clear();
    for (std::size_t k = 0; k < data.sequences[s].size(); ++k) {
      const auto& frame = data.sequences[s][k];
      const auto& obs = data.observations[s][k];
      const auto fwd = model.forward(frame, obs, cfg.eval.modality, temporal ? &history : nullptr);
      if (cfg.eval.require_evidence) {
        std::vector<sim::GroundTruth> gts;
        for (std::size_t g : evidenced_gts(frame, obs)) gts.push_back(frame.gts[g]);
        frames.push_back({extract_predictions(fwd.out), std::move(gts)});
      } else {
        frames.push_back({extract_predictions(fwd.out), frame.gts});
      }
      // objects no camera detected have no image query to be matched to
      std::vector<sim::GroundTruth> seen;
      std::vector<char> flag(frame.gts.size(), 0);
      for (const auto& view : obs.detections_2d)
        for (const auto& d : view)
          if (d.gt_index >= 0 && static_cast<std::size_t>(d.gt_index) < flag.size()) flag[d.gt_index] = 1;
      for (std::size_t g = 0; g < flag.size(); ++g)
        if (flag[g]) seen.push_back(frame.gts[g]);
      mse.add(fwd.out, seen);
      pc += static_cast<double>(fwd.out.num_pc);
      img += static_cast<double>(fwd.out.num_img);
      if (cfg.eval.modality != train::Modality::kCamera) pillars += static_cast<double>(obs.pillars.size());
      hist += static_cast<double>(fwd.history.size());
      if (temporal) history.push_topk(fwd.out, frame.ego_pose, frame.timestamp);
    }
  }
  rep.frames = frames.size();
  rep.ap = evaluate_center_ap(frames, cfg.eval.thresholds, sim::kNumClasses);
  rep.mse_layers = mse.curve();
  if (rep.frames > 0) {
    const double n = static_cast<double>(rep.frames);
    rep.pc_queries_mean = pc / n;
    rep.img_queries_mean = img / n;
    rep.pillars_mean = pillars / n;
    rep.history_tokens_mean = hist / n;
  }
  return rep;
}

json report_json(const ExperimentConfig& cfg, const EvalReport& report) {
  json per_class = json::object();
  for (std::size_t c = 0; c < report.ap.ap.size(); ++c)
    per_class[sim::class_name(static_cast<int>(c))] = {{"ap", report.ap.ap[c]}, {"gt_count", report.ap.gt_counts[c]}};
  return {{"config_hash", config_hash(cfg)},
          {"seed", cfg.seed},
          {"name", cfg.name},
          {"modality", train::modality_name(cfg.eval.modality)},
          {"frames", report.frames},
          {"ap",
           {{"thresholds", report.ap.thresholds},
            {"per_class", per_class},
            {"mean_per_threshold", report.ap.mean_per_threshold},
            {"mean", report.ap.mean}}},
          {"mse_layers", report.mse_layers},
          {"queries", {{"pc_mean", report.pc_queries_mean}, {"img_mean", report.img_queries_mean},
                       {"history_tokens_mean", report.history_tokens_mean}}},
          {"pillars_mean", report.pillars_mean}};
}

RunResult train_and_evaluate(const ExperimentConfig& cfg, std::ostream* progress) {
  RunResult r;
  const auto train_data = build_dataset(cfg, false);
  train::Model model(cfg.model, sim::derive_seed(cfg.seed, 5));
  r.losses = train_model(cfg, model, train_data, 1, progress);
  if (cfg.scene.eval_split == "train") {
    r.report = evaluate_model(cfg, model, train_data);
  } else {
    r.report = evaluate_model(cfg, model, build_dataset(cfg, true));
  }
  return r;
}

std::vector<AblationRow> ablation_grid(const ExperimentConfig& cfg) {
  std::vector<AblationRow> rows;
  const auto& a = cfg.ablate;
  for (const auto& f : a.formulation)
    for (bool x : a.cross_attention)
      for (std::size_t h : a.history)
        for (const auto& m : a.modality) {
          AblationRow row{f, x, h, m, cfg};
          auto& c = row.config;
          c.model.decoder.uncertainty_aware = f == "distribution";
          c.model.decoder.use_cross_attention = x;
          c.model.history_frames = h;
          if (m != "mix") {
            const auto mod = parse_modality(m);
            c.training.train.modality_mix = {0.0, 0.0, 0.0};
            c.training.train.modality_mix[static_cast<std::size_t>(mod)] = 1.0;
            c.eval.modality = mod;
          } else {
            c.eval.modality = train::Modality::kBoth;
          }
          c.ablate = AblateSection{};
          rows.push_back(std::move(row));
        }
  return rows;
}

json run_ablation(const ExperimentConfig& cfg, std::ostream* progress) {
  json rows = json::array();
  for (const auto& row : ablation_grid(cfg)) {
    if (progress != nullptr)
      *progress << "ablate: formulation=" << row.formulation << " cross_attention=" << row.cross_attention
                << " history=" << row.history << " modality=" << row.modality << "\n"
                << std::flush;
    const auto run = train_and_evaluate(row.config, nullptr);
    rows.push_back({{"formulation", row.formulation},
                    {"cross_attention", row.cross_attention},
                    {"history", row.history},
                    {"modality", row.modality},
                    {"final_loss", run.losses.empty() ? 0.0 : run.losses.back().loss.total},
                    {"report", report_json(row.config, run.report)}});
  }
  return {{"config_hash", config_hash(cfg)}, {"seed", cfg.seed}, {"name", cfg.name}, {"rows", rows}};
}

}  // namespace fusionq::harness
