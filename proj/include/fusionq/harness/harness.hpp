#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "fusionq/training/training.hpp"

namespace fusionq::harness {

using nlohmann::json;

// ---------------------------------------------------------------------------
// metrics

struct Prediction {
  int cls = 0;
  double score = 0.0;
  geo::Vec2 center = geo::Vec2::Zero();  // BEV
};

struct FrameResult {
  std::vector<Prediction> predictions;
  std::vector<sim::GroundTruth> gts;
};

struct ApTable {
  std::vector<double> thresholds;
  std::vector<std::vector<double>> ap;  // [class][threshold]
  std::vector<std::size_t> gt_counts;   // per class
  std::vector<double> mean_per_threshold;
  double mean = 0.0;  // over classes with ground truth and all thresholds
};

/// Score-ranked greedy BEV center-distance matching per class and
/// threshold; AP is the area under the precision envelope (all-point).
ApTable evaluate_center_ap(const std::vector<FrameResult>& frames, const std::vector<double>& thresholds,
                           std::size_t num_classes);

/// AP of one class at one threshold.
double average_precision(const std::vector<FrameResult>& frames, int cls, double threshold);

/// Squared center errors of image-query anchors matched one-to-one to GT
/// centers, one entry per curve point (initial anchors, then every layer).
struct MseAccumulator {
  std::vector<double> sum;
  std::vector<std::size_t> count;
  void add(const dec::DecoderOutput& out, const std::vector<sim::GroundTruth>& gts);
  std::vector<double> curve() const;
};

/// Single-frame curve; empty without image queries.
std::vector<double> per_layer_image_query_mse(const dec::DecoderOutput& out, const std::vector<sim::GroundTruth>& gts);

/// Predictions from the final layer: class = argmax sigmoid, score = its probability.
std::vector<Prediction> extract_predictions(const dec::DecoderOutput& out);

struct SparsityStats {
  double pillar_count_mean = 0.0;
  std::size_t dense_grid_count = 0;
  double ratio = 0.0;
  std::size_t frames = 0;
};

/// ceil(extent_x / cell) * ceil(extent_y / cell), tolerant to round-off in the quotient.
std::size_t dense_grid_count(double extent_x, double extent_y, double cell);
/// Mean pillar count per frame at `pillar_cell` over [-half_extent, half_extent]^2
/// against a dense grid of `dense_cell` over `dense_extent` (full width).
SparsityStats bench_sparsity(const std::vector<sim::Sequence>& sequences, double pillar_cell, double half_extent,
                             double dense_cell, double dense_extent);

// ---------------------------------------------------------------------------
// configuration

struct SceneSection {
  std::string preset = "desk";
  std::size_t train_sequences = 20;
  std::size_t eval_sequences = 5;
  std::size_t frames = 10;
  std::optional<std::size_t> min_objects, max_objects;
  std::optional<double> extent, ego_speed, ego_yaw_rate, speed_scale, points_per_steradian, max_range, dropout;
  std::optional<std::size_t> ground_points;
  std::string eval_split = "eval";  // "eval" or "train"
  std::string scene_file;           // optional JSONL to use instead of generation (train split)
};

struct TrainSection {
  train::TrainConfig train;
};

struct EvalSection {
  std::vector<double> thresholds = {0.5, 1.0, 2.0, 4.0};
  train::Modality modality = train::Modality::kBoth;
  bool require_evidence = true;  // drop GT with no lidar return and no camera detection from AP
};

struct AblateSection {
  std::vector<std::string> formulation = {"distribution"};
  std::vector<bool> cross_attention = {true};
  std::vector<std::size_t> history = {0};
  std::vector<std::string> modality = {"both"};
};

struct BenchSection {
  double pillar_cell = 0.2;
  double half_extent = 204.8;
  double dense_cell = 0.6;
  double dense_extent = 408.0;
  std::size_t sequences = 2;
  std::string preset = "long_range";
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::uint64_t seed = 1;
  SceneSection scene;
  sim::ObservationConfig observation;
  train::ModelConfig model;
  TrainSection training;
  EvalSection eval;
  AblateSection ablate;
  BenchSection bench;
  json source;  // the parsed document, for hashing and echoing

  /// Builds the scene generator config for a split.
  sim::SceneConfig scene_config(bool eval_split) const;
};

/// Parses and validates a JSON config; throws ConfigError.
ExperimentConfig parse_config(const json& doc);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Canonical JSON of the effective configuration (with the seed).
json effective_config(const ExperimentConfig& cfg);
/// FNV-1a 64 of the canonical effective configuration, hex.
std::string config_hash(const ExperimentConfig& cfg);

train::Modality parse_modality(const std::string& s);
/// "config_hash=<hash> seed=<seed>"
std::string artifact_stamp(const ExperimentConfig& cfg);

// ---------------------------------------------------------------------------
// experiments

struct LossRow {
  std::size_t step = 0;
  train::LossBreakdown loss;
  double lr = 0.0;
};

struct EvalReport {
  ApTable ap;
  std::vector<double> mse_layers;
  std::size_t frames = 0;
  double pc_queries_mean = 0.0;
  double img_queries_mean = 0.0;
  double pillars_mean = 0.0;
  double history_tokens_mean = 0.0;
};

train::Dataset build_dataset(const ExperimentConfig& cfg, bool eval_split);

std::vector<LossRow> train_model(const ExperimentConfig& cfg, train::Model& model, const train::Dataset& data,
                                 std::size_t log_every = 1, std::ostream* progress = nullptr);

/// Indices of GT objects with at least one lidar point or one 2D detection.
std::vector<std::size_t> evidenced_gts(const sim::SceneFrame& frame, const sim::FrameObservation& obs);

EvalReport evaluate_model(const ExperimentConfig& cfg, const train::Model& model, const train::Dataset& data);

json report_json(const ExperimentConfig& cfg, const EvalReport& report);

/// Train on the train split and evaluate on the configured split.
struct RunResult {
  std::vector<LossRow> losses;
  EvalReport report;
};
RunResult train_and_evaluate(const ExperimentConfig& cfg, std::ostream* progress = nullptr);

/// Ablation rows over the configured factor levels (exhaustive, unique).
struct AblationRow {
  std::string formulation;
  bool cross_attention = true;
  std::size_t history = 0;
  std::string modality;
  ExperimentConfig config;
};
std::vector<AblationRow> ablation_grid(const ExperimentConfig& cfg);
/// Trains and evaluates every row; the JSON embeds each row's report.
json run_ablation(const ExperimentConfig& cfg, std::ostream* progress = nullptr);

// file outputs
// `stamp` becomes a leading "# ..." line when non-empty.
void write_loss_csv(const std::filesystem::path& path, const std::vector<LossRow>& rows, const std::string& stamp = "");
void write_mse_csv(const std::filesystem::path& path, const std::vector<double>& mse, const std::string& stamp = "");
void write_json(const std::filesystem::path& path, const json& doc);

/// Plots and summary from whatever reports live in `dir`. Returns the list
/// of skipped (missing or unreadable) inputs.
std::vector<std::string> emit_report(const std::filesystem::path& dir);

std::string svg_line_plot(const std::string& title, const std::string& x_label, const std::string& y_label,
                          const std::vector<std::pair<std::string, std::vector<std::pair<double, double>>>>& series);
std::string svg_bar_chart(const std::string& title, const std::vector<std::string>& groups,
                          const std::vector<std::string>& series_names, const std::vector<std::vector<double>>& values);

}  // namespace fusionq::harness
