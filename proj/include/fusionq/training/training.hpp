#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fusionq/decoder/decoder.hpp"
#include "fusionq/numerics/optim.hpp"
#include "fusionq/query_gen/query_gen.hpp"
#include "fusionq/scenesim/scenesim.hpp"

namespace fusionq::train {

// ---------------------------------------------------------------------------
// assignment

struct MatchResult {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (prediction, gt), by prediction index
  std::vector<std::size_t> unmatched;                      // predictions without a gt
};

/// Minimum-cost one-to-one assignment of an [M, G] cost matrix;
/// min(M, G) pairs.
MatchResult hungarian_match(const nn::Tensor& cost);

struct LossWeights {
  double cls = 2.0;
  double out = 1.0;
  double aux = 0.5;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  double iou_threshold = 0.3;
  // also apply the depth CE to every layer's calibrated distribution
  bool aux_all_layers = false;
};

/// cost[i, j] = lambda_cls * focal_cost(i, class_j) + |reg_i - encode(box_j)|_1, with
/// focal_cost = alpha (1-p)^g (-ln p) - (1-alpha) p^g (-ln(1-p)).
nn::Tensor match_cost(const nn::Tensor& cls_logits, const nn::Tensor& reg, std::span<const sim::GroundTruth> gts,
                      const LossWeights& w);

// ---------------------------------------------------------------------------
// loss terms

/// Sigmoid focal loss summed over classes and averaged over predictions.
/// targets[i] is a class index or -1 for background.
nn::Var focal_loss(const nn::Var& logits, std::span<const int> targets, double alpha, double gamma);

/// Mean over matched pairs of the per-pair mean L1 across the 10 channels.
nn::Var box_reg_loss(const nn::Var& reg, std::span<const std::pair<std::size_t, std::size_t>> pairs,
                     std::span<const sim::GroundTruth> gts);

/// Mutual-argmax assignment over the IoU matrix (ties to the lowest index),
/// keeping pairs with IoU > threshold.
std::vector<std::pair<std::size_t, std::size_t>> aux_assign_2d(std::span<const geo::Box2D> predicted,
                                                               std::span<const geo::Box2D> projected,
                                                               double threshold);
/// Same rule on a precomputed [N, G] IoU matrix.
std::vector<std::pair<std::size_t, std::size_t>> aux_assign_iou(const nn::Tensor& iou, double threshold);

/// Mean over assigned rows of -ln max(u[row, nearest_bin(depth)], 1e-12);
/// zero without assignments.
nn::Var aux_depth_loss(const nn::Var& probs, std::span<const std::size_t> rows, std::span<const double> depths,
                       const qgen::DepthBins& bins);

struct LossBreakdown {
  double cls = 0.0;
  double reg = 0.0;
  double aux = 0.0;
  double out = 0.0;
  double total = 0.0;
  LossWeights weights;
};

/// L_out = lambda_cls L_cls + L_reg; L_total = lambda_out L_out + lambda_aux L_aux.
LossBreakdown compose_loss(double cls, double reg, double aux, const LossWeights& w);

// ---------------------------------------------------------------------------
// model

enum class Modality { kCamera = 0, kLidar = 1, kBoth = 2 };
const char* modality_name(Modality m);

/// Categorical draw over [camera, lidar, both].
Modality sample_modality_mix(nn::Rng& rng, std::span<const double> probabilities);

struct ModelConfig {
  dec::DecoderConfig decoder;
  qgen::PcQueryConfig pc;
  qgen::ImgQueryConfig img;
  double depth_min = 1.0;
  double depth_max = 60.0;
  std::size_t history_frames = 0;  // T; 0 disables the temporal queue
  std::size_t history_top_k = 16;

  /// Propagates width/feature settings into the sub-configs and validates.
  void finalize();
};

struct ForwardResult {
  Modality modality = Modality::kBoth;
  qgen::PointCloudQuerySet pc;
  qgen::ImageQuerySet img;
  std::vector<std::size_t> img_detection;  // image query row -> index into the view's 2D detections
  dec::HistoryTokens history;
  dec::DecoderOutput out;
};

class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  ForwardResult forward(const sim::SceneFrame& frame, const sim::FrameObservation& obs, Modality modality,
                        const dec::HistoryQueue* history = nullptr) const;

  const ModelConfig& config() const noexcept { return cfg_; }
  nn::ParamStore& params() noexcept { return store_; }
  const nn::ParamStore& params() const noexcept { return store_; }
  const qgen::DepthBins& depth_bins() const noexcept { return bins_; }
  const dec::FusionDecoder& decoder() const noexcept { return decoder_; }

 private:
  ModelConfig cfg_;
  nn::ParamStore store_;
  qgen::DepthBins bins_;
  qgen::PointCloudQueryGenerator pc_gen_;
  qgen::ImageQueryGenerator img_gen_;
  dec::FusionDecoder decoder_;
};

struct LossResult {
  nn::Var total;
  LossBreakdown breakdown;
  std::vector<MatchResult> matches;  // per layer
};

/// Deep-supervised detection loss over every decoder layer plus the
/// auxiliary depth loss on the generator's initial distributions.
LossResult compute_loss(const ForwardResult& fwd, const sim::SceneFrame& frame, const qgen::DepthBins& bins,
                        const LossWeights& w);

/// Projected GT boxes and GT center depths for one view (absent GTs skipped).
struct ViewTargets {
  std::vector<geo::Box2D> boxes;
  std::vector<double> depths;
  std::vector<std::size_t> gt_index;
};
ViewTargets project_targets(const sim::SceneFrame& frame, std::size_t view);

/// Rescales all gradients so their global L2 norm is at most max_norm;
/// returns the norm before clipping.
double clip_grad_norm(nn::ParamStore& store, double max_norm);

// ---------------------------------------------------------------------------
// training loop

struct TrainConfig {
  std::size_t steps = 1000;
  std::size_t batch = 1;
  double lr = 1e-3;
  double min_lr = 1e-5;
  double weight_decay = 1e-4;
  double max_grad_norm = 5.0;
  std::array<double, 3> modality_mix = {0.0, 0.0, 1.0};
  LossWeights weights;
  std::uint64_t seed = 1;
};

/// Observed sequences: frames plus the (fixed) oracle observations.
struct Dataset {
  std::vector<sim::Sequence> sequences;
  std::vector<std::vector<sim::FrameObservation>> observations;

  std::size_t frame_count() const;
  static Dataset build(std::vector<sim::Sequence> sequences, const sim::ObservationConfig& obs, std::uint64_t seed);
};

struct TrainStepResult {
  LossBreakdown loss;
  double grad_norm = 0.0;
  double lr = 0.0;
};

/// Streams frames in temporal order within each sequence; sequence order
/// is reshuffled every epoch. The history queue (when enabled) is reset at
/// every sequence start and fed the detached final-layer queries.
class Trainer {
 public:
  Trainer(Model& model, const TrainConfig& cfg, const Dataset& data);

  TrainStepResult step();
  std::size_t steps_done() const noexcept { return static_cast<std::size_t>(adam_.step); }

  nn::AdamState& optimizer() noexcept { return adam_; }
  nn::Rng& rng() noexcept { return rng_; }
  const TrainConfig& config() const noexcept { return cfg_; }

 private:
  std::pair<std::size_t, std::size_t> next_frame();

  Model& model_;
  TrainConfig cfg_;
  const Dataset& data_;
  nn::AdamState adam_;
  nn::Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t order_pos_ = 0;
  std::size_t frame_pos_ = 0;
  std::size_t epoch_ = 0;
  dec::HistoryQueue history_;
};

/// Single optimizer step on an explicit batch; the history queue is not used.
TrainStepResult train_step(Model& model, nn::AdamState& state,
                           std::span<const std::pair<const sim::SceneFrame*, const sim::FrameObservation*>> batch,
                           std::span<const Modality> modalities, const TrainConfig& cfg, double lr);

// ---------------------------------------------------------------------------
// checkpoints

/// `metadata` is an opaque string stored with the state (config hash, seed).
void save_checkpoint(const std::filesystem::path& path, const nn::ParamStore& params, const nn::AdamState& adam,
                     const nn::Rng& rng, const std::string& metadata = "");
/// Restores into a store with the same parameter names and shapes; returns the metadata.
std::string load_checkpoint(const std::filesystem::path& path, nn::ParamStore& params, nn::AdamState& adam,
                            nn::Rng& rng);

}  // namespace fusionq::train
