#pragma once

#include <cstddef>
#include <deque>
#include <span>
#include <vector>

#include "fusionq/geometry/geometry.hpp"
#include "fusionq/numerics/kernels.hpp"
#include "fusionq/query_gen/query_gen.hpp"

namespace fusionq::dec {

struct DecoderConfig {
  std::size_t layers = 6;
  std::size_t width = 64;
  std::size_t heads = 4;
  std::size_t samples = 4;  // K deformable points per query
  std::size_t num_classes = 3;
  std::size_t depth_bins = 16;
  std::size_t feature_channels = 8;
  double feature_stride = 8.0;
  bool use_cross_attention = true;
  // false: image queries keep the fixed anchor u^T s with PE(anchor) and no calibration
  bool uncertainty_aware = true;
  std::size_t sinpos_channels = 16;  // per coordinate
  double temperature = 10000.0;
  double offset_range = 4.0;  // meters, tanh bound on deformable offsets
  double upe_position_scale = 0.02;
  std::size_t history_sinpos_channels = 4;

  void validate() const;
};

/// One camera view as seen by the deformable attention.
struct ImageView {
  const geo::CameraModel* camera = nullptr;
  const nn::Tensor* features = nullptr;  // [H/stride, W/stride, C_f]
};

struct PillarFeatureSet {
  nn::Tensor positions;  // [P, 2] BEV meters
  nn::Tensor contents;   // [P, C]
  std::size_t size() const noexcept { return positions.rows(); }
};

/// History tokens already moved into the current frame.
struct HistoryTokens {
  nn::Var contents;   // [H, C]
  nn::Var encodings;  // [H, C]
  std::size_t skipped_frames = 0;
  std::size_t size() const { return contents.defined() ? contents.rows() : 0; }
};

struct LayerState {
  nn::Var contents;  // [M, C]
  nn::Var anchors;   // [M, 3]
  nn::Var probs;     // [M_img, n_d], empty when there are no image queries
  nn::Var cls;       // [M, classes]
  nn::Var reg;       // [M, 10]
};

struct DecoderOutput {
  std::size_t num_pc = 0;
  std::size_t num_img = 0;
  nn::Var initial_anchors;  // [M, 3]
  std::vector<LayerState> layers;

  std::size_t size() const noexcept { return num_pc + num_img; }
  const LayerState& final_layer() const { return layers.back(); }
};

/// Regression channels.
inline constexpr std::size_t kRegChannels = 10;
enum RegChannel : std::size_t { kX = 0, kY, kZ, kLogW, kLogL, kLogH, kSin, kCos, kVx, kVy };

/// Box decoded from one regression row (sizes exponentiated, yaw from sin/cos).
geo::Box3D decode_box(std::span<const double> reg);
/// Regression target for a box (log sizes, sin/cos of yaw).
std::array<double, kRegChannels> encode_box(const geo::Box3D& box);

// ---------------------------------------------------------------------------
// building blocks

/// Fused deformable sampling: points [M, 3K] world positions, logits [M, K]
/// shared across views. Each point is projected into every view; valid
/// samples (positive depth, inside the image) are bilinearly read from the
/// feature map and weighted by a softmax over the query's valid (view, k)
/// pairs. Queries without valid samples aggregate to zero. Returns [M, C_f].
nn::Var deformable_sample(const nn::Var& points, const nn::Var& logits, std::span<const ImageView> views,
                          double stride);

struct SelfAttentionBlock {
  nn::Attention attn;
  nn::NormParams norm;
  /// LN(c + MHA(c+p, [c+p; history], [c+p; history])).
  nn::Var apply(const nn::Var& contents, const nn::Var& encodings, const HistoryTokens* history) const;
};

struct ImageCrossBlock {
  nn::LinearParams offsets;  // C -> 3K
  nn::LinearParams logits;   // C -> K
  nn::Var value;             // [C_f, C]
  nn::NormParams norm;
  double offset_range = 4.0;
  double stride = 8.0;
  /// LN(c + W * sum_vk A_vk F_v(proj_v(a + da_k))).
  nn::Var apply(const nn::Var& contents, const nn::Var& anchors, std::span<const ImageView> views) const;
};

struct PillarCrossBlock {
  nn::Attention attn;
  nn::NormParams norm;
  /// LN(c + MHA(c+p, c_pil + p_pil, c_pil)); LN(c) without pillars.
  nn::Var apply(const nn::Var& contents, const nn::Var& encodings, const nn::Var& pillar_contents,
                const nn::Var& pillar_encodings) const;
};

struct FeedForwardBlock {
  nn::Mlp mlp;
  nn::NormParams norm;
  nn::Var apply(const nn::Var& contents) const { return norm.apply(nn::add(contents, mlp.forward(contents))); }
};

/// u <- softmax(log max(u, 1e-12) + MLP(c)).
nn::Var calibrate(const nn::Var& probs, const nn::Var& contents, const nn::Mlp& mlp);

struct PositionEncoder {
  nn::Mlp mlp;
  std::size_t channels = 16;
  double temperature = 10000.0;
  /// MLP(SinPos(r)), r: [M, d].
  nn::Var apply(const nn::Var& points) const {
    return mlp.forward(nn::sinpos_rows(points, channels, temperature));
  }
};

struct UncertaintyEncoder {
  nn::Mlp position;  // 3 n_d -> C
  nn::Mlp gate;      // n_d -> C
  nn::Mlp out;       // C -> C
  double position_scale = 0.02;
  /// MLP(MLP(Flat(s)) * sigmoid(MLP(u))); rows of u must sum to one.
  nn::Var apply(const nn::Var& samples, const nn::Var& probs) const;
};

struct OutputHeads {
  nn::Mlp cls;
  nn::Mlp reg;
  /// (MLP_cls(c), MLP_reg(c) + [anchor; 0]).
  std::pair<nn::Var, nn::Var> apply(const nn::Var& contents, const nn::Var& anchors) const;
};

// ---------------------------------------------------------------------------

struct DecoderLayer {
  SelfAttentionBlock self;
  ImageCrossBlock image;
  PillarCrossBlock pillar;
  FeedForwardBlock ffn;
  nn::Mlp calibration;
};

struct DecoderInputs {
  const qgen::PointCloudQuerySet* pc = nullptr;
  const qgen::ImageQuerySet* img = nullptr;
  std::span<const ImageView> views;
  const PillarFeatureSet* pillars = nullptr;
  const HistoryTokens* history = nullptr;
};

class FusionDecoder {
 public:
  FusionDecoder() = default;
  FusionDecoder(nn::ParamStore& store, const DecoderConfig& cfg, nn::Rng& rng);

  DecoderOutput run(const DecoderInputs& in) const;

  const DecoderConfig& config() const noexcept { return cfg_; }
  const PositionEncoder& pe() const noexcept { return pe_; }
  const UncertaintyEncoder& upe() const noexcept { return upe_; }
  const PositionEncoder& pillar_pe() const noexcept { return pillar_pe_; }
  const OutputHeads& heads() const noexcept { return heads_; }
  const std::vector<DecoderLayer>& layers() const noexcept { return layers_; }
  const nn::Mlp& history_mlp() const noexcept { return history_; }

 private:
  DecoderConfig cfg_;
  PositionEncoder pe_;
  UncertaintyEncoder upe_;
  PositionEncoder pillar_pe_;
  OutputHeads heads_;
  nn::Mlp history_;
  std::vector<DecoderLayer> layers_;
};

// ---------------------------------------------------------------------------
// temporal queue

struct HistoryEntry {
  nn::Tensor content;  // [C]
  geo::Vec3 position = geo::Vec3::Zero();
  double score = 0.0;
  geo::Vec2 velocity = geo::Vec2::Zero();
  geo::Mat4 ego_pose = geo::Mat4::Identity();  // ego -> global at push time
  double timestamp = 0.0;
};

class HistoryQueue {
 public:
  explicit HistoryQueue(std::size_t frames = 4, std::size_t top_k = 16) : frames_(frames), top_k_(top_k) {}

  /// Pushes the top-K queries of the final layer by max class probability.
  /// Returns the pushed query indices.
  std::vector<std::size_t> push_topk(const DecoderOutput& out, const geo::Mat4& ego_pose, double timestamp);
  /// Pushes a prepared frame; the oldest frame is evicted beyond capacity.
  void push_frame(std::vector<HistoryEntry> entries);
  void clear() { queue_.clear(); }

  std::size_t size() const noexcept;
  std::size_t frame_count() const noexcept { return queue_.size(); }
  std::size_t capacity() const noexcept { return frames_ * top_k_; }
  std::size_t top_k() const noexcept { return top_k_; }
  /// Frames, newest first.
  const std::deque<std::vector<HistoryEntry>>& frames() const noexcept { return queue_; }

 private:
  std::size_t frames_;
  std::size_t top_k_;
  std::deque<std::vector<HistoryEntry>> queue_;
};

/// Indices of the top-k scores, (score desc, index asc).
std::vector<std::size_t> topk_indices(std::span<const double> scores, std::size_t k);

/// Moves stored queries into the current ego frame at time `now`:
/// position' = P_cur^-1 P_hist r + R_rel v dt, content' = c + MLP(SinPos([dt; rel pose; v'])),
/// encoding = PE(position').
HistoryTokens history_transform(const HistoryQueue& queue, const geo::Mat4& current_pose, double now,
                                const FusionDecoder& decoder);

}  // namespace fusionq::dec
