#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "fusionq/geometry/geometry.hpp"
#include "fusionq/numerics/kernels.hpp"

namespace fusionq::qgen {

/// Depth values sampled uniformly in [d_min, d_max], both endpoints included.
struct DepthBins {
  double d_min = 1.0;
  double d_max = 60.0;
  std::vector<double> values;

  std::size_t count() const noexcept { return values.size(); }
  /// Index of the bin closest to `depth`; out-of-range depths clamp.
  std::size_t nearest(double depth) const;
};

DepthBins make_depth_bins(double d_min, double d_max, std::size_t n);

struct ScoredBox3D {
  geo::Box3D box;
  double score = 1.0;
};

struct ScoredBox2D {
  geo::Box2D box;
  double score = 1.0;
};

/// Indices of the top `cap` entries ordered by (score desc, index asc).
std::vector<std::size_t> top_k_by_score(std::span<const double> scores, std::size_t cap);

// ---------------------------------------------------------------------------
// point-cloud queries

struct PcQueryConfig {
  std::size_t width = 64;
  std::size_t sinpos_channels = 16;  // per box scalar
  double temperature = 10000.0;
  std::size_t cap = 200;
};

struct PointCloudQuerySet {
  nn::Var contents;                       // [M, C]
  nn::Tensor positions;                   // [M, 3] box centers
  nn::Tensor boxes;                       // [M, 7] (x, y, z, w, l, h, rot)
  nn::Tensor appearance;                  // [M, C]
  std::vector<std::size_t> source_index;  // row -> input detection

  std::size_t size() const noexcept { return source_index.size(); }
};

/// c = MLP_outer(o + MLP_inner(SinPos(b))), r = box centers.
class PointCloudQueryGenerator {
 public:
  PointCloudQueryGenerator() = default;
  PointCloudQueryGenerator(nn::ParamStore& store, const PcQueryConfig& cfg, nn::Rng& rng);
  PointCloudQueryGenerator(const PcQueryConfig& cfg, nn::Mlp inner, nn::Mlp outer);

  PointCloudQuerySet generate(std::span<const ScoredBox3D> detections, const nn::Tensor& appearance) const;
  const PcQueryConfig& config() const noexcept { return cfg_; }

 private:
  PcQueryConfig cfg_;
  nn::Mlp inner_;
  nn::Mlp outer_;
};

/// Seven box scalars in the order used by the encoder.
std::array<double, 7> box_scalars(const geo::Box3D& box);

// ---------------------------------------------------------------------------
// image queries

struct ImgQueryConfig {
  std::size_t width = 64;
  std::size_t feature_channels = 8;
  geo::RoiSize roi{7, 7};
  std::size_t cap_per_view = 60;
  double intrinsics_scale = 1000.0;
  double feature_stride = 8.0;
};

/// Per-view inputs of the image query generator.
struct ViewDetections {
  const geo::CameraModel* camera = nullptr;
  const nn::Tensor* features = nullptr;  // [H/stride, W/stride, C_f]
  std::vector<ScoredBox2D> detections;
};

struct ImageQuerySet {
  nn::Var contents;  // [M, C]
  nn::Var samples;   // [M, 3*n_d] world positions s^img
  nn::Var probs;     // [M, n_d]
  nn::Var pixels;    // [M, 2*n_d] 2D sampling positions in image pixels
  std::vector<geo::Box2D> boxes;
  std::vector<std::size_t> views;
  std::vector<std::size_t> source_index;  // row -> detection index inside its view
  std::vector<geo::Mat4> intrinsics;      // equivalent intrinsics per row

  std::size_t size() const noexcept { return boxes.size(); }
};

/// Number of flattened intrinsic entries appended to the pooled RoI feature.
inline constexpr std::size_t kIntrinsicEntries = 8;

/// Informative entries of an equivalent intrinsic matrix, divided by
/// `scale`: fx', fy', cx', cy', full image extent in RoI units (x, y), and
/// the RoI grid size (x, y).
std::array<double, kIntrinsicEntries> flatten_intrinsics(const geo::Mat4& k, const geo::CameraModel& cam,
                                                         const geo::Box2D& box, geo::RoiSize roi, double scale);

class ImageQueryGenerator {
 public:
  ImageQueryGenerator() = default;
  ImageQueryGenerator(nn::ParamStore& store, const ImgQueryConfig& cfg, std::size_t depth_bins, nn::Rng& rng);
  ImageQueryGenerator(const ImgQueryConfig& cfg, nn::LinearParams conv, nn::Mlp content, nn::Mlp head);

  ImageQuerySet generate(std::span<const ViewDetections> views, const DepthBins& bins) const;
  const ImgQueryConfig& config() const noexcept { return cfg_; }

 private:
  ImgQueryConfig cfg_;
  nn::LinearParams conv_;
  nn::Mlp content_;
  nn::Mlp head_;
};

/// Differentiable unprojection of per-bin pixels: row i, bin j maps pixel
/// (pixels[i, 2j], pixels[i, 2j+1]) at depth depths[j] through cameras[i].
nn::Var unproject_pixels(const nn::Var& pixels, std::span<const geo::CameraModel* const> cameras,
                         std::span<const double> depths);

/// Probability-weighted mean of the sampling positions.
geo::Vec3 anchor_from_distribution(std::span<const double> samples, std::span<const double> probs);

}  // namespace fusionq::qgen
