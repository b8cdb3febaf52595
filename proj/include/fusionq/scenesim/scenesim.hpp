#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "fusionq/decoder/decoder.hpp"
#include "fusionq/geometry/geometry.hpp"
#include "fusionq/query_gen/query_gen.hpp"

namespace fusionq::sim {

using Rng = std::mt19937_64;

inline constexpr std::size_t kNumClasses = 3;
const char* class_name(int cls);

struct ClassPrior {
  geo::Vec3 size;             // mean (w, l, h)
  double size_jitter = 0.1;   // relative, uniform
  double max_speed = 10.0;    // m/s
};
ClassPrior class_prior(int cls);

struct CameraSpec {
  double fx = 228.0, fy = 228.0, ox = 160.0, oy = 96.0;
  int width = 320, height = 192;
  geo::Mat4 ego_to_camera = geo::Mat4::Identity();
};

/// `count` cameras evenly spaced in yaw, mounted at `height` meters.
std::vector<CameraSpec> ring_rig(std::size_t count, double fx, int width, int height, double mount_height);

struct LidarSpec {
  double max_range = 70.0;
  double points_per_steradian = 7000.0;
  double dropout = 0.05;
  double mount_height = 1.8;
  std::size_t ground_points = 1500;
  std::size_t poles = 6;
  std::size_t points_per_pole = 25;
};

struct SceneConfig {
  std::size_t min_objects = 6;
  std::size_t max_objects = 10;
  double extent = 54.4;  // half-size of the square object area, ego frame
  double min_ego_distance = 4.0;
  double min_speed = 0.0;
  double speed_scale = 1.0;  // fraction of each class's max speed
  std::vector<double> class_weights = {0.6, 0.15, 0.25};
  std::vector<CameraSpec> rig;
  LidarSpec lidar;
  std::size_t frames = 10;
  double dt = 0.5;
  double ego_speed = 5.0;
  double ego_yaw_rate = 0.0;
  std::uint64_t seed = 1;

  void validate() const;
  static SceneConfig desk();
  static SceneConfig long_range();
};

struct GroundTruth {
  geo::Box3D box;  // ego frame; velocity in the ego frame axes
  int cls = 0;
  int track_id = 0;
};

struct SceneFrame {
  std::size_t index = 0;
  double timestamp = 0.0;
  geo::Mat4 ego_pose = geo::Mat4::Identity();  // ego -> global
  std::vector<GroundTruth> gts;
  std::vector<geo::Vec3> points;  // ego frame
  std::vector<int> point_labels;  // gt index, -1 ground, -2 clutter
  std::vector<geo::CameraModel> cameras;
};

using Sequence = std::vector<SceneFrame>;

/// Seed for a child stream (sequence, frame, purpose) of a parent seed.
std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t a, std::uint64_t b = 0);

Sequence generate_sequence(const SceneConfig& cfg);
/// `count` sequences with seeds derived from cfg.seed.
std::vector<Sequence> generate_dataset(const SceneConfig& cfg, std::size_t count);

struct LidarScan {
  std::vector<geo::Vec3> points;
  std::vector<int> labels;
};

/// Surface points on the faces of each box that face the sensor, Poisson
/// count per face proportional to its solid angle, plus ground and pole
/// clutter; dropout and range cut applied last.
LidarScan simulate_lidar(const std::vector<GroundTruth>& gts, const LidarSpec& spec, Rng& rng);

// ---------------------------------------------------------------------------
// oracle experts

struct OracleConfig {
  double box2d_jitter = 1.5;  // px, per corner
  double score2d_noise = 0.05;
  double min_box_size = 4.0;  // px
  double fn_rate_2d = 0.0;
  double center_jitter = 0.15;  // m
  double size_jitter = 0.05;    // relative
  double yaw_jitter = 0.05;     // rad
  std::size_t min_points = 5;
  double fn_rate_3d = 0.02;
  std::size_t feature_dim = 64;
  double feature_noise = 0.3;
  double map_noise = 0.05;
  double feature_stride = 8.0;
  std::uint64_t embedding_seed = 7;
  // lidar point features also carry (x, y, z, range) times this in their first channels; 0 turns it off
  double point_coord_scale = 0.02;

  void validate() const;
};

struct Detection2D {
  geo::Box2D box;
  double score = 1.0;
  int gt_index = -1;
};

struct Detections3D {
  std::vector<qgen::ScoredBox3D> boxes;
  nn::Tensor appearance;  // [N, C]
  std::vector<int> gt_index;
};

std::vector<Detection2D> oracle_detect_2d(const SceneFrame& frame, std::size_t view, const OracleConfig& cfg,
                                          Rng& rng);
Detections3D oracle_detect_3d(const SceneFrame& frame, const OracleConfig& cfg, Rng& rng);

/// Fixed class embeddings (rows 0..2) and the clutter embedding (row 3).
nn::Tensor class_embeddings(const OracleConfig& cfg);

/// Stride-8 feature map [ceil(H/s), ceil(W/s), 8]: objectness, three class
/// channels, objectness-weighted normalized offsets to the silhouette
/// center (x, y), a constant channel and a noise channel.
nn::Tensor render_feature_map(const SceneFrame& frame, std::size_t view, const OracleConfig& cfg, Rng& rng);
inline constexpr std::size_t kFeatureChannels = 8;

/// Per-point features: class embedding (or clutter embedding) plus noise.
nn::Tensor point_features(const SceneFrame& frame, const OracleConfig& cfg, Rng& rng);

/// Averages point features per BEV cell inside [-extent, extent]^2; cells
/// are keyed by floor(x / cell). Points below `min_height` are ignored.
dec::PillarFeatureSet pillarize(const std::vector<geo::Vec3>& points, const nn::Tensor& features, double cell,
                                double extent, double min_height = -1e9);

/// Everything the model sees of one frame.
struct FrameObservation {
  std::vector<nn::Tensor> feature_maps;
  std::vector<std::vector<Detection2D>> detections_2d;
  Detections3D detections_3d;
  dec::PillarFeatureSet pillars;
};

struct ObservationConfig {
  OracleConfig oracle;
  double pillar_cell = 1.0;
  double pillar_extent = 54.4;
  double ground_height = 0.25;  // points below are dropped before pillarization
};

FrameObservation observe(const SceneFrame& frame, const ObservationConfig& cfg, std::uint64_t seed);

// ---------------------------------------------------------------------------
// scene files

void save_sequence(const Sequence& seq, const std::filesystem::path& path);
Sequence load_sequence(const std::filesystem::path& path);

}  // namespace fusionq::sim
