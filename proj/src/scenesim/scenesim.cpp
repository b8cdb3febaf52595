#include "fusionq/scenesim/scenesim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "json.hpp"

#include "fusionq/errors.hpp"

namespace fusionq::sim {

namespace {

constexpr double kPi = std::numbers::pi;

double gauss(Rng& rng) { return std::normal_distribution<double>(0.0, 1.0)(rng); }
double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

geo::Mat4 ego_pose_at(const SceneConfig& cfg, double t) {
  if (std::fabs(cfg.ego_yaw_rate) < 1e-12) return geo::make_pose(cfg.ego_speed * t, 0.0, 0.0, 0.0);
  const double w = cfg.ego_yaw_rate;
  const double r = cfg.ego_speed / w;
  return geo::make_pose(r * std::sin(w * t), r * (1.0 - std::cos(w * t)), 0.0, w * t);
}

double yaw_of(const geo::Mat4& pose) { return std::atan2(pose(1, 0), pose(0, 0)); }

struct Track {
  int cls = 0;
  geo::Vec3 size;
  double yaw = 0.0;
  geo::Vec2 start;  // global BEV
  geo::Vec2 velocity;
};

geo::Vec2 track_position(const Track& tr, double t) { return tr.start + tr.velocity * t; }

double footprint_radius(const geo::Vec3& size) { return 0.5 * std::hypot(size.x(), size.y()); }

}  // namespace

const char* class_name(int cls) {
  switch (cls) {
    case 0:
      return "car";
    case 1:
      return "truck";
    case 2:
      return "pedestrian";
    default:
      throw DomainError("unknown class id " + std::to_string(cls));
  }
}

static int class_from_name(const std::string& name) {
  for (int c = 0; c < static_cast<int>(kNumClasses); ++c)
    if (name == class_name(c)) return c;
  throw ParseError("unknown class '" + name + "'");
}

ClassPrior class_prior(int cls) {
  switch (cls) {
    case 0:
      return {{1.9, 4.5, 1.6}, 0.1, 10.0};
    case 1:
      return {{2.5, 8.0, 3.2}, 0.15, 8.0};
    case 2:
      return {{0.6, 0.6, 1.75}, 0.1, 1.5};
    default:
      throw DomainError("unknown class id " + std::to_string(cls));
  }
}

std::vector<CameraSpec> ring_rig(std::size_t count, double fx, int width, int height, double mount_height) {
  std::vector<CameraSpec> rig;
  for (std::size_t i = 0; i < count; ++i) {
    const double yaw = 2.0 * kPi * static_cast<double>(i) / static_cast<double>(count);
    const geo::Vec3 forward(std::cos(yaw), std::sin(yaw), 0.0);
    const geo::Vec3 right(std::sin(yaw), -std::cos(yaw), 0.0);
    const geo::Vec3 down(0.0, 0.0, -1.0);
    geo::Mat4 cam_to_ego = geo::Mat4::Identity();
    cam_to_ego.block<3, 1>(0, 0) = right;
    cam_to_ego.block<3, 1>(0, 1) = down;
    cam_to_ego.block<3, 1>(0, 2) = forward;
    cam_to_ego(2, 3) = mount_height;
    CameraSpec spec;
    spec.fx = spec.fy = fx;
    spec.width = width;
    spec.height = height;
    spec.ox = 0.5 * width;
    spec.oy = 0.5 * height;
    spec.ego_to_camera = geo::rigid_inverse(cam_to_ego);
    rig.push_back(spec);
  }
  return rig;
}

void SceneConfig::validate() const {
  if (!(extent > 0.0)) throw ConfigError("scene extent must be positive");
  if (!(dt > 0.0)) throw ConfigError("frame period must be positive");
  if (min_objects > max_objects) throw ConfigError("object count range is empty");
  if (min_ego_distance < 0.0 || min_ego_distance >= extent) throw ConfigError("bad min ego distance");
  if (min_speed < 0.0 || speed_scale < 0.0) throw ConfigError("speeds must be non-negative");
  if (class_weights.size() != kNumClasses) throw ConfigError("class_weights needs one entry per class");
  double total = 0.0;
  for (double w : class_weights) {
    if (!(w >= 0.0)) throw ConfigError("class weights must be non-negative");
    total += w;
  }
  if (!(total > 0.0)) throw ConfigError("class weights sum to zero");
  if (rig.empty()) throw ConfigError("camera rig is empty");
  for (const auto& c : rig)
    if (c.width <= 0 || c.height <= 0 || !(c.fx > 0.0) || !(c.fy > 0.0)) throw ConfigError("bad camera spec");
  if (!(lidar.max_range > 0.0) || lidar.points_per_steradian < 0.0 || lidar.dropout < 0.0 || lidar.dropout >= 1.0)
    throw ConfigError("bad lidar spec");
  if (frames == 0) throw ConfigError("sequence needs at least one frame");
}

SceneConfig SceneConfig::desk() {
  SceneConfig cfg;
  cfg.extent = 54.4;
  cfg.min_objects = 6;
  cfg.max_objects = 10;
  cfg.rig = ring_rig(6, 228.0, 320, 192, 1.6);
  cfg.lidar.max_range = 70.0;
  return cfg;
}

SceneConfig SceneConfig::long_range() {
  SceneConfig cfg;
  cfg.extent = 204.8;
  cfg.min_objects = 12;
  cfg.max_objects = 20;
  cfg.rig = ring_rig(8, 640.0, 640, 320, 1.6);
  cfg.lidar.max_range = 200.0;
  cfg.lidar.ground_points = 4000;
  cfg.lidar.poles = 20;
  cfg.ego_speed = 10.0;
  return cfg;
}

std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t a, std::uint64_t b) {
  return splitmix(splitmix(splitmix(parent) ^ (a + 0x632BE59BD9B4E019ULL)) ^ (b + 0x8CB92BA72F3D8DD7ULL));
}

Sequence generate_sequence(const SceneConfig& cfg) {
  cfg.validate();
  Rng rng(derive_seed(cfg.seed, 0));
  const std::size_t count =
      std::uniform_int_distribution<std::size_t>(cfg.min_objects, cfg.max_objects)(rng);
  std::discrete_distribution<int> pick_class(cfg.class_weights.begin(), cfg.class_weights.end());

  std::vector<geo::Mat4> poses;
  for (std::size_t k = 0; k < cfg.frames; ++k) poses.push_back(ego_pose_at(cfg, k * cfg.dt));
  std::vector<geo::Mat4> inv_poses;
  for (const auto& p : poses) inv_poses.push_back(geo::rigid_inverse(p));

  std::vector<Track> tracks;
  for (std::size_t n = 0; n < count; ++n) {
    bool placed = false;
    for (int attempt = 0; attempt < 2000 && !placed; ++attempt) {
      Track tr;
      tr.cls = pick_class(rng);
      const ClassPrior prior = class_prior(tr.cls);
      for (int d = 0; d < 3; ++d) tr.size[d] = prior.size[d] * (1.0 + uniform(rng, -prior.size_jitter, prior.size_jitter));
      tr.yaw = uniform(rng, -kPi, kPi);
      const double hi = std::max(cfg.min_speed, cfg.speed_scale * prior.max_speed);
      const double speed = uniform(rng, cfg.min_speed, hi);
      tr.velocity = {speed * std::cos(tr.yaw), speed * std::sin(tr.yaw)};
      const double r = footprint_radius(tr.size);
      const geo::Vec2 local(uniform(rng, -cfg.extent + r, cfg.extent - r), uniform(rng, -cfg.extent + r, cfg.extent - r));
      tr.start = geo::transform_point(poses[0], {local.x(), local.y(), 0.0}).head<2>();

      bool ok = true;
      for (std::size_t k = 0; k < cfg.frames && ok; ++k) {
        const double t = k * cfg.dt;
        const geo::Vec2 g = track_position(tr, t);
        const geo::Vec3 e = geo::transform_point(inv_poses[k], {g.x(), g.y(), 0.0});
        if (std::fabs(e.x()) > cfg.extent - r || std::fabs(e.y()) > cfg.extent - r) ok = false;
        if (e.head<2>().norm() < cfg.min_ego_distance + r) ok = false;
        for (const auto& other : tracks) {
          if ((track_position(other, t) - g).norm() < r + footprint_radius(other.size) + 0.5) ok = false;
        }
      }
      if (ok) {
        tracks.push_back(tr);
        placed = true;
      }
    }
    if (!placed) throw ConfigError("could not place " + std::to_string(count) + " objects in the scene extent");
  }

  std::vector<CameraSpec> rig = cfg.rig;
  std::vector<geo::CameraModel> cameras;
  for (const auto& c : rig) cameras.emplace_back(c.fx, c.fy, c.ox, c.oy, c.ego_to_camera, c.width, c.height);

  Sequence seq;
  for (std::size_t k = 0; k < cfg.frames; ++k) {
    SceneFrame frame;
    frame.index = k;
    frame.timestamp = k * cfg.dt;
    frame.ego_pose = poses[k];
    frame.cameras = cameras;
    const double ego_yaw = yaw_of(poses[k]);
    const geo::Mat3 rot_t = poses[k].block<3, 3>(0, 0).transpose();
    for (std::size_t n = 0; n < tracks.size(); ++n) {
      const Track& tr = tracks[n];
      const geo::Vec2 g = track_position(tr, frame.timestamp);
      GroundTruth gt;
      gt.cls = tr.cls;
      gt.track_id = static_cast<int>(n);
      gt.box.center = geo::transform_point(inv_poses[k], {g.x(), g.y(), 0.5 * tr.size.z()});
      gt.box.size = tr.size;
      gt.box.yaw = geo::wrap_angle(tr.yaw - ego_yaw);
      gt.box.velocity = (rot_t * geo::Vec3(tr.velocity.x(), tr.velocity.y(), 0.0)).head<2>();
      frame.gts.push_back(gt);
    }
    Rng lidar_rng(derive_seed(cfg.seed, 1, k));
    LidarScan scan = simulate_lidar(frame.gts, cfg.lidar, lidar_rng);
    frame.points = std::move(scan.points);
    frame.point_labels = std::move(scan.labels);
    seq.push_back(std::move(frame));
  }
  return seq;
}

std::vector<Sequence> generate_dataset(const SceneConfig& cfg, std::size_t count) {
  std::vector<Sequence> out;
  for (std::size_t s = 0; s < count; ++s) {
    SceneConfig c = cfg;
    c.seed = derive_seed(cfg.seed, 100, s);
    out.push_back(generate_sequence(c));
  }
  return out;
}

LidarScan simulate_lidar(const std::vector<GroundTruth>& gts, const LidarSpec& spec, Rng& rng) {
  const geo::Vec3 sensor(0.0, 0.0, spec.mount_height);
  LidarScan raw;

  for (std::size_t i = 0; i < gts.size(); ++i) {
    const geo::Box3D& b = gts[i].box;
    const double c = std::cos(b.yaw);
    const double s = std::sin(b.yaw);
    const geo::Vec3 ax(c, s, 0.0);    // along length
    const geo::Vec3 ay(-s, c, 0.0);   // along width
    const geo::Vec3 az(0.0, 0.0, 1.0);
    const geo::Vec3 half(0.5 * b.size.y(), 0.5 * b.size.x(), 0.5 * b.size.z());
    // faces: +-x, +-y, top; the bottom rests on the ground
    struct Face {
      geo::Vec3 normal, u, v;
      double hn, hu, hv;
    };
    const Face faces[5] = {{ax, ay, az, half.x(), half.y(), half.z()},   {-ax, ay, az, half.x(), half.y(), half.z()},
                           {ay, ax, az, half.y(), half.x(), half.z()},   {-ay, ax, az, half.y(), half.x(), half.z()},
                           {az, ax, ay, half.z(), half.x(), half.y()}};
    for (const Face& f : faces) {
      const geo::Vec3 center = b.center + f.normal * f.hn;
      const geo::Vec3 to_sensor = sensor - center;
      const double dist = to_sensor.norm();
      const double cosine = f.normal.dot(to_sensor) / dist;
      if (cosine <= 0.0) continue;
      const double solid_angle = 4.0 * f.hu * f.hv * cosine / (dist * dist);
      const double expected = spec.points_per_steradian * solid_angle;
      const int n = std::poisson_distribution<int>(expected)(rng);
      for (int k = 0; k < n; ++k) {
        const double a = uniform(rng, -f.hu, f.hu);
        const double bb = uniform(rng, -f.hv, f.hv);
        raw.points.push_back(center + f.u * a + f.v * bb);
        raw.labels.push_back(static_cast<int>(i));
      }
    }
  }

  // ground returns thin out with range: log-uniform radius
  const double r_min = 2.0;
  for (std::size_t k = 0; k < spec.ground_points; ++k) {
    const double r = r_min * std::pow(spec.max_range / r_min, uniform(rng, 0.0, 1.0));
    const double phi = uniform(rng, -kPi, kPi);
    raw.points.emplace_back(r * std::cos(phi), r * std::sin(phi), 0.02 * std::fabs(gauss(rng)));
    raw.labels.push_back(-1);
  }
  for (std::size_t p = 0; p < spec.poles; ++p) {
    const double r = uniform(rng, 5.0, spec.max_range);
    const double phi = uniform(rng, -kPi, kPi);
    const double px = r * std::cos(phi);
    const double py = r * std::sin(phi);
    for (std::size_t k = 0; k < spec.points_per_pole; ++k) {
      raw.points.emplace_back(px + 0.05 * gauss(rng), py + 0.05 * gauss(rng), uniform(rng, 0.0, 3.0));
      raw.labels.push_back(-2);
    }
  }

  LidarScan out;
  for (std::size_t k = 0; k < raw.points.size(); ++k) {
    const bool dropped = uniform(rng, 0.0, 1.0) < spec.dropout;
    if (dropped || (raw.points[k] - sensor).norm() > spec.max_range) continue;
    out.points.push_back(raw.points[k]);
    out.labels.push_back(raw.labels[k]);
  }
  return out;
}

// ---------------------------------------------------------------------------

void OracleConfig::validate() const {
  if (box2d_jitter < 0.0 || score2d_noise < 0.0 || center_jitter < 0.0 || size_jitter < 0.0 || yaw_jitter < 0.0 ||
      feature_noise < 0.0 || map_noise < 0.0 || min_box_size < 0.0)
    throw ConfigError("oracle noise levels must be non-negative");
  if (min_points < 1) throw ConfigError("min_points must be at least 1");
  if (fn_rate_2d < 0.0 || fn_rate_2d > 1.0 || fn_rate_3d < 0.0 || fn_rate_3d > 1.0)
    throw ConfigError("false-negative rates must lie in [0, 1]");
  if (feature_dim == 0) throw ConfigError("feature_dim must be positive");
  if (!(feature_stride > 0.0)) throw ConfigError("feature_stride must be positive");
}

std::vector<Detection2D> oracle_detect_2d(const SceneFrame& frame, std::size_t view, const OracleConfig& cfg,
                                          Rng& rng) {
  const geo::CameraModel& cam = frame.cameras.at(view);
  const geo::Box2D image = cam.image_box();
  std::vector<Detection2D> out;
  for (std::size_t i = 0; i < frame.gts.size(); ++i) {
    const auto proj = geo::project_box3d_to_box2d(cam, frame.gts[i].box);
    if (!proj || proj->width() < cfg.min_box_size || proj->height() < cfg.min_box_size) continue;
    if (uniform(rng, 0.0, 1.0) < cfg.fn_rate_2d) continue;
    geo::Box2D b = *proj;
    b.x_min += cfg.box2d_jitter * gauss(rng);
    b.y_min += cfg.box2d_jitter * gauss(rng);
    b.x_max += cfg.box2d_jitter * gauss(rng);
    b.y_max += cfg.box2d_jitter * gauss(rng);
    b.x_min = std::clamp(b.x_min, image.x_min, image.x_max);
    b.x_max = std::clamp(b.x_max, image.x_min, image.x_max);
    b.y_min = std::clamp(b.y_min, image.y_min, image.y_max);
    b.y_max = std::clamp(b.y_max, image.y_min, image.y_max);
    if (!b.valid()) continue;
    const double score = std::clamp(0.9 + cfg.score2d_noise * gauss(rng), 0.05, 1.0);
    out.push_back({b, score, static_cast<int>(i)});
  }
  return out;
}

nn::Tensor class_embeddings(const OracleConfig& cfg) {
  Rng rng(cfg.embedding_seed);
  nn::Tensor emb({kNumClasses + 1, cfg.feature_dim});
  for (double& v : emb.values()) v = gauss(rng);
  return emb;
}

Detections3D oracle_detect_3d(const SceneFrame& frame, const OracleConfig& cfg, Rng& rng) {
  std::vector<std::size_t> hits(frame.gts.size(), 0);
  for (int label : frame.point_labels)
    if (label >= 0 && static_cast<std::size_t>(label) < hits.size()) ++hits[label];

  const nn::Tensor emb = class_embeddings(cfg);
  Detections3D out;
  std::vector<double> feats;
  for (std::size_t i = 0; i < frame.gts.size(); ++i) {
    if (hits[i] < cfg.min_points) continue;
    if (uniform(rng, 0.0, 1.0) < cfg.fn_rate_3d) continue;
    const GroundTruth& gt = frame.gts[i];
    // sparse returns localize worse
    const double spread = 1.0 + 10.0 / static_cast<double>(hits[i]);
    geo::Box3D b = gt.box;
    for (int d = 0; d < 3; ++d) b.center[d] += cfg.center_jitter * spread * gauss(rng);
    for (int d = 0; d < 3; ++d) b.size[d] *= std::max(0.2, 1.0 + cfg.size_jitter * gauss(rng));
    b.yaw = geo::wrap_angle(b.yaw + cfg.yaw_jitter * gauss(rng));
    const double score =
        std::clamp(1.0 - std::exp(-static_cast<double>(hits[i]) / 15.0) + 0.05 * gauss(rng), 0.05, 1.0);
    out.boxes.push_back({b, score});
    out.gt_index.push_back(static_cast<int>(i));
    for (std::size_t c = 0; c < cfg.feature_dim; ++c) feats.push_back(emb(gt.cls, c) + cfg.feature_noise * gauss(rng));
  }
  out.appearance = nn::Tensor({out.boxes.size(), cfg.feature_dim}, std::move(feats));
  return out;
}

nn::Tensor render_feature_map(const SceneFrame& frame, std::size_t view, const OracleConfig& cfg, Rng& rng) {
  const geo::CameraModel& cam = frame.cameras.at(view);
  const double s = cfg.feature_stride;
  const auto rows = static_cast<std::size_t>(std::ceil(cam.height() / s));
  const auto cols = static_cast<std::size_t>(std::ceil(cam.width() / s));

  struct Silhouette {
    geo::Box2D box;
    double depth;
    int cls;
  };
  std::vector<Silhouette> sil;
  for (const auto& gt : frame.gts) {
    const auto proj = geo::project_box3d_to_box2d(cam, gt.box);
    if (!proj) continue;
    const auto pc = geo::project_world_to_pixel(cam, gt.box.center);
    sil.push_back({*proj, pc.valid ? pc.depth : 1e9, gt.cls});
  }

  nn::Tensor map({rows, cols, kFeatureChannels});
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      const double px = (j + 0.5) * s;
      const double py = (i + 0.5) * s;
      double best = 0.0, best_depth = 0.0, du = 0.0, dv = 0.0;
      int cls = -1;
      for (const auto& o : sil) {
        const geo::Vec2 c = o.box.center();
        const double u = (px - c.x()) / std::max(0.5 * o.box.width(), 1e-6);
        const double v = (py - c.y()) / std::max(0.5 * o.box.height(), 1e-6);
        // ~1 inside the silhouette, 0.5 on its edge, decaying outside
        const double obj = 1.0 / (1.0 + std::exp(8.0 * (std::max(std::fabs(u), std::fabs(v)) - 1.0)));
        if (obj > best + 1e-9 || (std::fabs(obj - best) <= 1e-9 && cls >= 0 && o.depth < best_depth)) {
          best = obj;
          best_depth = o.depth;
          du = u;
          dv = v;
          cls = o.cls;
        }
      }
      double* f = &map[(i * cols + j) * kFeatureChannels];
      f[0] = best;
      for (int c = 0; c < 3; ++c) f[1 + c] = cls == c ? best : 0.0;
      f[4] = best * std::tanh(du);
      f[5] = best * std::tanh(dv);
      for (int c = 0; c < 6; ++c) f[c] += cfg.map_noise * gauss(rng);
      f[6] = 1.0;
      f[7] = gauss(rng);
    }
  }
  return map;
}

nn::Tensor point_features(const SceneFrame& frame, const OracleConfig& cfg, Rng& rng) {
  const nn::Tensor emb = class_embeddings(cfg);
  nn::Tensor out({frame.points.size(), cfg.feature_dim});
  for (std::size_t p = 0; p < frame.points.size(); ++p) {
    const int label = p < frame.point_labels.size() ? frame.point_labels[p] : -2;
    const std::size_t row = label >= 0 ? static_cast<std::size_t>(frame.gts.at(label).cls) : kNumClasses;
    for (std::size_t c = 0; c < cfg.feature_dim; ++c) out(p, c) = emb(row, c) + cfg.feature_noise * gauss(rng);
    const geo::Vec3& x = frame.points[p];
    const double coords[] = {x.x(), x.y(), x.z(), x.head<2>().norm()};
    for (std::size_t c = 0; c < std::min<std::size_t>(4, cfg.feature_dim); ++c)
      out(p, c) += cfg.point_coord_scale * coords[c];
  }
  return out;
}

dec::PillarFeatureSet pillarize(const std::vector<geo::Vec3>& points, const nn::Tensor& features, double cell,
                                double extent, double min_height) {
  if (!(cell > 0.0)) throw DomainError("pillar cell size must be positive");
  if (features.rows() != points.size()) throw ShapeError("pillarize: one feature row per point expected");
  const std::size_t dim = features.cols();
  struct Acc {
    std::vector<double> sum;
    std::size_t n = 0;
  };
  std::map<std::pair<long long, long long>, Acc> cells;
  for (std::size_t p = 0; p < points.size(); ++p) {
    const geo::Vec3& q = points[p];
    if (q.z() < min_height || std::fabs(q.x()) > extent || std::fabs(q.y()) > extent) continue;
    const auto key = std::make_pair(static_cast<long long>(std::floor(q.x() / cell)),
                                    static_cast<long long>(std::floor(q.y() / cell)));
    Acc& a = cells[key];
    if (a.sum.empty()) a.sum.assign(dim, 0.0);
    const auto row = features.row(p);
    for (std::size_t c = 0; c < dim; ++c) a.sum[c] += row[c];
    ++a.n;
  }
  dec::PillarFeatureSet out;
  out.positions = nn::Tensor({cells.size(), 2});
  out.contents = nn::Tensor({cells.size(), dim});
  std::size_t r = 0;
  for (const auto& [key, acc] : cells) {
    out.positions(r, 0) = (static_cast<double>(key.first) + 0.5) * cell;
    out.positions(r, 1) = (static_cast<double>(key.second) + 0.5) * cell;
    for (std::size_t c = 0; c < dim; ++c) out.contents(r, c) = acc.sum[c] / static_cast<double>(acc.n);
    ++r;
  }
  return out;
}

FrameObservation observe(const SceneFrame& frame, const ObservationConfig& cfg, std::uint64_t seed) {
  cfg.oracle.validate();
  FrameObservation obs;
  for (std::size_t v = 0; v < frame.cameras.size(); ++v) {
    Rng map_rng(derive_seed(seed, 10, v));
    obs.feature_maps.push_back(render_feature_map(frame, v, cfg.oracle, map_rng));
    Rng det_rng(derive_seed(seed, 11, v));
    obs.detections_2d.push_back(oracle_detect_2d(frame, v, cfg.oracle, det_rng));
  }
  Rng det3_rng(derive_seed(seed, 12));
  obs.detections_3d = oracle_detect_3d(frame, cfg.oracle, det3_rng);
  Rng feat_rng(derive_seed(seed, 13));
  const nn::Tensor feats = point_features(frame, cfg.oracle, feat_rng);
  obs.pillars = pillarize(frame.points, feats, cfg.pillar_cell, cfg.pillar_extent, cfg.ground_height);
  return obs;
}

// ---------------------------------------------------------------------------

namespace {

using nlohmann::json;

json mat_json(const geo::Mat4& m) {
  json a = json::array();
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) a.push_back(m(r, c));
  return a;
}

geo::Mat4 json_mat(const json& a) {
  if (!a.is_array() || a.size() != 16) throw ParseError("expected 16 floats");
  geo::Mat4 m;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) m(r, c) = a.at(r * 4 + c).get<double>();
  return m;
}

template <int N>
Eigen::Matrix<double, N, 1> json_vec(const json& a) {
  if (!a.is_array() || a.size() != N) throw ParseError("expected " + std::to_string(N) + " floats");
  Eigen::Matrix<double, N, 1> v;
  for (int i = 0; i < N; ++i) v[i] = a.at(i).get<double>();
  return v;
}

json frame_json(const SceneFrame& f) {
  json j;
  j["frame_index"] = f.index;
  j["timestamp"] = f.timestamp;
  j["ego_pose"] = mat_json(f.ego_pose);
  j["cameras"] = json::array();
  for (const auto& c : f.cameras)
    j["cameras"].push_back({{"K", mat_json(c.intrinsic())}, {"extrinsic", mat_json(c.extrinsic())},
                            {"width", c.width()}, {"height", c.height()}});
  j["gts"] = json::array();
  for (const auto& g : f.gts) {
    const auto& b = g.box;
    j["gts"].push_back({{"class", class_name(g.cls)},
                        {"track_id", g.track_id},
                        {"center", {b.center.x(), b.center.y(), b.center.z()}},
                        {"size", {b.size.x(), b.size.y(), b.size.z()}},
                        {"yaw", b.yaw},
                        {"velocity", {b.velocity.x(), b.velocity.y()}}});
  }
  json pts = json::array();
  for (const auto& p : f.points) pts.push_back({p.x(), p.y(), p.z()});
  j["points"] = std::move(pts);
  j["point_labels"] = f.point_labels;
  return j;
}

SceneFrame json_frame(const json& j) {
  SceneFrame f;
  f.index = j.at("frame_index").get<std::size_t>();
  f.timestamp = j.at("timestamp").get<double>();
  f.ego_pose = json_mat(j.at("ego_pose"));
  for (const auto& c : j.at("cameras"))
    f.cameras.push_back(geo::CameraModel::from_matrices(json_mat(c.at("K")), json_mat(c.at("extrinsic")),
                                                        c.at("width").get<int>(), c.at("height").get<int>()));
  for (const auto& g : j.at("gts")) {
    GroundTruth gt;
    gt.cls = g.at("class").is_string() ? class_from_name(g.at("class").get<std::string>()) : g.at("class").get<int>();
    if (gt.cls < 0 || gt.cls >= static_cast<int>(kNumClasses)) throw ParseError("class id out of range");
    gt.track_id = g.value("track_id", 0);
    gt.box.center = json_vec<3>(g.at("center"));
    gt.box.size = json_vec<3>(g.at("size"));
    gt.box.yaw = g.at("yaw").get<double>();
    gt.box.velocity = json_vec<2>(g.at("velocity"));
    f.gts.push_back(gt);
  }
  if (j.contains("points"))
    for (const auto& p : j.at("points")) f.points.push_back(json_vec<3>(p));
  if (j.contains("point_labels")) f.point_labels = j.at("point_labels").get<std::vector<int>>();
  else f.point_labels.assign(f.points.size(), -2);
  if (f.point_labels.size() != f.points.size()) throw ParseError("point_labels length differs from points");
  return f;
}

}  // namespace

void save_sequence(const Sequence& seq, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  if (seq.empty()) return;
  os << json{{"format", "fusionq-scene"}, {"version", 1}}.dump() << '\n';
  for (const auto& f : seq) os << frame_json(f).dump() << '\n';
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

Sequence load_sequence(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ParseError(path.string() + ": cannot open");
  Sequence seq;
  std::string line;
  std::size_t line_no = 0;
  bool header = false;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      if (!header) {
        if (j.value("format", "") != "fusionq-scene") throw ParseError("missing fusionq-scene header");
        if (j.value("version", 0) != 1) throw ParseError("unsupported scene version");
        header = true;
        continue;
      }
      seq.push_back(json_frame(j));
    } catch (const std::exception& e) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return seq;
}

}  // namespace fusionq::sim
