#pragma once

#include <algorithm>
#include <limits>
#include <numeric>

#include "fusionq/training/training.hpp"
#include "test_util.hpp"

namespace testutil {

using namespace fusionq;
using nn::Tensor;

inline double brute_force_min(const Tensor& cost) {
  const std::size_t m = cost.dim(0), g = cost.dim(1);
  const bool t = m > g;
  const std::size_t n = t ? g : m;  // the smaller side is fully assigned
  const std::size_t k = t ? m : g;
  std::vector<std::size_t> perm(k);
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double s = 0.0;
    // rows in ascending order, like the matcher's pair list
    if (!t) {
      for (std::size_t i = 0; i < n; ++i) s += cost(i, perm[i]);
    } else {
      std::vector<std::pair<std::size_t, std::size_t>> pairs;
      for (std::size_t j = 0; j < n; ++j) pairs.emplace_back(perm[j], j);
      std::sort(pairs.begin(), pairs.end());
      for (const auto& [i, j] : pairs) s += cost(i, j);
    }
    best = std::min(best, s);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

inline double match_total(const Tensor& cost, const train::MatchResult& r) {
  double s = 0.0;
  for (const auto& [i, j] : r.pairs) s += cost(i, j);
  return s;
}

inline sim::GroundTruth make_gt(int cls, geo::Vec3 c, geo::Vec3 size, double yaw, geo::Vec2 vel = {0, 0}) {
  sim::GroundTruth g;
  g.cls = cls;
  g.box.center = c;
  g.box.size = size;
  g.box.yaw = yaw;
  g.box.velocity = vel;
  return g;
}

inline train::ModelConfig tiny_model() {
  train::ModelConfig m;
  auto& d = m.decoder;
  d.layers = 2;
  d.width = 8;
  d.heads = 2;
  d.samples = 3;
  d.depth_bins = 4;
  d.feature_channels = 8;
  d.sinpos_channels = 4;
  d.history_sinpos_channels = 2;
  m.pc.sinpos_channels = 4;
  m.img.roi = {3, 3};
  m.depth_min = 2.0;
  m.depth_max = 30.0;
  return m;
}

/// Four cameras, a car ahead (view 0) and a pedestrian to the left (view 1),
/// one 3D detection of the car.
struct TinyWorld {
  sim::SceneFrame frame;
  sim::FrameObservation obs;

  explicit TinyWorld(std::size_t width = 8) {
    for (const auto& c : sim::ring_rig(4, 100.0, 160, 96, 1.6))
      frame.cameras.emplace_back(c.fx, c.fy, c.ox, c.oy, c.ego_to_camera, c.width, c.height);
    frame.gts = {make_gt(0, {12.0, 1.0, 0.8}, {1.9, 4.5, 1.6}, 0.3, {1.0, 0.5}),
                 make_gt(2, {3.0, 9.0, 0.875}, {0.6, 0.6, 1.75}, -1.0)};
    sim::OracleConfig o;
    o.feature_dim = width;
    o.box2d_jitter = 1.0;
    for (std::size_t v = 0; v < frame.cameras.size(); ++v) {
      sim::Rng rng(v);
      obs.feature_maps.push_back(sim::render_feature_map(frame, v, o, rng));
      obs.detections_2d.push_back(sim::oracle_detect_2d(frame, v, o, rng));
    }
    geo::Box3D det = frame.gts[0].box;
    det.center += geo::Vec3(0.3, -0.2, 0.05);
    obs.detections_3d.boxes = {{det, 0.8}};
    obs.detections_3d.gt_index = {0};
    sim::Rng rng(77);
    obs.detections_3d.appearance = testutil::random_tensor({1, width}, rng);
    std::vector<geo::Vec3> pts = {{11.5, 0.5, 1.0}, {12.5, 1.5, 0.5}, {2.9, 9.1, 1.0}, {20.0, -4.0, 1.0}};
    obs.pillars = sim::pillarize(pts, testutil::random_tensor({pts.size(), width}, rng), 1.0, 50.0);
  }
};

}  // namespace testutil
