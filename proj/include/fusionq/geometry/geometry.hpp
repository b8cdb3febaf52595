#pragma once

#include <Eigen/Core>
#include <array>
#include <optional>

#include "fusionq/numerics/tensor.hpp"

namespace fusionq::geo {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

/// Axis-aligned pixel box.
struct Box2D {
  double x_min = 0.0;
  double y_min = 0.0;
  double x_max = 0.0;
  double y_max = 0.0;

  double width() const noexcept { return x_max - x_min; }
  double height() const noexcept { return y_max - y_min; }
  double area() const noexcept { return valid() ? width() * height() : 0.0; }
  bool valid() const noexcept { return x_min < x_max && y_min < y_max; }
  Vec2 center() const { return {0.5 * (x_min + x_max), 0.5 * (y_min + y_max)}; }
  friend bool operator==(const Box2D&, const Box2D&) = default;
};

/// Oriented 3D box. size = (w, l, h); l runs along the heading (local x),
/// w along local y. The box is centered on `center`.
struct Box3D {
  Vec3 center = Vec3::Zero();
  Vec3 size = Vec3::Ones();
  double yaw = 0.0;
  Vec2 velocity = Vec2::Zero();

  /// Corners in world coordinates; bottom four first.
  std::array<Vec3, 8> corners() const;
  bool contains(const Vec3& p, double margin = 0.0) const;
};

/// Wraps an angle into (-pi, pi].
double wrap_angle(double a);

/// Inverse of a rigid transform [R t; 0 1].
Mat4 rigid_inverse(const Mat4& t);
/// Rigid transform with yaw rotation about z and translation.
Mat4 make_pose(double x, double y, double z, double yaw);
Vec3 transform_point(const Mat4& t, const Vec3& p);

/// Pinhole camera: K^ori with (fx, fy, ox, oy) and a world->camera
/// extrinsic. Camera frame: x right, y down, z forward.
class CameraModel {
 public:
  CameraModel() = default;
  CameraModel(double fx, double fy, double ox, double oy, const Mat4& world_to_camera, int width, int height);
  /// From a full 4x4 intrinsic matrix in the K^ori layout.
  static CameraModel from_matrices(const Mat4& intrinsic, const Mat4& world_to_camera, int width, int height);

  double fx() const noexcept { return fx_; }
  double fy() const noexcept { return fy_; }
  double ox() const noexcept { return ox_; }
  double oy() const noexcept { return oy_; }
  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  Mat4 intrinsic() const;
  const Mat4& extrinsic() const noexcept { return world_to_camera_; }
  const Mat4& camera_to_world() const noexcept { return camera_to_world_; }
  Vec3 center() const { return camera_to_world_.block<3, 1>(0, 3); }
  Box2D image_box() const { return {0.0, 0.0, static_cast<double>(width_), static_cast<double>(height_)}; }

 private:
  double fx_ = 1.0, fy_ = 1.0, ox_ = 0.0, oy_ = 0.0;
  Mat4 world_to_camera_ = Mat4::Identity();
  Mat4 camera_to_world_ = Mat4::Identity();
  int width_ = 1, height_ = 1;
};

/// Camera-frame depths at or below this are treated as behind the camera.
inline constexpr double kMinDepth = 1e-6;

struct PixelProjection {
  Vec2 pixel = Vec2::Zero();
  double depth = 0.0;
  bool valid = false;  // depth > kMinDepth
};

PixelProjection project_world_to_pixel(const CameraModel& cam, const Vec3& p);
/// Right inverse of project_world_to_pixel at the given depth.
Vec3 unproject_pixel_at_depth(const CameraModel& cam, const Vec2& pixel, double depth);

struct RoiSize {
  int width = 7;
  int height = 7;
};

/// Intrinsic matrix mapping camera coordinates directly into the RoI grid
/// of `box` resampled to `roi`.
Mat4 equivalent_intrinsics(const CameraModel& cam, const Box2D& box, RoiSize roi);

/// Bilinear RoI-Align over an [H, W, C] feature map. The box is given in
/// feature-map coordinates where pixel (i, j) covers [j, j+1) x [i, i+1).
/// One sample per output cell at its center; samples are clamped to the
/// map border. Returns [roi.height, roi.width, C].
nn::Tensor roi_align(const nn::Tensor& feature_map, const Box2D& box, RoiSize roi);

/// Bilinear sample of an [H, W, C] map at continuous pixel-center
/// coordinates (x, y) with border clamping; writes C values to out.
void bilinear_sample(const nn::Tensor& feature_map, double x, double y, double* out);

double iou_2d(const Box2D& a, const Box2D& b);

/// Axis-aligned hull of the in-front corner projections clipped to the
/// image; empty when no corner is in front or the clipped hull is empty.
std::optional<Box2D> project_box3d_to_box2d(const CameraModel& cam, const Box3D& box);

}  // namespace fusionq::geo
