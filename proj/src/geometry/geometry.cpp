#include "fusionq/geometry/geometry.hpp"

#include <Eigen/Geometry>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "fusionq/errors.hpp"

namespace fusionq::geo {

std::array<Vec3, 8> Box3D::corners() const {
  const double hl = 0.5 * size.y();
  const double hw = 0.5 * size.x();
  const double hh = 0.5 * size.z();
  const double c = std::cos(yaw);
  const double s = std::sin(yaw);
  std::array<Vec3, 8> out;
  const double lx[4] = {hl, hl, -hl, -hl};
  const double ly[4] = {hw, -hw, -hw, hw};
  for (int level = 0; level < 2; ++level) {
    const double z = level == 0 ? -hh : hh;
    for (int i = 0; i < 4; ++i) {
      out[level * 4 + i] = center + Vec3(c * lx[i] - s * ly[i], s * lx[i] + c * ly[i], z);
    }
  }
  return out;
}

bool Box3D::contains(const Vec3& p, double margin) const {
  const Vec3 d = p - center;
  const double c = std::cos(yaw);
  const double s = std::sin(yaw);
  const double lx = c * d.x() + s * d.y();
  const double ly = -s * d.x() + c * d.y();
  return std::fabs(lx) <= 0.5 * size.y() + margin && std::fabs(ly) <= 0.5 * size.x() + margin &&
         std::fabs(d.z()) <= 0.5 * size.z() + margin;
}

double wrap_angle(double a) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  double r = std::fmod(a, two_pi);
  if (r <= -std::numbers::pi) r += two_pi;
  if (r > std::numbers::pi) r -= two_pi;
  return r;
}

Mat4 rigid_inverse(const Mat4& t) {
  Mat4 inv = Mat4::Identity();
  const Mat3 rt = t.block<3, 3>(0, 0).transpose();
  inv.block<3, 3>(0, 0) = rt;
  inv.block<3, 1>(0, 3) = -rt * t.block<3, 1>(0, 3);
  return inv;
}

Mat4 make_pose(double x, double y, double z, double yaw) {
  Mat4 t = Mat4::Identity();
  const double c = std::cos(yaw);
  const double s = std::sin(yaw);
  t(0, 0) = c;
  t(0, 1) = -s;
  t(1, 0) = s;
  t(1, 1) = c;
  t(0, 3) = x;
  t(1, 3) = y;
  t(2, 3) = z;
  return t;
}

Vec3 transform_point(const Mat4& t, const Vec3& p) { return t.block<3, 3>(0, 0) * p + t.block<3, 1>(0, 3); }

// --------------------------------------------------------------------------

CameraModel::CameraModel(double fx, double fy, double ox, double oy, const Mat4& world_to_camera, int width,
                         int height)
    : fx_(fx), fy_(fy), ox_(ox), oy_(oy), world_to_camera_(world_to_camera), width_(width), height_(height) {
  if (!(fx > 0.0) || !(fy > 0.0)) throw DomainError("camera: focal lengths must be positive");
  if (width <= 0 || height <= 0) throw DomainError("camera: image size must be positive");
  const Mat3 r = world_to_camera.block<3, 3>(0, 0);
  if (!((r * r.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff() <= 1e-9))
    throw DomainError("camera: extrinsic rotation is not orthonormal");
  camera_to_world_ = rigid_inverse(world_to_camera);
}

CameraModel CameraModel::from_matrices(const Mat4& intrinsic, const Mat4& world_to_camera, int width, int height) {
  return CameraModel(intrinsic(0, 0), intrinsic(1, 1), intrinsic(0, 2), intrinsic(1, 2), world_to_camera, width,
                     height);
}

Mat4 CameraModel::intrinsic() const {
  Mat4 k = Mat4::Identity();
  k(0, 0) = fx_;
  k(1, 1) = fy_;
  k(0, 2) = ox_;
  k(1, 2) = oy_;
  return k;
}

PixelProjection project_world_to_pixel(const CameraModel& cam, const Vec3& p) {
  const Vec3 pc = transform_point(cam.extrinsic(), p);
  PixelProjection out;
  out.depth = pc.z();
  out.valid = pc.z() > kMinDepth;
  if (out.valid) {
    out.pixel = {cam.fx() * pc.x() / pc.z() + cam.ox(), cam.fy() * pc.y() / pc.z() + cam.oy()};
  }
  return out;
}

Vec3 unproject_pixel_at_depth(const CameraModel& cam, const Vec2& pixel, double depth) {
  if (!(depth > 0.0)) throw DomainError("unproject: depth must be positive");
  const Vec3 pc((pixel.x() - cam.ox()) / cam.fx() * depth, (pixel.y() - cam.oy()) / cam.fy() * depth, depth);
  return transform_point(cam.camera_to_world(), pc);
}

Mat4 equivalent_intrinsics(const CameraModel& cam, const Box2D& box, RoiSize roi) {
  if (!box.valid()) throw DomainError("equivalent_intrinsics: degenerate box");
  if (roi.width <= 0 || roi.height <= 0) throw DomainError("equivalent_intrinsics: RoI size must be positive");
  const double rx = static_cast<double>(roi.width) / box.width();
  const double ry = static_cast<double>(roi.height) / box.height();
  Mat4 k = Mat4::Identity();
  k(0, 0) = cam.fx() * rx;
  k(1, 1) = cam.fy() * ry;
  k(0, 2) = (cam.ox() - box.x_min) * rx;
  k(1, 2) = (cam.oy() - box.y_min) * ry;
  return k;
}

// --------------------------------------------------------------------------

void bilinear_sample(const nn::Tensor& fm, double x, double y, double* out) {
  const auto h = static_cast<long>(fm.dim(0));
  const auto w = static_cast<long>(fm.dim(1));
  const std::size_t c = fm.dim(2);
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  const long x0 = std::min(static_cast<long>(std::floor(x)), w - 1);
  const long y0 = std::min(static_cast<long>(std::floor(y)), h - 1);
  const long x1 = std::min(x0 + 1, w - 1);
  const long y1 = std::min(y0 + 1, h - 1);
  const double ax = x - static_cast<double>(x0);
  const double ay = y - static_cast<double>(y0);
  const double* p00 = fm.data() + (y0 * w + x0) * static_cast<long>(c);
  const double* p01 = fm.data() + (y0 * w + x1) * static_cast<long>(c);
  const double* p10 = fm.data() + (y1 * w + x0) * static_cast<long>(c);
  const double* p11 = fm.data() + (y1 * w + x1) * static_cast<long>(c);
  for (std::size_t k = 0; k < c; ++k) {
    out[k] = (1.0 - ay) * ((1.0 - ax) * p00[k] + ax * p01[k]) + ay * ((1.0 - ax) * p10[k] + ax * p11[k]);
  }
}

nn::Tensor roi_align(const nn::Tensor& fm, const Box2D& box, RoiSize roi) {
  if (fm.rank() != 3) throw ShapeError("roi_align: feature map must be [H, W, C]");
  if (!box.valid()) throw DomainError("roi_align: degenerate box");
  if (roi.width <= 0 || roi.height <= 0) throw DomainError("roi_align: RoI size must be positive");
  const double h = static_cast<double>(fm.dim(0));
  const double w = static_cast<double>(fm.dim(1));
  if (box.x_max <= 0.0 || box.y_max <= 0.0 || box.x_min >= w || box.y_min >= h)
    throw DomainError("roi_align: box does not intersect the feature map");
  const std::size_t c = fm.dim(2);
  nn::Tensor out({static_cast<std::size_t>(roi.height), static_cast<std::size_t>(roi.width), c}, 0.0);
  const double bw = box.width() / roi.width;
  const double bh = box.height() / roi.height;
  for (int i = 0; i < roi.height; ++i) {
    const double y = box.y_min + (i + 0.5) * bh - 0.5;
    for (int j = 0; j < roi.width; ++j) {
      const double x = box.x_min + (j + 0.5) * bw - 0.5;
      bilinear_sample(fm, x, y, out.data() + (static_cast<std::size_t>(i) * roi.width + j) * c);
    }
  }
  return out;
}

double iou_2d(const Box2D& a, const Box2D& b) {
  const double ix = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const double iy = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  if (ix <= 0.0 || iy <= 0.0) return 0.0;
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? std::clamp(inter / uni, 0.0, 1.0) : 0.0;
}

std::optional<Box2D> project_box3d_to_box2d(const CameraModel& cam, const Box3D& box) {
  bool any = false;
  Box2D hull{std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity(),
             -std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
  for (const auto& c : box.corners()) {
    const auto p = project_world_to_pixel(cam, c);
    if (!p.valid) continue;
    any = true;
    hull.x_min = std::min(hull.x_min, p.pixel.x());
    hull.y_min = std::min(hull.y_min, p.pixel.y());
    hull.x_max = std::max(hull.x_max, p.pixel.x());
    hull.y_max = std::max(hull.y_max, p.pixel.y());
  }
  if (!any) return std::nullopt;
  hull.x_min = std::max(hull.x_min, 0.0);
  hull.y_min = std::max(hull.y_min, 0.0);
  hull.x_max = std::min(hull.x_max, static_cast<double>(cam.width()));
  hull.y_max = std::min(hull.y_max, static_cast<double>(cam.height()));
  if (!hull.valid()) return std::nullopt;
  return hull;
}

}  // namespace fusionq::geo
