#include "povert/camera.hpp"

#include <cstdio>
#include <sstream>

namespace povert::camera {

namespace {

Eigen::Matrix3d to_matrix(const Mat3Entries<double>& e) {
  Eigen::Matrix3d m;
  m << e[0], e[1], e[2], e[3], e[4], e[5], e[6], e[7], e[8];
  return m;
}

}  // namespace

RotationMatrix euler_to_rotation(double yaw, double pitch) {
  return {to_matrix(rotation_entries_from_euler(yaw, pitch))};
}

RotationMatrix sixd_to_rotation(const SixDRotation& r) {
  const double n1 = r.a1.norm();
  const double n2 = r.a2.norm();
  if (n1 < 1e-9 || n2 < 1e-9)
    throw DegenerateRotation("6D rotation with near-zero vector");
  const double sin_angle = r.a1.cross(r.a2).norm() / (n1 * n2);
  if (sin_angle <= 1e-6)
    throw DegenerateRotation("6D rotation with (anti)parallel vectors");
  std::array<double, 3> a1{r.a1[0], r.a1[1], r.a1[2]};
  std::array<double, 3> a2{r.a2[0], r.a2[1], r.a2[2]};
  return {to_matrix(rotation_entries_from_sixd(a1, a2))};
}

SixDRotation rotation_to_sixd(const RotationMatrix& r) {
  return {r.m.col(0), r.m.col(1)};
}

std::pair<RotationMatrix, Eigen::Vector3d> pose_to_extrinsics(const CameraPose& p) {
  Mat3Entries<double> e = rotation_entries_from_euler(p.yaw, p.pitch);
  if (p.roll != 0.0) e = apply_roll(e, p.roll);
  const Eigen::Matrix3d R = to_matrix(e);
  const Eigen::Vector3d center = -p.radius * R.col(2) + p.t;
  return {{R}, center};
}

RigidTransform camera_to_world(const CameraPose& p) {
  auto [r, c] = pose_to_extrinsics(p);
  return {r.m, c};
}

RigidTransform world_to_camera(const CameraPose& p) {
  return camera_to_world(p).inverse();
}

RigidTransform relative_pose(const CameraPose& a, const CameraPose& b) {
  return world_to_camera(b).compose(camera_to_world(a));
}

RayBundle generate_rays(const CameraPose& p, const Intrinsics& k, int height, int width) {
  if (height < 2 || width < 2) throw Error("generate_rays needs H, W >= 2");
  RayBundle rb;
  rb.height = height;
  rb.width = width;
  rb.near = p.radius - 1.0;
  rb.far = p.radius + 1.0;
  const auto [rot, center] = pose_to_extrinsics(p);
  const long n = static_cast<long>(height) * width;
  rb.origins.resize(n, 3);
  rb.directions.resize(n, 3);
  for (int i = 0; i < height; ++i) {
    for (int j = 0; j < width; ++j) {
      const double du = (j + 0.5 - k.cx) / k.fx;
      const double dv = (i + 0.5 - k.cy) / k.fy;
      Eigen::Vector3d d = rot.m * Eigen::Vector3d(du, dv, 1.0);
      d.normalize();
      const long row = static_cast<long>(i) * width + j;
      rb.origins.row(row) = center.transpose();
      rb.directions.row(row) = d.transpose();
    }
  }
  return rb;
}

std::pair<double, double> yaw_pitch_from_rotation(const RotationMatrix& r) {
  const Eigen::Vector3d f = r.m.col(2);
  return {std::atan2(f.x(), f.z()), -std::asin(std::clamp(f.y(), -1.0, 1.0))};
}

double roll_from_rotation(const RotationMatrix& r) {
  auto [yaw, pitch] = yaw_pitch_from_rotation(r);
  const Eigen::Matrix3d base = euler_to_rotation(yaw, pitch).m;
  const Eigen::Matrix3d rz = base.transpose() * r.m;
  return std::atan2(rz(1, 0), rz(0, 0));
}

CameraPose pose_from_rotation(const RotationMatrix& r, const Eigen::Vector3d& t,
                              double radius) {
  CameraPose p;
  std::tie(p.yaw, p.pitch) = yaw_pitch_from_rotation(r);
  p.roll = roll_from_rotation(r);
  p.t = t;
  p.radius = radius;
  return p;
}

std::string pose_to_line(const CameraPose& p) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%.17g %.17g %.17g %.17g %.17g %.17g %.17g",
                p.yaw, p.pitch, p.roll, p.t[0], p.t[1], p.t[2], p.radius);
  return buf;
}

CameraPose pose_from_line(const std::string& line) {
  std::istringstream in(line);
  CameraPose p;
  if (!(in >> p.yaw >> p.pitch >> p.roll >> p.t[0] >> p.t[1] >> p.t[2] >> p.radius))
    throw IoError("malformed pose line: " + line);
  return p;
}

}  // namespace povert::camera
