#pragma once

#include <array>
#include <cmath>
#include <string>
#include <utility>

#include <Eigen/Dense>

#include "povert/errors.hpp"
#include "povert/rng.hpp"

namespace povert::camera {

// ---------------------------------------------------------------------------
// Convention (fixed for the whole project):
//   * right-handed world, up = +y, camera orbits the origin at fixed radius
//     and looks at it;
//   * camera frame: +x along image u, +y along image v (down), +z forward
//     (standard pinhole: u = fx*X/Z + cx, v = fy*Y/Z + cy);
//   * frontal pose (yaw 0, pitch 0, t 0) puts the camera at (0,0,-radius)
//     looking along +z;
//   * pixel (i,j) is sampled at continuous coordinates (j+0.5, i+0.5).
// ---------------------------------------------------------------------------

// Scalar-generic formulas. S is double or an autodiff tape variable; the same
// expressions drive both the plain geometry below and the recorded render
// graphs, so the two can never drift apart.

template <class S>
using Mat3Entries = std::array<S, 9>;  // row-major r00..r22

/// Look-at rotation (camera-to-world) of a camera on the orbit sphere.
/// Columns are the camera axes expressed in world coordinates.
template <class S>
Mat3Entries<S> rotation_entries_from_euler(const S& yaw, const S& pitch) {
  using std::cos;
  using std::sin;
  S cy = cos(yaw), sy = sin(yaw), cp = cos(pitch), sp = sin(pitch);
  return {-cy,      -sy * sp, sy * cp,   //
          cy * 0.0, -cp,      -sp,       // row1 x-entry is exactly 0
          sy,       -cy * sp, cy * cp};
}

template <class S>
Mat3Entries<S> matmul3(const Mat3Entries<S>& a, const Mat3Entries<S>& b) {
  Mat3Entries<S> r{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      r[i * 3 + j] = a[i * 3] * b[j] + a[i * 3 + 1] * b[3 + j] + a[i * 3 + 2] * b[6 + j];
  return r;
}

/// Roll about the optical axis, composed on the camera side.
template <class S>
Mat3Entries<S> apply_roll(const Mat3Entries<S>& r, const S& roll) {
  using std::cos;
  using std::sin;
  S c = cos(roll), s = sin(roll);
  // r * Rz(roll)
  Mat3Entries<S> rz{c, -s, s * 0.0, s, c, s * 0.0, s * 0.0, s * 0.0, c * 0.0 + 1.0};
  return matmul3(r, rz);
}

/// Orbit camera center before the translation offset: radius * (-z_axis).
template <class S>
std::array<S, 3> orbit_center(const Mat3Entries<S>& r, double radius) {
  return {r[2] * -radius, r[5] * -radius, r[8] * -radius};
}

/// Gram-Schmidt of two 3-vectors into rotation columns [b1 b2 b1xb2].
/// No degeneracy handling here; callers validate first.
template <class S>
Mat3Entries<S> rotation_entries_from_sixd(const std::array<S, 3>& a1,
                                          const std::array<S, 3>& a2) {
  using std::sqrt;
  S n1 = sqrt(a1[0] * a1[0] + a1[1] * a1[1] + a1[2] * a1[2]);
  std::array<S, 3> b1{a1[0] / n1, a1[1] / n1, a1[2] / n1};
  S d = b1[0] * a2[0] + b1[1] * a2[1] + b1[2] * a2[2];
  std::array<S, 3> u{a2[0] - d * b1[0], a2[1] - d * b1[1], a2[2] - d * b1[2]};
  S n2 = sqrt(u[0] * u[0] + u[1] * u[1] + u[2] * u[2]);
  std::array<S, 3> b2{u[0] / n2, u[1] / n2, u[2] / n2};
  std::array<S, 3> b3{b1[1] * b2[2] - b1[2] * b2[1],  //
                      b1[2] * b2[0] - b1[0] * b2[2],  //
                      b1[0] * b2[1] - b1[1] * b2[0]};
  return {b1[0], b2[0], b3[0], b1[1], b2[1], b3[1], b1[2], b2[2], b3[2]};
}

// ---------------------------------------------------------------------------
// Plain geometry types
// ---------------------------------------------------------------------------

struct RotationMatrix {
  Eigen::Matrix3d m = Eigen::Matrix3d::Identity();

  /// Orthonormality and det(+1) within tol.
  bool is_valid(double tol = 1e-6) const {
    const double ortho = (m.transpose() * m - Eigen::Matrix3d::Identity()).norm();
    return ortho < tol && std::abs(m.determinant() - 1.0) < tol;
  }
};

struct SixDRotation {
  Eigen::Vector3d a1{1, 0, 0};
  Eigen::Vector3d a2{0, 1, 0};
};

struct CameraPose {
  double yaw = 0.0;    // radians
  double pitch = 0.0;  // radians
  double roll = 0.0;   // radians; only meaningful on the 6D path
  Eigen::Vector3d t{0, 0, 0};
  double radius = 2.7;
};

struct Intrinsics {
  double fx = 1, fy = 1, cx = 0, cy = 0;

  /// Narrow-FOV pinhole centered on the image (default 30 degrees).
  static Intrinsics for_image(int width, int height, double fov_deg = 30.0) {
    Intrinsics k;
    k.fx = width / (2.0 * std::tan(fov_deg * M_PI / 360.0));
    k.fy = k.fx;
    k.cx = width / 2.0;
    k.cy = height / 2.0;
    return k;
  }
};

struct RigidTransform {
  Eigen::Matrix3d R = Eigen::Matrix3d::Identity();
  Eigen::Vector3d t{0, 0, 0};

  Eigen::Vector3d apply(const Eigen::Vector3d& p) const { return R * p + t; }
  RigidTransform compose(const RigidTransform& o) const {  // this ∘ o
    return {R * o.R, R * o.t + t};
  }
  RigidTransform inverse() const { return {R.transpose(), -(R.transpose() * t)}; }
  Eigen::Matrix4d matrix() const {
    Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
    m.block<3, 3>(0, 0) = R;
    m.block<3, 1>(0, 3) = t;
    return m;
  }
};

struct RayBundle {
  int height = 0, width = 0;
  Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor> origins;     // HW x 3
  Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor> directions;  // unit rows
  double near = 0, far = 0;
};

/// Sampling box for poses, with the 20% slack the optimizer may use before
/// hard clamping.
struct PoseBox {
  double yaw_max = M_PI / 4.0;
  double pitch_max = M_PI / 8.0;
  double t_max = 0.3;
  double slack = 0.2;

  double yaw_limit() const { return yaw_max * (1.0 + slack); }
  double pitch_limit() const { return pitch_max * (1.0 + slack); }

  std::pair<double, double> sample_angles(Rng& rng) const {
    return {rng.uniform(-yaw_max, yaw_max), rng.uniform(-pitch_max, pitch_max)};
  }

  CameraPose clamp_extended(CameraPose p) const {
    p.yaw = std::clamp(p.yaw, -yaw_limit(), yaw_limit());
    p.pitch = std::clamp(p.pitch, -pitch_limit(), pitch_limit());
    for (int i = 0; i < 3; ++i) p.t[i] = std::clamp(p.t[i], -t_max, t_max);
    return p;
  }
};

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

RotationMatrix euler_to_rotation(double yaw, double pitch);

/// Gram-Schmidt orthonormalization; throws DegenerateRotation when a1 ~ 0 or
/// a1 is (anti)parallel to a2.
RotationMatrix sixd_to_rotation(const SixDRotation& r);

/// First two columns of R.
SixDRotation rotation_to_sixd(const RotationMatrix& r);

/// Camera-to-world rotation and camera center for a pose (includes roll and
/// the translation offset).
std::pair<RotationMatrix, Eigen::Vector3d> pose_to_extrinsics(const CameraPose& p);

RigidTransform camera_to_world(const CameraPose& p);
RigidTransform world_to_camera(const CameraPose& p);

/// T with T * world_to_camera(a) = world_to_camera(b); equivalently the map
/// from a's camera frame into b's camera frame.
RigidTransform relative_pose(const CameraPose& a, const CameraPose& b);

/// Per-pixel unit rays through pixel centers. H, W >= 2.
RayBundle generate_rays(const CameraPose& p, const Intrinsics& k, int height, int width);

/// (yaw, pitch) recovered from a camera-to-world rotation.
std::pair<double, double> yaw_pitch_from_rotation(const RotationMatrix& r);

/// Roll angle left over after removing the look-at part.
double roll_from_rotation(const RotationMatrix& r);

/// CameraPose whose 6D/euler decomposition matches R with translation t.
CameraPose pose_from_rotation(const RotationMatrix& r, const Eigen::Vector3d& t,
                              double radius);

// 7-float serialization: "yaw pitch roll tx ty tz radius".
std::string pose_to_line(const CameraPose& p);
CameraPose pose_from_line(const std::string& line);

}  // namespace povert::camera
