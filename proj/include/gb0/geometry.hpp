#pragma once

#include <array>
#include <cmath>

#include "gb0/common.hpp"

namespace gb0 {

// ---------------------------------------------------------------------------
// Minimal 3-vector. Kept dependency-free so the geometry layer stays cheap to
// include everywhere.
// ---------------------------------------------------------------------------
struct Vec3 {
  double x = 0, y = 0, z = 0;

  Vec3() = default;
  Vec3(double x_, double y_, double z_) : x(x_), y(y_), z(z_) {}

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  Vec3 operator-() const { return {-x, -y, -z}; }
  Vec3& operator+=(const Vec3& o) {
    x += o.x;
    y += o.y;
    z += o.z;
    return *this;
  }

  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  Vec3 cross(const Vec3& o) const {
    return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
  }
  double norm() const { return std::sqrt(dot(*this)); }
  Vec3 normalized() const {
    double n = norm();
    if (n < 1e-300) return {0, 0, 0};
    return {x / n, y / n, z / n};
  }
};

inline Vec3 operator*(double s, const Vec3& v) { return v * s; }

// Unit quaternion, (w, x, y, z).
struct Quat {
  double w = 1, x = 0, y = 0, z = 0;

  Quat() = default;
  Quat(double w_, double x_, double y_, double z_) : w(w_), x(x_), y(y_), z(z_) {}

  double norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }

  Quat normalized() const {
    double n = norm();
    return {w / n, x / n, y / n, z / n};
  }

  Quat conj() const { return {w, -x, -y, -z}; }

  Quat operator*(const Quat& o) const {
    return {w * o.w - x * o.x - y * o.y - z * o.z,
            w * o.x + x * o.w + y * o.z - z * o.y,
            w * o.y - x * o.z + y * o.w + z * o.x,
            w * o.z + x * o.y - y * o.x + z * o.w};
  }

  Vec3 rotate(const Vec3& v) const {
    // q v q* expanded
    Vec3 u{x, y, z};
    Vec3 t = 2.0 * u.cross(v);
    return v + w * t + u.cross(t);
  }

  static Quat from_axis_angle(const Vec3& axis, double angle) {
    Vec3 a = axis.normalized();
    double h = 0.5 * angle;
    double s = std::sin(h);
    return Quat{std::cos(h), a.x * s, a.y * s, a.z * s}.normalized();
  }

  // Rotation matrix rows, for hot loops that rotate many points.
  std::array<Vec3, 3> rows() const {
    double xx = x * x, yy = y * y, zz = z * z;
    double xy = x * y, xz = x * z, yz = y * z;
    double wx = w * x, wy = w * y, wz = w * z;
    return {Vec3{1 - 2 * (yy + zz), 2 * (xy - wz), 2 * (xz + wy)},
            Vec3{2 * (xy + wz), 1 - 2 * (xx + zz), 2 * (yz - wx)},
            Vec3{2 * (xz - wy), 2 * (yz + wx), 1 - 2 * (xx + yy)}};
  }
};

// ---------------------------------------------------------------------------
// SE(3) pose: rotation as unit quaternion plus translation in meters.
// Applied as x_out = R x_in + t. The quaternion is renormalized after every
// composition so drift stays below 1e-9 per op.
// ---------------------------------------------------------------------------
struct SE3Pose {
  Quat rotation;
  Vec3 translation;

  static SE3Pose identity() { return {}; }

  static SE3Pose from_translation(const Vec3& t) { return {Quat{}, t}; }

  Vec3 apply(const Vec3& p) const { return rotation.rotate(p) + translation; }
};

inline SE3Pose compose(const SE3Pose& a, const SE3Pose& b) {
  SE3Pose out;
  out.rotation = (a.rotation * b.rotation).normalized();
  out.translation = a.rotation.rotate(b.translation) + a.translation;
  return out;
}

inline SE3Pose inverse(const SE3Pose& a) {
  SE3Pose out;
  out.rotation = a.rotation.conj().normalized();
  out.translation = -out.rotation.rotate(a.translation);
  return out;
}

// ---------------------------------------------------------------------------
// Pinhole camera. Extrinsic maps world coordinates to camera coordinates;
// the camera looks down +z, u grows rightward, v grows downward.
// ---------------------------------------------------------------------------
struct CameraModel {
  double fx = 100, fy = 100;
  double cx = 32, cy = 32;
  int width = 64, height = 64;
  SE3Pose extrinsic;  // world -> camera

  bool valid() const {
    return fx > 0 && fy > 0 && width > 0 && height > 0 && cx >= 0 &&
           cx < width && cy >= 0 && cy < height;
  }

  Vec3 center_world() const { return inverse(extrinsic).translation; }
};

// Camera at `eye` looking at `target`, world +z up.
inline CameraModel make_lookat_camera(const Vec3& eye, const Vec3& target,
                                      double fx, double fy, int width,
                                      int height) {
  Vec3 zc = (target - eye).normalized();
  Vec3 up{0, 0, 1};
  Vec3 xc = zc.cross(up);
  if (xc.norm() < 1e-9) xc = Vec3{1, 0, 0};
  xc = xc.normalized();
  Vec3 yc = zc.cross(xc);

  // rows of the world->camera rotation
  double m[3][3] = {{xc.x, xc.y, xc.z}, {yc.x, yc.y, yc.z}, {zc.x, zc.y, zc.z}};
  double tr = m[0][0] + m[1][1] + m[2][2];
  Quat q;
  if (tr > 0) {
    double s = std::sqrt(tr + 1.0) * 2;
    q = {0.25 * s, (m[2][1] - m[1][2]) / s, (m[0][2] - m[2][0]) / s,
         (m[1][0] - m[0][1]) / s};
  } else if (m[0][0] > m[1][1] && m[0][0] > m[2][2]) {
    double s = std::sqrt(1.0 + m[0][0] - m[1][1] - m[2][2]) * 2;
    q = {(m[2][1] - m[1][2]) / s, 0.25 * s, (m[0][1] + m[1][0]) / s,
         (m[0][2] + m[2][0]) / s};
  } else if (m[1][1] > m[2][2]) {
    double s = std::sqrt(1.0 + m[1][1] - m[0][0] - m[2][2]) * 2;
    q = {(m[0][2] - m[2][0]) / s, (m[0][1] + m[1][0]) / s, 0.25 * s,
         (m[1][2] + m[2][1]) / s};
  } else {
    double s = std::sqrt(1.0 + m[2][2] - m[0][0] - m[1][1]) * 2;
    q = {(m[1][0] - m[0][1]) / s, (m[0][2] + m[2][0]) / s,
         (m[1][2] + m[2][1]) / s, 0.25 * s};
  }
  CameraModel cam;
  cam.fx = fx;
  cam.fy = fy;
  cam.cx = width / 2.0;
  cam.cy = height / 2.0;
  cam.width = width;
  cam.height = height;
  cam.extrinsic.rotation = q.normalized();
  cam.extrinsic.translation = -cam.extrinsic.rotation.rotate(eye);
  return cam;
}

struct Projection {
  double u = 0, v = 0, z = 0;
};

inline Projection project(const Vec3& point_world, const CameraModel& cam) {
  Vec3 pc = cam.extrinsic.apply(point_world);
  if (pc.z <= 1e-9) throw NonPositiveDepth("projected point has z <= 1e-9");
  return {cam.fx * pc.x / pc.z + cam.cx, cam.fy * pc.y / pc.z + cam.cy, pc.z};
}

inline Vec3 unproject(double u, double v, double z, const CameraModel& cam) {
  if (z <= 0) throw NonPositiveDepth("unproject requires z > 0");
  Vec3 pc{(u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z};
  return inverse(cam.extrinsic).apply(pc);
}

}  // namespace gb0
