#pragma once

#include <array>
#include <cmath>

#include "gb0/geometry.hpp"

namespace gb0 {

// ---------------------------------------------------------------------------
// 3-DOF positioner: base yaw plus a two-link planar arm in the vertical plane
// selected by the yaw. Zero angles point the fully extended arm along +x at
// shoulder height.
// ---------------------------------------------------------------------------
struct ArmGeometry {
  Vec3 base{0, 0, 0};
  double shoulder_height = 0.0;
  double l1 = 0.5;
  double l2 = 0.5;

  double max_reach() const { return l1 + l2; }
  double min_reach() const { return std::abs(l1 - l2); }
};

struct JointAngles {
  double yaw = 0;       // rotation about world z at the base
  double shoulder = 0;  // elevation of link 1 from horizontal
  double elbow = 0;     // relative bend of link 2
};

inline Vec3 shoulder_point(const ArmGeometry& g) {
  return g.base + Vec3{0, 0, g.shoulder_height};
}

inline Vec3 elbow_point(const ArmGeometry& g, const JointAngles& j) {
  double r = g.l1 * std::cos(j.shoulder);
  double s = g.l1 * std::sin(j.shoulder);
  return shoulder_point(g) +
         Vec3{r * std::cos(j.yaw), r * std::sin(j.yaw), s};
}

inline Vec3 arm_fk(const ArmGeometry& g, const JointAngles& j) {
  double r = g.l1 * std::cos(j.shoulder) + g.l2 * std::cos(j.shoulder + j.elbow);
  double s = g.l1 * std::sin(j.shoulder) + g.l2 * std::sin(j.shoulder + j.elbow);
  return shoulder_point(g) +
         Vec3{r * std::cos(j.yaw), r * std::sin(j.yaw), s};
}

// Closed-form IK. Of the two planar solutions the elbow-up branch (higher
// elbow) is returned. Throws IKUnreachable outside the workspace annulus.
inline JointAngles ik_solve(const Vec3& target_ee, const ArmGeometry& g) {
  Vec3 d = target_ee - shoulder_point(g);
  double r = std::sqrt(d.x * d.x + d.y * d.y);
  double s = d.z;
  double dist2 = r * r + s * s;
  double dist = std::sqrt(dist2);
  constexpr double kEps = 1e-12;
  if (dist > g.max_reach() + kEps || dist < g.min_reach() - kEps)
    throw IKUnreachable("target outside workspace annulus");

  double c2 = (dist2 - g.l1 * g.l1 - g.l2 * g.l2) / (2.0 * g.l1 * g.l2);
  c2 = std::min(1.0, std::max(-1.0, c2));
  double e = std::acos(c2);

  JointAngles out;
  out.yaw = (r < 1e-12) ? 0.0 : std::atan2(d.y, d.x);

  auto branch = [&](double elbow) {
    double shoulder = std::atan2(s, r) -
                      std::atan2(g.l2 * std::sin(elbow),
                                 g.l1 + g.l2 * std::cos(elbow));
    return std::array<double, 2>{shoulder, elbow};
  };
  auto a = branch(e);
  auto b = branch(-e);
  // elbow height decides the branch
  double za = g.l1 * std::sin(a[0]);
  double zb = g.l1 * std::sin(b[0]);
  auto pick = (za >= zb) ? a : b;
  out.shoulder = pick[0];
  out.elbow = pick[1];
  return out;
}

}  // namespace gb0
