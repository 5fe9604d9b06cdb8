#pragma once

#include <algorithm>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "gb0/arm.hpp"
#include "gb0/episode.hpp"
#include "gb0/scene.hpp"

namespace gb0 {
namespace sim {

// ---------------------------------------------------------------------------
// Deterministic procedural tabletop: blocks, a walled bin, a 3-DOF arm with a
// parallel gripper, rendered by a per-pixel raycaster with flat shading.
// Kinematic transitions only; no contact dynamics.
// ---------------------------------------------------------------------------

constexpr double kTableHalf = 0.31;     // table top extends +-kTableHalf
constexpr double kTableThick = 0.04;
constexpr double kFloorZ = -0.40;
constexpr double kActionClip = 0.05;    // meters per axis per step
constexpr double kGraspRadius = 0.02;   // latch distance to a block center
constexpr int kStepCap = 400;

inline ArmGeometry default_arm() {
  ArmGeometry g;
  g.base = {0.0, -0.34, 0.0};
  g.shoulder_height = 0.06;
  g.l1 = 0.32;
  g.l2 = 0.30;
  return g;
}

struct Variation {
  uint64_t palette_id = 0;
  uint64_t placement_id = 0;
  int camera_set = 0;  // 0: head + side, 1: head only
};

struct SimState {
  SceneSpec scene;
  JointAngles joints;
  double gripper = 1.0;
  double gripper_cmd = 1.0;
  std::optional<int> held_object;
  int step = 0;

  Vec3 ee() const { return arm_fk(default_arm(), joints); }
};

inline bool known_task(const std::string& task_id) {
  return task_id == "sort-blocks" || task_id == "stack-blocks";
}

inline std::string task_instruction(const std::string& task_id) {
  if (task_id == "sort-blocks") return "sort the blocks into the bin";
  if (task_id == "stack-blocks") return "stack the blocks";
  throw UnknownTask(task_id);
}

// -------------------------------- cameras ---------------------------------

struct CameraRigSpec {
  Vec3 eye;
  Vec3 target;
  double fx = 72, fy = 72;
  int width = 64, height = 64;
};

inline CameraRigSpec head_camera_spec(int width = 64, int height = 64) {
  CameraRigSpec s;
  s.eye = {0.0, -0.60, 0.52};
  s.target = {0.0, 0.04, 0.0};
  s.fx = s.fy = 1.15 * width;
  s.width = width;
  s.height = height;
  return s;
}

inline CameraRigSpec side_camera_spec(int width = 64, int height = 64) {
  CameraRigSpec s;
  s.eye = {0.62, 0.28, 0.34};
  s.target = {0.0, 0.0, 0.02};
  s.fx = s.fy = 1.15 * width;
  s.width = width;
  s.height = height;
  return s;
}

inline CameraModel build_camera(const CameraRigSpec& s) {
  return make_lookat_camera(s.eye, s.target, s.fx, s.fy, s.width, s.height);
}

// Orbit the camera around its target: yaw about world z, pitch toward the
// vertical, then a world-frame translation of the eye.
inline CameraRigSpec perturb_camera(const CameraRigSpec& base, double yaw_rad,
                                    double pitch_rad, const Vec3& shift) {
  Vec3 v = base.eye - base.target;
  Quat qy = Quat::from_axis_angle({0, 0, 1}, yaw_rad);
  v = qy.rotate(v);
  Vec3 horiz{v.x, v.y, 0};
  Vec3 axis = horiz.norm() < 1e-9 ? Vec3{1, 0, 0}
                                  : Vec3{-v.y, v.x, 0}.normalized();
  Quat qp = Quat::from_axis_angle(axis, pitch_rad);
  v = qp.rotate(v);
  CameraRigSpec out = base;
  out.eye = base.target + v + shift;
  return out;
}

inline std::vector<CameraModel> build_camera_set(int camera_set, int width = 64,
                                                 int height = 64) {
  std::vector<CameraModel> cams;
  cams.push_back(build_camera(head_camera_spec(width, height)));
  if (camera_set == 0) cams.push_back(build_camera(side_camera_spec(width, height)));
  return cams;
}

// --------------------------------- reset ----------------------------------

inline int task_block_count(const std::string& task_id) {
  if (task_id == "sort-blocks") return 2;
  if (task_id == "stack-blocks") return 2;
  throw UnknownTask(task_id);
}

inline SimState reset(const std::string& task_id, uint64_t seed,
                      const Variation& var) {
  if (!known_task(task_id)) throw UnknownTask(task_id);
  uint64_t task_hash = fnv1a64(task_id.data(), task_id.size());

  SimState st;
  st.scene.palette_id = var.palette_id;
  st.scene.palette = make_palette(var.palette_id);
  st.scene.table_height = 0.0;
  st.scene.bin_pose = SE3Pose::from_translation({0.20, 0.14, 0.0});

  // object identities depend on (task, seed) only
  Rng id_rng(mix_seed(task_hash, seed));
  int n = task_block_count(task_id);
  std::vector<std::string> names = color_names();
  for (int i = 0; i < n; ++i) {
    size_t pick = size_t(id_rng.uniform_int(names.size()));
    ObjectSpec obj;
    obj.shape = ShapeKind::box;
    obj.half = {0.022, 0.022, 0.022};
    obj.color_name = names[pick];
    names.erase(names.begin() + long(pick));
    obj.rgb = palette_shade(var.palette_id, obj.color_name, i);
    st.scene.objects.push_back(obj);
  }

  // poses depend on (task, seed, placement_id)
  Rng place_rng(mix_seed(mix_seed(task_hash, seed), var.placement_id + 1));
  const double half = 0.022;
  for (int i = 0; i < n; ++i) {
    for (int attempt = 0;; ++attempt) {
      if (attempt > 2000) throw Gb0Error("placement rejection overflow");
      double x = place_rng.uniform(-0.22, 0.08);
      double y = place_rng.uniform(-0.14, 0.20);
      if (st.scene.xy_in_bin(x, y)) continue;
      bool ok = true;
      for (int j = 0; j < i; ++j) {
        Vec3 p = st.scene.objects[size_t(j)].pose.translation;
        if (std::abs(p.x - x) < 0.09 && std::abs(p.y - y) < 0.09) ok = false;
      }
      if (!ok) continue;
      st.scene.objects[size_t(i)].pose =
          SE3Pose::from_translation({x, y, st.scene.table_height + half});
      break;
    }
  }

  // park the arm at a fixed home pose
  Vec3 home{0.0, -0.10, 0.16};
  st.joints = ik_solve(home, default_arm());
  st.gripper = 1.0;
  st.gripper_cmd = 1.0;
  st.step = 0;
  return st;
}

// ---------------------------------- step ----------------------------------

inline double support_height_at(const SceneSpec& scene, double x, double y,
                                int exclude_object) {
  double support = scene.table_height;
  Vec3 bc = scene.bin_center();
  double outer = scene.bin_inner_half + scene.bin_wall;
  double ax = std::abs(x - bc.x), ay = std::abs(y - bc.y);
  if (ax < outer && ay < outer) {
    bool on_wall = ax > scene.bin_inner_half || ay > scene.bin_inner_half;
    support = scene.table_height + (on_wall ? scene.bin_height : scene.bin_wall);
  }
  for (size_t i = 0; i < scene.objects.size(); ++i) {
    if (int(i) == exclude_object) continue;
    const ObjectSpec& o = scene.objects[i];
    Vec3 p = o.pose.translation;
    if (std::abs(p.x - x) < 0.6 * (o.half.x + 0.022) &&
        std::abs(p.y - y) < 0.6 * (o.half.y + 0.022)) {
      support = std::max(support, p.z + o.half.z);
    }
  }
  return support;
}

inline Vec3 clamp_workspace(const Vec3& p) {
  const ArmGeometry g = default_arm();
  Vec3 q{std::clamp(p.x, -0.28, 0.28), std::clamp(p.y, -0.27, 0.27),
         std::clamp(p.z, 0.012, 0.34)};
  Vec3 d = q - shoulder_point(g);
  double dist = d.norm();
  double hi = g.max_reach() - 0.005;
  if (dist > hi) q = shoulder_point(g) + d * (hi / dist);
  double lo = std::max(g.min_reach() + 0.005, 0.05);
  d = q - shoulder_point(g);
  dist = d.norm();
  if (dist < lo && dist > 1e-12) q = shoulder_point(g) + d * (lo / dist);
  return q;
}

inline SimState step(SimState state, const std::vector<double>& action) {
  if (action.size() < 4) throw ShapeMismatch("action must have 4 dims");
  for (double a : action)
    if (!std::isfinite(a)) throw ShapeMismatch("action must be finite");

  Vec3 delta{std::clamp(action[0], -kActionClip, kActionClip),
             std::clamp(action[1], -kActionClip, kActionClip),
             std::clamp(action[2], -kActionClip, kActionClip)};
  double cmd = std::clamp(action[3], 0.0, 1.0);

  Vec3 prev = state.ee();
  Vec3 ee = clamp_workspace(prev + delta);
  if (ee.x != prev.x || ee.y != prev.y || ee.z != prev.z) {
    state.joints = ik_solve(ee, default_arm());
    ee = state.ee();  // after clamping, FK of the solved joints
  } else {
    ee = prev;  // zero motion keeps the joint configuration bit-identical
  }

  state.gripper_cmd = cmd;
  state.gripper = cmd;

  if (cmd < 0.5 && !state.held_object) {
    int best = -1;
    double best_d = kGraspRadius;
    for (size_t i = 0; i < state.scene.objects.size(); ++i) {
      double d = (state.scene.objects[i].pose.translation - ee).norm();
      if (d <= best_d) {
        best_d = d;
        best = int(i);
      }
    }
    if (best >= 0) state.held_object = best;
  } else if (cmd >= 0.5 && state.held_object) {
    int idx = *state.held_object;
    ObjectSpec& obj = state.scene.objects[size_t(idx)];
    double support = support_height_at(state.scene, ee.x, ee.y, idx);
    obj.pose = SE3Pose::from_translation({ee.x, ee.y, support + obj.half.z});
    state.held_object.reset();
  }

  if (state.held_object) {
    state.scene.objects[size_t(*state.held_object)].pose =
        SE3Pose::from_translation(ee);
  }

  state.step += 1;
  return state;
}

// --------------------------------- success --------------------------------

inline bool success(const SimState& state, const std::string& task_id) {
  if (!known_task(task_id)) throw UnknownTask(task_id);
  const SceneSpec& sc = state.scene;
  if (task_id == "sort-blocks") {
    double rim = sc.table_height + sc.bin_height;
    for (size_t i = 0; i < sc.objects.size(); ++i) {
      if (state.held_object && *state.held_object == int(i)) return false;
      Vec3 p = sc.objects[i].pose.translation;
      if (!sc.xy_in_bin(p.x, p.y)) return false;
      if (p.z >= rim) return false;
    }
    return true;
  }
  // stack-blocks: centers vertically aligned within 1.5 cm, none held
  if (state.held_object) return false;
  if (sc.objects.size() < 2) return false;
  double mx = 0, my = 0;
  for (const auto& o : sc.objects) {
    mx += o.pose.translation.x;
    my += o.pose.translation.y;
  }
  mx /= double(sc.objects.size());
  my /= double(sc.objects.size());
  bool above_table = false;
  for (const auto& o : sc.objects) {
    Vec3 p = o.pose.translation;
    double dx = p.x - mx, dy = p.y - my;
    if (std::sqrt(dx * dx + dy * dy) > 0.015) return false;
    if (p.z > sc.table_height + o.half.z + 0.01) above_table = true;
  }
  return above_table;
}

// ----------------------------- scripted expert ----------------------------

namespace detail {

struct ExpertPlan {
  Vec3 waypoint;
  double grip = 1.0;
};

inline std::vector<double> plan_to_action(const SimState& st,
                                          const ExpertPlan& p) {
  Vec3 d = p.waypoint - st.ee();
  return {std::clamp(d.x, -kActionClip, kActionClip),
          std::clamp(d.y, -kActionClip, kActionClip),
          std::clamp(d.z, -kActionClip, kActionClip), p.grip};
}

constexpr double kHoverZ = 0.13;
constexpr double kXyTol = 0.012;

// Shared pick-and-place skeleton: approach above the target block, descend,
// close, lift, carry above the destination, descend, open.
inline ExpertPlan pick_place_plan(const SimState& st, int target,
                                  const Vec3& dest, double drop_z) {
  const SceneSpec& sc = st.scene;
  Vec3 ee = st.ee();
  ExpertPlan p;
  if (!st.held_object) {
    Vec3 bp = sc.objects[size_t(target)].pose.translation;
    double dx = std::hypot(ee.x - bp.x, ee.y - bp.y);
    p.grip = 1.0;
    if (dx > kXyTol) {
      double cruise = std::max(kHoverZ, bp.z + 0.06);
      p.waypoint = {bp.x, bp.y, ee.z < cruise - 0.015 ? cruise : std::max(ee.z, cruise)};
      if (ee.z >= cruise - 0.015) p.waypoint.z = ee.z;  // already high enough
    } else if (ee.z > bp.z + 0.004) {
      p.waypoint = {bp.x, bp.y, bp.z};
    } else {
      p.waypoint = {bp.x, bp.y, ee.z};
      p.grip = 0.0;  // close; latch happens this step
    }
    return p;
  }
  // holding: lift, carry, descend, release
  p.grip = 0.0;
  double dx = std::hypot(ee.x - dest.x, ee.y - dest.y);
  if (dx > kXyTol) {
    if (ee.z < kHoverZ - 0.01) {
      p.waypoint = {ee.x, ee.y, kHoverZ};
    } else {
      p.waypoint = {dest.x, dest.y, std::max(ee.z, kHoverZ)};
    }
  } else if (ee.z > drop_z + 0.004) {
    p.waypoint = {dest.x, dest.y, drop_z};
  } else {
    p.waypoint = ee;
    p.grip = 1.0;  // open; the block drops to its support
  }
  return p;
}

}  // namespace detail

inline std::vector<double> scripted_expert(const SimState& state,
                                           const std::string& task_id) {
  if (!known_task(task_id)) throw UnknownTask(task_id);
  const SceneSpec& sc = state.scene;
  Vec3 ee = state.ee();

  if (success(state, task_id)) return {0, 0, 0, state.gripper_cmd};

  if (task_id == "sort-blocks") {
    int target = -1;
    if (state.held_object) {
      target = *state.held_object;
    } else {
      double best = std::numeric_limits<double>::max();
      for (size_t i = 0; i < sc.objects.size(); ++i) {
        Vec3 p = sc.objects[i].pose.translation;
        if (sc.xy_in_bin(p.x, p.y)) continue;  // already sorted
        double d = std::hypot(p.x - ee.x, p.y - ee.y);
        if (d < best) {
          best = d;
          target = int(i);
        }
      }
    }
    if (target < 0) return {0, 0, 0, state.gripper_cmd};
    // one drop spot per object so placed blocks never stack above the rim
    static const double kSlots[4][2] = {
        {-0.028, -0.028}, {0.028, -0.028}, {-0.028, 0.028}, {0.028, 0.028}};
    Vec3 dest = sc.bin_center() +
                Vec3{kSlots[target % 4][0], kSlots[target % 4][1], 0};
    double drop_z = sc.table_height + sc.bin_height + 0.035;
    return detail::plan_to_action(
        state, detail::pick_place_plan(state, target, dest, drop_z));
  }

  // stack-blocks: put object 1 on top of object 0
  const ObjectSpec& base = sc.objects[0];
  int target = 1;
  Vec3 dest = base.pose.translation;
  double drop_z = base.pose.translation.z + base.half.z +
                  sc.objects[1].half.z + 0.022;
  return detail::plan_to_action(
      state, detail::pick_place_plan(state, target, dest, drop_z));
}

// --------------------------------- render ---------------------------------

namespace detail {

struct Hit {
  double t = std::numeric_limits<double>::max();
  Vec3 normal;
  Vec3 color;
  bool textured = false;
};

inline void hit_aabb(const Vec3& ro, const Vec3& rd, const Vec3& lo,
                     const Vec3& hi, const Vec3& color, bool textured,
                     Hit& best) {
  double t0 = 0.0, t1 = best.t;
  int axis = -1;
  bool flip = false;
  const double o[3] = {ro.x, ro.y, ro.z};
  const double d[3] = {rd.x, rd.y, rd.z};
  const double l[3] = {lo.x, lo.y, lo.z};
  const double h[3] = {hi.x, hi.y, hi.z};
  for (int a = 0; a < 3; ++a) {
    if (std::abs(d[a]) < 1e-12) {
      if (o[a] < l[a] || o[a] > h[a]) return;
      continue;
    }
    double inv = 1.0 / d[a];
    double ta = (l[a] - o[a]) * inv;
    double tb = (h[a] - o[a]) * inv;
    bool swapped = ta > tb;
    if (swapped) std::swap(ta, tb);
    if (ta > t0) {
      t0 = ta;
      axis = a;
      flip = swapped;  // entry through the high face when the ray runs -a
    }
    t1 = std::min(t1, tb);
    if (t0 > t1) return;
  }
  if (axis < 0 || t0 <= 1e-9 || t0 >= best.t) return;
  best.t = t0;
  Vec3 n{0, 0, 0};
  double sign = flip ? 1.0 : -1.0;
  if (axis == 0) n.x = sign;
  if (axis == 1) n.y = sign;
  if (axis == 2) n.z = sign;
  best.normal = n;
  best.color = color;
  best.textured = textured;
}

inline void hit_sphere(const Vec3& ro, const Vec3& rd, const Vec3& c, double r,
                       const Vec3& color, Hit& best) {
  Vec3 oc = ro - c;
  double b = oc.dot(rd);
  double cc = oc.dot(oc) - r * r;
  double disc = b * b - cc;
  if (disc < 0) return;
  double t = -b - std::sqrt(disc);
  if (t <= 1e-9 || t >= best.t) return;
  best.t = t;
  best.normal = (ro + rd * t - c).normalized();
  best.color = color;
  best.textured = false;
}

inline void hit_capsule(const Vec3& ro, const Vec3& rd, const Vec3& a,
                        const Vec3& b, double r, const Vec3& color, Hit& best) {
  Vec3 ba = b - a;
  Vec3 oa = ro - a;
  double baba = ba.dot(ba);
  double bard = ba.dot(rd);
  double baoa = ba.dot(oa);
  double rdoa = rd.dot(oa);
  double oaoa = oa.dot(oa);
  double A = baba - bard * bard;
  double B = baba * rdoa - baoa * bard;
  double C = baba * oaoa - baoa * baoa - r * r * baba;
  double H = B * B - A * C;
  if (H >= 0) {
    double t = (-B - std::sqrt(H)) / A;
    double y = baoa + t * bard;
    if (y > 0 && y < baba && t > 1e-9 && t < best.t) {
      best.t = t;
      Vec3 p = ro + rd * t;
      best.normal = (p - (a + ba * (y / baba))).normalized();
      best.color = color;
      best.textured = false;
      return;
    }
  }
  hit_sphere(ro, rd, a, r, color, best);
  hit_sphere(ro, rd, b, r, color, best);
}

}  // namespace detail

inline void render(const SimState& state, const CameraModel& cam,
                   ImageRGB& rgb, ImageDepth& depth) {
  if (!cam.valid()) throw Gb0Error("invalid camera");
  const SceneSpec& sc = state.scene;
  const PaletteSpec& pal = sc.palette;
  const ArmGeometry arm = default_arm();

  rgb = ImageRGB(cam.width, cam.height);
  depth = ImageDepth(cam.width, cam.height);

  SE3Pose cam_to_world = inverse(cam.extrinsic);
  Vec3 ro = cam_to_world.translation;
  auto rot_rows = cam.extrinsic.rotation.rows();  // world -> cam rows

  Vec3 ldir = pal.light.direction.normalized();
  double th = sc.table_height;

  // arm joints and gripper fingers
  Vec3 sp = shoulder_point(arm);
  Vec3 ep = elbow_point(arm, state.joints);
  Vec3 ee = arm_fk(arm, state.joints);
  Vec3 tangent{-std::sin(state.joints.yaw), std::cos(state.joints.yaw), 0};
  double finger_sep = 0.012 + 0.05 * std::clamp(state.gripper, 0.0, 1.0);
  Vec3 f1 = ee + tangent * (finger_sep * 0.5);
  Vec3 f2 = ee - tangent * (finger_sep * 0.5);

  Vec3 bc = sc.bin_center();
  double ih = sc.bin_inner_half, bw = sc.bin_wall, bh = sc.bin_height;

  for (int py = 0; py < cam.height; ++py) {
    for (int px = 0; px < cam.width; ++px) {
      Vec3 dir_cam{(px + 0.5 - cam.cx) / cam.fx, (py + 0.5 - cam.cy) / cam.fy,
                   1.0};
      Vec3 rd = (cam_to_world.rotation.rotate(dir_cam)).normalized();

      detail::Hit hit;
      // floor and table
      detail::hit_aabb(ro, rd, {-2.0, -2.0, kFloorZ - 0.02}, {2.0, 2.0, kFloorZ},
                       pal.floor, true, hit);
      detail::hit_aabb(ro, rd, {-kTableHalf, -kTableHalf, th - kTableThick},
                       {kTableHalf, kTableHalf, th}, pal.table, true, hit);
      // bin: floor slab and four walls
      detail::hit_aabb(ro, rd, {bc.x - ih, bc.y - ih, th},
                       {bc.x + ih, bc.y + ih, th + bw}, pal.bin, false, hit);
      detail::hit_aabb(ro, rd, {bc.x - ih - bw, bc.y - ih - bw, th},
                       {bc.x - ih, bc.y + ih + bw, th + bh}, pal.bin, false, hit);
      detail::hit_aabb(ro, rd, {bc.x + ih, bc.y - ih - bw, th},
                       {bc.x + ih + bw, bc.y + ih + bw, th + bh}, pal.bin, false,
                       hit);
      detail::hit_aabb(ro, rd, {bc.x - ih, bc.y - ih - bw, th},
                       {bc.x + ih, bc.y - ih, th + bh}, pal.bin, false, hit);
      detail::hit_aabb(ro, rd, {bc.x - ih, bc.y + ih, th},
                       {bc.x + ih, bc.y + ih + bw, th + bh}, pal.bin, false, hit);
      // objects
      for (const auto& o : sc.objects) {
        Vec3 p = o.pose.translation;
        if (o.shape == ShapeKind::box) {
          detail::hit_aabb(ro, rd, p - o.half, p + o.half, o.rgb, false, hit);
        } else {
          detail::hit_sphere(ro, rd, p, o.half.x, o.rgb, hit);
        }
      }
      // arm: base pillar, two links, two fingers
      detail::hit_capsule(ro, rd, arm.base, sp, 0.030, pal.arm, hit);
      detail::hit_capsule(ro, rd, sp, ep, 0.024, pal.arm, hit);
      detail::hit_capsule(ro, rd, ep, ee, 0.019, pal.arm, hit);
      detail::hit_capsule(ro, rd, f1 + Vec3{0, 0, 0.028}, f1 - Vec3{0, 0, 0.012},
                          0.006, pal.arm, hit);
      detail::hit_capsule(ro, rd, f2 + Vec3{0, 0, 0.028}, f2 - Vec3{0, 0, 0.012},
                          0.006, pal.arm, hit);

      if (hit.t == std::numeric_limits<double>::max()) {
        rgb.set(px, py, pal.background);
        continue;  // depth stays 0 = invalid
      }
      Vec3 p = ro + rd * hit.t;
      double zc = rot_rows[2].dot(p) + cam.extrinsic.translation.z;
      depth.at(px, py) = float(zc);

      double lambert = std::max(0.0, hit.normal.dot(-ldir));
      double shade = pal.light.ambient + pal.light.intensity * lambert;
      Vec3 c = hit.color * shade;
      if (hit.textured && pal.texture_noise > 0) {
        uint64_t hsh = mix_seed(mix_seed(sc.palette_id * 2654435761ULL,
                                         uint64_t(px) * 73856093ULL),
                                uint64_t(py) * 19349663ULL);
        double nse = (double(hsh & 0xffff) / 65535.0 - 0.5) * 2.0;
        c = c + Vec3{1, 1, 1} * (nse * pal.texture_noise);
      }
      rgb.set(px, py, clamp01(c));
    }
  }
}

// Arm-only render pass: capsules and fingers against an empty background,
// used to re-pose the arm over geometric warps. Pixels without arm keep
// depth 0.
inline void render_arm(const SceneSpec& scene, const JointAngles& joints,
                       double gripper, const CameraModel& cam, ImageRGB& rgb,
                       ImageDepth& depth) {
  const ArmGeometry arm = default_arm();
  const PaletteSpec& pal = scene.palette;
  rgb = ImageRGB(cam.width, cam.height);
  depth = ImageDepth(cam.width, cam.height);

  SE3Pose cam_to_world = inverse(cam.extrinsic);
  Vec3 ro = cam_to_world.translation;
  auto rot_rows = cam.extrinsic.rotation.rows();
  Vec3 ldir = pal.light.direction.normalized();

  Vec3 sp = shoulder_point(arm);
  Vec3 ep = elbow_point(arm, joints);
  Vec3 ee = arm_fk(arm, joints);
  Vec3 tangent{-std::sin(joints.yaw), std::cos(joints.yaw), 0};
  double finger_sep = 0.012 + 0.05 * std::clamp(gripper, 0.0, 1.0);
  Vec3 f1 = ee + tangent * (finger_sep * 0.5);
  Vec3 f2 = ee - tangent * (finger_sep * 0.5);

  for (int py = 0; py < cam.height; ++py) {
    for (int px = 0; px < cam.width; ++px) {
      Vec3 dir_cam{(px + 0.5 - cam.cx) / cam.fx, (py + 0.5 - cam.cy) / cam.fy,
                   1.0};
      Vec3 rd = (cam_to_world.rotation.rotate(dir_cam)).normalized();
      detail::Hit hit;
      detail::hit_capsule(ro, rd, arm.base, sp, 0.030, pal.arm, hit);
      detail::hit_capsule(ro, rd, sp, ep, 0.024, pal.arm, hit);
      detail::hit_capsule(ro, rd, ep, ee, 0.019, pal.arm, hit);
      detail::hit_capsule(ro, rd, f1 + Vec3{0, 0, 0.028},
                          f1 - Vec3{0, 0, 0.012}, 0.006, pal.arm, hit);
      detail::hit_capsule(ro, rd, f2 + Vec3{0, 0, 0.028},
                          f2 - Vec3{0, 0, 0.012}, 0.006, pal.arm, hit);
      if (hit.t == std::numeric_limits<double>::max()) continue;
      Vec3 p = ro + rd * hit.t;
      depth.at(px, py) =
          float(rot_rows[2].dot(p) + cam.extrinsic.translation.z);
      double lambert = std::max(0.0, hit.normal.dot(-ldir));
      double shade = pal.light.ambient + pal.light.intensity * lambert;
      rgb.set(px, py, clamp01(hit.color * shade));
    }
  }
}

// ------------------------------ episode rollout ----------------------------

inline Frame capture_frame(const SimState& state,
                           const std::vector<CameraModel>& cams, int t) {
  Frame f;
  f.rgb.resize(cams.size());
  f.depth.resize(cams.size());
  for (size_t c = 0; c < cams.size(); ++c)
    render(state, cams[c], f.rgb[c], f.depth[c]);
  f.joint_angles = {state.joints.yaw, state.joints.shoulder, state.joints.elbow};
  f.gripper = state.gripper;
  f.gripper_cmd = state.gripper_cmd;
  f.ee_pose = SE3Pose::from_translation(state.ee());
  f.t = t;
  return f;
}

// Roll the scripted expert to success (plus a short settled tail) or the
// step cap. Failed episodes are returned with expert_failed set.
inline Episode generate_episode(const std::string& task_id, uint64_t seed,
                                const Variation& var,
                                std::vector<CameraModel> cameras,
                                int step_cap = kStepCap) {
  if (cameras.empty()) cameras = build_camera_set(var.camera_set);
  SimState st = reset(task_id, seed, var);

  Episode ep;
  ep.task_id = task_id;
  ep.cameras = cameras;
  ep.scene_spec = st.scene;  // initial placements; replay recovers later states
  ep.provenance = Provenance::real_analog;

  ep.frames.push_back(capture_frame(st, cameras, 0));
  int settled = 0;
  for (int t = 0; t < step_cap; ++t) {
    bool done = success(st, task_id);
    if (done && settled >= 5) break;
    std::vector<double> a =
        done ? std::vector<double>{0, 0, 0, st.gripper_cmd}
             : scripted_expert(st, task_id);
    st = step(st, a);
    ep.actions.push_back(a);
    ep.frames.push_back(capture_frame(st, cameras, int(ep.frames.size())));
    if (done) ++settled;
  }
  ep.expert_failed = !success(st, task_id);
  ep.check();
  return ep;
}

// Rebuild the simulator state at frame 0 of an episode. Replaying the
// recorded actions through step() then reproduces every later state, which
// is what the re-render pipelines rely on.
inline SimState state_at_start(const Episode& ep) {
  if (!ep.scene_spec) throw MissingSceneSpec("episode has no scene_spec");
  SimState st;
  st.scene = *ep.scene_spec;
  const Frame& f0 = ep.frames.at(0);
  st.joints = {f0.joint_angles[0], f0.joint_angles[1], f0.joint_angles[2]};
  st.gripper = f0.gripper;
  st.gripper_cmd = f0.gripper_cmd;
  st.step = 0;
  return st;
}

}  // namespace sim
}  // namespace gb0
