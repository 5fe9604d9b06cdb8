#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "gb0/geometry.hpp"
#include "gb0/scene.hpp"

namespace gb0 {

// ---------------------------------------------------------------------------
// Images. Unit-interval RGB, metric depth with 0 as the universal "invalid"
// sentinel. Row-major, index (y * width + x).
// ---------------------------------------------------------------------------
struct ImageRGB {
  int width = 0, height = 0;
  std::vector<float> px;  // 3 floats per pixel

  ImageRGB() = default;
  ImageRGB(int w, int h) : width(w), height(h), px(size_t(w) * h * 3, 0.f) {}

  float* at(int x, int y) { return &px[(size_t(y) * width + x) * 3]; }
  const float* at(int x, int y) const {
    return &px[(size_t(y) * width + x) * 3];
  }

  void set(int x, int y, const Vec3& c) {
    float* p = at(x, y);
    p[0] = float(c.x);
    p[1] = float(c.y);
    p[2] = float(c.z);
  }
  Vec3 get(int x, int y) const {
    const float* p = at(x, y);
    return {p[0], p[1], p[2]};
  }
};

struct ImageDepth {
  int width = 0, height = 0;
  std::vector<float> px;

  ImageDepth() = default;
  ImageDepth(int w, int h) : width(w), height(h), px(size_t(w) * h, 0.f) {}

  float& at(int x, int y) { return px[size_t(y) * width + x]; }
  float at(int x, int y) const { return px[size_t(y) * width + x]; }

  double valid_fraction() const {
    if (px.empty()) return 0.0;
    size_t n = 0;
    for (float v : px)
      if (v > 0.f) ++n;
    return double(n) / double(px.size());
  }
};

// One recorded timestep: per-camera RGBD plus proprioception.
struct Frame {
  std::vector<ImageRGB> rgb;     // one per camera
  std::vector<ImageDepth> depth;  // one per camera
  std::array<double, 3> joint_angles{0, 0, 0};
  double gripper = 1.0;      // current opening in [0,1]
  double gripper_cmd = 1.0;  // command that produced this frame
  SE3Pose ee_pose;           // end-effector in world
  int t = 0;
};

enum class Provenance { real_analog, appearance_transfer, view_transfer, idm_labeled };

inline std::string provenance_name(Provenance p) {
  switch (p) {
    case Provenance::real_analog: return "real-analog";
    case Provenance::appearance_transfer: return "appearance-transfer";
    case Provenance::view_transfer: return "view-transfer";
    case Provenance::idm_labeled: return "idm-labeled";
  }
  throw Gb0Error("bad provenance");
}

inline Provenance provenance_from_name(const std::string& s) {
  if (s == "real-analog") return Provenance::real_analog;
  if (s == "appearance-transfer") return Provenance::appearance_transfer;
  if (s == "view-transfer") return Provenance::view_transfer;
  if (s == "idm-labeled") return Provenance::idm_labeled;
  throw FormatError("unknown provenance tag: " + s);
}

enum class GripperTransition { grasp, release, episode_boundary };

inline std::string transition_name(GripperTransition t) {
  switch (t) {
    case GripperTransition::grasp: return "grasp";
    case GripperTransition::release: return "release";
    case GripperTransition::episode_boundary: return "episode-boundary";
  }
  throw Gb0Error("bad transition");
}

// Half-open [start, end) interval of one atomic subtask.
struct SubtaskSegment {
  int start = 0, end = 0;
  GripperTransition transition = GripperTransition::episode_boundary;
  std::optional<std::string> subgoal;
};

// 10 keypoints of the end-effector path in normalized image coordinates.
struct TrajectoryAnnotation {
  static constexpr int kKeypoints = 10;
  std::array<std::array<double, 2>, kKeypoints> keypoints{};
  std::array<bool, kKeypoints> valid{};
  int t0 = 0;  // frame index the window starts at
};

enum class QualityRoute { pretrain, finetune, discard };

inline std::string route_name(QualityRoute r) {
  switch (r) {
    case QualityRoute::pretrain: return "pretrain";
    case QualityRoute::finetune: return "finetune";
    case QualityRoute::discard: return "discard";
  }
  throw Gb0Error("bad route");
}

struct QualityScore {
  double geometric = 0, multiview = 0, text_align = 0, physical = 0;
  double composite = 0;
  QualityRoute route = QualityRoute::discard;
};

// ---------------------------------------------------------------------------
// Episode: one demonstration. Actions are per-step D-vectors, by default
// (delta EE x, y, z in meters, gripper command in [0,1]).
// |actions| == |frames| - 1 always.
// ---------------------------------------------------------------------------
struct Episode {
  std::string task_id;
  std::vector<CameraModel> cameras;  // camera 0 is the head camera
  std::optional<SceneSpec> scene_spec;
  Provenance provenance = Provenance::real_analog;
  bool expert_failed = false;

  std::vector<Frame> frames;
  std::vector<std::vector<double>> actions;  // (T-1) x D

  std::optional<std::vector<SubtaskSegment>> segments;
  std::optional<std::vector<TrajectoryAnnotation>> trajectories;
  std::optional<QualityScore> quality;

  int length() const { return int(frames.size()); }
  int action_dim() const { return actions.empty() ? 0 : int(actions[0].size()); }

  bool has_subgoals() const {
    if (!segments) return false;
    for (const auto& s : *segments)
      if (s.subgoal) return true;
    return false;
  }

  void check() const {
    if (frames.size() != actions.size() + 1)
      throw ShapeMismatch("|actions| must equal |frames| - 1");
    for (size_t i = 1; i < frames.size(); ++i)
      if (frames[i].t <= frames[i - 1].t)
        throw ShapeMismatch("frame step indices must strictly increase");
    if (segments) {
      int cursor = 0;
      for (const auto& s : *segments) {
        if (s.start != cursor || s.end <= s.start || s.end > length())
          throw ShapeMismatch("segments must partition [0, T)");
        cursor = s.end;
      }
      if (cursor != length()) throw ShapeMismatch("segments must cover [0, T)");
    }
    if (trajectories) {
      for (const auto& a : *trajectories)
        if (a.t0 < 0 || a.t0 >= length())
          throw ShapeMismatch("trajectory annotation t0 out of range");
    }
  }

  // Proprioception feature vector used by the policy and the IDM.
  std::array<double, 8> proprio(int t) const {
    const Frame& f = frames[size_t(t)];
    return {f.ee_pose.translation.x, f.ee_pose.translation.y,
            f.ee_pose.translation.z, f.gripper,
            f.gripper_cmd,           f.joint_angles[0],
            f.joint_angles[1],       f.joint_angles[2]};
  }
};

}  // namespace gb0
