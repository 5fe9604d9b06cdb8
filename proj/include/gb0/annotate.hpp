#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "gb0/episode.hpp"
#include "gb0/microsim.hpp"

namespace gb0 {
namespace annotate {

// ---------------------------------------------------------------------------
// Gripper-transition segmentation. A transition is a crossing of gripper_cmd
// through 0.5 with hysteresis band [0.4, 0.6]; the new side must persist for
// 3 consecutive steps (debounce). Segments are the half-open intervals
// between events and always cover [0, T).
// ---------------------------------------------------------------------------

constexpr double kBandLow = 0.4;
constexpr double kBandHigh = 0.6;
constexpr int kDebounce = 3;

namespace detail {

enum class Side { open, closed };

inline std::optional<Side> band_side(double cmd) {
  if (cmd < kBandLow) return Side::closed;
  if (cmd > kBandHigh) return Side::open;
  return std::nullopt;
}

}  // namespace detail

struct GripperEvent {
  int t = 0;
  GripperTransition kind = GripperTransition::grasp;
};

inline std::vector<GripperEvent> gripper_events(const Episode& ep) {
  const int T = ep.length();
  std::vector<GripperEvent> events;
  if (T < 2) return events;

  auto side_at = [&](int t) { return detail::band_side(ep.frames[size_t(t)].gripper_cmd); };

  detail::Side current =
      side_at(0).value_or(ep.frames[0].gripper_cmd >= 0.5 ? detail::Side::open
                                                          : detail::Side::closed);
  for (int t = 1; t < T; ++t) {
    auto cand = side_at(t);
    if (!cand || *cand == current) continue;
    bool persists = true;
    for (int k = 0; k < kDebounce; ++k) {
      if (t + k >= T) {
        persists = false;
        break;
      }
      auto s = side_at(t + k);
      if (!s || *s != *cand) {
        persists = false;
        break;
      }
    }
    if (!persists) continue;
    events.push_back({t, *cand == detail::Side::closed
                             ? GripperTransition::grasp
                             : GripperTransition::release});
    current = *cand;
  }
  return events;
}

inline std::vector<SubtaskSegment> segment_by_gripper(const Episode& ep) {
  if (ep.length() < 2) throw ShapeMismatch("need at least 2 frames to segment");
  std::vector<GripperEvent> events = gripper_events(ep);
  std::vector<SubtaskSegment> segs;
  int cursor = 0;
  for (const auto& e : events) {
    SubtaskSegment s;
    s.start = cursor;
    s.end = e.t;
    s.transition = e.kind;
    segs.push_back(s);
    cursor = e.t;
  }
  SubtaskSegment tail;
  tail.start = cursor;
  tail.end = ep.length();
  tail.transition = GripperTransition::episode_boundary;
  segs.push_back(tail);
  return segs;
}

// ---------------------------------------------------------------------------
// Ground-truth object tracking by replaying grasp/release events: objects
// only move while held, so initial placements plus the event sequence
// recover every object position the subgoal templates need.
// ---------------------------------------------------------------------------

struct TrackedEvent {
  int t = 0;
  GripperTransition kind = GripperTransition::grasp;
  int object = -1;     // index into scene objects, -1 when unmatched
  bool over_bin = false;
  bool over_block = false;
};

inline std::vector<TrackedEvent> track_events(const Episode& ep) {
  std::vector<TrackedEvent> out;
  if (!ep.scene_spec) return out;
  const SceneSpec& sc = *ep.scene_spec;
  std::vector<Vec3> pos;
  for (const auto& o : sc.objects) pos.push_back(o.pose.translation);

  int held = -1;
  for (const auto& e : gripper_events(ep)) {
    TrackedEvent te;
    te.t = e.t;
    te.kind = e.kind;
    Vec3 ee = ep.frames[size_t(e.t)].ee_pose.translation;
    if (e.kind == GripperTransition::grasp) {
      double best = 0.03;
      for (size_t i = 0; i < pos.size(); ++i) {
        double d = (pos[i] - ee).norm();
        if (d < best) {
          best = d;
          te.object = int(i);
        }
      }
      held = te.object;
      if (held >= 0) pos[size_t(held)] = ee;
    } else {
      te.object = held;
      te.over_bin = sc.xy_in_bin(ee.x, ee.y);
      for (size_t i = 0; i < pos.size(); ++i) {
        if (int(i) == held) continue;
        if (std::hypot(pos[i].x - ee.x, pos[i].y - ee.y) < 0.04)
          te.over_block = true;
      }
      if (held >= 0) pos[size_t(held)] = {ee.x, ee.y, pos[size_t(held)].z};
      held = -1;
    }
    out.push_back(te);
  }
  return out;
}

// Template instantiation from the closed phrase vocabulary.
inline std::string subgoal_text(const SubtaskSegment& segment,
                                const Episode& ep) {
  if (segment.end <= segment.start || segment.end > ep.length())
    throw ShapeMismatch("segment out of range");
  std::vector<TrackedEvent> events = track_events(ep);

  auto color_of = [&](int obj) -> std::optional<std::string> {
    if (obj < 0 || !ep.scene_spec ||
        obj >= int(ep.scene_spec->objects.size()))
      return std::nullopt;
    return ep.scene_spec->objects[size_t(obj)].color_name;
  };

  if (segment.transition != GripperTransition::episode_boundary) {
    for (const auto& e : events) {
      if (e.t != segment.end) continue;
      auto color = color_of(e.object);
      if (!color) break;
      if (e.kind == GripperTransition::grasp) return "pick " + *color + " block";
      if (e.over_bin) return "place " + *color + " block into bin";
      if (e.over_block) return "stack " + *color + " block";
      break;
    }
    return "continue task";
  }

  // trailing segment: point at what remains, or report completion
  if (ep.scene_spec) {
    std::vector<Vec3> pos;
    for (const auto& o : ep.scene_spec->objects) pos.push_back(o.pose.translation);
    int held = -1;
    for (const auto& e : events) {
      if (e.t > segment.start) break;
      if (e.kind == GripperTransition::grasp) {
        held = e.object;
      } else {
        Vec3 ee = ep.frames[size_t(e.t)].ee_pose.translation;
        if (e.object >= 0) pos[size_t(e.object)] = {ee.x, ee.y, pos[size_t(e.object)].z};
        held = -1;
      }
    }
    if (held >= 0) return "move toward bin";
    if (ep.task_id == "sort-blocks") {
      Vec3 ee = ep.frames[size_t(segment.start)].ee_pose.translation;
      double best = 1e9;
      int target = -1;
      for (size_t i = 0; i < pos.size(); ++i) {
        if (ep.scene_spec->xy_in_bin(pos[i].x, pos[i].y)) continue;
        double d = std::hypot(pos[i].x - ee.x, pos[i].y - ee.y);
        if (d < best) {
          best = d;
          target = int(i);
        }
      }
      if (target >= 0) {
        auto color = color_of(target);
        if (color) return "move toward " + *color + " block";
      }
    }
  }
  return "continue task";
}

// ---------------------------------------------------------------------------
// 2D trajectory annotation: 10 end-effector keypoints over [t0, t0+W],
// projected through the head camera and normalized by image size.
// ---------------------------------------------------------------------------

constexpr int kTrajectoryWindow = 48;

inline TrajectoryAnnotation annotate_trajectory(const Episode& ep, int t0,
                                                const CameraModel& head_cam,
                                                int window = kTrajectoryWindow) {
  if (t0 + 1 >= ep.length())
    throw ShapeMismatch("annotate_trajectory needs t0 + 1 < |frames|");
  TrajectoryAnnotation out;
  out.t0 = t0;
  int t_end = std::min(t0 + window, ep.length() - 1);
  for (int k = 0; k < TrajectoryAnnotation::kKeypoints; ++k) {
    int idx = t0 + int(std::lround(double(k) * double(t_end - t0) / 9.0));
    const Vec3 p = ep.frames[size_t(idx)].ee_pose.translation;
    double un = 0.5, vn = 0.5;
    bool valid = false;
    try {
      Projection pr = project(p, head_cam);
      un = pr.u / double(head_cam.width);
      vn = pr.v / double(head_cam.height);
      valid = un >= 0.0 && un <= 1.0 && vn >= 0.0 && vn <= 1.0;
    } catch (const NonPositiveDepth&) {
      valid = false;
    }
    out.keypoints[size_t(k)] = {std::clamp(un, 0.0, 1.0),
                                std::clamp(vn, 0.0, 1.0)};
    out.valid[size_t(k)] = valid;
  }
  return out;
}

// Full annotation pass over one episode: segments (always), subgoal texts
// and per-segment trajectory keypoints unless ablated.
inline void annotate_episode(Episode& ep, bool subgoals = true,
                             bool trajectories = true,
                             int window = kTrajectoryWindow) {
  std::vector<SubtaskSegment> segs = segment_by_gripper(ep);
  if (subgoals) {
    for (auto& s : segs) s.subgoal = subgoal_text(s, ep);
  }
  ep.segments = segs;
  if (trajectories && !ep.cameras.empty()) {
    std::vector<TrajectoryAnnotation> trs;
    for (const auto& s : segs)
      if (s.start + 1 < ep.length())
        trs.push_back(annotate_trajectory(ep, s.start, ep.cameras[0], window));
    ep.trajectories = trs;
  }
}

// ---------------------------------------------------------------------------
// Deduplication: per task, greedy farthest-point selection on a trajectory
// shape feature, seeded by the longest episode, capped per task.
// ---------------------------------------------------------------------------

constexpr int kDedupCap = 50;

inline std::vector<double> dedup_feature(const Episode& ep) {
  std::vector<double> f;
  if (!ep.cameras.empty() && ep.length() >= 2) {
    TrajectoryAnnotation a =
        annotate_trajectory(ep, 0, ep.cameras[0], ep.length() - 1);
    for (int k = 0; k < TrajectoryAnnotation::kKeypoints; ++k) {
      f.push_back(a.keypoints[size_t(k)][0]);
      f.push_back(a.keypoints[size_t(k)][1]);
    }
  } else {
    f.assign(20, 0.0);
  }
  f.push_back(double(ep.length()) / double(sim::kStepCap));
  return f;
}

inline double feature_dist(const std::vector<double>& a,
                           const std::vector<double>& b) {
  double s = 0;
  for (size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

// Returns the retained indices (in input order). Callers must present a
// stable input order, e.g. sorted by (task_id, directory name).
inline std::vector<size_t> dedup_select(const std::vector<Episode>& episodes,
                                        int cap = kDedupCap) {
  std::vector<size_t> retained;
  std::vector<std::string> tasks;
  for (const auto& ep : episodes)
    if (std::find(tasks.begin(), tasks.end(), ep.task_id) == tasks.end())
      tasks.push_back(ep.task_id);

  for (const auto& task : tasks) {
    std::vector<size_t> group;
    for (size_t i = 0; i < episodes.size(); ++i)
      if (episodes[i].task_id == task) group.push_back(i);

    if (int(group.size()) <= cap) {
      retained.insert(retained.end(), group.begin(), group.end());
      continue;
    }

    std::vector<std::vector<double>> feats;
    feats.reserve(group.size());
    for (size_t gi : group) feats.push_back(dedup_feature(episodes[gi]));

    size_t seed = 0;
    for (size_t k = 1; k < group.size(); ++k)
      if (episodes[group[k]].length() > episodes[group[seed]].length()) seed = k;

    std::vector<bool> picked(group.size(), false);
    std::vector<double> min_dist(group.size(),
                                 std::numeric_limits<double>::max());
    std::vector<size_t> sel{seed};
    picked[seed] = true;
    while (int(sel.size()) < cap) {
      size_t last = sel.back();
      size_t best = group.size();
      double best_d = -1.0;
      for (size_t k = 0; k < group.size(); ++k) {
        if (picked[k]) continue;
        min_dist[k] = std::min(min_dist[k], feature_dist(feats[k], feats[last]));
        if (min_dist[k] > best_d) {
          best_d = min_dist[k];
          best = k;
        }
      }
      if (best == group.size()) break;
      picked[best] = true;
      sel.push_back(best);
    }
    for (size_t k = 0; k < group.size(); ++k)
      if (picked[k]) retained.push_back(group[k]);
  }
  std::sort(retained.begin(), retained.end());
  return retained;
}

inline std::vector<Episode> deduplicate(std::vector<Episode> episodes,
                                        int cap = kDedupCap) {
  std::vector<size_t> keep = dedup_select(episodes, cap);
  std::vector<Episode> out;
  out.reserve(keep.size());
  for (size_t i : keep) out.push_back(std::move(episodes[i]));
  return out;
}

// ---------------------------------------------------------------------------
// Action normalization statistics: per-dimension 1st/99th percentile bounds
// mapped affinely onto [-1, 1], clipped outside.
// ---------------------------------------------------------------------------

struct ActionStats {
  std::vector<double> low, high;

  int dims() const { return int(low.size()); }

  double normalize_one(double v, int d) const {
    double y = 2.0 * (v - low[size_t(d)]) / (high[size_t(d)] - low[size_t(d)]) - 1.0;
    return std::clamp(y, -1.0, 1.0);
  }

  double denormalize_one(double y, int d) const {
    return low[size_t(d)] + (y + 1.0) * 0.5 * (high[size_t(d)] - low[size_t(d)]);
  }

  std::vector<double> normalize(const std::vector<double>& a) const {
    std::vector<double> out(a.size());
    for (size_t d = 0; d < a.size(); ++d) out[d] = normalize_one(a[d], int(d));
    return out;
  }

  std::vector<double> denormalize(const std::vector<double>& a) const {
    std::vector<double> out(a.size());
    for (size_t d = 0; d < a.size(); ++d) out[d] = denormalize_one(a[d], int(d));
    return out;
  }
};

inline double percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  if (v.empty()) throw EmptyCorpus("percentile of empty set");
  double idx = q / 100.0 * double(v.size() - 1);
  size_t lo = size_t(std::floor(idx));
  size_t hi = size_t(std::ceil(idx));
  double w = idx - double(lo);
  return v[lo] * (1.0 - w) + v[hi] * w;
}

inline ActionStats fit_action_stats(const std::vector<Episode>& episodes) {
  int D = 0;
  for (const auto& ep : episodes)
    if (!ep.actions.empty()) D = std::max(D, ep.action_dim());
  if (D == 0) throw EmptyCorpus("no actions in corpus");

  ActionStats st;
  st.low.resize(size_t(D));
  st.high.resize(size_t(D));
  for (int d = 0; d < D; ++d) {
    std::vector<double> vals;
    for (const auto& ep : episodes)
      for (const auto& a : ep.actions)
        if (d < int(a.size())) vals.push_back(a[size_t(d)]);
    if (vals.empty()) throw EmptyCorpus("no values for action dim");
    double lo = percentile(vals, 1.0);
    double hi = percentile(vals, 99.0);
    if (hi - lo < 1e-12) {  // degenerate dimension rule
      lo -= 1e-6;
      hi += 1e-6;
    }
    st.low[size_t(d)] = lo;
    st.high[size_t(d)] = hi;
  }
  return st;
}

}  // namespace annotate
}  // namespace gb0
