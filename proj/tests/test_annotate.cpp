#include "gb0/annotate.hpp"

#include "catch_amalgamated.hpp"
#include "gb0/microsim.hpp"

using namespace gb0;
using namespace gb0::annotate;

namespace {

// Episode with a prescribed gripper_cmd trace and stationary everything else.
Episode cmd_trace_episode(const std::vector<double>& cmds) {
  Episode ep;
  ep.task_id = "sort-blocks";
  for (size_t t = 0; t < cmds.size(); ++t) {
    Frame f;
    f.t = int(t);
    f.gripper_cmd = cmds[t];
    f.gripper = cmds[t];
    f.ee_pose = SE3Pose::from_translation({0, 0, 0.1});
    ep.frames.push_back(f);
  }
  ep.actions.assign(cmds.size() - 1, std::vector<double>{0, 0, 0, 1});
  return ep;
}

Episode demo_episode(uint64_t seed) {
  sim::CameraRigSpec rig = sim::head_camera_spec(24, 24);
  return sim::generate_episode("sort-blocks", seed, sim::Variation{},
                               {sim::build_camera(rig)});
}

}  // namespace

TEST_CASE("segmentation: constant command gives a single segment") {
  std::vector<double> cmds(20, 1.0);
  Episode ep = cmd_trace_episode(cmds);
  auto segs = segment_by_gripper(ep);
  REQUIRE(segs.size() == 1);
  CHECK(segs[0].start == 0);
  CHECK(segs[0].end == 20);
  CHECK(segs[0].transition == GripperTransition::episode_boundary);
}

TEST_CASE("segmentation: grasp and release crossings split the episode") {
  std::vector<double> cmds;
  for (int t = 0; t < 40; ++t) cmds.push_back(t < 10 ? 1.0 : (t < 30 ? 0.0 : 1.0));
  Episode ep = cmd_trace_episode(cmds);
  auto segs = segment_by_gripper(ep);
  REQUIRE(segs.size() == 3);
  CHECK(segs[0].start == 0);
  CHECK(segs[0].end == 10);
  CHECK(segs[0].transition == GripperTransition::grasp);
  CHECK(segs[1].start == 10);
  CHECK(segs[1].end == 30);
  CHECK(segs[1].transition == GripperTransition::release);
  CHECK(segs[2].start == 30);
  CHECK(segs[2].end == 40);
  CHECK(segs[2].transition == GripperTransition::episode_boundary);
}

TEST_CASE("segmentation: single-step flicker is debounced away") {
  std::vector<double> cmds(20, 1.0);
  cmds[8] = 0.0;  // 1 -> 0 -> 1
  Episode ep = cmd_trace_episode(cmds);
  auto segs = segment_by_gripper(ep);
  REQUIRE(segs.size() == 1);

  // two-step flicker still below the 3-step debounce
  cmds[9] = 0.0;
  segs = segment_by_gripper(cmd_trace_episode(cmds));
  REQUIRE(segs.size() == 1);

  // three steps is a real transition
  cmds[10] = 0.0;
  segs = segment_by_gripper(cmd_trace_episode(cmds));
  REQUIRE(segs.size() == 3);
  CHECK(segs[0].end == 8);
}

TEST_CASE("segmentation: values inside the hysteresis band do not cross") {
  std::vector<double> cmds(20, 1.0);
  for (int t = 8; t < 14; ++t) cmds[size_t(t)] = 0.45;  // inside [0.4, 0.6]
  auto segs = segment_by_gripper(cmd_trace_episode(cmds));
  REQUIRE(segs.size() == 1);
}

TEST_CASE("segments partition [0, T) for random traces") {
  Rng rng(2024);
  for (int trial = 0; trial < 50; ++trial) {
    int T = 5 + int(rng.uniform_int(60));
    std::vector<double> cmds;
    for (int t = 0; t < T; ++t) cmds.push_back(rng.uniform());
    Episode ep = cmd_trace_episode(cmds);
    auto segs = segment_by_gripper(ep);
    int cursor = 0;
    for (const auto& s : segs) {
      CHECK(s.start == cursor);
      CHECK(s.end > s.start);
      cursor = s.end;
    }
    CHECK(cursor == T);
  }
}

TEST_CASE("subgoal text instantiates the closed templates from ground truth") {
  Episode ep = demo_episode(13);
  auto segs = segment_by_gripper(ep);
  REQUIRE(segs.size() >= 4);  // two pick-place cycles plus the tail

  REQUIRE(ep.scene_spec.has_value());
  std::vector<std::string> colors;
  for (const auto& o : ep.scene_spec->objects) colors.push_back(o.color_name);

  int picks = 0, places = 0;
  for (const auto& s : segs) {
    std::string text = subgoal_text(s, ep);
    if (s.transition == GripperTransition::grasp) {
      ++picks;
      bool matched = false;
      for (const auto& c : colors)
        if (text == "pick " + c + " block") matched = true;
      CHECK(matched);
    } else if (s.transition == GripperTransition::release) {
      ++places;
      bool matched = false;
      for (const auto& c : colors)
        if (text == "place " + c + " block into bin") matched = true;
      CHECK(matched);
    } else {
      CHECK(text == "continue task");
    }
  }
  CHECK(picks == 2);
  CHECK(places == 2);
}

TEST_CASE("subgoal text: stacking release lands on the stack template") {
  sim::CameraRigSpec rig = sim::head_camera_spec(16, 16);
  Episode ep = sim::generate_episode("stack-blocks", 3, sim::Variation{},
                                     {sim::build_camera(rig)});
  auto segs = segment_by_gripper(ep);
  bool saw_stack = false;
  for (const auto& s : segs) {
    if (s.transition != GripperTransition::release) continue;
    std::string text = subgoal_text(s, ep);
    if (text.rfind("stack ", 0) == 0) saw_stack = true;
  }
  CHECK(saw_stack);
}

TEST_CASE("trajectory annotation: stationary end-effector repeats one point") {
  Episode ep = cmd_trace_episode(std::vector<double>(30, 1.0));
  CameraModel cam;
  cam.fx = cam.fy = 100;
  cam.cx = cam.cy = 32;
  cam.width = cam.height = 64;
  for (auto& f : ep.frames) f.ee_pose = SE3Pose::from_translation({0.1, 0.05, 1.0});

  TrajectoryAnnotation a = annotate_trajectory(ep, 0, cam, 20);
  for (int k = 1; k < TrajectoryAnnotation::kKeypoints; ++k) {
    CHECK(a.keypoints[size_t(k)][0] == Catch::Approx(a.keypoints[0][0]));
    CHECK(a.keypoints[size_t(k)][1] == Catch::Approx(a.keypoints[0][1]));
    CHECK(a.valid[size_t(k)]);
  }
}

TEST_CASE("trajectory annotation: motion along camera x gives increasing u") {
  Episode ep = cmd_trace_episode(std::vector<double>(30, 1.0));
  CameraModel cam;
  cam.fx = cam.fy = 100;
  cam.cx = cam.cy = 32;
  cam.width = cam.height = 64;
  for (size_t t = 0; t < ep.frames.size(); ++t)
    ep.frames[t].ee_pose =
        SE3Pose::from_translation({-0.1 + 0.01 * double(t), 0.0, 1.0});

  TrajectoryAnnotation a = annotate_trajectory(ep, 0, cam, 29);
  for (int k = 1; k < TrajectoryAnnotation::kKeypoints; ++k) {
    CHECK(a.keypoints[size_t(k)][0] > a.keypoints[size_t(k - 1)][0]);
    CHECK(a.keypoints[size_t(k)][1] == Catch::Approx(a.keypoints[0][1]));
  }
}

TEST_CASE("trajectory annotation: W=9 samples frames 0..9 inclusively") {
  Episode ep = cmd_trace_episode(std::vector<double>(30, 1.0));
  CameraModel cam;
  cam.fx = cam.fy = 100;
  cam.cx = cam.cy = 32;
  cam.width = cam.height = 64;
  for (size_t t = 0; t < ep.frames.size(); ++t)
    ep.frames[t].ee_pose =
        SE3Pose::from_translation({-0.2 + 0.013 * double(t), 0.0, 1.0});

  TrajectoryAnnotation a = annotate_trajectory(ep, 0, cam, 9);
  for (int k = 0; k < 10; ++k) {
    Projection pr = project(ep.frames[size_t(k)].ee_pose.translation, cam);
    CHECK(a.keypoints[size_t(k)][0] == Catch::Approx(pr.u / 64.0));
    CHECK(a.keypoints[size_t(k)][1] == Catch::Approx(pr.v / 64.0));
  }
}

TEST_CASE("trajectory annotation: off-screen keypoints are clamped + masked") {
  Episode ep = cmd_trace_episode(std::vector<double>(10, 1.0));
  CameraModel cam;
  cam.fx = cam.fy = 100;
  cam.cx = cam.cy = 32;
  cam.width = cam.height = 64;
  for (auto& f : ep.frames)
    f.ee_pose = SE3Pose::from_translation({5.0, 0.0, 1.0});  // far off-screen

  TrajectoryAnnotation a = annotate_trajectory(ep, 0, cam, 9);
  for (int k = 0; k < 10; ++k) {
    CHECK_FALSE(a.valid[size_t(k)]);
    CHECK(a.keypoints[size_t(k)][0] >= 0.0);
    CHECK(a.keypoints[size_t(k)][0] <= 1.0);
  }

  // behind the camera: propagated as invalid, not as a failure
  for (auto& f : ep.frames) f.ee_pose = SE3Pose::from_translation({0, 0, -1.0});
  TrajectoryAnnotation b = annotate_trajectory(ep, 0, cam, 9);
  for (int k = 0; k < 10; ++k) CHECK_FALSE(b.valid[size_t(k)]);
}

namespace {

// Featherweight episode for dedup tests: end-effector path only.
Episode path_episode(double x0, int length) {
  Episode ep;
  ep.task_id = "sort-blocks";
  ep.cameras = {sim::build_camera(sim::head_camera_spec(32, 32))};
  for (int t = 0; t < length; ++t) {
    Frame f;
    f.t = t;
    f.ee_pose = SE3Pose::from_translation({x0 + 0.002 * t, 0.0, 0.10});
    ep.frames.push_back(f);
  }
  ep.actions.assign(size_t(length - 1), std::vector<double>{0, 0, 0, 1});
  return ep;
}

}  // namespace

TEST_CASE("dedup: below the cap everything is retained") {
  std::vector<Episode> eps;
  for (int i = 0; i < 30; ++i) eps.push_back(path_episode(-0.1 + 0.005 * i, 20));
  auto kept = dedup_select(eps, 50);
  CHECK(kept.size() == 30);
}

TEST_CASE("dedup: 60 identical episodes cap at exactly 50") {
  std::vector<Episode> eps;
  for (int i = 0; i < 60; ++i) eps.push_back(path_episode(0.0, 20));
  auto kept = dedup_select(eps, 50);
  CHECK(kept.size() == 50);
}

TEST_CASE("dedup: farthest-point selection finds the distinct episode") {
  std::vector<Episode> eps;
  for (int i = 0; i < 49; ++i) eps.push_back(path_episode(0.0, 20));
  eps.push_back(path_episode(0.15, 20));  // the distinct one, same length
  auto kept = dedup_select(eps, 2);
  REQUIRE(kept.size() == 2);
  CHECK((kept[0] == 49 || kept[1] == 49));
}

TEST_CASE("dedup groups by task id") {
  std::vector<Episode> eps;
  for (int i = 0; i < 55; ++i) eps.push_back(path_episode(0.0, 20));
  for (int i = 0; i < 4; ++i) {
    eps.push_back(path_episode(0.01 * i, 20));
    eps.back().task_id = "stack-blocks";
  }
  auto kept = dedup_select(eps, 50);
  CHECK(kept.size() == 54);
}

TEST_CASE("action stats: percentile bounds and round trip") {
  std::vector<Episode> eps;
  Episode ep = path_episode(0.0, 101);
  Rng rng(5);
  for (auto& a : ep.actions)
    a = {rng.uniform(-0.05, 0.05), rng.uniform(-0.02, 0.08),
         rng.uniform(-0.01, 0.01), 0.7};
  eps.push_back(ep);
  ActionStats st = fit_action_stats(eps);
  REQUIRE(st.dims() == 4);

  SECTION("low maps to -1, high maps to +1") {
    CHECK(st.normalize_one(st.low[0], 0) == Catch::Approx(-1.0));
    CHECK(st.normalize_one(st.high[0], 0) == Catch::Approx(1.0));
  }

  SECTION("constant dimension widens and normalizes to zero") {
    CHECK(st.high[3] - st.low[3] == Catch::Approx(2e-6));
    CHECK(st.normalize_one(0.7, 3) == Catch::Approx(0.0).margin(1e-9));
  }

  SECTION("round trip within bounds is exact to 1e-6") {
    for (int i = 0; i < 200; ++i) {
      double v = rng.uniform(st.low[1], st.high[1]);
      double back = st.denormalize_one(st.normalize_one(v, 1), 1);
      CHECK(back == Catch::Approx(v).margin(1e-6));
    }
  }

  SECTION("values outside bounds clip") {
    CHECK(st.normalize_one(1e9, 0) == 1.0);
    CHECK(st.normalize_one(-1e9, 0) == -1.0);
  }
}

TEST_CASE("fit_action_stats rejects an empty corpus") {
  std::vector<Episode> none;
  CHECK_THROWS_AS(fit_action_stats(none), EmptyCorpus);
}
