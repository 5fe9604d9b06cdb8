#include "gb0/episode_io.hpp"

#include <cstring>
#include <filesystem>

#include "catch_amalgamated.hpp"
#include "gb0/microsim.hpp"

using namespace gb0;
namespace fs = std::filesystem;

namespace {

// Two frames, one 2x2 camera, fixed contents; small enough to pin every byte.
Episode tiny_episode() {
  Episode ep;
  ep.task_id = "sort-blocks";
  CameraModel cam;
  cam.fx = cam.fy = 10;
  cam.cx = cam.cy = 1;
  cam.width = cam.height = 2;
  ep.cameras = {cam};
  for (int t = 0; t < 2; ++t) {
    Frame f;
    f.t = t;
    f.rgb = {ImageRGB(2, 2)};
    f.depth = {ImageDepth(2, 2)};
    for (int i = 0; i < 12; ++i) f.rgb[0].px[size_t(i)] = float(t * 100 + i);
    for (int i = 0; i < 4; ++i) f.depth[0].px[size_t(i)] = float(t * 10 + i);
    f.ee_pose = SE3Pose::from_translation({0.1 * t, 0.2, 0.3});
    f.gripper = 1.0 - 0.5 * t;
    f.gripper_cmd = 0.25 * t;
    f.joint_angles = {0.1, 0.2, 0.3};
    ep.frames.push_back(f);
  }
  ep.actions = {{0.01, -0.02, 0.03, 1.0}};
  return ep;
}

void push_u32(std::string& s, uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(char((v >> (8 * i)) & 0xff));
}

void push_f32(std::string& s, float v) {
  char b[4];
  std::memcpy(b, &v, 4);
  s.append(b, 4);
}

}  // namespace

TEST_CASE("tensors.bin golden byte layout") {
  Episode ep = tiny_episode();
  std::string got = io::encode_tensors(ep);

  // independently assembled expectation, straight from the documented layout
  std::string want;
  want += "GB0E";
  push_u32(want, 1);  // version
  push_u32(want, 2);  // frames
  push_u32(want, 1);  // cameras
  push_u32(want, 2);  // H
  push_u32(want, 2);  // W
  push_u32(want, 4);  // D
  for (int t = 0; t < 2; ++t)
    for (int i = 0; i < 12; ++i) push_f32(want, float(t * 100 + i));
  for (int t = 0; t < 2; ++t)
    for (int i = 0; i < 4; ++i) push_f32(want, float(t * 10 + i));
  for (int t = 0; t < 2; ++t) {
    push_f32(want, float(0.1 * t));  // ee translation
    push_f32(want, 0.2f);
    push_f32(want, 0.3f);
    push_f32(want, 1.0f);  // ee quaternion wxyz
    push_f32(want, 0.0f);
    push_f32(want, 0.0f);
    push_f32(want, 0.0f);
    push_f32(want, float(1.0 - 0.5 * t));  // gripper
    push_f32(want, float(0.25 * t));       // gripper_cmd
    push_f32(want, 0.1f);                  // joints
    push_f32(want, 0.2f);
    push_f32(want, 0.3f);
  }
  push_f32(want, 0.01f);
  push_f32(want, -0.02f);
  push_f32(want, 0.03f);
  push_f32(want, 1.0f);

  REQUIRE(got.size() == want.size());
  CHECK(got == want);
}

TEST_CASE("tensors decode rejects corrupted headers") {
  Episode ep = tiny_episode();
  std::string buf = io::encode_tensors(ep);

  std::string bad_magic = buf;
  bad_magic[0] = 'X';
  Episode out;
  CHECK_THROWS_AS(io::decode_tensors(bad_magic, out), FormatError);

  std::string truncated = buf.substr(0, buf.size() - 3);
  CHECK_THROWS_AS(io::decode_tensors(truncated, out), FormatError);

  std::string trailing = buf + "zz";
  CHECK_THROWS_AS(io::decode_tensors(trailing, out), FormatError);
}

TEST_CASE("episode save/load round trip preserves everything") {
  sim::CameraRigSpec rig = sim::head_camera_spec(16, 16);
  Episode ep = sim::generate_episode("sort-blocks", 21, sim::Variation{},
                                     {sim::build_camera(rig)});
  // attach annotations so they round trip too
  ep.segments = std::vector<SubtaskSegment>{
      {0, 5, GripperTransition::grasp, "pick red block"},
      {5, ep.length(), GripperTransition::episode_boundary, std::nullopt}};
  TrajectoryAnnotation tr;
  tr.t0 = 0;
  for (int k = 0; k < 10; ++k) {
    tr.keypoints[size_t(k)] = {0.1 * k / 10.0, 0.5};
    tr.valid[size_t(k)] = k % 2 == 0;
  }
  ep.trajectories = std::vector<TrajectoryAnnotation>{tr};
  QualityScore q;
  q.geometric = 0.9;
  q.multiview = 1.0;
  q.text_align = 1.0;
  q.physical = 0.95;
  q.composite = 0.9625;
  q.route = QualityRoute::finetune;
  ep.quality = q;

  fs::path dir = fs::temp_directory_path() / "gb0_io_test" / "ep-000000";
  fs::remove_all(dir.parent_path());
  uint64_t digest = io::save_episode(ep, dir);

  Episode back = io::load_episode(dir);
  CHECK(back.task_id == ep.task_id);
  CHECK(back.provenance == ep.provenance);
  REQUIRE(back.frames.size() == ep.frames.size());
  CHECK(back.frames[3].rgb[0].px == ep.frames[3].rgb[0].px);
  CHECK(back.frames[3].depth[0].px == ep.frames[3].depth[0].px);
  REQUIRE(back.actions.size() == ep.actions.size());
  for (size_t d = 0; d < 4; ++d)
    CHECK(back.actions[2][d] == Catch::Approx(ep.actions[2][d]).margin(1e-6));
  CHECK(back.frames[5].gripper_cmd ==
        Catch::Approx(ep.frames[5].gripper_cmd).margin(1e-6));

  REQUIRE(back.segments.has_value());
  CHECK((*back.segments)[0].subgoal == "pick red block");
  REQUIRE(back.trajectories.has_value());
  CHECK((*back.trajectories)[0].keypoints[3][0] == Catch::Approx(0.03));
  CHECK((*back.trajectories)[0].valid[2]);
  REQUIRE(back.quality.has_value());
  CHECK(back.quality->route == QualityRoute::finetune);
  REQUIRE(back.scene_spec.has_value());
  CHECK(back.scene_spec->objects.size() == ep.scene_spec->objects.size());
  CHECK(back.scene_spec->objects[0].color_name ==
        ep.scene_spec->objects[0].color_name);

  // camera geometry round trips to full precision
  auto pr_a = project({0.05, 0.02, 0.01}, ep.cameras[0]);
  auto pr_b = project({0.05, 0.02, 0.01}, back.cameras[0]);
  CHECK(pr_a.u == Catch::Approx(pr_b.u).margin(1e-9));
  CHECK(pr_a.v == Catch::Approx(pr_b.v).margin(1e-9));

  // digests are content addressed and stable
  CHECK(io::episode_dir_digest(dir) == digest);
  uint64_t again = io::save_episode(back, dir);
  CHECK(again == digest);

  fs::remove_all(dir.parent_path());
}

TEST_CASE("episode dir listing is sorted") {
  fs::path root = fs::temp_directory_path() / "gb0_io_sorted";
  fs::remove_all(root);
  Episode ep = tiny_episode();
  io::save_episode(ep, root / io::episode_dir_name(3));
  io::save_episode(ep, root / io::episode_dir_name(1));
  io::save_episode(ep, root / io::episode_dir_name(2));
  auto dirs = io::list_episode_dirs(root);
  REQUIRE(dirs.size() == 3);
  CHECK(dirs[0].filename() == "ep-000001");
  CHECK(dirs[2].filename() == "ep-000003");
  fs::remove_all(root);
}
