#pragma once

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gb0/episode.hpp"

namespace gb0 {
namespace io {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

constexpr uint32_t kTensorsVersion = 1;
constexpr int kProprioDim = 12;  // ee t(3), ee q(4), gripper, cmd, joints(3)
inline const char* kTensorsMagic = "GB0E";

// ------------------------------ JSON helpers -------------------------------

inline Json to_json(const Vec3& v) { return Json::array({v.x, v.y, v.z}); }
inline Vec3 vec3_from(const Json& j) { return {j.at(0), j.at(1), j.at(2)}; }

inline Json to_json(const SE3Pose& p) {
  return Json{{"q", Json::array({p.rotation.w, p.rotation.x, p.rotation.y,
                                 p.rotation.z})},
              {"t", to_json(p.translation)}};
}

inline SE3Pose pose_from(const Json& j) {
  SE3Pose p;
  const auto& q = j.at("q");
  p.rotation = Quat(q.at(0), q.at(1), q.at(2), q.at(3)).normalized();
  p.translation = vec3_from(j.at("t"));
  return p;
}

inline Json to_json(const CameraModel& c) {
  return Json{{"fx", c.fx},       {"fy", c.fy},     {"cx", c.cx},
              {"cy", c.cy},       {"width", c.width}, {"height", c.height},
              {"extrinsic", to_json(c.extrinsic)}};
}

inline CameraModel camera_from(const Json& j) {
  CameraModel c;
  c.fx = j.at("fx");
  c.fy = j.at("fy");
  c.cx = j.at("cx");
  c.cy = j.at("cy");
  c.width = j.at("width");
  c.height = j.at("height");
  c.extrinsic = pose_from(j.at("extrinsic"));
  return c;
}

inline Json to_json(const SceneSpec& s) {
  Json objs = Json::array();
  for (const auto& o : s.objects) {
    objs.push_back(Json{{"shape", o.shape == ShapeKind::box ? "box" : "sphere"},
                        {"half", to_json(o.half)},
                        {"color_name", o.color_name},
                        {"rgb", to_json(o.rgb)},
                        {"pose", to_json(o.pose)}});
  }
  return Json{{"objects", objs},
              {"bin_pose", to_json(s.bin_pose)},
              {"bin_inner_half", s.bin_inner_half},
              {"bin_wall", s.bin_wall},
              {"bin_height", s.bin_height},
              {"table_height", s.table_height},
              {"palette_id", s.palette_id},
              {"light",
               Json{{"ambient", s.palette.light.ambient},
                    {"intensity", s.palette.light.intensity},
                    {"direction", to_json(s.palette.light.direction)}}},
              {"surface",
               Json{{"background", to_json(s.palette.background)},
                    {"floor", to_json(s.palette.floor)},
                    {"table", to_json(s.palette.table)},
                    {"bin", to_json(s.palette.bin)},
                    {"arm", to_json(s.palette.arm)},
                    {"texture_noise", s.palette.texture_noise}}}};
}

inline SceneSpec scene_from(const Json& j) {
  SceneSpec s;
  for (const auto& jo : j.at("objects")) {
    ObjectSpec o;
    o.shape = jo.at("shape") == "box" ? ShapeKind::box : ShapeKind::sphere;
    o.half = vec3_from(jo.at("half"));
    o.color_name = jo.at("color_name");
    o.rgb = vec3_from(jo.at("rgb"));
    o.pose = pose_from(jo.at("pose"));
    s.objects.push_back(o);
  }
  s.bin_pose = pose_from(j.at("bin_pose"));
  s.bin_inner_half = j.at("bin_inner_half");
  s.bin_wall = j.at("bin_wall");
  s.bin_height = j.at("bin_height");
  s.table_height = j.at("table_height");
  s.palette_id = j.at("palette_id");
  s.palette.light.ambient = j.at("light").at("ambient");
  s.palette.light.intensity = j.at("light").at("intensity");
  s.palette.light.direction = vec3_from(j.at("light").at("direction"));
  const auto& sf = j.at("surface");
  s.palette.background = vec3_from(sf.at("background"));
  s.palette.floor = vec3_from(sf.at("floor"));
  s.palette.table = vec3_from(sf.at("table"));
  s.palette.bin = vec3_from(sf.at("bin"));
  s.palette.arm = vec3_from(sf.at("arm"));
  s.palette.texture_noise = sf.at("texture_noise");
  return s;
}

inline Json to_json(const QualityScore& q) {
  return Json{{"geometric", q.geometric},   {"multiview", q.multiview},
              {"text_align", q.text_align}, {"physical", q.physical},
              {"composite", q.composite},   {"route", route_name(q.route)}};
}

inline QualityScore quality_from(const Json& j) {
  QualityScore q;
  q.geometric = j.at("geometric");
  q.multiview = j.at("multiview");
  q.text_align = j.at("text_align");
  q.physical = j.at("physical");
  q.composite = j.at("composite");
  std::string r = j.at("route");
  q.route = r == "pretrain" ? QualityRoute::pretrain
            : r == "finetune" ? QualityRoute::finetune
                              : QualityRoute::discard;
  return q;
}

// ------------------------------- tensors.bin -------------------------------

namespace detail {

inline void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float v) {
  static_assert(sizeof(float) == 4);
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);  // little-endian host assumed; format is little-endian
}

struct Reader {
  const std::string& buf;
  size_t pos = 0;

  uint32_t u32() {
    if (pos + 4 > buf.size()) throw FormatError("tensors.bin truncated");
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= uint32_t(uint8_t(buf[pos + size_t(i)])) << (8 * i);
    pos += 4;
    return v;
  }

  float f32() {
    if (pos + 4 > buf.size()) throw FormatError("tensors.bin truncated");
    float v;
    std::memcpy(&v, buf.data() + pos, 4);
    pos += 4;
    return v;
  }

  void f32_block(float* dst, size_t n) {
    if (pos + 4 * n > buf.size()) throw FormatError("tensors.bin truncated");
    std::memcpy(dst, buf.data() + pos, 4 * n);
    pos += 4 * n;
  }
};

}  // namespace detail

inline std::string encode_tensors(const Episode& ep) {
  ep.check();
  const int T = ep.length();
  const int C = int(ep.cameras.size());
  const int H = C > 0 && T > 0 ? ep.frames[0].rgb[0].height : 0;
  const int W = C > 0 && T > 0 ? ep.frames[0].rgb[0].width : 0;
  const int D = ep.action_dim();

  std::string out;
  out.append(kTensorsMagic, 4);
  detail::put_u32(out, kTensorsVersion);
  detail::put_u32(out, uint32_t(T));
  detail::put_u32(out, uint32_t(C));
  detail::put_u32(out, uint32_t(H));
  detail::put_u32(out, uint32_t(W));
  detail::put_u32(out, uint32_t(D));
  out.reserve(out.size() + size_t(T) * C * H * W * 16 + size_t(T) * 48);

  for (const Frame& f : ep.frames)
    for (int c = 0; c < C; ++c)
      for (float v : f.rgb[size_t(c)].px) detail::put_f32(out, v);
  for (const Frame& f : ep.frames)
    for (int c = 0; c < C; ++c)
      for (float v : f.depth[size_t(c)].px) detail::put_f32(out, v);
  for (const Frame& f : ep.frames) {
    detail::put_f32(out, float(f.ee_pose.translation.x));
    detail::put_f32(out, float(f.ee_pose.translation.y));
    detail::put_f32(out, float(f.ee_pose.translation.z));
    detail::put_f32(out, float(f.ee_pose.rotation.w));
    detail::put_f32(out, float(f.ee_pose.rotation.x));
    detail::put_f32(out, float(f.ee_pose.rotation.y));
    detail::put_f32(out, float(f.ee_pose.rotation.z));
    detail::put_f32(out, float(f.gripper));
    detail::put_f32(out, float(f.gripper_cmd));
    for (double a : f.joint_angles) detail::put_f32(out, float(a));
  }
  for (const auto& a : ep.actions)
    for (double v : a) detail::put_f32(out, float(v));
  return out;
}

inline void decode_tensors(const std::string& buf, Episode& ep) {
  if (buf.size() < 4 || std::memcmp(buf.data(), kTensorsMagic, 4) != 0)
    throw FormatError("bad tensors.bin magic");
  detail::Reader r{buf, 4};
  uint32_t version = r.u32();
  if (version != kTensorsVersion)
    throw FormatError("unsupported tensors.bin version");
  uint32_t T = r.u32(), C = r.u32(), H = r.u32(), W = r.u32(), D = r.u32();

  ep.frames.assign(T, Frame{});
  for (uint32_t t = 0; t < T; ++t) {
    ep.frames[t].t = int(t);
    ep.frames[t].rgb.assign(C, ImageRGB(int(W), int(H)));
    ep.frames[t].depth.assign(C, ImageDepth(int(W), int(H)));
  }
  for (uint32_t t = 0; t < T; ++t)
    for (uint32_t c = 0; c < C; ++c)
      r.f32_block(ep.frames[t].rgb[c].px.data(), size_t(H) * W * 3);
  for (uint32_t t = 0; t < T; ++t)
    for (uint32_t c = 0; c < C; ++c)
      r.f32_block(ep.frames[t].depth[c].px.data(), size_t(H) * W);
  for (uint32_t t = 0; t < T; ++t) {
    Frame& f = ep.frames[t];
    f.ee_pose.translation.x = r.f32();
    f.ee_pose.translation.y = r.f32();
    f.ee_pose.translation.z = r.f32();
    f.ee_pose.rotation.w = r.f32();
    f.ee_pose.rotation.x = r.f32();
    f.ee_pose.rotation.y = r.f32();
    f.ee_pose.rotation.z = r.f32();
    f.gripper = r.f32();
    f.gripper_cmd = r.f32();
    for (int k = 0; k < 3; ++k) f.joint_angles[size_t(k)] = r.f32();
  }
  ep.actions.assign(T > 0 ? T - 1 : 0, std::vector<double>(D, 0.0));
  for (auto& a : ep.actions)
    for (uint32_t d = 0; d < D; ++d) a[d] = r.f32();
  if (r.pos != buf.size()) throw FormatError("tensors.bin trailing bytes");
}

// ------------------------------ manifest.json ------------------------------

inline Json episode_manifest(const Episode& ep) {
  Json j;
  j["format_version"] = 1;
  j["task_id"] = ep.task_id;
  j["provenance"] = provenance_name(ep.provenance);
  j["expert_failed"] = ep.expert_failed;
  Json cams = Json::array();
  for (const auto& c : ep.cameras) cams.push_back(to_json(c));
  j["cameras"] = cams;
  if (ep.scene_spec) j["scene_spec"] = to_json(*ep.scene_spec);
  if (ep.segments) {
    Json segs = Json::array();
    for (const auto& s : *ep.segments) {
      Json js{{"start", s.start},
              {"end", s.end},
              {"transition", transition_name(s.transition)}};
      if (s.subgoal) js["subgoal"] = *s.subgoal;
      segs.push_back(js);
    }
    j["segments"] = segs;
  }
  if (ep.trajectories) {
    Json trs = Json::array();
    for (const auto& a : *ep.trajectories) {
      Json pts = Json::array();
      Json valid = Json::array();
      for (int k = 0; k < TrajectoryAnnotation::kKeypoints; ++k) {
        pts.push_back(Json::array({a.keypoints[size_t(k)][0],
                                   a.keypoints[size_t(k)][1]}));
        valid.push_back(a.valid[size_t(k)]);
      }
      trs.push_back(Json{{"t0", a.t0}, {"keypoints", pts}, {"valid", valid}});
    }
    j["trajectories"] = trs;
  }
  if (ep.quality) j["quality"] = to_json(*ep.quality);
  return j;
}

inline void apply_manifest(const Json& j, Episode& ep) {
  if (j.at("format_version") != 1) throw FormatError("unknown manifest version");
  ep.task_id = j.at("task_id");
  ep.provenance = provenance_from_name(j.at("provenance"));
  ep.expert_failed = j.value("expert_failed", false);
  ep.cameras.clear();
  for (const auto& jc : j.at("cameras")) ep.cameras.push_back(camera_from(jc));
  if (j.contains("scene_spec")) ep.scene_spec = scene_from(j.at("scene_spec"));
  if (j.contains("segments")) {
    std::vector<SubtaskSegment> segs;
    for (const auto& js : j.at("segments")) {
      SubtaskSegment s;
      s.start = js.at("start");
      s.end = js.at("end");
      std::string tr = js.at("transition");
      s.transition = tr == "grasp" ? GripperTransition::grasp
                     : tr == "release" ? GripperTransition::release
                                       : GripperTransition::episode_boundary;
      if (js.contains("subgoal")) s.subgoal = js.at("subgoal").get<std::string>();
      segs.push_back(s);
    }
    ep.segments = segs;
  }
  if (j.contains("trajectories")) {
    std::vector<TrajectoryAnnotation> trs;
    for (const auto& jt : j.at("trajectories")) {
      TrajectoryAnnotation a;
      a.t0 = jt.at("t0");
      for (int k = 0; k < TrajectoryAnnotation::kKeypoints; ++k) {
        a.keypoints[size_t(k)][0] = jt.at("keypoints").at(size_t(k)).at(0);
        a.keypoints[size_t(k)][1] = jt.at("keypoints").at(size_t(k)).at(1);
        a.valid[size_t(k)] = jt.at("valid").at(size_t(k));
      }
      trs.push_back(a);
    }
    ep.trajectories = trs;
  }
  if (j.contains("quality")) ep.quality = quality_from(j.at("quality"));
}

// ------------------------------ files on disk ------------------------------

inline void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Gb0Error("cannot open for write: " + path.string());
  f.write(bytes.data(), std::streamsize(bytes.size()));
  if (!f) throw Gb0Error("write failed: " + path.string());
}

inline std::string read_file(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Gb0Error("cannot open: " + path.string());
  std::string out((std::istreambuf_iterator<char>(f)),
                  std::istreambuf_iterator<char>());
  return out;
}

inline uint64_t episode_digest(const std::string& manifest_bytes,
                               const std::string& tensor_bytes) {
  uint64_t h = fnv1a64(manifest_bytes.data(), manifest_bytes.size());
  return fnv1a64(tensor_bytes.data(), tensor_bytes.size(), h);
}

// Writes DIR/manifest.json and DIR/tensors.bin; returns the content digest.
inline uint64_t save_episode(const Episode& ep, const fs::path& dir) {
  fs::create_directories(dir);
  std::string manifest = episode_manifest(ep).dump(2) + "\n";
  std::string tensors = encode_tensors(ep);
  write_file(dir / "manifest.json", manifest);
  write_file(dir / "tensors.bin", tensors);
  return episode_digest(manifest, tensors);
}

inline Episode load_episode(const fs::path& dir) {
  Episode ep;
  std::string manifest = read_file(dir / "manifest.json");
  apply_manifest(Json::parse(manifest), ep);
  decode_tensors(read_file(dir / "tensors.bin"), ep);
  ep.check();
  return ep;
}

inline uint64_t episode_dir_digest(const fs::path& dir) {
  std::string manifest = read_file(dir / "manifest.json");
  std::string tensors = read_file(dir / "tensors.bin");
  return episode_digest(manifest, tensors);
}

inline std::vector<fs::path> list_episode_dirs(const fs::path& root) {
  std::vector<fs::path> dirs;
  if (!fs::exists(root)) throw Gb0Error("no such directory: " + root.string());
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory() && fs::exists(e.path() / "manifest.json"))
      dirs.push_back(e.path());
  }
  std::sort(dirs.begin(), dirs.end());
  return dirs;
}

inline std::string episode_dir_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "ep-%06d", index);
  return buf;
}

}  // namespace io
}  // namespace gb0
