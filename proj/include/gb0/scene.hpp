#pragma once

#include <string>
#include <vector>

#include "gb0/geometry.hpp"

namespace gb0 {

// ---------------------------------------------------------------------------
// Scene description shared by the simulator, the re-render pipelines and the
// quality scorer. Color *names* are scene identity (they appear in subgoal
// text); palettes resolve names to RGB shades, so appearance variation never
// changes what an instruction refers to.
// ---------------------------------------------------------------------------

struct LightSpec {
  double ambient = 0.45;
  double intensity = 0.55;
  Vec3 direction{0.35, -0.25, -0.9};  // world direction the light travels
};

struct PaletteSpec {
  Vec3 background{0.62, 0.70, 0.80};
  Vec3 floor{0.35, 0.33, 0.31};
  Vec3 table{0.55, 0.42, 0.30};
  Vec3 bin{0.30, 0.30, 0.33};
  Vec3 arm{0.42, 0.42, 0.45};
  LightSpec light;
  double texture_noise = 0.0;  // per-pixel hash noise amplitude on surfaces
};

inline const std::vector<std::string>& color_names() {
  static const std::vector<std::string> names = {"red",    "green",  "blue",
                                                 "yellow", "orange", "purple"};
  return names;
}

inline Vec3 base_color(const std::string& name) {
  if (name == "red") return {0.80, 0.12, 0.10};
  if (name == "green") return {0.12, 0.65, 0.15};
  if (name == "blue") return {0.12, 0.25, 0.78};
  if (name == "yellow") return {0.85, 0.78, 0.10};
  if (name == "orange") return {0.88, 0.45, 0.08};
  if (name == "purple") return {0.55, 0.15, 0.65};
  throw Gb0Error("unknown color name: " + name);
}

inline double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

inline Vec3 clamp01(const Vec3& v) {
  return {clamp01(v.x), clamp01(v.y), clamp01(v.z)};
}

// Shade of a named color under a palette stream: brightness and tint move,
// the dominant channel stays dominant so the name keeps meaning.
inline Vec3 shade_color(const std::string& name, Rng& rng) {
  Vec3 base = base_color(name);
  double b = rng.uniform(0.72, 1.18);
  Vec3 tint{rng.uniform(-0.08, 0.08), rng.uniform(-0.08, 0.08),
            rng.uniform(-0.08, 0.08)};
  return clamp01(Vec3{base.x * b + tint.x, base.y * b + tint.y,
                      base.z * b + tint.z});
}

inline Vec3 jitter_color(const Vec3& base, Rng& rng, double amount) {
  return clamp01(Vec3{base.x + rng.uniform(-amount, amount),
                      base.y + rng.uniform(-amount, amount),
                      base.z + rng.uniform(-amount, amount)});
}

// Palette 0 is the canonical appearance; every other id is a deterministic
// restyle of surfaces, light and shades.
inline PaletteSpec make_palette(uint64_t palette_id) {
  PaletteSpec p;
  if (palette_id == 0) return p;
  Rng rng(mix_seed(0x70616c5f67623030ULL, palette_id));
  p.background = jitter_color(p.background, rng, 0.30);
  p.floor = jitter_color(p.floor, rng, 0.25);
  p.table = jitter_color(p.table, rng, 0.28);
  p.bin = jitter_color(p.bin, rng, 0.18);
  p.arm = jitter_color(p.arm, rng, 0.12);
  p.light.ambient = rng.uniform(0.34, 0.56);
  p.light.intensity = rng.uniform(0.40, 0.70);
  p.light.direction =
      Vec3{rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), -1.0}.normalized();
  p.texture_noise = rng.uniform(0.0, 0.035);
  return p;
}

inline Vec3 palette_shade(uint64_t palette_id, const std::string& name,
                          int object_index) {
  if (palette_id == 0) return base_color(name);
  Rng rng(mix_seed(mix_seed(0x73686164655f6762ULL, palette_id),
                   uint64_t(object_index)));
  return shade_color(name, rng);
}

enum class ShapeKind { box, sphere };

struct ObjectSpec {
  ShapeKind shape = ShapeKind::box;
  Vec3 half{0.022, 0.022, 0.022};  // half extents; sphere radius in half.x
  std::string color_name = "red";
  Vec3 rgb{0.8, 0.12, 0.10};
  SE3Pose pose;  // object center in world
};

struct SceneSpec {
  std::vector<ObjectSpec> objects;
  SE3Pose bin_pose;  // bin center on the table plane
  double bin_inner_half = 0.070;
  double bin_wall = 0.012;
  double bin_height = 0.060;
  double table_height = 0.0;
  uint64_t palette_id = 0;
  PaletteSpec palette;

  Vec3 bin_center() const { return bin_pose.translation; }

  bool xy_in_bin(double x, double y) const {
    Vec3 c = bin_center();
    return std::abs(x - c.x) < bin_inner_half && std::abs(y - c.y) < bin_inner_half;
  }

  // Re-resolve every palette-derived color for a new palette id.
  void restyle(uint64_t new_palette_id) {
    palette_id = new_palette_id;
    palette = make_palette(new_palette_id);
    for (size_t i = 0; i < objects.size(); ++i) {
      objects[i].rgb = palette_shade(new_palette_id, objects[i].color_name,
                                     int(i));
    }
  }
};

}  // namespace gb0
