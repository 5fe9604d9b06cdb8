#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "gb0/annotate.hpp"
#include "gb0/microsim.hpp"
#include "gb0/tape.hpp"
#include "gb0/train.hpp"

namespace gb0 {
namespace gen {

// ---------------------------------------------------------------------------
// Appearance transfer: re-render the recorded trajectory under a restyled
// palette. Actions, poses, depths and annotations stay byte-identical to the
// source; only RGB changes. The diffusion generator of the original pipeline
// is replaced by this procedural re-render.
// ---------------------------------------------------------------------------

inline Episode appearance_transfer(const Episode& source, uint64_t style_seed) {
  if (!source.scene_spec) throw MissingSceneSpec("appearance transfer");
  Episode out = source;
  out.provenance = Provenance::appearance_transfer;
  out.scene_spec->restyle(style_seed);

  sim::SimState st = sim::state_at_start(out);
  for (int t = 0; t < out.length(); ++t) {
    if (t > 0) st = sim::step(st, source.actions[size_t(t - 1)]);
    for (size_t c = 0; c < out.cameras.size(); ++c) {
      ImageRGB rgb;
      ImageDepth depth;
      sim::render(st, out.cameras[c], rgb, depth);
      out.frames[size_t(t)].rgb[c] = std::move(rgb);
      // depth is untouched: geometry is identical by construction
    }
  }
  out.quality.reset();
  return out;
}

// Mean per-pixel RGB distance between two episodes, used to gauge variant
// distinctness.
inline double mean_rgb_distance(const Episode& a, const Episode& b) {
  double sum = 0;
  size_t n = 0;
  for (int t = 0; t < std::min(a.length(), b.length()); ++t) {
    const auto& pa = a.frames[size_t(t)].rgb[0].px;
    const auto& pb = b.frames[size_t(t)].rgb[0].px;
    for (size_t i = 0; i < pa.size(); ++i) {
      sum += std::abs(double(pa[i]) - double(pb[i]));
      ++n;
    }
  }
  return n == 0 ? 0.0 : sum / double(n);
}

// ---------------------------------------------------------------------------
// View transfer: forward-splat the head camera into a novel view using the
// recorded depth, fill small holes from the nearest valid neighbor, and
// re-render the arm at its unchanged end-effector pose over the warp.
// ---------------------------------------------------------------------------

enum class ViewTransferMode { warp, rerender };

struct WarpResult {
  ImageRGB rgb;
  ImageDepth depth;
  std::vector<uint8_t> hole;  // 1 where nothing splatted and nothing filled
};

constexpr int kHoleFillRadius = 4;

inline WarpResult warp_frame(const ImageRGB& src_rgb, const ImageDepth& src_depth,
                             const CameraModel& src_cam,
                             const CameraModel& dst_cam) {
  WarpResult out;
  out.rgb = ImageRGB(dst_cam.width, dst_cam.height);
  out.depth = ImageDepth(dst_cam.width, dst_cam.height);
  std::vector<uint8_t> covered(size_t(dst_cam.width) * dst_cam.height, 0);

  for (int y = 0; y < src_depth.height; ++y) {
    for (int x = 0; x < src_depth.width; ++x) {
      float z = src_depth.at(x, y);
      if (z <= 0.f) continue;
      Vec3 pw = unproject(x + 0.5, y + 0.5, z, src_cam);
      Projection pr;
      try {
        pr = project(pw, dst_cam);
      } catch (const NonPositiveDepth&) {
        continue;
      }
      int ix = int(std::floor(pr.u));
      int iy = int(std::floor(pr.v));
      if (ix < 0 || iy < 0 || ix >= dst_cam.width || iy >= dst_cam.height)
        continue;
      float& dz = out.depth.at(ix, iy);
      if (dz > 0.f && dz <= float(pr.z)) continue;  // z-buffer keeps nearest
      dz = float(pr.z);
      out.rgb.set(ix, iy, src_rgb.get(x, y));
      covered[size_t(iy) * dst_cam.width + ix] = 1;
    }
  }

  // nearest-valid hole fill within a bounded radius; unreached pixels stay
  // invalid
  out.hole.assign(covered.size(), 0);
  for (int y = 0; y < dst_cam.height; ++y) {
    for (int x = 0; x < dst_cam.width; ++x) {
      if (covered[size_t(y) * dst_cam.width + x]) continue;
      int best_x = -1, best_y = -1;
      double best_d2 = 1e18;
      for (int r = 1; r <= kHoleFillRadius && best_x < 0; ++r) {
        for (int dy = -r; dy <= r; ++dy) {
          for (int dx = -r; dx <= r; ++dx) {
            if (std::max(std::abs(dx), std::abs(dy)) != r) continue;
            int nx = x + dx, ny = y + dy;
            if (nx < 0 || ny < 0 || nx >= dst_cam.width || ny >= dst_cam.height)
              continue;
            if (!covered[size_t(ny) * dst_cam.width + nx]) continue;
            double d2 = double(dx) * dx + double(dy) * dy;
            if (d2 < best_d2) {
              best_d2 = d2;
              best_x = nx;
              best_y = ny;
            }
          }
        }
      }
      if (best_x >= 0) {
        out.rgb.set(x, y, out.rgb.get(best_x, best_y));
        // depth stays 0: filled color is a guess, the geometry is not
      } else {
        out.hole[size_t(y) * dst_cam.width + x] = 1;
      }
    }
  }
  return out;
}

inline Episode view_transfer(const Episode& source, const CameraModel& new_cam,
                             ViewTransferMode mode) {
  if (source.cameras.empty()) throw ShapeMismatch("episode has no cameras");
  if (!new_cam.valid()) throw Gb0Error("invalid target camera");
  double valid = 0;
  for (const auto& f : source.frames) valid += f.depth[0].valid_fraction();
  valid /= std::max(1, source.length());
  if (valid < 0.5)
    throw InsufficientDepth("source depth valid on under half the pixels");

  Episode out = source;
  out.cameras[0] = new_cam;
  out.provenance = Provenance::view_transfer;
  out.quality.reset();

  if (mode == ViewTransferMode::rerender) {
    if (!source.scene_spec) throw MissingSceneSpec("re-render view transfer");
    sim::SimState st = sim::state_at_start(source);
    for (int t = 0; t < out.length(); ++t) {
      if (t > 0) st = sim::step(st, source.actions[size_t(t - 1)]);
      ImageRGB rgb;
      ImageDepth depth;
      sim::render(st, new_cam, rgb, depth);
      out.frames[size_t(t)].rgb[0] = std::move(rgb);
      out.frames[size_t(t)].depth[0] = std::move(depth);
    }
  } else {
    const SceneSpec scene =
        source.scene_spec ? *source.scene_spec : SceneSpec{};
    for (int t = 0; t < out.length(); ++t) {
      const Frame& f = source.frames[size_t(t)];
      WarpResult w = warp_frame(f.rgb[0], f.depth[0], source.cameras[0], new_cam);

      // the arm is re-posed by solving IK for the unchanged EE pose and
      // re-rendered over the warp
      if (source.scene_spec) {
        JointAngles j =
            ik_solve(f.ee_pose.translation, sim::default_arm());
        ImageRGB arm_rgb;
        ImageDepth arm_depth;
        sim::render_arm(scene, j, f.gripper, new_cam, arm_rgb, arm_depth);
        for (int y = 0; y < new_cam.height; ++y) {
          for (int x = 0; x < new_cam.width; ++x) {
            float az = arm_depth.at(x, y);
            if (az <= 0.f) continue;
            float wz = w.depth.at(x, y);
            // the warp keeps the pixel unless the arm is strictly nearer;
            // ties go to the warp so an identity warp stays exact
            if (wz > 0.f && az >= wz - 0.004f) continue;
            w.rgb.set(x, y, arm_rgb.get(x, y));
            w.depth.at(x, y) = az;
          }
        }
      }
      out.frames[size_t(t)].rgb[0] = std::move(w.rgb);
      out.frames[size_t(t)].depth[0] = std::move(w.depth);
    }
  }

  // trajectory annotations are re-projected through the new head camera
  if (out.trajectories) {
    std::vector<TrajectoryAnnotation> trs;
    for (const auto& a : *out.trajectories)
      if (a.t0 + 1 < out.length())
        trs.push_back(annotate::annotate_trajectory(out, a.t0, new_cam));
    out.trajectories = trs;
  }
  return out;
}

// Deterministic novel-view camera around the standard head rig.
inline CameraModel jitter_camera(const sim::CameraRigSpec& base, Rng& rng,
                                 double magnitude = 1.0) {
  double yaw = rng.uniform(-0.45, 0.45) * magnitude;
  double pitch = rng.uniform(-0.20, 0.12) * magnitude;
  Vec3 shift{rng.uniform(-0.06, 0.06) * magnitude,
             rng.uniform(-0.06, 0.06) * magnitude,
             rng.uniform(-0.04, 0.04) * magnitude};
  return sim::build_camera(sim::perturb_camera(base, yaw, pitch, shift));
}

// ---------------------------------------------------------------------------
// Inverse dynamics model: a small MLP from downsampled grayscale frame pairs
// plus proprioception to the normalized action between them.
// ---------------------------------------------------------------------------

struct IDMConfig {
  int input_size = 16;   // grayscale side length per frame
  int hidden1 = 128;
  int hidden2 = 64;
  int epochs = 150;
  int batch = 64;
  double lr = 4e-3;
  double holdout = 0.1;
  uint64_t seed = 0;
};

struct IDModel {
  IDMConfig cfg;
  int action_dims = 4;
  annotate::ActionStats stats;
  nn::ParamStore<float> params;
  double holdout_mse = -1.0;

  int feature_dim() const { return 2 * cfg.input_size * cfg.input_size + 8; }
};

inline std::vector<double> grayscale_downsample(const ImageRGB& img, int side) {
  std::vector<double> out(size_t(side) * side, 0.0);
  int bx = img.width / side, by = img.height / side;
  for (int gy = 0; gy < side; ++gy)
    for (int gx = 0; gx < side; ++gx) {
      double acc = 0;
      for (int y = 0; y < by; ++y)
        for (int x = 0; x < bx; ++x) {
          const float* p = img.at(gx * bx + x, gy * by + y);
          acc += (p[0] + p[1] + p[2]) / 3.0;
        }
      out[size_t(gy) * side + gx] = acc / double(bx * by);
    }
  return out;
}

inline nn::MatT<double> idm_features(const Episode& ep, int t,
                                     const IDMConfig& cfg) {
  std::vector<double> a = grayscale_downsample(ep.frames[size_t(t)].rgb[0],
                                               cfg.input_size);
  std::vector<double> b = grayscale_downsample(ep.frames[size_t(t + 1)].rgb[0],
                                               cfg.input_size);
  nn::MatT<double> f(1, int(a.size() + b.size()) + 8);
  Eigen::Index col = 0;
  for (double v : a) f(0, col++) = v;
  for (size_t i = 0; i < b.size(); ++i) f(0, col++) = b[i] - a[i];
  nn::MatT<double> pr = train::proprio_features(ep, t);
  for (int i = 0; i < 8; ++i) f(0, col++) = pr(0, i);
  return f;
}

namespace detail {

template <typename S>
int idm_forward(nn::Tape<S>& t, const IDModel& m, int x) {
  int h1 = t.gelu(t.add_rowvec(t.matmul(x, t.param("w1")), t.param("b1")));
  int h2 = t.gelu(t.add_rowvec(t.matmul(h1, t.param("w2")), t.param("b2")));
  return t.add_rowvec(t.matmul(h2, t.param("w3")), t.param("b3"));
}

}  // namespace detail

inline nn::MatT<double> idm_predict(const IDModel& m,
                                    const nn::MatT<double>& features) {
  nn::GradBuffer<float> sink(m.params);
  nn::Tape<float> t(&m.params, &sink);
  int out = detail::idm_forward(t, m, t.input(features.cast<float>()));
  return t.val(out).cast<double>();
}

inline IDModel train_idm(const std::vector<Episode>& corpus,
                         const IDMConfig& cfg = {}) {
  if (corpus.size() < 20) throw CorpusTooSmall("IDM needs >= 20 episodes");
  for (const auto& ep : corpus)
    if (ep.actions.empty()) throw ShapeMismatch("IDM corpus episode lacks actions");

  IDModel m;
  m.cfg = cfg;
  m.action_dims = corpus[0].action_dim();
  m.stats = annotate::fit_action_stats(corpus);

  Rng rng(mix_seed(0x69646d5f676230ULL, cfg.seed));
  const int in = m.feature_dim();
  auto dense = [&](const std::string& name, int r, int c, double sigma) {
    int id = m.params.add(name, r, c, nn::kExpert);
    for (Eigen::Index i = 0; i < m.params[id].size(); ++i)
      m.params[id].data()[i] = float(sigma * rng.normal());
    return id;
  };
  dense("w1", in, cfg.hidden1, std::sqrt(2.0 / in));
  m.params.add("b1", 1, cfg.hidden1, nn::kExpert);
  dense("w2", cfg.hidden1, cfg.hidden2, std::sqrt(2.0 / cfg.hidden1));
  m.params.add("b2", 1, cfg.hidden2, nn::kExpert);
  dense("w3", cfg.hidden2, m.action_dims, 0.01);
  m.params.add("b3", 1, m.action_dims, nn::kExpert);

  // held-out split by episode
  size_t holdout_n = std::max<size_t>(1, size_t(cfg.holdout * double(corpus.size())));
  size_t train_n = corpus.size() - holdout_n;

  struct Pair {
    size_t ep;
    int t;
  };
  std::vector<Pair> train_pairs, held_pairs;
  for (size_t e = 0; e < corpus.size(); ++e)
    for (int t = 0; t + 1 < corpus[e].length(); ++t)
      (e < train_n ? train_pairs : held_pairs).push_back({e, t});

  auto target_of = [&](const Pair& p) {
    std::vector<double> a = m.stats.normalize(corpus[p.ep].actions[size_t(p.t)]);
    nn::MatT<double> y(1, m.action_dims);
    for (int d = 0; d < m.action_dims; ++d) y(0, d) = a[size_t(d)];
    return y;
  };

  train::TrainConfig opt_cfg;
  opt_cfg.weight_decay = 1e-4;
  opt_cfg.clip_norm = 5.0;
  train::Adam<float> opt(m.params);
  nn::MatT<float> ones = nn::MatT<float>::Ones(1, m.action_dims);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // deterministic shuffle
    std::vector<size_t> order(train_pairs.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[size_t(rng.uniform_int(i))]);

    for (size_t start = 0; start < order.size(); start += size_t(cfg.batch)) {
      size_t stop = std::min(order.size(), start + size_t(cfg.batch));
      nn::GradBuffer<float> grads(m.params);
      for (size_t k = start; k < stop; ++k) {
        const Pair& p = train_pairs[order[k]];
        nn::Tape<float> t(&m.params, &grads);
        int pred = detail::idm_forward(
            t, m, t.input(idm_features(corpus[p.ep], p.t, cfg).cast<float>()));
        int loss = t.mse(pred, target_of(p).cast<float>(), ones,
                         1.0f / float(m.action_dims));
        t.backward(loss, 1.0f / float(stop - start));
      }
      opt.step(m.params, grads, cfg.lr, opt_cfg);
    }
  }

  double err = 0;
  size_t n = 0;
  for (const Pair& p : held_pairs) {
    nn::MatT<double> pred =
        idm_predict(m, idm_features(corpus[p.ep], p.t, cfg));
    err += (pred - target_of(p)).squaredNorm();
    n += size_t(m.action_dims);
  }
  m.holdout_mse = n == 0 ? 0.0 : err / double(n);
  return m;
}

// Fill the actions of an (action-free) episode from the inverse dynamics
// model.
inline Episode idm_label(const Episode& source, const IDModel& m) {
  if (source.length() < 2) throw ShapeMismatch("IDM labeling needs >= 2 frames");
  Episode out = source;
  out.actions.assign(size_t(source.length() - 1),
                     std::vector<double>(size_t(m.action_dims), 0.0));
  for (int t = 0; t + 1 < source.length(); ++t) {
    nn::MatT<double> pred = idm_predict(m, idm_features(source, t, m.cfg));
    std::vector<double> norm(size_t(m.action_dims));
    for (int d = 0; d < m.action_dims; ++d)
      norm[size_t(d)] = std::clamp(pred(0, d), -1.0, 1.0);
    out.actions[size_t(t)] = m.stats.denormalize(norm);
  }
  out.provenance = Provenance::idm_labeled;
  out.quality.reset();
  return out;
}

// ---------------------------------------------------------------------------
// Quality inspection: geometric and multiview consistency, text alignment,
// physical plausibility; composite mean routes to pretrain / finetune /
// discard.
// ---------------------------------------------------------------------------

struct QualityConfig {
  double error_scale = 10.0;  // component = exp(-scale * error)
  double finetune_threshold = 0.85;
  double pretrain_threshold = 0.60;
  double velocity_bound = sim::kActionClip;
  double depth_consistency = 0.02;  // meters
  double mismatch_allowance = 0.20;
  // wide-baseline camera pairs legitimately occlude much more
  double mv_mismatch_allowance = 0.60;
  double mismatch_weight = 0.30;
  int frame_stride_cap = 24;  // at most this many transitions are scored
};

inline QualityRoute route_of(double composite, const QualityConfig& cfg) {
  if (composite >= cfg.finetune_threshold) return QualityRoute::finetune;
  if (composite >= cfg.pretrain_threshold) return QualityRoute::pretrain;
  return QualityRoute::discard;
}

namespace detail {

// Photometric error of reprojecting frame (cam a, depth a) into (cam b,
// image b), restricted to pixels whose depth agrees; disagreement beyond the
// allowance is penalized as structural mismatch.
inline double reprojection_error(const ImageRGB& rgb_a, const ImageDepth& dep_a,
                                 const CameraModel& cam_a,
                                 const ImageRGB& rgb_b, const ImageDepth& dep_b,
                                 const CameraModel& cam_b,
                                 const QualityConfig& cfg,
                                 double mismatch_allowance) {
  double photo = 0;
  size_t compared = 0, attempted = 0;
  for (int y = 0; y < dep_a.height; ++y) {
    for (int x = 0; x < dep_a.width; ++x) {
      float z = dep_a.at(x, y);
      if (z <= 0.f) continue;
      Vec3 pw = unproject(x + 0.5, y + 0.5, z, cam_a);
      Projection pr;
      try {
        pr = project(pw, cam_b);
      } catch (const NonPositiveDepth&) {
        continue;
      }
      int ix = int(std::floor(pr.u));
      int iy = int(std::floor(pr.v));
      if (ix < 0 || iy < 0 || ix >= dep_b.width || iy >= dep_b.height) continue;
      ++attempted;
      float zb = dep_b.at(ix, iy);
      if (zb <= 0.f || std::abs(double(zb) - pr.z) > cfg.depth_consistency)
        continue;  // occluded or moved: structural mismatch
      Vec3 ca = rgb_a.get(x, y);
      Vec3 cb = rgb_b.get(ix, iy);
      photo += (std::abs(ca.x - cb.x) + std::abs(ca.y - cb.y) +
                std::abs(ca.z - cb.z)) /
               3.0;
      ++compared;
    }
  }
  if (attempted == 0) return 1.0;
  double err = compared == 0 ? 0.0 : photo / double(compared);
  double mismatch = 1.0 - double(compared) / double(attempted);
  err += cfg.mismatch_weight * std::max(0.0, mismatch - mismatch_allowance);
  return err;
}

}  // namespace detail

inline QualityScore quality_inspect(const Episode& ep,
                                    const QualityConfig& cfg = {}) {
  if (ep.length() < 2 || ep.cameras.empty())
    throw ShapeMismatch("quality inspection needs >= 2 frames and a camera");
  QualityScore q;

  const int T = ep.length();
  int stride = std::max(1, (T - 1) / cfg.frame_stride_cap);

  // geometric: consecutive frames through the (static) head camera
  double geo_err = 0;
  int geo_n = 0;
  for (int t = 0; t + 1 < T; t += stride) {
    geo_err += detail::reprojection_error(
        ep.frames[size_t(t)].rgb[0], ep.frames[size_t(t)].depth[0],
        ep.cameras[0], ep.frames[size_t(t + 1)].rgb[0],
        ep.frames[size_t(t + 1)].depth[0], ep.cameras[0], cfg,
        cfg.mismatch_allowance);
    ++geo_n;
  }
  q.geometric = std::exp(-cfg.error_scale * geo_err / std::max(1, geo_n));

  // multiview: head camera against every other camera
  if (ep.cameras.size() < 2) {
    q.multiview = 1.0;
  } else {
    double mv_err = 0;
    int mv_n = 0;
    for (int t = 0; t < T; t += stride) {
      mv_err += detail::reprojection_error(
          ep.frames[size_t(t)].rgb[0], ep.frames[size_t(t)].depth[0],
          ep.cameras[0], ep.frames[size_t(t)].rgb[1],
          ep.frames[size_t(t)].depth[1], ep.cameras[1], cfg,
          cfg.mv_mismatch_allowance);
      ++mv_n;
    }
    q.multiview = std::exp(-cfg.error_scale * mv_err / std::max(1, mv_n));
  }

  // text alignment: recomputed subgoals must match the stored ones
  if (!ep.has_subgoals()) {
    q.text_align = 1.0;
  } else {
    int total = 0, consistent = 0;
    for (const auto& s : *ep.segments) {
      if (!s.subgoal) continue;
      ++total;
      if (annotate::subgoal_text(s, ep) == *s.subgoal) ++consistent;
    }
    q.text_align = total == 0 ? 1.0 : double(consistent) / double(total);
  }

  // physical: realized end-effector velocity bound and negative depth
  int violations = 0;
  for (int t = 0; t + 1 < T; ++t) {
    Vec3 d = ep.frames[size_t(t + 1)].ee_pose.translation -
             ep.frames[size_t(t)].ee_pose.translation;
    bool bad = std::abs(d.x) > cfg.velocity_bound + 1e-6 ||
               std::abs(d.y) > cfg.velocity_bound + 1e-6 ||
               std::abs(d.z) > cfg.velocity_bound + 1e-6;
    if (!bad) {
      for (const auto& dep : ep.frames[size_t(t + 1)].depth) {
        for (float v : dep.px)
          if (v < 0.f) {
            bad = true;
            break;
          }
        if (bad) break;
      }
    }
    if (bad) ++violations;
  }
  q.physical = 1.0 - double(violations) / double(T - 1);

  q.composite = (q.geometric + q.multiview + q.text_align + q.physical) / 4.0;
  q.route = route_of(q.composite, cfg);
  return q;
}

}  // namespace gen
}  // namespace gb0
