#pragma once

#include <cmath>
#include <fstream>
#include <functional>
#include <mutex>
#include <string>
#include <vector>

#include "gb0/annotate.hpp"
#include "gb0/microsim.hpp"
#include "gb0/model.hpp"

namespace gb0 {
namespace train {

using model::Model;
using model::ModelConfig;
using model::SampleInput;
using nn::MatT;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct TrainConfig {
  int batch_size = 32;
  int total_steps = 5000;
  double lr = 3e-4;
  int warmup_steps = 100;
  double cosine_floor = 0.1;  // cosine decays to this fraction of lr
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  uint64_t seed = 0;
  double alpha = 0.0;  // probability a slot draws from the generated corpus
  double lambda_traj = 1.0;
  int traj_window = annotate::kTrajectoryWindow;
  int log_every = 10;
  int ckpt_every = 0;  // 0: final checkpoint only
  bool ablate_subgoals = false;
  bool ablate_trajectories = false;

  model::Json to_json() const {
    return model::Json{{"batch_size", batch_size},
                       {"total_steps", total_steps},
                       {"lr", lr},
                       {"warmup_steps", warmup_steps},
                       {"cosine_floor", cosine_floor},
                       {"beta1", beta1},
                       {"beta2", beta2},
                       {"adam_eps", adam_eps},
                       {"weight_decay", weight_decay},
                       {"clip_norm", clip_norm},
                       {"seed", seed},
                       {"alpha", alpha},
                       {"lambda_traj", lambda_traj},
                       {"traj_window", traj_window},
                       {"log_every", log_every},
                       {"ckpt_every", ckpt_every},
                       {"ablate_subgoals", ablate_subgoals},
                       {"ablate_trajectories", ablate_trajectories}};
  }

  static TrainConfig from_json(const model::Json& j) {
    TrainConfig c;
    c.batch_size = j.value("batch_size", c.batch_size);
    c.total_steps = j.value("total_steps", c.total_steps);
    c.lr = j.value("lr", c.lr);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.cosine_floor = j.value("cosine_floor", c.cosine_floor);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.seed = j.value("seed", c.seed);
    c.alpha = j.value("alpha", c.alpha);
    c.lambda_traj = j.value("lambda_traj", c.lambda_traj);
    c.traj_window = j.value("traj_window", c.traj_window);
    c.log_every = j.value("log_every", c.log_every);
    c.ckpt_every = j.value("ckpt_every", c.ckpt_every);
    c.ablate_subgoals = j.value("ablate_subgoals", c.ablate_subgoals);
    c.ablate_trajectories = j.value("ablate_trajectories", c.ablate_trajectories);
    return c;
  }
};

// ---------------------------------------------------------------------------
// Proprioception features, shared between training and rollouts.
// ---------------------------------------------------------------------------

inline MatT<double> proprio_features(const Episode& ep, int t) {
  auto p = ep.proprio(t);
  MatT<double> f(1, 8);
  f(0, 0) = p[0] * 2.0;
  f(0, 1) = p[1] * 2.0;
  f(0, 2) = p[2] * 2.0;
  f(0, 3) = p[3] * 2.0 - 1.0;
  f(0, 4) = p[4] * 2.0 - 1.0;
  f(0, 5) = p[5] / M_PI;
  f(0, 6) = p[6] / M_PI;
  f(0, 7) = p[7] / M_PI;
  return f;
}

// Normalized action chunk starting at t0, padded by repeating the final
// action when the window runs past the episode end.
inline tok::ActionChunk chunk_at(const Episode& ep,
                                 const annotate::ActionStats& stats, int t0,
                                 int horizon) {
  tok::ActionChunk c(horizon, stats.dims());
  const int n = int(ep.actions.size());
  for (int h = 0; h < horizon; ++h) {
    int t = std::min(t0 + h, n - 1);
    std::vector<double> a = stats.normalize(ep.actions[size_t(t)]);
    for (int d = 0; d < stats.dims(); ++d) c.at(h, d) = a[size_t(d)];
  }
  return c;
}

// ---------------------------------------------------------------------------
// Sample assembly
// ---------------------------------------------------------------------------

struct Batch {
  std::vector<SampleInput> samples;
  std::vector<Provenance> provenance;
};

inline const SubtaskSegment* segment_containing(const Episode& ep, int t) {
  if (!ep.segments) return nullptr;
  for (const auto& s : *ep.segments)
    if (t >= s.start && t < s.end) return &s;
  return nullptr;
}

inline SampleInput make_sample(const Episode& ep, int t0,
                               const ModelConfig& mcfg,
                               const TrainConfig& tcfg,
                               const annotate::ActionStats& stats,
                               const tok::Vocabulary& vocab, bool drop_depth,
                               double tau, Rng& noise_rng) {
  SampleInput s;
  const Frame& f = ep.frames[size_t(t0)];
  if (int(ep.cameras.size()) < mcfg.n_cameras)
    throw ShapeMismatch("episode has fewer cameras than the model expects");
  for (int c = 0; c < mcfg.n_cameras; ++c)
    s.cam_patches.push_back(
        model::make_patches(f.rgb[size_t(c)], f.depth[size_t(c)], mcfg, drop_depth));
  s.depth_dropped = drop_depth;
  s.instruction_ids = vocab.encode_text(sim::task_instruction(ep.task_id));
  s.proprio = proprio_features(ep, t0);

  tok::ActionChunk chunk = chunk_at(ep, stats, t0, mcfg.chunk_h);
  s.chunk = MatT<double>(mcfg.chunk_h, mcfg.action_d);
  for (int h = 0; h < mcfg.chunk_h; ++h)
    for (int d = 0; d < mcfg.action_d; ++d) s.chunk(h, d) = chunk.at(h, d);
  s.eps = MatT<double>(mcfg.chunk_h, mcfg.action_d);
  for (Eigen::Index i = 0; i < s.eps.size(); ++i)
    s.eps.data()[i] = noise_rng.normal();
  s.tau = tau;

  std::vector<int> action_ids = tok::encode_actions(chunk, mcfg.tokenizer(), vocab);

  bool has_subgoal = false;
  std::vector<int> subgoal_ids;
  if (!tcfg.ablate_subgoals) {
    const SubtaskSegment* seg = segment_containing(ep, t0);
    if (seg && seg->subgoal) {
      subgoal_ids = vocab.encode_text(*seg->subgoal);
      if (int(subgoal_ids.size()) > mcfg.max_subgoal)
        subgoal_ids.resize(size_t(mcfg.max_subgoal));
      has_subgoal = true;
    }
  }
  s.suffix_ids = {tok::kBos};
  s.suffix_ids.insert(s.suffix_ids.end(), subgoal_ids.begin(), subgoal_ids.end());
  s.suffix_ids.push_back(tok::kSep);
  s.suffix_ids.push_back(tok::kBoa);
  s.suffix_ids.insert(s.suffix_ids.end(), action_ids.begin(), action_ids.end());
  s.suffix_ids.push_back(tok::kEos);

  const int m = int(s.suffix_ids.size());
  int sep_pos = 1 + int(subgoal_ids.size());
  s.cot_mask.assign(size_t(m - 1), 0.0);
  for (int j = 0; j + 1 < m; ++j)
    s.cot_mask[size_t(j)] = j < sep_pos ? (has_subgoal ? 1.0 : 0.0) : 1.0;

  s.traj_target = MatT<double>::Zero(10, 2);
  s.traj_mask = MatT<double>::Zero(10, 2);
  if (!tcfg.ablate_trajectories && ep.trajectories && !ep.trajectories->empty() &&
      !ep.cameras.empty() && t0 + 1 < ep.length()) {
    TrajectoryAnnotation a =
        annotate::annotate_trajectory(ep, t0, ep.cameras[0], tcfg.traj_window);
    for (int k = 0; k < 10; ++k) {
      s.traj_target(k, 0) = a.keypoints[size_t(k)][0];
      s.traj_target(k, 1) = a.keypoints[size_t(k)][1];
      if (a.valid[size_t(k)]) {
        s.traj_mask(k, 0) = 1.0;
        s.traj_mask(k, 1) = 1.0;
      }
    }
  }
  return s;
}

// Slot assignment only, separated so its statistics are easy to test.
struct SlotChoice {
  bool generated = false;
  size_t episode = 0;
};

inline std::vector<SlotChoice> choose_slots(int n, double alpha,
                                            size_t real_count,
                                            size_t gen_count, Rng& rng) {
  if (real_count == 0) throw EmptyCorpus("real corpus is empty");
  if (alpha > 0.0 && gen_count == 0)
    throw EmptyGeneratedCorpus("alpha > 0 with no generated corpus");
  std::vector<SlotChoice> out;
  out.resize(size_t(n));
  for (auto& c : out) {
    c.generated = rng.uniform() < alpha;
    size_t count = c.generated ? gen_count : real_count;
    c.episode = size_t(rng.uniform_int(count));
  }
  return out;
}

inline Batch sample_batch(const std::vector<Episode>& real,
                          const std::vector<Episode>& generated, double alpha,
                          uint64_t seed, const ModelConfig& mcfg,
                          const TrainConfig& tcfg,
                          const annotate::ActionStats& stats,
                          const tok::Vocabulary& vocab) {
  Rng rng(mix_seed(0x62617463685f6762ULL, seed));
  Batch b;
  auto slots =
      choose_slots(tcfg.batch_size, alpha, real.size(), generated.size(), rng);
  for (const auto& slot : slots) {
    const Episode& ep = slot.generated ? generated[slot.episode] : real[slot.episode];
    int t0 = int(rng.uniform_int(uint64_t(ep.length() - 1)));
    bool drop = rng.uniform() < mcfg.p_drop;
    double tau = rng.uniform();
    b.samples.push_back(
        make_sample(ep, t0, mcfg, tcfg, stats, vocab, drop, tau, rng));
    b.provenance.push_back(ep.provenance);
  }
  return b;
}

// ---------------------------------------------------------------------------
// Unified loss over a batch with worker-count-independent gradients: samples
// are reduced inside fixed chunks, chunks are merged in index order.
// ---------------------------------------------------------------------------

struct LossStats {
  double total = 0, cot_ce = 0, flow_mse = 0, traj_mse = 0;
};

constexpr int kGradChunks = 8;

template <typename S>
LossStats loss_unified(const Model<S>& m, const Batch& batch, double lambda,
                       nn::GradBuffer<S>* out_grads) {
  const int B = int(batch.samples.size());
  if (B == 0) throw EmptyCorpus("empty batch");
  const int chunks = std::min(kGradChunks, B);
  const int per = (B + chunks - 1) / chunks;

  std::vector<nn::GradBuffer<S>> bufs;
  bufs.reserve(size_t(chunks));
  for (int c = 0; c < chunks; ++c) bufs.emplace_back(m.params);
  std::vector<LossStats> stats;
  stats.resize(size_t(chunks));

  parallel_for(chunks, [&](int c) {
    for (int i = c * per; i < std::min(B, (c + 1) * per); ++i) {
      nn::Tape<S> t(&m.params, &bufs[size_t(c)]);
      auto g = model::build_sample_graph(t, m, batch.samples[size_t(i)]);
      int total = t.add(g.ce, g.flow);
      if (lambda != 0.0)
        total = t.add(total, lambda == 1.0 ? g.traj : t.scale(g.traj, S(lambda)));
      if (out_grads) t.backward(total, S(1.0 / B));
      stats[size_t(c)].cot_ce += double(t.scalar(g.ce)) / B;
      stats[size_t(c)].flow_mse += double(t.scalar(g.flow)) / B;
      stats[size_t(c)].traj_mse += double(t.scalar(g.traj)) / B;
    }
  });

  LossStats out;
  for (int c = 0; c < chunks; ++c) {
    out.cot_ce += stats[size_t(c)].cot_ce;
    out.flow_mse += stats[size_t(c)].flow_mse;
    out.traj_mse += stats[size_t(c)].traj_mse;
    if (out_grads) out_grads->add_scaled(bufs[size_t(c)], S(1));
  }
  out.total = out.cot_ce + out.flow_mse + lambda * out.traj_mse;

  if (!std::isfinite(out.cot_ce)) throw NonFiniteLoss("cot_ce");
  if (!std::isfinite(out.flow_mse)) throw NonFiniteLoss("flow_mse");
  if (!std::isfinite(out.traj_mse)) throw NonFiniteLoss("traj_mse");
  return out;
}

// ---------------------------------------------------------------------------
// Adam with decoupled weight decay. Parameters that received no (nonzero)
// gradient this step are left untouched, which keeps insulated groups
// bit-identical across steps that never reference them.
// ---------------------------------------------------------------------------

template <typename S>
struct Adam {
  std::vector<MatT<S>> m1, m2;
  int t = 0;

  explicit Adam(const nn::ParamStore<S>& store)
      : m1(store.count()), m2(store.count()) {}

  void step(nn::ParamStore<S>& params, nn::GradBuffer<S>& grads,
            double lr, const TrainConfig& cfg) {
    ++t;
    double norm2 = 0;
    for (size_t i = 0; i < params.count(); ++i)
      if (grads.grads[i].size() > 0)
        norm2 += double(grads.grads[i].squaredNorm());
    double norm = std::sqrt(norm2);
    double clip = cfg.clip_norm > 0 && norm > cfg.clip_norm
                      ? cfg.clip_norm / norm
                      : 1.0;

    const double b1 = cfg.beta1, b2 = cfg.beta2;
    const double bc1 = 1.0 - std::pow(b1, t);
    const double bc2 = 1.0 - std::pow(b2, t);
    for (size_t i = 0; i < params.count(); ++i) {
      if (grads.grads[i].size() == 0) continue;
      if (grads.grads[i].cwiseAbs().maxCoeff() == S(0)) continue;
      auto& p = params[int(i)];
      if (m1[i].size() == 0) {
        m1[i] = MatT<S>::Zero(p.rows(), p.cols());
        m2[i] = MatT<S>::Zero(p.rows(), p.cols());
      }
      MatT<S> g = grads.grads[i] * S(clip);
      m1[i] = S(b1) * m1[i] + S(1 - b1) * g;
      m2[i] = S(b2) * m2[i] + S(1 - b2) * g.cwiseProduct(g);
      MatT<S> mhat = m1[i] / S(bc1);
      MatT<S> vhat = m2[i] / S(bc2);
      p.array() -= S(lr) *
                   (mhat.array() / (vhat.array().sqrt() + S(cfg.adam_eps)) +
                    S(cfg.weight_decay) * p.array());
    }
  }
};

inline double lr_at(const TrainConfig& cfg, int step) {
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
    return cfg.lr * double(step + 1) / double(cfg.warmup_steps);
  double span = std::max(1, cfg.total_steps - cfg.warmup_steps);
  double progress = std::min(1.0, double(step - cfg.warmup_steps) / span);
  double c = 0.5 * (1.0 + std::cos(M_PI * progress));
  return cfg.lr * (cfg.cosine_floor + (1.0 - cfg.cosine_floor) * c);
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainResult {
  annotate::ActionStats stats;
  std::vector<std::string> metric_lines;
};

template <typename S>
TrainResult train_run(
    Model<S>& m, const std::vector<Episode>& real,
    const std::vector<Episode>& generated, const TrainConfig& cfg,
    const std::string& out_dir = "",
    const std::function<void(int, const LossStats&)>& on_log = {}) {
  std::vector<const Episode*> pool;  // stats cover both corpora
  for (const auto& e : real) pool.push_back(&e);
  for (const auto& e : generated) pool.push_back(&e);
  annotate::ActionStats stats;
  {
    // fit on shallow copies holding only actions to avoid duplicating frames
    std::vector<Episode> light;
    light.reserve(pool.size());
    for (const Episode* e : pool) {
      Episode l;
      l.task_id = e->task_id;
      l.actions = e->actions;
      Frame f0;
      f0.t = 0;
      l.frames.assign(e->actions.size() + 1, f0);
      for (size_t i = 0; i < l.frames.size(); ++i) l.frames[i].t = int(i);
      light.push_back(std::move(l));
    }
    stats = annotate::fit_action_stats(light);
  }

  std::ofstream metrics;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    metrics.open(out_dir + "/metrics.jsonl", std::ios::trunc);
  }

  Adam<S> opt(m.params);
  TrainResult result;
  result.stats = stats;
  for (int step = 0; step < cfg.total_steps; ++step) {
    Batch b = sample_batch(real, generated, cfg.alpha,
                           mix_seed(cfg.seed, uint64_t(step)), m.cfg, cfg,
                           stats, m.vocab);
    nn::GradBuffer<S> grads(m.params);
    LossStats loss = loss_unified(m, b, cfg.lambda_traj, &grads);
    double lr = lr_at(cfg, step);
    opt.step(m.params, grads, lr, cfg);

    if (step % cfg.log_every == 0 || step + 1 == cfg.total_steps) {
      model::Json line{{"step", step},
                       {"total", loss.total},
                       {"cot_ce", loss.cot_ce},
                       {"flow_mse", loss.flow_mse},
                       {"traj_mse", loss.traj_mse},
                       {"lr", lr}};
      std::string str = line.dump();
      result.metric_lines.push_back(str);
      if (metrics.is_open()) metrics << str << "\n";
      if (on_log) on_log(step, loss);
    }
    if (!out_dir.empty() && cfg.ckpt_every > 0 && step > 0 &&
        step % cfg.ckpt_every == 0) {
      model::save_checkpoint(m, stats,
                             out_dir + "/ckpt-" + std::to_string(step) + ".bin");
    }
  }
  if (!out_dir.empty()) {
    model::save_checkpoint(m, stats,
                           out_dir + "/ckpt-" + std::to_string(cfg.total_steps) +
                               ".bin");
    metrics.flush();
  }
  return result;
}

}  // namespace train
}  // namespace gb0
