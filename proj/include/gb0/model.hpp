#pragma once

#include <array>
#include <cmath>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gb0/annotate.hpp"
#include "gb0/episode.hpp"
#include "gb0/tape.hpp"
#include "gb0/tokenize.hpp"

namespace gb0 {
namespace model {

using Json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Configuration. Presets share one architecture; "small" must stay at or
// under 1/8 of the "base" parameter count while the analytic FLOP ratio
// stays inside [4, 8].
// ---------------------------------------------------------------------------

struct ModelConfig {
  int d_model = 96;
  int n_layers = 3;
  int n_heads = 8;
  int patch = 8;
  int image_size = 64;
  int n_cameras = 2;
  int instr_cap = 8;
  int max_subgoal = 8;
  int chunk_h = 16;      // H
  int action_d = 4;      // D
  int dct_keep = 8;      // K
  double dct_range = 4.0;
  int d_expert = 64;
  int expert_layers = 2;
  int expert_heads = 4;
  int d_gru = 48;
  int sample_steps = 10;  // S
  double p_drop = 0.5;
  double depth_max = 5.0;
  bool expert_sees_cot = true;
  std::string preset = "small";

  int grid() const { return image_size / patch; }
  int patches_per_camera() const { return grid() * grid(); }
  int patch_dim() const { return 4 * patch * patch; }
  int prefix_len() const {
    return n_cameras * patches_per_camera() + instr_cap + 1 + tok::kTrajQueries;
  }
  int max_suffix() const { return 1 + max_subgoal + 2 + dct_keep * action_d + 1; }

  tok::ActionTokenizerConfig tokenizer() const {
    tok::ActionTokenizerConfig t;
    t.horizon = chunk_h;
    t.dims = action_d;
    t.keep = dct_keep;
    t.coeff_range = dct_range;
    return t;
  }

  void check() const {
    if (d_model % n_heads != 0) throw Gb0Error("d_model % n_heads != 0");
    if (d_expert % expert_heads != 0)
      throw Gb0Error("d_expert % expert_heads != 0");
    if (image_size % patch != 0) throw Gb0Error("image_size % patch != 0");
    tokenizer().check();
  }

  Json to_json() const {
    return Json{{"preset", preset},
                {"d_model", d_model},
                {"n_layers", n_layers},
                {"n_heads", n_heads},
                {"patch", patch},
                {"image_size", image_size},
                {"n_cameras", n_cameras},
                {"instr_cap", instr_cap},
                {"max_subgoal", max_subgoal},
                {"chunk_h", chunk_h},
                {"action_d", action_d},
                {"dct_keep", dct_keep},
                {"dct_range", dct_range},
                {"d_expert", d_expert},
                {"expert_layers", expert_layers},
                {"expert_heads", expert_heads},
                {"d_gru", d_gru},
                {"sample_steps", sample_steps},
                {"p_drop", p_drop},
                {"depth_max", depth_max},
                {"expert_sees_cot", expert_sees_cot}};
  }

  static ModelConfig from_json(const Json& j) {
    ModelConfig c;
    c.preset = j.value("preset", "custom");
    c.d_model = j.at("d_model");
    c.n_layers = j.at("n_layers");
    c.n_heads = j.at("n_heads");
    c.patch = j.at("patch");
    c.image_size = j.at("image_size");
    c.n_cameras = j.at("n_cameras");
    c.instr_cap = j.at("instr_cap");
    c.max_subgoal = j.at("max_subgoal");
    c.chunk_h = j.at("chunk_h");
    c.action_d = j.at("action_d");
    c.dct_keep = j.at("dct_keep");
    c.dct_range = j.at("dct_range");
    c.d_expert = j.at("d_expert");
    c.expert_layers = j.at("expert_layers");
    c.expert_heads = j.at("expert_heads");
    c.d_gru = j.at("d_gru");
    c.sample_steps = j.at("sample_steps");
    c.p_drop = j.at("p_drop");
    c.depth_max = j.at("depth_max");
    c.expert_sees_cot = j.at("expert_sees_cot");
    c.check();
    return c;
  }
};

inline ModelConfig preset_config(const std::string& name) {
  ModelConfig c;
  c.preset = name;
  if (name == "micro") {
    c.d_model = 16;
    c.n_layers = 2;
    c.n_heads = 2;
    c.image_size = 16;
    c.patch = 8;
    c.n_cameras = 1;
    c.chunk_h = 4;
    c.action_d = 2;
    c.dct_keep = 4;
    c.d_expert = 16;
    c.expert_layers = 1;
    c.expert_heads = 2;
    c.d_gru = 12;
    c.instr_cap = 8;
    c.max_subgoal = 6;
  } else if (name == "tiny") {
    c.d_model = 48;
    c.n_layers = 2;
    c.n_heads = 4;
    c.image_size = 32;
    c.patch = 8;
    c.n_cameras = 1;
    c.chunk_h = 8;
    c.action_d = 4;
    c.dct_keep = 4;
    c.d_expert = 32;
    c.expert_layers = 2;
    c.expert_heads = 2;
    c.d_gru = 24;
  } else if (name == "sweep") {
    c.d_model = 64;
    c.n_layers = 3;
    c.n_heads = 4;
    c.image_size = 64;
    c.patch = 8;
    c.n_cameras = 1;
    c.chunk_h = 16;
    c.action_d = 4;
    c.dct_keep = 4;
    c.d_expert = 48;
    c.expert_layers = 2;
    c.expert_heads = 4;
    c.d_gru = 32;
    c.expert_sees_cot = false;
  } else if (name == "small") {
    c.d_model = 96;
    c.n_layers = 3;
    c.n_heads = 8;
    c.image_size = 64;
    c.patch = 8;
    c.n_cameras = 2;
    c.chunk_h = 16;
    c.action_d = 4;
    c.dct_keep = 8;
    c.d_expert = 64;
    c.expert_layers = 2;
    c.expert_heads = 4;
    c.d_gru = 48;
  } else if (name == "base") {
    c.d_model = 256;
    c.n_layers = 4;
    c.n_heads = 8;
    c.image_size = 64;
    c.patch = 8;
    c.n_cameras = 2;
    c.chunk_h = 16;
    c.action_d = 4;
    c.dct_keep = 8;
    c.d_expert = 192;
    c.expert_layers = 2;
    c.expert_heads = 8;
    c.d_gru = 256;
  } else {
    throw Gb0Error("unknown preset: " + name);
  }
  c.check();
  return c;
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

constexpr int kSinusoidalDim = 64;

template <typename S>
struct Model {
  ModelConfig cfg;
  nn::ParamStore<S> params;
  tok::Vocabulary vocab;

  static Model init(const ModelConfig& cfg, uint64_t seed) {
    cfg.check();
    Model m;
    m.cfg = cfg;
    Rng rng(mix_seed(0x6d6f64656c5f6762ULL, seed));
    auto& p = m.params;
    const int d = cfg.d_model, de = cfg.d_expert, g = cfg.d_gru;
    const int V = m.vocab.size();

    auto dense = [&](const std::string& name, int r, int c, nn::ParamGroup grp,
                     double sigma = 0.02) {
      int id = p.add(name, r, c, grp);
      for (Eigen::Index i = 0; i < p[id].size(); ++i)
        p[id].data()[i] = S(sigma * rng.normal());
      return id;
    };
    auto zeros = [&](const std::string& name, int r, int c,
                     nn::ParamGroup grp) { return p.add(name, r, c, grp); };
    auto ones = [&](const std::string& name, int r, int c,
                    nn::ParamGroup grp) {
      int id = p.add(name, r, c, grp);
      p[id].setOnes();
      return id;
    };

    // RGBD patch embedder; depth-channel rows start at exactly zero
    int pw = dense("embed.patch_w", cfg.patch_dim(), d, nn::kBackbone);
    p[pw].bottomRows(cfg.patch * cfg.patch).setZero();
    zeros("embed.patch_b", 1, d, nn::kBackbone);
    dense("embed.row", cfg.grid(), d, nn::kBackbone);
    dense("embed.col", cfg.grid(), d, nn::kBackbone);
    dense("embed.cam", cfg.n_cameras, d, nn::kBackbone);
    dense("embed.proprio_w", 8, d, nn::kBackbone);
    zeros("embed.proprio_b", 1, d, nn::kBackbone);
    dense("tok.embed", V, d, nn::kBackbone);
    dense("tok.pos_instr", cfg.instr_cap, d, nn::kBackbone);
    dense("tok.pos_suffix", cfg.max_suffix(), d, nn::kBackbone);
    dense("traj.query", tok::kTrajQueries, d, nn::kBackbone);

    for (int l = 0; l < cfg.n_layers; ++l) {
      std::string b = "layer" + std::to_string(l) + ".";
      ones(b + "ln1.g", 1, d, nn::kBackbone);
      zeros(b + "ln1.b", 1, d, nn::kBackbone);
      dense(b + "attn.wqkv", d, 3 * d, nn::kBackbone);
      zeros(b + "attn.bqkv", 1, 3 * d, nn::kBackbone);
      dense(b + "attn.wo", d, d, nn::kBackbone);
      zeros(b + "attn.bo", 1, d, nn::kBackbone);
      ones(b + "ln2.g", 1, d, nn::kBackbone);
      zeros(b + "ln2.b", 1, d, nn::kBackbone);
      dense(b + "mlp.w1", d, 4 * d, nn::kBackbone);
      zeros(b + "mlp.b1", 1, 4 * d, nn::kBackbone);
      dense(b + "mlp.w2", 4 * d, d, nn::kBackbone);
      zeros(b + "mlp.b2", 1, d, nn::kBackbone);
    }
    ones("final_ln.g", 1, d, nn::kBackbone);
    zeros("final_ln.b", 1, d, nn::kBackbone);
    dense("lm.w", d, V, nn::kBackbone);
    zeros("lm.b", 1, V, nn::kBackbone);

    // trajectory head: single-layer GRU over the 10 query hiddens
    dense("gru.wz", d, g, nn::kTrajHead);
    dense("gru.uz", g, g, nn::kTrajHead);
    zeros("gru.bz", 1, g, nn::kTrajHead);
    dense("gru.wr", d, g, nn::kTrajHead);
    dense("gru.ur", g, g, nn::kTrajHead);
    zeros("gru.br", 1, g, nn::kTrajHead);
    dense("gru.wh", d, g, nn::kTrajHead);
    dense("gru.uh", g, g, nn::kTrajHead);
    zeros("gru.bh", 1, g, nn::kTrajHead);
    dense("gru.out_w", g, 2, nn::kTrajHead);
    zeros("gru.out_b", 1, 2, nn::kTrajHead);

    // flow-matching expert
    dense("ex.in_w", cfg.action_d, de, nn::kExpert);
    zeros("ex.in_b", 1, de, nn::kExpert);
    dense("ex.pos", cfg.chunk_h, de, nn::kExpert);
    dense("ex.tau.w1", kSinusoidalDim, de, nn::kExpert);
    zeros("ex.tau.b1", 1, de, nn::kExpert);
    dense("ex.tau.w2", de, de, nn::kExpert);
    zeros("ex.tau.b2", 1, de, nn::kExpert);
    dense("ex.cond_proprio_w", 8, d, nn::kExpert);
    zeros("ex.cond_proprio_b", 1, d, nn::kExpert);
    for (int l = 0; l < cfg.expert_layers; ++l) {
      std::string b = "ex" + std::to_string(l) + ".";
      dense(b + "ada.w", de, 6 * de, nn::kExpert, 0.01);
      zeros(b + "ada.b", 1, 6 * de, nn::kExpert);
      dense(b + "self.wqkv", de, 3 * de, nn::kExpert);
      zeros(b + "self.bqkv", 1, 3 * de, nn::kExpert);
      dense(b + "self.wo", de, de, nn::kExpert);
      zeros(b + "self.bo", 1, de, nn::kExpert);
      dense(b + "cross.wq", de, de, nn::kExpert);
      zeros(b + "cross.bq", 1, de, nn::kExpert);
      dense(b + "cross.wk", d, de, nn::kExpert);
      zeros(b + "cross.bk", 1, de, nn::kExpert);
      dense(b + "cross.wv", d, de, nn::kExpert);
      zeros(b + "cross.bv", 1, de, nn::kExpert);
      dense(b + "cross.wo", de, de, nn::kExpert);
      zeros(b + "cross.bo", 1, de, nn::kExpert);
      dense(b + "mlp.w1", de, 4 * de, nn::kExpert);
      zeros(b + "mlp.b1", 1, 4 * de, nn::kExpert);
      dense(b + "mlp.w2", 4 * de, de, nn::kExpert);
      zeros(b + "mlp.b2", 1, de, nn::kExpert);
    }
    ones("ex.final_ln.g", 1, de, nn::kExpert);
    zeros("ex.final_ln.b", 1, de, nn::kExpert);
    zeros("ex.out_w", de, cfg.action_d, nn::kExpert);  // zero-initialized head
    zeros("ex.out_b", 1, cfg.action_d, nn::kExpert);
    return m;
  }
};

// ---------------------------------------------------------------------------
// Sample inputs. Images arrive as per-camera patch matrices so the same
// sample can drive float and double instantiations.
// ---------------------------------------------------------------------------

struct SampleInput {
  std::vector<nn::MatT<double>> cam_patches;  // n_p x patch_dim per camera
  std::vector<int> instruction_ids;
  nn::MatT<double> proprio;  // 1 x 8
  std::vector<int> suffix_ids;
  std::vector<double> cot_mask;  // per CE row (suffix positions 0..m-2)
  nn::MatT<double> chunk;  // H x D, normalized
  nn::MatT<double> eps;    // H x D
  double tau = 0.5;
  nn::MatT<double> traj_target;  // 10 x 2
  nn::MatT<double> traj_mask;    // 10 x 2, zeros when absent
  bool depth_dropped = false;
};

// Build the patch matrix of one camera image: RGB block then depth block per
// patch; depth is normalized by depth_max and clipped to [0, 1]; a dropped
// depth channel becomes exactly zero padding.
inline nn::MatT<double> make_patches(const ImageRGB& rgb, const ImageDepth& depth,
                                     const ModelConfig& cfg, bool drop_depth) {
  if (rgb.width != cfg.image_size || rgb.height != cfg.image_size)
    throw ShapeMismatch("image does not match config size");
  const int p = cfg.patch, grid = cfg.grid();
  nn::MatT<double> out(grid * grid, cfg.patch_dim());
  for (int gy = 0; gy < grid; ++gy) {
    for (int gx = 0; gx < grid; ++gx) {
      Eigen::Index row = gy * grid + gx;
      int col = 0;
      for (int y = 0; y < p; ++y)
        for (int x = 0; x < p; ++x) {
          const float* px = rgb.at(gx * p + x, gy * p + y);
          out(row, col++) = px[0];
          out(row, col++) = px[1];
          out(row, col++) = px[2];
        }
      for (int y = 0; y < p; ++y)
        for (int x = 0; x < p; ++x) {
          double dv = drop_depth ? 0.0 : depth.at(gx * p + x, gy * p + y);
          out(row, col++) = std::clamp(dv / cfg.depth_max, 0.0, 1.0);
        }
    }
  }
  return out;
}

inline nn::MatT<double> sinusoidal_embedding(double tau) {
  nn::MatT<double> e(1, kSinusoidalDim);
  const int half = kSinusoidalDim / 2;
  for (int i = 0; i < half; ++i) {
    double freq = std::exp(-std::log(10000.0) * double(i) / double(half));
    e(0, i) = std::sin(1000.0 * tau * freq);
    e(0, half + i) = std::cos(1000.0 * tau * freq);
  }
  return e;
}

// Eq.-style noising: linear interpolation between noise and the chunk.
template <typename M>
inline M noise_chunk(const M& chunk, double tau, const M& eps) {
  if (chunk.rows() != eps.rows() || chunk.cols() != eps.cols())
    throw ShapeMismatch("noise_chunk shapes differ");
  if (tau < 0.0 || tau > 1.0) throw Gb0Error("tau outside [0, 1]");
  return tau * chunk + (1.0 - tau) * eps;
}

// Prefix-LM additive mask: bidirectional inside the prefix, causal over the
// suffix, suffix attends to the whole prefix, prefix never sees the suffix.
template <typename S>
inline nn::MatT<S> prefix_lm_mask(int prefix_len, int total_len) {
  nn::MatT<S> m = nn::MatT<S>::Zero(total_len, total_len);
  const S blocked = S(-1e30);
  for (int i = 0; i < total_len; ++i)
    for (int j = 0; j < total_len; ++j) {
      bool ok = j < prefix_len ? true : (i >= prefix_len && j <= i);
      if (i < prefix_len && j >= prefix_len) ok = false;
      if (!ok) m(i, j) = blocked;
    }
  return m;
}

// ---------------------------------------------------------------------------
// Graph construction
// ---------------------------------------------------------------------------

template <typename S>
struct SampleGraph {
  int prefix_len = 0;
  int suffix_len = 0;
  int hidden = -1;       // (P + m) x d after the final norm
  int logits = -1;       // m x V, suffix rows only
  int traj_out = -1;     // 10 x 2
  int expert_pred = -1;  // H x D
  int ce = -1;           // scalar nodes
  int flow = -1;
  int traj = -1;
  int total = -1;
};

namespace detail {

template <typename S>
int attention(nn::Tape<S>& t, const Model<S>& m, int x, const std::string& pfx,
              int n_heads, const nn::MatT<S>* mask = nullptr) {
  const auto& qkv_w = m.params[m.params.id(pfx + "wqkv")];
  const int d3 = int(qkv_w.cols());
  const int d = d3 / 3;
  const int dh = d / n_heads;
  int qkv = t.add_rowvec(t.matmul(x, t.param(pfx + "wqkv")),
                         t.param(pfx + "bqkv"));
  std::vector<int> heads;
  for (int h = 0; h < n_heads; ++h) {
    int q = t.slice_cols(qkv, h * dh, dh);
    int k = t.slice_cols(qkv, d + h * dh, dh);
    int v = t.slice_cols(qkv, 2 * d + h * dh, dh);
    int scores = t.scale(t.matmul(q, k, false, true), S(1) / std::sqrt(S(dh)));
    int probs = t.softmax_rows(scores, mask);
    heads.push_back(t.matmul(probs, v));
  }
  int ctx = n_heads == 1 ? heads[0] : t.concat_cols(heads);
  return t.add_rowvec(t.matmul(ctx, t.param(pfx + "wo")), t.param(pfx + "bo"));
}

template <typename S>
int cross_attention(nn::Tape<S>& t, const Model<S>& m, int x, int cond,
                    const std::string& pfx, int n_heads) {
  const auto& wq = m.params[m.params.id(pfx + "wq")];
  const int de = int(wq.cols());
  const int dh = de / n_heads;
  int q = t.add_rowvec(t.matmul(x, t.param(pfx + "wq")), t.param(pfx + "bq"));
  int k = t.add_rowvec(t.matmul(cond, t.param(pfx + "wk")), t.param(pfx + "bk"));
  int v = t.add_rowvec(t.matmul(cond, t.param(pfx + "wv")), t.param(pfx + "bv"));
  std::vector<int> heads;
  for (int h = 0; h < n_heads; ++h) {
    int qh = t.slice_cols(q, h * dh, dh);
    int kh = t.slice_cols(k, h * dh, dh);
    int vh = t.slice_cols(v, h * dh, dh);
    int scores = t.scale(t.matmul(qh, kh, false, true), S(1) / std::sqrt(S(dh)));
    int probs = t.softmax_rows(scores, nullptr);
    heads.push_back(t.matmul(probs, vh));
  }
  int ctx = n_heads == 1 ? heads[0] : t.concat_cols(heads);
  return t.add_rowvec(t.matmul(ctx, t.param(pfx + "wo")), t.param(pfx + "bo"));
}

template <typename S>
int mlp_block(nn::Tape<S>& t, int x, const std::string& pfx) {
  int h = t.gelu(t.add_rowvec(t.matmul(x, t.param(pfx + "w1")),
                              t.param(pfx + "b1")));
  return t.add_rowvec(t.matmul(h, t.param(pfx + "w2")), t.param(pfx + "b2"));
}

}  // namespace detail

// Backbone over an already-embedded token matrix.
template <typename S>
int backbone_forward(nn::Tape<S>& t, const Model<S>& m, int tokens,
                     const nn::MatT<S>& mask) {
  int x = tokens;
  for (int l = 0; l < m.cfg.n_layers; ++l) {
    std::string b = "layer" + std::to_string(l) + ".";
    int u = t.layernorm(x, t.param(b + "ln1.g"), t.param(b + "ln1.b"));
    x = t.add(x, detail::attention(t, m, u, b + "attn.", m.cfg.n_heads, &mask));
    int v = t.layernorm(x, t.param(b + "ln2.g"), t.param(b + "ln2.b"));
    x = t.add(x, detail::mlp_block(t, v, b + "mlp."));
  }
  return t.layernorm(x, t.param("final_ln.g"), t.param("final_ln.b"));
}

// Embed prefix + suffix into one token matrix. Returns prefix length.
template <typename S>
int embed_sequence(nn::Tape<S>& t, const Model<S>& m, const SampleInput& s,
                   int* out_tokens) {
  const ModelConfig& cfg = m.cfg;
  if (int(s.cam_patches.size()) != cfg.n_cameras)
    throw ShapeMismatch("camera count mismatch");
  if (int(s.instruction_ids.size()) > cfg.instr_cap)
    throw SequenceTooLong("instruction exceeds cap");
  if (int(s.suffix_ids.size()) > cfg.max_suffix())
    throw SequenceTooLong("suffix exceeds cap");

  std::vector<int> parts;
  const int grid = cfg.grid();
  std::vector<int> rows(size_t(cfg.patches_per_camera()));
  std::vector<int> cols(size_t(cfg.patches_per_camera()));
  for (int gy = 0; gy < grid; ++gy)
    for (int gx = 0; gx < grid; ++gx) {
      rows[size_t(gy * grid + gx)] = gy;
      cols[size_t(gy * grid + gx)] = gx;
    }
  for (int c = 0; c < cfg.n_cameras; ++c) {
    int patches = t.input(s.cam_patches[size_t(c)].template cast<S>());
    int emb = t.add_rowvec(t.matmul(patches, t.param("embed.patch_w")),
                           t.param("embed.patch_b"));
    emb = t.add(emb, t.embedding(m.params.id("embed.row"), rows));
    emb = t.add(emb, t.embedding(m.params.id("embed.col"), cols));
    emb = t.add(emb, t.embedding(m.params.id("embed.cam"),
                                 std::vector<int>(size_t(cfg.patches_per_camera()), c)));
    parts.push_back(emb);
  }
  if (!s.instruction_ids.empty()) {
    int ie = t.embedding(m.params.id("tok.embed"), s.instruction_ids);
    std::vector<int> ipos(s.instruction_ids.size());
    for (size_t i = 0; i < ipos.size(); ++i) ipos[i] = int(i);
    parts.push_back(t.add(ie, t.embedding(m.params.id("tok.pos_instr"), ipos)));
  }
  int pe = t.add_rowvec(t.matmul(t.input(s.proprio.template cast<S>()),
                                 t.param("embed.proprio_w")),
                        t.param("embed.proprio_b"));
  parts.push_back(pe);
  parts.push_back(t.param("traj.query"));
  int prefix_len = 0;
  for (int p : parts) prefix_len += int(t.val(p).rows());

  if (!s.suffix_ids.empty()) {
    int se = t.embedding(m.params.id("tok.embed"), s.suffix_ids);
    std::vector<int> spos(s.suffix_ids.size());
    for (size_t i = 0; i < spos.size(); ++i) spos[i] = int(i);
    parts.push_back(t.add(se, t.embedding(m.params.id("tok.pos_suffix"), spos)));
  }
  *out_tokens = t.concat_rows(parts);
  return prefix_len;
}

// GRU head over the 10 trajectory-query hiddens.
template <typename S>
int trajectory_head(nn::Tape<S>& t, const Model<S>& m, int traj_hiddens) {
  if (t.val(traj_hiddens).rows() != tok::kTrajQueries)
    throw ShapeMismatch("trajectory head expects 10 hiddens");
  int state = t.input(nn::MatT<S>::Zero(1, m.cfg.d_gru));
  std::vector<int> outs;
  for (int i = 0; i < tok::kTrajQueries; ++i) {
    int x = t.slice_rows(traj_hiddens, i, 1);
    int z = t.sigmoid(t.add(t.add(t.matmul(x, t.param("gru.wz")),
                                  t.matmul(state, t.param("gru.uz"))),
                            t.param("gru.bz")));
    int r = t.sigmoid(t.add(t.add(t.matmul(x, t.param("gru.wr")),
                                  t.matmul(state, t.param("gru.ur"))),
                            t.param("gru.br")));
    int sh = t.tanh_op(t.add(t.add(t.matmul(x, t.param("gru.wh")),
                                   t.matmul(t.hadamard(r, state),
                                            t.param("gru.uh"))),
                             t.param("gru.bh")));
    state = t.add(state, t.hadamard(z, t.sub(sh, state)));
    outs.push_back(t.sigmoid(t.add(t.matmul(state, t.param("gru.out_w")),
                                   t.param("gru.out_b"))));
  }
  return t.concat_rows(outs);
}

// Flow-matching expert: chunk-step tokens, sinusoidal tau with per-block
// adaptive scale/shift, self-attention, cross-attention to the conditioning,
// feed-forward, linear head.
template <typename S>
int expert_forward(nn::Tape<S>& t, const Model<S>& m, int noised_chunk,
                   double tau, int cond) {
  const ModelConfig& cfg = m.cfg;
  const int de = cfg.d_expert;
  int x = t.add(t.add_rowvec(t.matmul(noised_chunk, t.param("ex.in_w")),
                             t.param("ex.in_b")),
                t.param("ex.pos"));
  int sine = t.input(sinusoidal_embedding(tau).template cast<S>());
  int tf = t.gelu(t.add_rowvec(t.matmul(sine, t.param("ex.tau.w1")),
                               t.param("ex.tau.b1")));
  tf = t.add_rowvec(t.matmul(tf, t.param("ex.tau.w2")), t.param("ex.tau.b2"));

  for (int l = 0; l < cfg.expert_layers; ++l) {
    std::string b = "ex" + std::to_string(l) + ".";
    int ada = t.add_rowvec(t.matmul(tf, t.param(b + "ada.w")),
                           t.param(b + "ada.b"));
    auto chunk_of = [&](int i) { return t.slice_cols(ada, i * de, de); };
    auto adaln = [&](int v, int si, int hi) {
      int u = t.layernorm(v);
      u = t.mul_rowvec(u, t.add_const(chunk_of(si), S(1)));
      return t.add_rowvec(u, chunk_of(hi));
    };
    x = t.add(x, detail::attention(t, m, adaln(x, 0, 1), b + "self.",
                                   cfg.expert_heads));
    x = t.add(x, detail::cross_attention(t, m, adaln(x, 2, 3), cond,
                                         b + "cross.", cfg.expert_heads));
    x = t.add(x, detail::mlp_block(t, adaln(x, 4, 5), b + "mlp."));
  }
  int xn = t.layernorm(x, t.param("ex.final_ln.g"), t.param("ex.final_ln.b"));
  return t.add_rowvec(t.matmul(xn, t.param("ex.out_w")), t.param("ex.out_b"));
}

struct GraphOptions {
  // test-only: freeze the backbone part of the expert conditioning to this
  // matrix so finite differences see the same severed path as backward()
  const nn::MatT<double>* frozen_backbone_cond = nullptr;
  bool want_losses = true;
};

// Number of suffix rows (BOS..BOA inclusive) fed to the expert conditioning.
inline int cot_conditioning_rows(const SampleInput& s) {
  for (size_t i = 0; i < s.suffix_ids.size(); ++i)
    if (s.suffix_ids[i] == tok::kBoa) return int(i) + 1;
  return int(s.suffix_ids.size());
}

// Full per-sample graph: embeddings, backbone, heads, expert, losses.
template <typename S>
SampleGraph<S> build_sample_graph(nn::Tape<S>& t, const Model<S>& m,
                                  const SampleInput& s,
                                  const GraphOptions& opt = {}) {
  const ModelConfig& cfg = m.cfg;
  SampleGraph<S> g;

  int tokens = -1;
  g.prefix_len = embed_sequence(t, m, s, &tokens);
  g.suffix_len = int(s.suffix_ids.size());
  const int total = g.prefix_len + g.suffix_len;
  nn::MatT<S> mask = prefix_lm_mask<S>(g.prefix_len, total);
  g.hidden = backbone_forward(t, m, tokens, mask);

  int traj_hiddens =
      t.slice_rows(g.hidden, g.prefix_len - tok::kTrajQueries, tok::kTrajQueries);
  g.traj_out = trajectory_head(t, m, traj_hiddens);

  if (g.suffix_len > 1) {
    int suffix_h = t.slice_rows(g.hidden, g.prefix_len, g.suffix_len);
    g.logits = t.add_rowvec(t.matmul(suffix_h, t.param("lm.w")),
                            t.param("lm.b"));
  }

  // expert conditioning: stop-gradient backbone features plus a live
  // proprioception row owned by the expert
  int cond_backbone;
  if (opt.frozen_backbone_cond) {
    cond_backbone = t.input(opt.frozen_backbone_cond->template cast<S>());
  } else {
    int cond_rows = cfg.expert_sees_cot && g.suffix_len >= 3
                        ? g.prefix_len + cot_conditioning_rows(s)
                        : g.prefix_len;
    cond_backbone = t.detach(t.slice_rows(g.hidden, 0, cond_rows));
  }
  int cond_proprio =
      t.add_rowvec(t.matmul(t.input(s.proprio.template cast<S>()),
                            t.param("ex.cond_proprio_w")),
                   t.param("ex.cond_proprio_b"));
  int cond = t.concat_rows({cond_backbone, cond_proprio});

  nn::MatT<S> chunk = s.chunk.template cast<S>();
  nn::MatT<S> eps = s.eps.template cast<S>();
  int noised = t.input(noise_chunk(chunk, s.tau, eps));
  g.expert_pred = expert_forward(t, m, noised, s.tau, cond);

  if (!opt.want_losses) return g;

  // flow matching target is (eps - chunk); mean over elements
  nn::MatT<S> target = eps - chunk;
  nn::MatT<S> ones_hd = nn::MatT<S>::Ones(cfg.chunk_h, cfg.action_d);
  g.flow = t.mse(g.expert_pred, target, ones_hd,
                 S(1) / S(cfg.chunk_h * cfg.action_d));

  // next-token prediction over the suffix, masked by the CoT stream mask
  if (g.suffix_len > 1) {
    std::vector<int> targets(size_t(g.suffix_len - 1));
    std::vector<S> mask_rows(size_t(g.suffix_len - 1));
    for (int j = 0; j + 1 < g.suffix_len; ++j) {
      targets[size_t(j)] = s.suffix_ids[size_t(j + 1)];
      mask_rows[size_t(j)] =
          j < int(s.cot_mask.size()) ? S(s.cot_mask[size_t(j)]) : S(0);
    }
    int pred_rows = t.slice_rows(g.logits, 0, g.suffix_len - 1);
    g.ce = t.ce_rows(pred_rows, targets, mask_rows, S(1));
  } else {
    g.ce = t.input(nn::MatT<S>::Zero(1, 1));
  }

  // trajectory regression over valid keypoints
  double valid = s.traj_mask.sum();
  if (valid > 0) {
    g.traj = t.mse(g.traj_out, s.traj_target.template cast<S>(),
                   s.traj_mask.template cast<S>(), S(1.0 / valid));
  } else {
    g.traj = t.input(nn::MatT<S>::Zero(1, 1));
  }

  return g;
}

// ---------------------------------------------------------------------------
// Inference helpers
// ---------------------------------------------------------------------------

// Euler integration of the learned field from tau = 0 to 1:
// a <- a - (1/S) * f(a, s/S). With f == c this returns eps - c exactly.
template <typename F>
inline nn::MatT<double> integrate_flow(F&& field, nn::MatT<double> a, int steps) {
  if (steps < 1) throw Gb0Error("sampler needs S >= 1");
  for (int s = 0; s < steps; ++s) {
    double tau = double(s) / double(steps);
    a -= field(a, tau) / double(steps);
  }
  return a.cwiseMax(-1.5).cwiseMin(1.5);
}

// Inference context: backbone features computed once per observation.
template <typename S>
struct PolicyContext {
  nn::MatT<S> cond_backbone;  // rows fed to the expert, pre-proprio
  nn::MatT<double> proprio;
  std::vector<int> decoded_suffix;  // when CoT decoding ran
};

template <typename S>
nn::MatT<double> sample_actions_from(const Model<S>& m,
                                     const PolicyContext<S>& ctx, int steps,
                                     const nn::MatT<double>& eps) {
  return integrate_flow(
      [&](const nn::MatT<double>& a, double tau) {
        nn::GradBuffer<S> sink(m.params);
        nn::Tape<S> t(&m.params, &sink);
        int cond_b = t.input(ctx.cond_backbone);
        int cond_p = t.add_rowvec(
            t.matmul(t.input(ctx.proprio.template cast<S>()),
                     t.param("ex.cond_proprio_w")),
            t.param("ex.cond_proprio_b"));
        int cond = t.concat_rows({cond_b, cond_p});
        int pred = expert_forward(t, m, t.input(a.template cast<S>()), tau, cond);
        return nn::MatT<double>(t.val(pred).template cast<double>());
      },
      eps, steps);
}

template <typename S>
nn::MatT<double> sample_actions(const Model<S>& m,
                                const PolicyContext<S>& ctx, int steps,
                                Rng& rng) {
  nn::MatT<double> eps(m.cfg.chunk_h, m.cfg.action_d);
  for (Eigen::Index i = 0; i < eps.size(); ++i) eps.data()[i] = rng.normal();
  return sample_actions_from(m, ctx, steps, eps);
}

// Forward the prefix (plus an optional teacher suffix) outside training.
template <typename S>
int forward_inference(nn::Tape<S>& t, const Model<S>& m, const SampleInput& s,
                      int* prefix_len) {
  int tokens = -1;
  *prefix_len = embed_sequence(t, m, s, &tokens);
  int total = *prefix_len + int(s.suffix_ids.size());
  nn::MatT<S> mask = prefix_lm_mask<S>(*prefix_len, total);
  return backbone_forward(t, m, tokens, mask);
}

// Greedy CoT decode: subgoal words until SEP, a forced BOA, exactly K*D
// action-alphabet tokens, then EOS. Deterministic given parameters/context.
template <typename S>
std::vector<int> cot_decode(const Model<S>& m, const SampleInput& prefix_only,
                            int max_len) {
  SampleInput s = prefix_only;
  s.suffix_ids = {tok::kBos};
  const int kd = m.cfg.dct_keep * m.cfg.action_d;
  const tok::Vocabulary& v = m.vocab;

  auto greedy = [&](bool action_phase) {
    nn::GradBuffer<S> sink(m.params);
    nn::Tape<S> t(&m.params, &sink);
    int plen = 0;
    int hidden = forward_inference(t, m, s, &plen);
    int last = plen + int(s.suffix_ids.size()) - 1;
    int logits = t.add_rowvec(
        t.matmul(t.slice_rows(hidden, last, 1), t.param("lm.w")),
        t.param("lm.b"));
    const auto& row = t.val(logits);
    int best = -1;
    S best_v = S(0);
    for (int id = 0; id < v.size(); ++id) {
      bool ok = action_phase ? v.is_action(id) : (v.is_word(id) || id == tok::kSep);
      if (!ok) continue;
      if (best < 0 || row(0, id) > best_v) {
        best = id;
        best_v = row(0, id);
      }
    }
    return best;
  };

  // subgoal words until SEP; SEP is forced once the subgoal budget is spent
  for (;;) {
    if (int(s.suffix_ids.size()) >= max_len) throw DecodeOverflow("max_len");
    int id = int(s.suffix_ids.size()) > m.cfg.max_subgoal ? tok::kSep
                                                          : greedy(false);
    s.suffix_ids.push_back(id);
    if (id == tok::kSep) break;
  }
  s.suffix_ids.push_back(tok::kBoa);
  for (int k = 0; k < kd; ++k) {
    if (int(s.suffix_ids.size()) >= max_len) throw DecodeOverflow("max_len");
    s.suffix_ids.push_back(greedy(true));
  }
  s.suffix_ids.push_back(tok::kEos);
  return s.suffix_ids;
}

// ---------------------------------------------------------------------------
// Analytic FLOP accounting (multiply-adds x 2), matmuls only, matching the
// tape's instrumentation counter.
// ---------------------------------------------------------------------------

struct FlopBreakdown {
  double embed = 0, backbone = 0, heads = 0, expert = 0;
  double total() const { return embed + backbone + heads + expert; }
};

inline FlopBreakdown flop_estimate(const ModelConfig& cfg) {
  FlopBreakdown f;
  const double d = cfg.d_model, de = cfg.d_expert;
  const double n = cfg.prefix_len() + cfg.max_suffix();
  const double np = double(cfg.n_cameras) * cfg.patches_per_camera();
  const double V = double(tok::Vocabulary().size());
  const double H = cfg.chunk_h, D = cfg.action_d, g = cfg.d_gru;

  f.embed = np * cfg.patch_dim() * d + 8 * d;
  f.backbone = cfg.n_layers * (12.0 * n * d * d + 2.0 * n * n * d);
  f.heads = double(cfg.max_suffix()) * d * V  // LM head
            + 10.0 * (3.0 * (d * g + g * g) + g * 2.0);  // GRU + readout
  const double cot_rows = cfg.expert_sees_cot ? 1.0 + cfg.max_subgoal + 2.0 : 0.0;
  const double cond = cfg.prefix_len() + cot_rows + 1;  // + the proprio row
  double per_pass = H * D * de                    // chunk embedding
                    + kSinusoidalDim * de + de * de;  // tau MLP
  per_pass += cfg.expert_layers *
              (de * 6.0 * de                       // adaptive scale/shift
               + 4.0 * H * de * de + 2.0 * H * H * de   // self-attention
               + H * de * de + 2.0 * cond * d * de      // cross q, k, v
               + 2.0 * H * cond * de + H * de * de      // scores, mix, out
               + 8.0 * H * de * de);                    // feed-forward
  per_pass += H * de * D;
  f.expert = cfg.sample_steps * per_pass;

  f.embed *= 2;
  f.backbone *= 2;
  f.heads *= 2;
  f.expert *= 2;
  return f;
}

// ---------------------------------------------------------------------------
// Checkpoints: versioned binary of named tensors plus the run manifest
// (config, action stats) so a checkpoint is self-contained.
// ---------------------------------------------------------------------------

constexpr uint32_t kCheckpointVersion = 1;

inline uint64_t config_hash(const ModelConfig& cfg) {
  std::string s = cfg.to_json().dump();
  return fnv1a64(s.data(), s.size());
}

template <typename S>
void save_checkpoint(const Model<S>& m, const annotate::ActionStats& stats,
                     const std::string& path) {
  Json manifest;
  manifest["config"] = m.cfg.to_json();
  manifest["config_hash"] = hex64(config_hash(m.cfg));
  manifest["vocab_size"] = m.vocab.size();
  manifest["action_stats"] =
      Json{{"low", stats.low}, {"high", stats.high}};
  std::string mstr = manifest.dump();

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Gb0Error("cannot write checkpoint: " + path);
  auto u32 = [&](uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); };
  f.write("GB0C", 4);
  u32(kCheckpointVersion);
  u32(uint32_t(mstr.size()));
  f.write(mstr.data(), std::streamsize(mstr.size()));
  u32(uint32_t(m.params.count()));
  for (const auto& e : m.params.entries) {
    u32(uint32_t(e.name.size()));
    f.write(e.name.data(), std::streamsize(e.name.size()));
    u32(uint32_t(e.value.rows()));
    u32(uint32_t(e.value.cols()));
    for (Eigen::Index i = 0; i < e.value.size(); ++i) {
      float v = float(e.value.data()[i]);
      f.write(reinterpret_cast<const char*>(&v), 4);
    }
  }
  if (!f) throw Gb0Error("checkpoint write failed: " + path);
}

template <typename S>
std::pair<Model<S>, annotate::ActionStats> load_checkpoint(
    const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Gb0Error("cannot open checkpoint: " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::string(magic, 4) != "GB0C")
    throw FormatError("bad checkpoint magic");
  auto u32 = [&]() {
    uint32_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 4);
    if (!f) throw FormatError("checkpoint truncated");
    return v;
  };
  if (u32() != kCheckpointVersion) throw FormatError("checkpoint version");
  uint32_t mlen = u32();
  std::string mstr(mlen, '\0');
  f.read(mstr.data(), mlen);
  Json manifest = Json::parse(mstr);
  ModelConfig cfg = ModelConfig::from_json(manifest.at("config"));

  Model<S> m = Model<S>::init(cfg, 0);
  annotate::ActionStats stats;
  stats.low = manifest.at("action_stats").at("low").get<std::vector<double>>();
  stats.high = manifest.at("action_stats").at("high").get<std::vector<double>>();

  uint32_t count = u32();
  if (count != m.params.count()) throw FormatError("parameter count mismatch");
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t nlen = u32();
    std::string name(nlen, '\0');
    f.read(name.data(), nlen);
    uint32_t rows = u32(), cols = u32();
    auto& mat = m.params.at(name);
    if (mat.rows() != Eigen::Index(rows) || mat.cols() != Eigen::Index(cols))
      throw FormatError("parameter shape mismatch: " + name);
    for (Eigen::Index k = 0; k < mat.size(); ++k) {
      float v;
      f.read(reinterpret_cast<char*>(&v), 4);
      mat.data()[k] = S(v);
    }
  }
  if (!f) throw FormatError("checkpoint truncated");
  return {std::move(m), std::move(stats)};
}

}  // namespace model
}  // namespace gb0
