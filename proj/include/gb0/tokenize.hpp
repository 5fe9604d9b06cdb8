#pragma once

#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "gb0/common.hpp"
#include "gb0/scene.hpp"

namespace gb0 {
namespace tok {

// ---------------------------------------------------------------------------
// Vocabulary: special tokens, the closed template grammar, a 256-symbol
// action alphabet and 10 reserved trajectory-query ids. Ids are dense and
// stable given the same grammar; PAD is 0.
// ---------------------------------------------------------------------------

constexpr int kPad = 0;
constexpr int kBos = 1;
constexpr int kEos = 2;
constexpr int kSep = 3;
constexpr int kBoa = 4;
constexpr int kNumSpecials = 5;
constexpr int kActionAlphabet = 256;
constexpr int kTrajQueries = 10;

class Vocabulary {
 public:
  Vocabulary() {
    static const char* kWords[] = {
        "sort", "stack", "pick",  "place",  "move",   "continue", "the",
        "a",    "block", "blocks", "bin",   "into",   "toward",   "task",
        "on",   "red",   "green", "blue",   "yellow", "orange",   "purple"};
    for (const char* w : kWords) {
      word_to_id_[w] = kNumSpecials + int(words_.size());
      words_.push_back(w);
    }
    action_base_ = kNumSpecials + int(words_.size());
    traj_base_ = action_base_ + kActionAlphabet;
    size_ = traj_base_ + kTrajQueries;
  }

  int size() const { return size_; }
  int action_base() const { return action_base_; }
  int traj_base() const { return traj_base_; }
  int word_count() const { return int(words_.size()); }

  bool is_word(int id) const {
    return id >= kNumSpecials && id < action_base_;
  }
  bool is_action(int id) const {
    return id >= action_base_ && id < traj_base_;
  }

  std::vector<int> encode_text(const std::string& s) const {
    std::vector<int> out;
    std::istringstream is(s);
    std::string w;
    while (is >> w) {
      auto it = word_to_id_.find(w);
      if (it == word_to_id_.end()) throw UnknownWord(w);
      out.push_back(it->second);
    }
    return out;
  }

  std::string decode_text(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
      if (!is_word(id)) throw UnknownWord("id " + std::to_string(id));
      if (!out.empty()) out += ' ';
      out += words_[size_t(id - kNumSpecials)];
    }
    return out;
  }

  const std::vector<std::string>& words() const { return words_; }

 private:
  std::vector<std::string> words_;
  std::map<std::string, int> word_to_id_;
  int action_base_ = 0;
  int traj_base_ = 0;
  int size_ = 0;
};

// Every sentence the annotation templates can emit plus both task
// instructions; the grammar is closed and enumerable.
inline std::vector<std::string> enumerate_grammar() {
  std::vector<std::string> out = {"sort the blocks into the bin",
                                  "stack the blocks", "continue task",
                                  "move toward bin"};
  for (const auto& c : color_names()) {
    out.push_back("pick " + c + " block");
    out.push_back("place " + c + " block into bin");
    out.push_back("stack " + c + " block");
    out.push_back("move toward " + c + " block");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Discrete action tokenizer: per dimension, an orthonormal DCT-II over the
// chunk horizon, truncated to the K lowest frequencies, uniformly quantized
// to 256 levels over [-r, r]. Fixed K*D tokens per chunk; decoding is total.
// ---------------------------------------------------------------------------

struct ActionChunk {
  int horizon = 0, dims = 0;
  std::vector<double> v;  // row-major, horizon x dims

  ActionChunk() = default;
  ActionChunk(int h, int d) : horizon(h), dims(d), v(size_t(h) * d, 0.0) {}

  double& at(int t, int d) { return v[size_t(t) * dims + d]; }
  double at(int t, int d) const { return v[size_t(t) * dims + d]; }
};

struct ActionTokenizerConfig {
  int horizon = 16;  // H
  int dims = 4;      // D
  int keep = 8;      // K retained DCT coefficients per dimension
  double coeff_range = 4.0;  // r
  int levels = 256;

  int tokens_per_chunk() const { return keep * dims; }

  void check() const {
    if (keep < 1 || keep > horizon)
      throw Gb0Error("tokenizer requires 1 <= K <= H");
    if (levels != kActionAlphabet)
      throw Gb0Error("tokenizer levels must match the action alphabet");
  }
};

namespace detail {

inline double dct_weight(int k, int H) {
  return k == 0 ? std::sqrt(1.0 / H) : std::sqrt(2.0 / H);
}

inline double dct_basis(int k, int n, int H) {
  return std::cos(M_PI * double(k) * (2.0 * n + 1.0) / (2.0 * H));
}

}  // namespace detail

// Token ids are offsets into the vocabulary's action alphabet.
inline std::vector<int> encode_actions(const ActionChunk& chunk,
                                       const ActionTokenizerConfig& cfg,
                                       const Vocabulary& vocab) {
  cfg.check();
  if (chunk.horizon != cfg.horizon || chunk.dims != cfg.dims)
    throw ShapeMismatch("chunk does not match tokenizer config");
  for (double x : chunk.v)
    if (std::abs(x) > 1.0 + 1e-6)
      throw NotNormalized("chunk values must lie in [-1, 1]");

  const int H = cfg.horizon;
  const double bin_w = 2.0 * cfg.coeff_range / cfg.levels;
  std::vector<int> ids;
  ids.reserve(size_t(cfg.tokens_per_chunk()));
  for (int d = 0; d < cfg.dims; ++d) {
    for (int k = 0; k < cfg.keep; ++k) {
      double coeff = 0;
      for (int n = 0; n < H; ++n)
        coeff += chunk.at(n, d) * detail::dct_basis(k, n, H);
      coeff *= detail::dct_weight(k, H);
      coeff = std::clamp(coeff, -cfg.coeff_range, cfg.coeff_range);
      // mid-tread: level centers at integer multiples of bin_w, 0 exact
      int bin = int(std::lround(coeff / bin_w)) + cfg.levels / 2;
      bin = std::clamp(bin, 0, cfg.levels - 1);
      ids.push_back(vocab.action_base() + bin);
    }
  }
  return ids;
}

inline ActionChunk decode_actions(const std::vector<int>& ids,
                                  const ActionTokenizerConfig& cfg,
                                  const Vocabulary& vocab) {
  cfg.check();
  if (int(ids.size()) != cfg.tokens_per_chunk())
    throw ShapeMismatch("expected K*D action tokens");
  const int H = cfg.horizon;
  const double bin_w = 2.0 * cfg.coeff_range / cfg.levels;
  ActionChunk chunk(cfg.horizon, cfg.dims);
  for (int d = 0; d < cfg.dims; ++d) {
    for (int n = 0; n < H; ++n) {
      double x = 0;
      for (int k = 0; k < cfg.keep; ++k) {
        int bin = std::clamp(ids[size_t(d * cfg.keep + k)] - vocab.action_base(),
                             0, cfg.levels - 1);
        double coeff = double(bin - cfg.levels / 2) * bin_w;
        x += detail::dct_weight(k, H) * coeff * detail::dct_basis(k, n, H);
      }
      chunk.at(n, d) = x;
    }
  }
  return chunk;
}

}  // namespace tok
}  // namespace gb0
