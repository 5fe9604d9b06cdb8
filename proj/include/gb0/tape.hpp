#pragma once

#include <Eigen/Dense>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "gb0/common.hpp"

namespace gb0 {
namespace nn {

template <typename S>
using MatT = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

// ---------------------------------------------------------------------------
// Named parameter store. Parameters are grouped so the training loop can
// reason about which loss stream is allowed to touch which group.
// ---------------------------------------------------------------------------

enum ParamGroup { kBackbone = 0, kTrajHead = 1, kExpert = 2 };

template <typename S>
struct ParamStore {
  struct Entry {
    std::string name;
    MatT<S> value;
    ParamGroup group;
  };

  std::vector<Entry> entries;
  std::map<std::string, int> index;

  int add(const std::string& name, int rows, int cols, ParamGroup group) {
    if (index.count(name)) throw Gb0Error("duplicate parameter: " + name);
    Entry e;
    e.name = name;
    e.value = MatT<S>::Zero(rows, cols);
    e.group = group;
    entries.push_back(std::move(e));
    index[name] = int(entries.size()) - 1;
    return int(entries.size()) - 1;
  }

  int id(const std::string& name) const {
    auto it = index.find(name);
    if (it == index.end()) throw Gb0Error("no such parameter: " + name);
    return it->second;
  }

  MatT<S>& operator[](int i) { return entries[size_t(i)].value; }
  const MatT<S>& operator[](int i) const { return entries[size_t(i)].value; }
  MatT<S>& at(const std::string& name) { return entries[size_t(id(name))].value; }

  size_t count() const { return entries.size(); }

  size_t scalar_count() const {
    size_t n = 0;
    for (const auto& e : entries) n += size_t(e.value.size());
    return n;
  }
};

// Per-worker gradient accumulator, index-aligned with a ParamStore.
template <typename S>
struct GradBuffer {
  std::vector<MatT<S>> grads;

  explicit GradBuffer(const ParamStore<S>& store) : grads(store.count()) {}

  MatT<S>& ensure(const ParamStore<S>& store, int i) {
    if (grads[size_t(i)].size() == 0)
      grads[size_t(i)] =
          MatT<S>::Zero(store[i].rows(), store[i].cols());
    return grads[size_t(i)];
  }

  void add_scaled(const GradBuffer& other, S scale) {
    for (size_t i = 0; i < grads.size(); ++i) {
      if (other.grads[i].size() == 0) continue;
      if (grads[i].size() == 0)
        grads[i] = MatT<S>::Zero(other.grads[i].rows(), other.grads[i].cols());
      grads[i] += scale * other.grads[i];
    }
  }

  void clear() {
    for (auto& g : grads) g.resize(0, 0);
  }
};

// ---------------------------------------------------------------------------
// Reverse-mode tape over dense matrices. Each op appends a node holding the
// value and a backward closure; backward() walks the nodes in reverse.
// ---------------------------------------------------------------------------

template <typename S>
class Tape {
 public:
  using Mat = MatT<S>;

  Tape(const ParamStore<S>* store, GradBuffer<S>* sink)
      : store_(store), sink_(sink) {}

  // -------------------------------- plumbing --------------------------------

  const Mat& val(int id) const {
    const Node& n = nodes_[size_t(id)];
    return n.ext ? *n.ext : n.val;
  }

  Mat& grad(int id) {
    Node& n = nodes_[size_t(id)];
    if (n.grad.size() == 0) {
      const Mat& v = val(id);
      n.grad = Mat::Zero(v.rows(), v.cols());
    }
    return n.grad;
  }

  bool has_grad(int id) const { return nodes_[size_t(id)].grad.size() != 0; }

  int input(Mat v) {
    Node n;
    n.val = std::move(v);
    nodes_.push_back(std::move(n));
    return int(nodes_.size()) - 1;
  }

  int param(int store_idx) {
    Node n;
    n.ext = &(*store_)[store_idx];
    n.param_idx = store_idx;
    nodes_.push_back(std::move(n));
    return int(nodes_.size()) - 1;
  }

  int param(const std::string& name) { return param(store_->id(name)); }

  // value copy with the gradient path severed
  int detach(int a) { return input(val(a)); }

  size_t macs() const { return macs_; }
  size_t node_count() const { return nodes_.size(); }

  // ---------------------------------- ops -----------------------------------

  int matmul(int a, int b, bool ta = false, bool tb = false) {
    const Mat& A = val(a);
    const Mat& B = val(b);
    Mat C;
    if (!ta && !tb) C = A * B;
    else if (ta && !tb) C = A.transpose() * B;
    else if (!ta && tb) C = A * B.transpose();
    else throw Gb0Error("matmul: double transpose unsupported");
    macs_ += size_t(C.rows()) * size_t(C.cols()) *
             size_t(ta ? A.rows() : A.cols());
    return make(std::move(C), [this, a, b, ta, tb](int out) {
      const Mat& G = grad(out);
      const Mat& A2 = val(a);
      const Mat& B2 = val(b);
      if (!ta && !tb) {
        grad(a).noalias() += G * B2.transpose();
        grad(b).noalias() += A2.transpose() * G;
      } else if (ta && !tb) {
        grad(a).noalias() += B2 * G.transpose();
        grad(b).noalias() += A2 * G;
      } else {
        grad(a).noalias() += G * B2;
        grad(b).noalias() += G.transpose() * A2;
      }
    });
  }

  int add(int a, int b) {
    Mat C = val(a) + val(b);
    return make(std::move(C), [this, a, b](int out) {
      grad(a) += grad(out);
      grad(b) += grad(out);
    });
  }

  int sub(int a, int b) {
    Mat C = val(a) - val(b);
    return make(std::move(C), [this, a, b](int out) {
      grad(a) += grad(out);
      grad(b) -= grad(out);
    });
  }

  int hadamard(int a, int b) {
    Mat C = val(a).cwiseProduct(val(b));
    return make(std::move(C), [this, a, b](int out) {
      grad(a) += grad(out).cwiseProduct(val(b));
      grad(b) += grad(out).cwiseProduct(val(a));
    });
  }

  int scale(int a, S s) {
    Mat C = val(a) * s;
    return make(std::move(C),
                [this, a, s](int out) { grad(a) += grad(out) * s; });
  }

  int add_const(int a, S c) {
    Mat C = val(a).array() + c;
    return make(std::move(C), [this, a](int out) { grad(a) += grad(out); });
  }

  // A (n x d) plus a broadcast row (1 x d)
  int add_rowvec(int a, int r) {
    Mat C = val(a).rowwise() + val(r).row(0);
    return make(std::move(C), [this, a, r](int out) {
      grad(a) += grad(out);
      grad(r).row(0) += grad(out).colwise().sum();
    });
  }

  int mul_rowvec(int a, int r) {
    Mat C = val(a).array().rowwise() * val(r).row(0).array();
    return make(std::move(C), [this, a, r](int out) {
      grad(a).array() += grad(out).array().rowwise() * val(r).row(0).array();
      grad(r).row(0) +=
          grad(out).cwiseProduct(val(a)).colwise().sum();
    });
  }

  int slice_rows(int a, int r0, int n) {
    Mat C = val(a).middleRows(r0, n);
    return make(std::move(C), [this, a, r0, n](int out) {
      grad(a).middleRows(r0, n) += grad(out);
    });
  }

  int slice_cols(int a, int c0, int n) {
    Mat C = val(a).middleCols(c0, n);
    return make(std::move(C), [this, a, c0, n](int out) {
      grad(a).middleCols(c0, n) += grad(out);
    });
  }

  int concat_rows(const std::vector<int>& parts) {
    Eigen::Index rows = 0;
    for (int p : parts) rows += val(p).rows();
    Mat C(rows, val(parts[0]).cols());
    Eigen::Index r = 0;
    for (int p : parts) {
      C.middleRows(r, val(p).rows()) = val(p);
      r += val(p).rows();
    }
    return make(std::move(C), [this, parts](int out) {
      Eigen::Index r2 = 0;
      for (int p : parts) {
        grad(p) += grad(out).middleRows(r2, val(p).rows());
        r2 += val(p).rows();
      }
    });
  }

  int concat_cols(const std::vector<int>& parts) {
    Eigen::Index cols = 0;
    for (int p : parts) cols += val(p).cols();
    Mat C(val(parts[0]).rows(), cols);
    Eigen::Index c = 0;
    for (int p : parts) {
      C.middleCols(c, val(p).cols()) = val(p);
      c += val(p).cols();
    }
    return make(std::move(C), [this, parts](int out) {
      Eigen::Index c2 = 0;
      for (int p : parts) {
        grad(p) += grad(out).middleCols(c2, val(p).cols());
        c2 += val(p).cols();
      }
    });
  }

  // rows of a parameter table gathered by token id
  int embedding(int store_idx, const std::vector<int>& ids) {
    const Mat& table = (*store_)[store_idx];
    Mat C(Eigen::Index(ids.size()), table.cols());
    for (size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0 || ids[i] >= table.rows())
        throw Gb0Error("embedding id out of range");
      C.row(Eigen::Index(i)) = table.row(ids[i]);
    }
    return make(std::move(C), [this, store_idx, ids](int out) {
      Mat& sink = sink_->ensure(*store_, store_idx);
      const Mat& G = grad(out);
      for (size_t i = 0; i < ids.size(); ++i)
        sink.row(ids[i]) += G.row(Eigen::Index(i));
    });
  }

  int sigmoid(int a) {
    Mat C = (S(1) / (S(1) + (-val(a).array()).exp())).matrix();
    return make(std::move(C), [this, a](int out) {
      const Mat& y = val(out);
      grad(a).array() +=
          grad(out).array() * y.array() * (S(1) - y.array());
    });
  }

  int tanh_op(int a) {
    Mat C = val(a).array().tanh().matrix();
    return make(std::move(C), [this, a](int out) {
      const Mat& y = val(out);
      grad(a).array() += grad(out).array() * (S(1) - y.array().square());
    });
  }

  int gelu(int a) {
    const S k = S(0.7978845608028654);  // sqrt(2/pi)
    const S c = S(0.044715);
    Mat inner = (k * (val(a).array() + c * val(a).array().cube())).matrix();
    Mat t = inner.array().tanh().matrix();
    Mat C = (S(0.5) * val(a).array() * (S(1) + t.array())).matrix();
    return make(std::move(C), [this, a, k, c, t = std::move(t)](int out) {
      const auto& x = val(a).array();
      const auto& th = t.array();
      auto dinner = k * (S(1) + S(3) * c * x.square());
      auto dy = S(0.5) * (S(1) + th) +
                S(0.5) * x * (S(1) - th.square()) * dinner;
      grad(a).array() += grad(out).array() * dy;
    });
  }

  // rowwise softmax of (a + additive_mask); mask entries are 0 or -inf-like
  int softmax_rows(int a, const Mat* mask = nullptr) {
    Mat x = val(a);
    if (mask) x += *mask;
    Mat C(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      S m = x.row(i).maxCoeff();
      Eigen::Array<S, 1, Eigen::Dynamic> e = (x.row(i).array() - m).exp();
      C.row(i) = (e / e.sum()).matrix();
    }
    return make(std::move(C), [this, a](int out) {
      const Mat& y = val(out);
      const Mat& G = grad(out);
      Mat& ga = grad(a);
      for (Eigen::Index i = 0; i < y.rows(); ++i) {
        S dot = (G.row(i).array() * y.row(i).array()).sum();
        ga.row(i).array() +=
            (G.row(i).array() - dot) * y.row(i).array();
      }
    });
  }

  // rowwise layer norm; gamma/beta omitted when < 0 (plain normalization)
  int layernorm(int a, int gamma = -1, int beta = -1, S eps = S(1e-5)) {
    const Mat& x = val(a);
    Eigen::Index n = x.rows(), d = x.cols();
    Mat xhat(n, d);
    Eigen::Array<S, Eigen::Dynamic, 1> inv_sigma(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      S mu = x.row(i).mean();
      S var = (x.row(i).array() - mu).square().sum() / S(d);
      S is = S(1) / std::sqrt(var + eps);
      inv_sigma(i) = is;
      xhat.row(i) = ((x.row(i).array() - mu) * is).matrix();
    }
    Mat C = xhat;
    if (gamma >= 0) {
      C = C.array().rowwise() * val(gamma).row(0).array();
      C = C.rowwise() + val(beta).row(0);
    }
    return make(
        std::move(C),
        [this, a, gamma, beta, xhat = std::move(xhat),
         inv_sigma = std::move(inv_sigma)](int out) {
          const Mat& G = grad(out);
          Eigen::Index n2 = G.rows(), d2 = G.cols();
          Mat dxhat = G;
          if (gamma >= 0) {
            dxhat = G.array().rowwise() * val(gamma).row(0).array();
            grad(gamma).row(0) += G.cwiseProduct(xhat).colwise().sum();
            grad(beta).row(0) += G.colwise().sum();
          }
          Mat& ga = grad(a);
          for (Eigen::Index i = 0; i < n2; ++i) {
            S m1 = dxhat.row(i).mean();
            S m2 = (dxhat.row(i).array() * xhat.row(i).array()).sum() / S(d2);
            ga.row(i).array() +=
                (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2) *
                inv_sigma(i);
          }
        });
  }

  // masked cross entropy: scale * sum_i mask_i * (logsumexp_i - logit_i[tgt])
  int ce_rows(int logits, const std::vector<int>& targets,
              const std::vector<S>& row_mask, S scale) {
    const Mat& L = val(logits);
    if (L.rows() != Eigen::Index(targets.size()) ||
        targets.size() != row_mask.size())
      throw ShapeMismatch("ce_rows shape mismatch");
    Mat probs(L.rows(), L.cols());
    S total = 0;
    for (Eigen::Index i = 0; i < L.rows(); ++i) {
      S m = L.row(i).maxCoeff();
      Eigen::Array<S, 1, Eigen::Dynamic> e = (L.row(i).array() - m).exp();
      S z = e.sum();
      probs.row(i) = (e / z).matrix();
      if (row_mask[size_t(i)] != S(0)) {
        S logp = L(i, targets[size_t(i)]) - (m + std::log(z));
        total -= row_mask[size_t(i)] * logp;
      }
    }
    Mat C(1, 1);
    C(0, 0) = scale * total;
    return make(std::move(C), [this, logits, targets, row_mask, scale,
                               probs = std::move(probs)](int out) {
      S g = grad(out)(0, 0) * scale;
      Mat& gl = grad(logits);
      for (Eigen::Index i = 0; i < gl.rows(); ++i) {
        if (row_mask[size_t(i)] == S(0)) continue;
        gl.row(i) += g * row_mask[size_t(i)] * probs.row(i);
        gl(i, targets[size_t(i)]) -= g * row_mask[size_t(i)];
      }
    });
  }

  // scale * sum(mask .* (a - target)^2); target and mask are constants
  int mse(int a, Mat target, Mat mask, S scale) {
    const Mat& A = val(a);
    Mat diff = (A - target).cwiseProduct(mask);
    Mat C(1, 1);
    C(0, 0) = scale * diff.cwiseProduct(A - target).sum();
    return make(std::move(C), [this, a, target = std::move(target),
                               mask = std::move(mask), scale](int out) {
      S g = grad(out)(0, 0);
      grad(a) += (S(2) * g * scale) *
                 (val(a) - target).cwiseProduct(mask);
    });
  }

  S scalar(int a) const { return val(a)(0, 0); }

  // ------------------------------- backward ---------------------------------

  void backward(int loss_id, S seed = S(1)) {
    grad(loss_id)(0, 0) += seed;
    for (int i = loss_id; i >= 0; --i) {
      Node& n = nodes_[size_t(i)];
      if (n.grad.size() == 0) continue;  // not on the path
      if (n.back) n.back(i);
      if (n.param_idx >= 0)
        sink_->ensure(*store_, n.param_idx) += n.grad;
    }
  }

 private:
  struct Node {
    Mat val;
    const Mat* ext = nullptr;
    Mat grad;
    std::function<void(int)> back;
    int param_idx = -1;
  };

  int make(Mat v, std::function<void(int)> back) {
    Node n;
    n.val = std::move(v);
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return int(nodes_.size()) - 1;
  }

  const ParamStore<S>* store_;
  GradBuffer<S>* sink_;
  std::vector<Node> nodes_;
  size_t macs_ = 0;
};

}  // namespace nn
}  // namespace gb0
