// Copyright 2026 The mtpdraft Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mtpdraft/error.hpp"
#include "mtpdraft/tensor.hpp"

namespace mtpdraft {

// Handle to a value recorded on a Tape.
struct Var {
  static constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  std::size_t id = kNone;
  bool valid() const { return id != kNone; }
};

// Reverse-mode tape. Nodes are appended in forward order; backward() replays
// them in exact reverse order. A tape built with record=false keeps values
// only, which is what inference uses.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, Var)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  Var constant(Tensor t) {
    Node n;
    n.owned = std::move(t);
    return push(std::move(n));
  }

  // Borrows `t`; it must outlive the tape.
  Var constant_ref(const Tensor& t) {
    Node n;
    n.borrowed = &t;
    return push(std::move(n));
  }

  // Trainable leaf. After backward() its gradient is added into t.grad().
  Var param(Tensor& t) {
    Node n;
    n.borrowed = &t;
    n.param = &t;
    n.requires_grad = record_;
    return push(std::move(n));
  }

  // Const tensors bind as constants and mutable ones as parameters, so the
  // same forward code serves frozen and trainable modules.
  Var bind(const Tensor& t) { return constant_ref(t); }
  Var bind(Tensor& t) { return param(t); }

  const Tensor& value(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.borrowed ? *n.borrowed : n.owned;
  }

  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  // Records an op result. The backward closure is dropped when no input needs
  // a gradient or the tape is not recording.
  Var emit(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    Node n;
    n.owned = std::move(value);
    if (record_) {
      for (Var in : inputs) n.requires_grad = n.requires_grad || nodes_[in.id].requires_grad;
      if (n.requires_grad) n.backward = std::move(fn);
    }
    return push(std::move(n));
  }

  bool any_requires_grad(std::initializer_list<Var> inputs) const {
    if (!record_) return false;
    for (Var in : inputs) {
      if (nodes_[in.id].requires_grad) return true;
    }
    return false;
  }

  // Gradient buffer of a node, allocated on first access.
  std::span<double> grad(Var v) {
    Node& n = nodes_.at(v.id);
    if (n.grad.empty()) n.grad.assign(value(v).size(), 0.0);
    return n.grad;
  }

  bool has_grad(Var v) const { return !nodes_.at(v.id).grad.empty(); }

  void backward(Var loss) {
    if (!record_) throw StateError("backward() on a tape that does not record");
    if (value(loss).size() != 1) throw DimensionError("backward() needs a scalar loss");
    backward_order_.clear();
    grad(loss)[0] = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty()) continue;
      backward_order_.push_back(i);
      if (n.backward) n.backward(*this, Var{i});
      if (n.param) {
        auto dst = n.param->grad();
        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += n.grad[j];
      }
    }
  }

  // Node ids in the order backward() visited them.
  const std::vector<std::size_t>& backward_order() const { return backward_order_; }

 private:
  struct Node {
    Tensor owned;
    const Tensor* borrowed = nullptr;
    Tensor* param = nullptr;
    bool requires_grad = false;
    std::vector<double> grad;
    BackwardFn backward;
  };

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  bool record_;
  std::vector<Node> nodes_;
  std::vector<std::size_t> backward_order_;
};

namespace detail {

inline Shape with_last(Shape s, std::size_t last) {
  if (s.empty()) s.push_back(last);
  else s.back() = last;
  return s;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline void check_finite(std::span<const double> xs, const char* what) {
  for (double x : xs) {
    if (!std::isfinite(x)) throw NumericError(std::string(what) + ": non-finite value");
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Plain tensor functions.

inline Tensor rms_norm(const Tensor& x, const Tensor& gamma, double eps = 1e-6) {
  const std::size_t d = x.cols();
  require(d >= 1, "rms_norm: empty last dimension");
  require(gamma.size() == d, "rms_norm: gamma length " + std::to_string(gamma.size()) +
                                 " != last dimension " + std::to_string(d));
  Tensor y(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const double* xr = x.ptr() + r * d;
    double* yr = y.ptr() + r * d;
    const double inv = 1.0 / std::sqrt(kernels::dot(xr, xr, d) / static_cast<double>(d) + eps);
    for (std::size_t j = 0; j < d; ++j) yr[j] = xr[j] * inv * gamma[j];
  }
  return y;
}

struct CrossEntropy {
  double loss = 0.0;
  std::vector<double> grad;  // d loss / d logits
};

// -log softmax(logits)[target] with max subtraction.
inline CrossEntropy softmax_cross_entropy(std::span<const double> logits, TokenId target) {
  if (target < 0 || static_cast<std::size_t>(target) >= logits.size()) {
    throw IndexError("cross entropy target " + std::to_string(target) + " outside [0, " +
                     std::to_string(logits.size()) + ")");
  }
  detail::check_finite(logits, "softmax_cross_entropy");
  const double mx = *std::max_element(logits.begin(), logits.end());
  CrossEntropy ce;
  ce.grad.resize(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    ce.grad[i] = std::exp(logits[i] - mx);
    z += ce.grad[i];
  }
  for (double& g : ce.grad) g /= z;
  ce.loss = std::log(z) - (logits[static_cast<std::size_t>(target)] - mx);
  ce.grad[static_cast<std::size_t>(target)] -= 1.0;
  return ce;
}

namespace detail {

// Keys/values already resident in a cache, laid out [len x d].
struct PastKV {
  const double* k = nullptr;
  const double* v = nullptr;
  std::size_t len = 0;
};

// Multi-head causal attention. q, k, v are [T x d]; query row j sees key rows
// at absolute positions <= past.len + j. probs (optional) receives the
// softmax weights laid out [T][heads][past.len + T].
inline void attention_forward(const double* q, const double* k, const double* v, std::size_t t,
                              std::size_t d, std::size_t heads, PastKV past, double* out,
                              std::vector<double>* probs) {
  const std::size_t dh = d / heads;
  const std::size_t total = past.len + t;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  if (probs) probs->assign(t * heads * total, 0.0);
  std::vector<double> s(total);
  std::fill(out, out + t * d, 0.0);
  for (std::size_t j = 0; j < t; ++j) {
    const std::size_t visible = past.len + j + 1;
    for (std::size_t h = 0; h < heads; ++h) {
      const double* qj = q + j * d + h * dh;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t m = 0; m < visible; ++m) {
        const double* km = m < past.len ? past.k + m * d : k + (m - past.len) * d;
        s[m] = kernels::dot(qj, km + h * dh, dh) * scale;
        mx = std::max(mx, s[m]);
      }
      double z = 0.0;
      for (std::size_t m = 0; m < visible; ++m) {
        s[m] = std::exp(s[m] - mx);
        z += s[m];
      }
      double* oj = out + j * d + h * dh;
      for (std::size_t m = 0; m < visible; ++m) {
        s[m] /= z;
        const double* vm = m < past.len ? past.v + m * d : v + (m - past.len) * d;
        kernels::axpy(s[m], vm + h * dh, oj, dh);
      }
      if (probs) std::copy(s.begin(), s.begin() + visible, probs->begin() + (j * heads + h) * total);
    }
  }
}

}  // namespace detail

// Single-head causal attention over [past_len + T] keys; q is [T x d_head].
inline Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                               std::size_t past_len) {
  const std::size_t t = q.rows();
  const std::size_t d = q.cols();
  require(k.cols() == d && v.cols() == d, "causal_attention: mismatched d_head");
  require(k.rows() == past_len + t && v.rows() == past_len + t,
          "causal_attention: k/v must hold past_len + T rows");
  Tensor out({t, d});
  detail::PastKV past{k.ptr(), v.ptr(), past_len};
  detail::attention_forward(q.ptr(), k.ptr() + past_len * d, v.ptr() + past_len * d, t, d, 1, past,
                            out.ptr(), nullptr);
  return out;
}

// ---------------------------------------------------------------------------
// Differentiable ops.

namespace ops {

// y = x W^T; W is [out x in].
inline Var linear(Tape& tape, Var x, Var w) {
  const Tensor& xv = tape.value(x);
  const Tensor& wv = tape.value(w);
  require(wv.rank() == 2 && wv.dim(1) == xv.cols(),
          "linear: input dim " + std::to_string(xv.cols()) + " vs weight " + shape_str(wv.shape()));
  const std::size_t n = xv.rows(), in = xv.cols(), out = wv.dim(0);
  Tensor y(mtpdraft::detail::with_last(xv.shape(), out));
  kernels::linear(xv.ptr(), n, in, wv.ptr(), out, y.ptr());
  return tape.emit(std::move(y), {x, w}, [x, w, n, in, out](Tape& tp, Var self) {
    auto gy = tp.grad(self);
    const Tensor& xv = tp.value(x);
    const Tensor& wv = tp.value(w);
    if (tp.requires_grad(x)) {
      auto gx = tp.grad(x);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < out; ++j) {
          kernels::axpy(gy[i * out + j], wv.ptr() + j * in, gx.data() + i * in, in);
        }
      }
    }
    if (tp.requires_grad(w)) {
      auto gw = tp.grad(w);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < out; ++j) {
          kernels::axpy(gy[i * out + j], xv.ptr() + i * in, gw.data() + j * in, in);
        }
      }
    }
  });
}

inline Var add(Tape& tape, Var a, Var b) {
  const Tensor& av = tape.value(a);
  const Tensor& bv = tape.value(b);
  require(av.shape() == bv.shape(), "add: shape " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  Tensor y = av;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  return tape.emit(std::move(y), {a, b}, [a, b](Tape& tp, Var self) {
    auto gy = tp.grad(self);
    for (Var in : {a, b}) {
      if (!tp.requires_grad(in)) continue;
      auto g = tp.grad(in);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
    }
  });
}

inline Var rms_norm(Tape& tape, Var x, Var gamma, double eps) {
  const Tensor& xv = tape.value(x);
  const std::size_t d = xv.cols(), n = xv.rows();
  Tensor y = mtpdraft::rms_norm(xv, tape.value(gamma), eps);
  return tape.emit(std::move(y), {x, gamma}, [x, gamma, d, n, eps](Tape& tp, Var self) {
    auto gy = tp.grad(self);
    const Tensor& xv = tp.value(x);
    const Tensor& gv = tp.value(gamma);
    const bool need_x = tp.requires_grad(x), need_g = tp.requires_grad(gamma);
    for (std::size_t r = 0; r < n; ++r) {
      const double* xr = xv.ptr() + r * d;
      const double* gr = gy.data() + r * d;
      const double inv = 1.0 / std::sqrt(kernels::dot(xr, xr, d) / static_cast<double>(d) + eps);
      if (need_g) {
        auto gg = tp.grad(gamma);
        for (std::size_t j = 0; j < d; ++j) gg[j] += gr[j] * xr[j] * inv;
      }
      if (need_x) {
        double acc = 0.0;
        for (std::size_t j = 0; j < d; ++j) acc += gr[j] * gv[j] * xr[j];
        const double c = inv * inv * inv * acc / static_cast<double>(d);
        auto gx = tp.grad(x);
        for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += inv * gv[j] * gr[j] - c * xr[j];
      }
    }
  });
}

namespace rotary {

// Rotates pairs (2i, 2i+1) inside every head by pos * base^(-2i/dh).
// sign=-1 applies the inverse rotation.
inline void rotate(double* x, std::size_t n, std::size_t d, std::size_t heads, std::size_t start,
                   double base, double sign) {
  const std::size_t dh = d / heads;
  for (std::size_t r = 0; r < n; ++r) {
    const double pos = static_cast<double>(start + r);
    for (std::size_t h = 0; h < heads; ++h) {
      double* xh = x + r * d + h * dh;
      for (std::size_t i = 0; i + 1 < dh; i += 2) {
        const double theta = pos * std::pow(base, -static_cast<double>(i) / static_cast<double>(dh));
        const double c = std::cos(theta), s = sign * std::sin(theta);
        const double a = xh[i], b = xh[i + 1];
        xh[i] = a * c - b * s;
        xh[i + 1] = a * s + b * c;
      }
    }
  }
}

}  // namespace rotary

// Rotary position embedding; row r sits at absolute position start + r.
inline Var rope(Tape& tape, Var x, std::size_t heads, std::size_t start, double base) {
  Tensor y = tape.value(x);
  const std::size_t d = y.cols(), n = y.rows();
  require(heads >= 1 && d % heads == 0, "rope: model dim not divisible by heads");
  rotary::rotate(y.ptr(), n, d, heads, start, base, 1.0);
  return tape.emit(std::move(y), {x}, [x, n, d, heads, start, base](Tape& tp, Var self) {
    std::vector<double> g(tp.grad(self).begin(), tp.grad(self).end());
    rotary::rotate(g.data(), n, d, heads, start, base, -1.0);
    auto gx = tp.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

// Multi-head causal attention of new rows (q, k, v: [T x d]) over `past`
// cached rows followed by the new keys. Gradients flow to q, k, v only.
inline Var attention(Tape& tape, Var q, Var k, Var v, std::size_t heads,
                     mtpdraft::detail::PastKV past = {}) {
  const Tensor& qv = tape.value(q);
  const Tensor& kv = tape.value(k);
  const Tensor& vv = tape.value(v);
  const std::size_t t = qv.rows(), d = qv.cols();
  require(kv.cols() == d && vv.cols() == d && kv.rows() == t && vv.rows() == t,
          "attention: q/k/v shapes differ");
  require(heads >= 1 && d % heads == 0, "attention: model dim not divisible by heads");
  const bool keep = tape.any_requires_grad({q, k, v});
  std::vector<double> probs;
  Tensor out(qv.shape());
  mtpdraft::detail::attention_forward(qv.ptr(), kv.ptr(), vv.ptr(), t, d, heads, past, out.ptr(),
                                      keep ? &probs : nullptr);
  return tape.emit(std::move(out), {q, k, v},
                   [q, k, v, t, d, heads, past, probs = std::move(probs)](Tape& tp, Var self) {
    const std::size_t dh = d / heads;
    const std::size_t total = past.len + t;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    auto go = tp.grad(self);
    const Tensor& qv = tp.value(q);
    const Tensor& kv = tp.value(k);
    const Tensor& vv = tp.value(v);
    const bool need_q = tp.requires_grad(q), need_k = tp.requires_grad(k), need_v = tp.requires_grad(v);
    std::span<double> gq, gk, gv;
    if (need_q) gq = tp.grad(q);
    if (need_k) gk = tp.grad(k);
    if (need_v) gv = tp.grad(v);
    std::vector<double> ds(total);
    for (std::size_t j = 0; j < t; ++j) {
      const std::size_t visible = past.len + j + 1;
      for (std::size_t h = 0; h < heads; ++h) {
        const double* p = probs.data() + (j * heads + h) * total;
        const double* gj = go.data() + j * d + h * dh;
        double dot_sum = 0.0;
        for (std::size_t m = 0; m < visible; ++m) {
          const double* vm = m < past.len ? past.v + m * d : vv.ptr() + (m - past.len) * d;
          ds[m] = kernels::dot(gj, vm + h * dh, dh);
          dot_sum += p[m] * ds[m];
        }
        for (std::size_t m = 0; m < visible; ++m) {
          const double dsm = p[m] * (ds[m] - dot_sum) * scale;
          const double* km = m < past.len ? past.k + m * d : kv.ptr() + (m - past.len) * d;
          if (need_q) kernels::axpy(dsm, km + h * dh, gq.data() + j * d + h * dh, dh);
          if (m >= past.len) {
            const std::size_t mr = m - past.len;
            if (need_k) kernels::axpy(dsm, qv.ptr() + j * d + h * dh, gk.data() + mr * d + h * dh, dh);
            if (need_v) kernels::axpy(p[m], gj, gv.data() + mr * d + h * dh, dh);
          }
        }
      }
    }
  });
}

inline Var silu(Tape& tape, Var x) {
  Tensor y = tape.value(x);
  for (double& e : y.data()) e = e * mtpdraft::detail::sigmoid(e);
  return tape.emit(std::move(y), {x}, [x](Tape& tp, Var self) {
    auto gy = tp.grad(self);
    const Tensor& xv = tp.value(x);
    auto gx = tp.grad(x);
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const double s = mtpdraft::detail::sigmoid(xv[i]);
      gx[i] += gy[i] * s * (1.0 + xv[i] * (1.0 - s));
    }
  });
}

// Rows of `table` selected by ids -> [n x d].
inline Var embedding(Tape& tape, Var table, std::span<const TokenId> ids) {
  const Tensor& tv = tape.value(table);
  const std::size_t d = tv.cols();
  Tensor y({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= tv.rows()) {
      throw IndexError("embedding: token id " + std::to_string(ids[i]) + " out of range");
    }
    std::copy_n(tv.ptr() + static_cast<std::size_t>(ids[i]) * d, d, y.ptr() + i * d);
  }
  std::vector<TokenId> saved(ids.begin(), ids.end());
  return tape.emit(std::move(y), {table}, [table, d, saved = std::move(saved)](Tape& tp, Var self) {
    auto gy = tp.grad(self);
    auto gt = tp.grad(table);
    for (std::size_t i = 0; i < saved.size(); ++i) {
      kernels::axpy(1.0, gy.data() + i * d, gt.data() + static_cast<std::size_t>(saved[i]) * d, d);
    }
  });
}

// [n x p] ++ [n x q] -> [n x (p+q)]
// Rows [begin, begin + count) of a 2-D value.
inline Var slice_rows(Tape& tape, Var x, std::size_t begin, std::size_t count) {
  const Tensor& xv = tape.value(x);
  require(begin + count <= xv.rows(), "slice_rows: range exceeds row count");
  const std::size_t d = xv.cols();
  Tensor y({count, d}, std::vector<double>(xv.ptr() + begin * d, xv.ptr() + (begin + count) * d));
  return tape.emit(std::move(y), {x}, [x, begin, count, d](Tape& tp, Var self) {
    auto gy = tp.grad(self);
    auto gx = tp.grad(x);
    kernels::axpy(1.0, gy.data(), gx.data() + begin * d, count * d);
  });
}

inline Var concat_cols(Tape& tape, Var a, Var b) {
  const Tensor& av = tape.value(a);
  const Tensor& bv = tape.value(b);
  require(av.rows() == bv.rows(), "concat_cols: row count mismatch");
  const std::size_t n = av.rows(), p = av.cols(), q = bv.cols();
  Tensor y({n, p + q});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(av.ptr() + i * p, p, y.ptr() + i * (p + q));
    std::copy_n(bv.ptr() + i * q, q, y.ptr() + i * (p + q) + p);
  }
  return tape.emit(std::move(y), {a, b}, [a, b, n, p, q](Tape& tp, Var self) {
    auto gy = tp.grad(self);
    if (tp.requires_grad(a)) {
      auto ga = tp.grad(a);
      for (std::size_t i = 0; i < n; ++i) kernels::axpy(1.0, gy.data() + i * (p + q), ga.data() + i * p, p);
    }
    if (tp.requires_grad(b)) {
      auto gb = tp.grad(b);
      for (std::size_t i = 0; i < n; ++i) kernels::axpy(1.0, gy.data() + i * (p + q) + p, gb.data() + i * q, q);
    }
  });
}

// Sum over rows of weight[i] * CE(logits[i], target[i]); rows with zero
// weight are skipped entirely. row_losses, when given, receives the per-row
// cross entropy (0 for skipped rows).
inline Var cross_entropy(Tape& tape, Var logits, std::span<const TokenId> targets,
                         std::span<const double> weights, std::vector<double>* row_losses = nullptr) {
  const Tensor& lv = tape.value(logits);
  const std::size_t n = lv.rows(), vocab = lv.cols();
  require(targets.size() == n && weights.size() == n, "cross_entropy: targets/weights length mismatch");
  const bool keep = tape.any_requires_grad({logits});
  std::vector<double> dlogits(keep ? n * vocab : 0, 0.0);
  if (row_losses) row_losses->assign(n, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (weights[i] == 0.0) continue;
    CrossEntropy ce = softmax_cross_entropy(lv.row(i), targets[i]);
    total += weights[i] * ce.loss;
    if (row_losses) (*row_losses)[i] = ce.loss;
    if (keep) {
      for (std::size_t j = 0; j < vocab; ++j) dlogits[i * vocab + j] = weights[i] * ce.grad[j];
    }
  }
  return tape.emit(Tensor({1}, {total}), {logits}, [logits, dlogits = std::move(dlogits)](Tape& tp, Var self) {
    const double g = tp.grad(self)[0];
    auto gl = tp.grad(logits);
    for (std::size_t i = 0; i < gl.size(); ++i) gl[i] += g * dlogits[i];
  });
}

// sum_i weights[i] * scalars[i]
inline Var weighted_sum(Tape& tape, std::span<const Var> scalars, std::span<const double> weights) {
  require(scalars.size() == weights.size() && !scalars.empty(), "weighted_sum: length mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < scalars.size(); ++i) total += weights[i] * tape.value(scalars[i])[0];
  std::vector<Var> ins(scalars.begin(), scalars.end());
  std::vector<double> ws(weights.begin(), weights.end());
  Tensor y({1}, {total});
  bool needs = false;
  for (Var s : ins) needs = needs || tape.any_requires_grad({s});
  if (!needs) return tape.constant(std::move(y));
  // emit() only inspects the listed inputs, so route through the first one
  // that needs a gradient.
  Var anchor = ins.front();
  for (Var s : ins) {
    if (tape.requires_grad(s)) {
      anchor = s;
      break;
    }
  }
  return tape.emit(std::move(y), {anchor}, [ins = std::move(ins), ws = std::move(ws)](Tape& tp, Var self) {
    const double g = tp.grad(self)[0];
    for (std::size_t i = 0; i < ins.size(); ++i) {
      if (tp.requires_grad(ins[i])) tp.grad(ins[i])[0] += g * ws[i];
    }
  });
}

}  // namespace ops
}  // namespace mtpdraft
