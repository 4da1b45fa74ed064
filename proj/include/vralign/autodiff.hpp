#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "vralign/ndarray.hpp"

namespace vralign {

class Tape;

/// A differentiable value: an NdArray plus a gradient slot on a tape.
/// Copyable handle; the data lives on the tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  const NdArray& value() const;
  const NdArray& grad() const;
  Tape& tape() const { return *tape_; }
  std::uint32_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

/// Reverse-mode tape. Rebuilt per training step; nodes are recorded in
/// topological order by construction (parents always precede children).
///
/// backward() uses pass-local adjoint buffers and then adds them into each
/// node's persistent grad, so repeated calls accumulate the sum of
/// independent passes rather than re-propagating stale adjoints.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::uint32_t, std::vector<NdArray>&)>;

  struct Node {
    NdArray value;
    NdArray grad;  // lazily sized, persistent across backward() calls
    bool requires_grad = false;
    std::vector<std::uint32_t> parents;
    BackwardFn backward;
  };

  Var leaf(NdArray value) { return push(std::move(value), true, {}, nullptr); }
  Var constant(NdArray value) { return push(std::move(value), false, {}, nullptr); }

  Var push(NdArray value, bool requires_grad, std::vector<std::uint32_t> parents,
           BackwardFn backward) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.parents = std::move(parents);
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
  }

  Node& node(std::uint32_t id) { return nodes_[id]; }
  const Node& node(std::uint32_t id) const { return nodes_[id]; }
  std::size_t size() const { return nodes_.size(); }

  const NdArray& value(std::uint32_t id) const { return nodes_[id].value; }

  bool any_requires_grad(std::initializer_list<std::uint32_t> ids) const {
    for (auto id : ids)
      if (nodes_[id].requires_grad) return true;
    return false;
  }

  /// Accumulates d(loss)/d(node) into every reachable node's grad.
  void backward(const Var& loss) {
    if (loss.value().numel() != 1) {
      throw ShapeError("backward: loss must be scalar, got shape " +
                       loss.value().shape_str());
    }
    std::vector<NdArray> adj(nodes_.size());
    adj[loss.id()] = NdArray(loss.value().shape);
    adj[loss.id()].data[0] = 1.0;
    for (std::uint32_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (adj[i].data.empty()) continue;
      if (n.backward && n.requires_grad) n.backward(*this, i, adj);
      if (n.requires_grad) {
        if (n.grad.data.empty()) n.grad = NdArray(n.value.shape);
        for (std::size_t k = 0; k < n.grad.data.size(); ++k)
          n.grad.data[k] += adj[i].data[k];
      }
    }
  }

  void zero_grads() {
    for (auto& n : nodes_) n.grad = NdArray{};
  }

  /// Adds `contribution` into the pass-local adjoint of `id`.
  static void accumulate(std::vector<NdArray>& adj, const Tape& t, std::uint32_t id,
                         const NdArray& contribution) {
    if (!t.node(id).requires_grad) return;
    NdArray& slot = adj[id];
    if (slot.data.empty()) slot = NdArray(t.node(id).value.shape);
    for (std::size_t k = 0; k < slot.data.size(); ++k)
      slot.data[k] += contribution.data[k];
  }

 private:
  std::vector<Node> nodes_;
};

inline const NdArray& Var::value() const { return tape_->node(id_).value; }

inline const NdArray& Var::grad() const {
  const NdArray& g = tape_->node(id_).grad;
  if (g.data.empty()) {
    // Lazily materialize a zero grad for inspection before any backward pass.
    auto& n = const_cast<Tape::Node&>(tape_->node(id_));
    n.grad = NdArray(n.value.shape);
  }
  return tape_->node(id_).grad;
}

// ---------------------------------------------------------------------------
// Elementwise primitives
// ---------------------------------------------------------------------------

namespace detail {

inline void require_same_tape(const Var& a, const Var& b, const char* op) {
  if (&a.tape() != &b.tape()) throw Error(std::string(op) + ": vars on different tapes");
}

}  // namespace detail

inline Var add(const Var& a, const Var& b) {
  detail::require_same_tape(a, b, "add");
  require_same_shape(a.value(), b.value(), "add");
  Tape& t = a.tape();
  NdArray out(a.value().shape);
  for (std::size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = a.value().data[i] + b.value().data[i];
  const auto pa = a.id(), pb = b.id();
  return t.push(std::move(out), t.any_requires_grad({pa, pb}), {pa, pb},
                [pa, pb](Tape& tp, std::uint32_t self, std::vector<NdArray>& adj) {
                  Tape::accumulate(adj, tp, pa, adj[self]);
                  Tape::accumulate(adj, tp, pb, adj[self]);
                });
}

inline Var sub(const Var& a, const Var& b) {
  detail::require_same_tape(a, b, "sub");
  require_same_shape(a.value(), b.value(), "sub");
  Tape& t = a.tape();
  NdArray out(a.value().shape);
  for (std::size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = a.value().data[i] - b.value().data[i];
  const auto pa = a.id(), pb = b.id();
  return t.push(std::move(out), t.any_requires_grad({pa, pb}), {pa, pb},
                [pa, pb](Tape& tp, std::uint32_t self, std::vector<NdArray>& adj) {
                  Tape::accumulate(adj, tp, pa, adj[self]);
                  if (tp.node(pb).requires_grad) {
                    NdArray neg(adj[self].shape);
                    for (std::size_t i = 0; i < neg.data.size(); ++i)
                      neg.data[i] = -adj[self].data[i];
                    Tape::accumulate(adj, tp, pb, neg);
                  }
                });
}

inline Var mul(const Var& a, const Var& b) {
  detail::require_same_tape(a, b, "mul");
  require_same_shape(a.value(), b.value(), "mul");
  Tape& t = a.tape();
  NdArray out(a.value().shape);
  for (std::size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = a.value().data[i] * b.value().data[i];
  const auto pa = a.id(), pb = b.id();
  return t.push(std::move(out), t.any_requires_grad({pa, pb}), {pa, pb},
                [pa, pb](Tape& tp, std::uint32_t self, std::vector<NdArray>& adj) {
                  const NdArray& g = adj[self];
                  if (tp.node(pa).requires_grad) {
                    NdArray da(g.shape);
                    for (std::size_t i = 0; i < da.data.size(); ++i)
                      da.data[i] = g.data[i] * tp.value(pb).data[i];
                    Tape::accumulate(adj, tp, pa, da);
                  }
                  if (tp.node(pb).requires_grad) {
                    NdArray db(g.shape);
                    for (std::size_t i = 0; i < db.data.size(); ++i)
                      db.data[i] = g.data[i] * tp.value(pa).data[i];
                    Tape::accumulate(adj, tp, pb, db);
                  }
                });
}

inline Var div(const Var& a, const Var& b) {
  detail::require_same_tape(a, b, "div");
  require_same_shape(a.value(), b.value(), "div");
  Tape& t = a.tape();
  NdArray out(a.value().shape);
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    if (b.value().data[i] == 0.0) throw DomainError("div: division by zero");
    out.data[i] = a.value().data[i] / b.value().data[i];
  }
  const auto pa = a.id(), pb = b.id();
  return t.push(std::move(out), t.any_requires_grad({pa, pb}), {pa, pb},
                [pa, pb](Tape& tp, std::uint32_t self, std::vector<NdArray>& adj) {
                  const NdArray& g = adj[self];
                  const NdArray& av = tp.value(pa);
                  const NdArray& bv = tp.value(pb);
                  if (tp.node(pa).requires_grad) {
                    NdArray da(g.shape);
                    for (std::size_t i = 0; i < da.data.size(); ++i)
                      da.data[i] = g.data[i] / bv.data[i];
                    Tape::accumulate(adj, tp, pa, da);
                  }
                  if (tp.node(pb).requires_grad) {
                    NdArray db(g.shape);
                    for (std::size_t i = 0; i < db.data.size(); ++i)
                      db.data[i] = -g.data[i] * av.data[i] / (bv.data[i] * bv.data[i]);
                    Tape::accumulate(adj, tp, pb, db);
                  }
                });
}

inline Var scalar_mul(const Var& a, double c) {
  Tape& t = a.tape();
  NdArray out(a.value().shape);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = a.value().data[i] * c;
  const auto pa = a.id();
  return t.push(std::move(out), t.node(pa).requires_grad, {pa},
                [pa, c](Tape& tp, std::uint32_t self, std::vector<NdArray>& adj) {
                  NdArray da(adj[self].shape);
                  for (std::size_t i = 0; i < da.data.size(); ++i)
                    da.data[i] = adj[self].data[i] * c;
                  Tape::accumulate(adj, tp, pa, da);
                });
}

/// max(a, c) elementwise; subgradient 0 at the kink.
inline Var clamp_min(const Var& a, double c) {
  Tape& t = a.tape();
  NdArray out(a.value().shape);
  for (std::size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = a.value().data[i] > c ? a.value().data[i] : c;
  const auto pa = a.id();
  return t.push(std::move(out), t.node(pa).requires_grad, {pa},
                [pa, c](Tape& tp, std::uint32_t self, std::vector<NdArray>& adj) {
                  NdArray da(adj[self].shape);
                  const NdArray& av = tp.value(pa);
                  for (std::size_t i = 0; i < da.data.size(); ++i)
                    da.data[i] = av.data[i] > c ? adj[self].data[i] : 0.0;
                  Tape::accumulate(adj, tp, pa, da);
                });
}

inline Var relu(const Var& a) { return clamp_min(a, 0.0); }

/// x for x > 0, slope*x otherwise; subgradient slope at the kink. Unlike
/// relu this never zeroes a whole feature map, so norms stay positive.
inline Var leaky_relu(const Var& a, double slope) {
  Tape& t = a.tape();
  NdArray out(a.value().shape);
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    const double v = a.value().data[i];
    out.data[i] = v > 0.0 ? v : slope * v;
  }
  const auto pa = a.id();
  return t.push(std::move(out), t.node(pa).requires_grad, {pa},
                [pa, slope](Tape& tp, std::uint32_t self, std::vector<NdArray>& adj) {
                  NdArray da(adj[self].shape);
                  const NdArray& av = tp.value(pa);
                  for (std::size_t i = 0; i < da.data.size(); ++i)
                    da.data[i] = av.data[i] > 0.0 ? adj[self].data[i]
                                                  : slope * adj[self].data[i];
                  Tape::accumulate(adj, tp, pa, da);
                });
}

/// Smooth blend slope*x + (1-slope)*softplus(x) with softplus sharpened by
/// `sharpness`. Behaves like leaky_relu with the kink widened to roughly
/// 1/sharpness, so it is differentiable everywhere and finite-difference
/// checks see no slope jumps.
inline Var leaky_softplus(const Var& a, double slope, double sharpness) {
  Tape& t = a.tape();
  const double k = sharpness;
  NdArray out(a.value().shape);
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    const double v = a.value().data[i];
    const double sp = std::max(v, 0.0) + std::log1p(std::exp(-k * std::abs(v))) / k;
    out.data[i] = slope * v + (1.0 - slope) * sp;
  }
  const auto pa = a.id();
  return t.push(std::move(out), t.node(pa).requires_grad, {pa},
                [pa, slope, k](Tape& tp, std::uint32_t self, std::vector<NdArray>& adj) {
                  NdArray da(adj[self].shape);
                  const NdArray& av = tp.value(pa);
                  for (std::size_t i = 0; i < da.data.size(); ++i) {
                    const double e = std::exp(-k * std::abs(av.data[i]));
                    const double sig = av.data[i] >= 0.0 ? 1.0 / (1.0 + e) : e / (1.0 + e);
                    da.data[i] = (slope + (1.0 - slope) * sig) * adj[self].data[i];
                  }
                  Tape::accumulate(adj, tp, pa, da);
                });
}

/// Per-column z-score over rows: out(i,c) = (x(i,c) - mu_c) / (sigma_c + eps)
/// with population sigma. Constant columns (sigma 0) map to zero and get a
/// zero subgradient there. Used to normalize per-position features across a
/// spatial grid so cross-position contrast is order one regardless of how
/// large the shared component of the features is.
inline Var instance_norm(const Var& a, double eps = 1e-8) {
  require_rank(a.value(), 2, "instance_norm");
  Tape& t = a.tape();
  const NdArray& x = a.value();
  const std::size_t n = x.rows(), C = x.cols();
  NdArray mu({C}), sd({C});
  for (std::size_t c = 0; c < C; ++c) {
    double m = 0.0;
    for (std::size_t i = 0; i < n; ++i) m += x.at(i, c);
    m /= static_cast<double>(n);
    double v = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = x.at(i, c) - m;
      v += d * d;
    }
    mu.data[c] = m;
    sd.data[c] = std::sqrt(v / static_cast<double>(n));
  }
  NdArray out(x.shape);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < n; ++i)
      out.at(i, c) = sd.data[c] > 0.0 ? (x.at(i, c) - mu.data[c]) / (sd.data[c] + eps) : 0.0;

  const auto pa = a.id();
  return t.push(
      std::move(out), t.node(pa).requires_grad, {pa},
      [pa, mu, sd, eps](Tape& tp, std::uint32_t self, std::vector<NdArray>& adj) {
        const NdArray& xv = tp.value(pa);
        const NdArray& g = adj[self];
        const std::size_t n = xv.rows(), C = xv.cols();
        NdArray da(xv.shape);
        for (std::size_t c = 0; c < C; ++c) {
          if (sd.data[c] <= 0.0) continue;
          const double s = sd.data[c] + eps;
          double gbar = 0.0, gxhat = 0.0;
          for (std::size_t i = 0; i < n; ++i) {
            gbar += g.at(i, c);
            gxhat += g.at(i, c) * (xv.at(i, c) - mu.data[c]) / s;
          }
          gbar /= static_cast<double>(n);
          gxhat /= static_cast<double>(n);
          for (std::size_t i = 0; i < n; ++i) {
            const double xhat = (xv.at(i, c) - mu.data[c]) / s;
            da.at(i, c) = (g.at(i, c) - gbar) / s - xhat * gxhat / sd.data[c];
          }
        }
        Tape::accumulate(adj, tp, pa, da);
      });
}

inline Var sqrt_elem(const Var& a) {
  Tape& t = a.tape();
  NdArray out(a.value().shape);
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    if (a.value().data[i] < 0.0) throw DomainError("sqrt: negative input");
    out.data[i] = std::sqrt(a.value().data[i]);
  }
  const auto pa = a.id();
  return t.push(std::move(out), t.node(pa).requires_grad, {pa},
                [pa](Tape& tp, std::uint32_t self, std::vector<NdArray>& adj) {
                  const NdArray& sq = tp.node(self).value;
                  NdArray da(adj[self].shape);
                  for (std::size_t i = 0; i < da.data.size(); ++i)
                    da.data[i] = adj[self].data[i] * 0.5 / sq.data[i];
                  Tape::accumulate(adj, tp, pa, da);
                });
}

// ---------------------------------------------------------------------------
// Matrix primitives
// ---------------------------------------------------------------------------

inline Var matmul(const Var& a, const Var& b) {
  detail::require_same_tape(a, b, "matmul");
  require_rank(a.value(), 2, "matmul");
  require_rank(b.value(), 2, "matmul");
  const std::size_t m = a.value().rows(), k = a.value().cols();
  const std::size_t k2 = b.value().rows(), n = b.value().cols();
  if (k != k2) {
    throw ShapeError("matmul: inner dimensions disagree, " + a.value().shape_str() +
                     " vs " + b.value().shape_str());
  }
  Tape& t = a.tape();
  NdArray out({m, n});
  {
    const double* A = a.value().data.data();
    const double* B = b.value().data.data();
    double* C = out.data.data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        const double aip = A[i * k + p];
        if (aip == 0.0) continue;
        const double* Bp = B + p * n;
        double* Ci = C + i * n;
        for (std::size_t j = 0; j < n; ++j) Ci[j] += aip * Bp[j];
      }
  }
  const auto pa = a.id(), pb = b.id();
  return t.push(
      std::move(out), t.any_requires_grad({pa, pb}), {pa, pb},
      [pa, pb, m, k, n](Tape& tp, std::uint32_t self, std::vector<NdArray>& adj) {
        const double* G = adj[self].data.data();
        if (tp.node(pa).requires_grad) {
          // a.grad += g . b^T
          NdArray da({m, k});
          const double* B = tp.value(pb).data.data();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
              const double gij = G[i * n + j];
              if (gij == 0.0) continue;
              const double* Bj = B;  // column j traversal below
              for (std::size_t p = 0; p < k; ++p)
                da.data[i * k + p] += gij * Bj[p * n + j];
            }
          Tape::accumulate(adj, tp, pa, da);
        }
        if (tp.node(pb).requires_grad) {
          // b.grad += a^T . g
          NdArray db({k, n});
          const double* A = tp.value(pa).data.data();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const double aip = A[i * k + p];
              if (aip == 0.0) continue;
              const double* Gi = G + i * n;
              double* Dp = db.data.data() + p * n;
              for (std::size_t j = 0; j < n; ++j) Dp[j] += aip * Gi[j];
            }
          Tape::accumulate(adj, tp, pb, db);
        }
      });
}

inline Var transpose(const Var& a) {
  require_rank(a.value(), 2, "transpose");
  const std::size_t m = a.value().rows(), n = a.value().cols();
  Tape& t = a.tape();
  NdArray out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.data[j * m + i] = a.value().data[i * n + j];
  const auto pa = a.id();
  return t.push(std::move(out), t.node(pa).requires_grad, {pa},
                [pa, m, n](Tape& tp, std::uint32_t self, std::vector<NdArray>& adj) {
                  NdArray da({m, n});
                  for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j)
                      da.data[i * n + j] = adj[self].data[j * m + i];
                  Tape::accumulate(adj, tp, pa, da);
                });
}

/// Row-wise softmax with max subtraction. Rows sum to 1 within 1e-12 for any
/// finite input.
inline Var softmax_rows(const Var& a) {
  require_rank(a.value(), 2, "softmax_rows");
  const std::size_t m = a.value().rows(), n = a.value().cols();
  Tape& t = a.tape();
  NdArray out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, a.value().at(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      out.at(i, j) = std::exp(a.value().at(i, j) - mx);
      z += out.at(i, j);
    }
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) /= z;
  }
  const auto pa = a.id();
  return t.push(std::move(out), t.node(pa).requires_grad, {pa},
                [pa, m, n](Tape& tp, std::uint32_t self, std::vector<NdArray>& adj) {
                  const NdArray& s = tp.node(self).value;
                  const NdArray& g = adj[self];
                  NdArray da({m, n});
                  for (std::size_t i = 0; i < m; ++i) {
                    double gs = 0.0;
                    for (std::size_t j = 0; j < n; ++j) gs += g.at(i, j) * s.at(i, j);
                    for (std::size_t j = 0; j < n; ++j)
                      da.at(i, j) = s.at(i, j) * (g.at(i, j) - gs);
                  }
                  Tape::accumulate(adj, tp, pa, da);
                });
}

/// a[m x n] + v[n] broadcast over rows.
inline Var add_rowvec(const Var& a, const Var& v) {
  detail::require_same_tape(a, v, "add_rowvec");
  require_rank(a.value(), 2, "add_rowvec");
  require_rank(v.value(), 1, "add_rowvec");
  const std::size_t m = a.value().rows(), n = a.value().cols();
  if (v.value().numel() != n) {
    throw ShapeError("add_rowvec: vector length " + std::to_string(v.value().numel()) +
                     " vs matrix " + a.value().shape_str());
  }
  Tape& t = a.tape();
  NdArray out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) = a.value().at(i, j) + v.value().at(j);
  const auto pa = a.id(), pv = v.id();
  return t.push(std::move(out), t.any_requires_grad({pa, pv}), {pa, pv},
                [pa, pv, m, n](Tape& tp, std::uint32_t self, std::vector<NdArray>& adj) {
                  Tape::accumulate(adj, tp, pa, adj[self]);
                  if (tp.node(pv).requires_grad) {
                    NdArray dv({n});
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t j = 0; j < n; ++j)
                        dv.data[j] += adj[self].at(i, j);
                    Tape::accumulate(adj, tp, pv, dv);
                  }
                });
}

// ---------------------------------------------------------------------------
// Reductions and shape ops
// ---------------------------------------------------------------------------

inline Var sum(const Var& a) {
  Tape& t = a.tape();
  double s = 0.0;
  for (double v : a.value().data) s += v;
  const auto pa = a.id();
  return t.push(NdArray::scalar(s), t.node(pa).requires_grad, {pa},
                [pa](Tape& tp, std::uint32_t self, std::vector<NdArray>& adj) {
                  const double g = adj[self].data[0];
                  NdArray da(tp.value(pa).shape);
                  for (auto& x : da.data) x = g;
                  Tape::accumulate(adj, tp, pa, da);
                });
}

inline Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().numel());
  return scalar_mul(sum(a), 1.0 / n);
}

/// Mean over rows of [m x n] -> [n] (per-column average; pools positions).
inline Var mean_rows(const Var& a) {
  require_rank(a.value(), 2, "mean_rows");
  const std::size_t m = a.value().rows(), n = a.value().cols();
  Tape& t = a.tape();
  NdArray out({n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.data[j] += a.value().at(i, j);
  for (auto& x : out.data) x /= static_cast<double>(m);
  const auto pa = a.id();
  return t.push(std::move(out), t.node(pa).requires_grad, {pa},
                [pa, m, n](Tape& tp, std::uint32_t self, std::vector<NdArray>& adj) {
                  NdArray da({m, n});
                  for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j)
                      da.at(i, j) = adj[self].data[j] / static_cast<double>(m);
                  Tape::accumulate(adj, tp, pa, da);
                });
}

inline Var reshape(const Var& a, std::vector<std::size_t> new_shape) {
  if (NdArray::numel_of(new_shape) != a.value().numel()) {
    throw ShapeError("reshape: cannot view " + a.value().shape_str() + " as " +
                     NdArray::shape_str(new_shape));
  }
  Tape& t = a.tape();
  NdArray out(new_shape, a.value().data);
  const auto pa = a.id();
  return t.push(std::move(out), t.node(pa).requires_grad, {pa},
                [pa](Tape& tp, std::uint32_t self, std::vector<NdArray>& adj) {
                  NdArray da(tp.value(pa).shape, adj[self].data);
                  Tape::accumulate(adj, tp, pa, da);
                });
}

inline Var concat_rows(const Var& a, const Var& b) {
  detail::require_same_tape(a, b, "concat_rows");
  require_rank(a.value(), 2, "concat_rows");
  require_rank(b.value(), 2, "concat_rows");
  if (a.value().cols() != b.value().cols()) {
    throw ShapeError("concat_rows: column mismatch " + a.value().shape_str() + " vs " +
                     b.value().shape_str());
  }
  const std::size_t ma = a.value().rows(), mb = b.value().rows(), n = a.value().cols();
  Tape& t = a.tape();
  NdArray out({ma + mb, n});
  std::copy(a.value().data.begin(), a.value().data.end(), out.data.begin());
  std::copy(b.value().data.begin(), b.value().data.end(), out.data.begin() + ma * n);
  const auto pa = a.id(), pb = b.id();
  return t.push(std::move(out), t.any_requires_grad({pa, pb}), {pa, pb},
                [pa, pb, ma, mb, n](Tape& tp, std::uint32_t self, std::vector<NdArray>& adj) {
                  if (tp.node(pa).requires_grad) {
                    NdArray da({ma, n});
                    std::copy(adj[self].data.begin(), adj[self].data.begin() + ma * n,
                              da.data.begin());
                    Tape::accumulate(adj, tp, pa, da);
                  }
                  if (tp.node(pb).requires_grad) {
                    NdArray db({mb, n});
                    std::copy(adj[self].data.begin() + ma * n, adj[self].data.end(),
                              db.data.begin());
                    Tape::accumulate(adj, tp, pb, db);
                  }
                });
}

/// Stacks k vectors of equal length n into a [k x n] matrix.
inline Var stack_rows(const std::vector<Var>& rows) {
  if (rows.empty()) throw ShapeError("stack_rows: empty input");
  Tape& t = rows[0].tape();
  const std::size_t n = rows[0].value().numel();
  NdArray out({rows.size(), n});
  std::vector<std::uint32_t> parents;
  bool rg = false;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require_rank(rows[i].value(), 1, "stack_rows");
    if (rows[i].value().numel() != n) throw ShapeError("stack_rows: ragged rows");
    std::copy(rows[i].value().data.begin(), rows[i].value().data.end(),
              out.data.begin() + i * n);
    parents.push_back(rows[i].id());
    rg = rg || t.node(rows[i].id()).requires_grad;
  }
  auto ps = parents;
  return t.push(std::move(out), rg, std::move(parents),
                [ps, n](Tape& tp, std::uint32_t self, std::vector<NdArray>& adj) {
                  for (std::size_t i = 0; i < ps.size(); ++i) {
                    if (!tp.node(ps[i]).requires_grad) continue;
                    NdArray d({n});
                    std::copy(adj[self].data.begin() + i * n,
                              adj[self].data.begin() + (i + 1) * n, d.data.begin());
                    Tape::accumulate(adj, tp, ps[i], d);
                  }
                });
}

/// Extracts row i of a [m x n] matrix as an [n] vector.
inline Var row(const Var& a, std::size_t i) {
  require_rank(a.value(), 2, "row");
  const std::size_t m = a.value().rows(), n = a.value().cols();
  if (i >= m) throw ShapeError("row: index " + std::to_string(i) + " out of range");
  Tape& t = a.tape();
  NdArray out({n});
  std::copy(a.value().data.begin() + i * n, a.value().data.begin() + (i + 1) * n,
            out.data.begin());
  const auto pa = a.id();
  return t.push(std::move(out), t.node(pa).requires_grad, {pa},
                [pa, i, m, n](Tape& tp, std::uint32_t self, std::vector<NdArray>& adj) {
                  NdArray da({m, n});
                  std::copy(adj[self].data.begin(), adj[self].data.end(),
                            da.data.begin() + i * n);
                  Tape::accumulate(adj, tp, pa, da);
                });
}

/// Rows [r0, r1) of a [m x n] matrix.
inline Var slice_rows(const Var& a, std::size_t r0, std::size_t r1) {
  require_rank(a.value(), 2, "slice_rows");
  const std::size_t m = a.value().rows(), n = a.value().cols();
  if (r0 >= r1 || r1 > m) throw ShapeError("slice_rows: bad range");
  Tape& t = a.tape();
  NdArray out({r1 - r0, n});
  std::copy(a.value().data.begin() + r0 * n, a.value().data.begin() + r1 * n,
            out.data.begin());
  const auto pa = a.id();
  return t.push(std::move(out), t.node(pa).requires_grad, {pa},
                [pa, r0, m, n](Tape& tp, std::uint32_t self, std::vector<NdArray>& adj) {
                  NdArray da({m, n});
                  std::copy(adj[self].data.begin(), adj[self].data.end(),
                            da.data.begin() + r0 * n);
                  Tape::accumulate(adj, tp, pa, da);
                });
}

/// Embedding lookup: rows of table[v x e] selected by ids -> [ids.size() x e].
/// Backward scatters; duplicate ids accumulate.
inline Var gather_rows(const Var& table, const std::vector<std::size_t>& ids) {
  require_rank(table.value(), 2, "gather_rows");
  const std::size_t v = table.value().rows(), e = table.value().cols();
  Tape& t = table.tape();
  NdArray out({ids.size(), e});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= v) throw ShapeError("gather_rows: id out of range");
    std::copy(table.value().data.begin() + ids[i] * e,
              table.value().data.begin() + (ids[i] + 1) * e, out.data.begin() + i * e);
  }
  const auto pt = table.id();
  return t.push(std::move(out), t.node(pt).requires_grad, {pt},
                [pt, ids, v, e](Tape& tp, std::uint32_t self, std::vector<NdArray>& adj) {
                  NdArray da({v, e});
                  for (std::size_t i = 0; i < ids.size(); ++i)
                    for (std::size_t j = 0; j < e; ++j)
                      da.data[ids[i] * e + j] += adj[self].data[i * e + j];
                  Tape::accumulate(adj, tp, pt, da);
                });
}

/// Strided mean pooling over 2x2x2 blocks of a [D*H*W x C] position-major
/// feature map; halves every spatial dimension.
inline Var pool_halve(const Var& a, std::size_t D, std::size_t H, std::size_t W) {
  require_rank(a.value(), 2, "pool_halve");
  if (a.value().rows() != D * H * W)
    throw ShapeError("pool_halve: grid does not match rows");
  if (D % 2 || H % 2 || W % 2) throw ShapeError("pool_halve: odd spatial dimension");
  const std::size_t C = a.value().cols();
  const std::size_t Do = D / 2, Ho = H / 2, Wo = W / 2;
  Tape& t = a.tape();
  NdArray out({Do * Ho * Wo, C});
  auto in_pos = [H, W](std::size_t d, std::size_t h, std::size_t w) {
    return (d * H + h) * W + w;
  };
  for (std::size_t d = 0; d < Do; ++d)
    for (std::size_t h = 0; h < Ho; ++h)
      for (std::size_t w = 0; w < Wo; ++w) {
        const std::size_t po = (d * Ho + h) * Wo + w;
        for (std::size_t dd = 0; dd < 2; ++dd)
          for (std::size_t hh = 0; hh < 2; ++hh)
            for (std::size_t ww = 0; ww < 2; ++ww) {
              const std::size_t pi = in_pos(2 * d + dd, 2 * h + hh, 2 * w + ww);
              for (std::size_t c = 0; c < C; ++c)
                out.at(po, c) += a.value().at(pi, c);
            }
        for (std::size_t c = 0; c < C; ++c) out.at(po, c) /= 8.0;
      }
  const auto pa = a.id();
  return t.push(std::move(out), t.node(pa).requires_grad, {pa},
                [pa, D, H, W, C](Tape& tp, std::uint32_t self, std::vector<NdArray>& adj) {
                  const std::size_t Do = D / 2, Ho = H / 2, Wo = W / 2;
                  NdArray da({D * H * W, C});
                  for (std::size_t d = 0; d < Do; ++d)
                    for (std::size_t h = 0; h < Ho; ++h)
                      for (std::size_t w = 0; w < Wo; ++w) {
                        const std::size_t po = (d * Ho + h) * Wo + w;
                        for (std::size_t dd = 0; dd < 2; ++dd)
                          for (std::size_t hh = 0; hh < 2; ++hh)
                            for (std::size_t ww = 0; ww < 2; ++ww) {
                              const std::size_t pi =
                                  ((2 * d + dd) * H + 2 * h + hh) * W + 2 * w + ww;
                              for (std::size_t c = 0; c < C; ++c)
                                da.at(pi, c) += adj[self].at(po, c) / 8.0;
                            }
                      }
                  Tape::accumulate(adj, tp, pa, da);
                });
}

/// Mean cross-entropy of logits [n x k] against integer labels, computed via
/// log-sum-exp with max subtraction.
inline Var cross_entropy_logits(const Var& logits, const std::vector<std::size_t>& labels) {
  require_rank(logits.value(), 2, "cross_entropy_logits");
  const std::size_t n = logits.value().rows(), k = logits.value().cols();
  if (labels.size() != n) throw ShapeError("cross_entropy_logits: label count mismatch");
  for (auto l : labels)
    if (l >= k) throw ShapeError("cross_entropy_logits: label out of range");
  Tape& t = logits.tape();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, logits.value().at(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(logits.value().at(i, j) - mx);
    total += mx + std::log(z) - logits.value().at(i, labels[i]);
  }
  const auto pl = logits.id();
  return t.push(NdArray::scalar(total / static_cast<double>(n)),
                t.node(pl).requires_grad, {pl},
                [pl, labels, n, k](Tape& tp, std::uint32_t self, std::vector<NdArray>& adj) {
                  const double g = adj[self].data[0] / static_cast<double>(n);
                  const NdArray& lv = tp.value(pl);
                  NdArray da({n, k});
                  for (std::size_t i = 0; i < n; ++i) {
                    double mx = -std::numeric_limits<double>::infinity();
                    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, lv.at(i, j));
                    double z = 0.0;
                    for (std::size_t j = 0; j < k; ++j) z += std::exp(lv.at(i, j) - mx);
                    for (std::size_t j = 0; j < k; ++j) {
                      const double p = std::exp(lv.at(i, j) - mx) / z;
                      da.at(i, j) = g * (p - (j == labels[i] ? 1.0 : 0.0));
                    }
                  }
                  Tape::accumulate(adj, tp, pl, da);
                });
}

// ---------------------------------------------------------------------------
// Vector geometry
// ---------------------------------------------------------------------------

inline Var dot(const Var& u, const Var& v) { return sum(mul(u, v)); }

/// Cosine similarity of two nonzero vectors, in [-1, 1]. A zero-norm input is
/// an error rather than a silent 0: a silent 0 would corrupt triplet hinges
/// invisibly.
inline Var cosine_similarity(const Var& u, const Var& v) {
  require_rank(u.value(), 1, "cosine_similarity");
  require_rank(v.value(), 1, "cosine_similarity");
  require_same_shape(u.value(), v.value(), "cosine_similarity");
  Var nu = sqrt_elem(sum(mul(u, u)));
  Var nv = sqrt_elem(sum(mul(v, v)));
  if (nu.value().data[0] == 0.0 || nv.value().data[0] == 0.0) {
    throw DomainError("cosine_similarity: zero-norm vector of shape " +
                      u.value().shape_str());
  }
  return div(dot(u, v), mul(nu, nv));
}

/// 1 - cos(u, v).
inline Var cosine_distance(const Var& u, const Var& v) {
  Var one = u.tape().constant(NdArray::scalar(1.0));
  return sub(one, cosine_similarity(u, v));
}

/// Plain (tape-free) cosine distance used by negative samplers.
inline double cosine_distance_value(const NdArray& u, const NdArray& v) {
  require_same_shape(u, v, "cosine_distance_value");
  double d = 0.0, nu = 0.0, nv = 0.0;
  for (std::size_t i = 0; i < u.data.size(); ++i) {
    d += u.data[i] * v.data[i];
    nu += u.data[i] * u.data[i];
    nv += v.data[i] * v.data[i];
  }
  if (nu == 0.0 || nv == 0.0)
    throw DomainError("cosine_distance: zero-norm vector");
  return 1.0 - d / (std::sqrt(nu) * std::sqrt(nv));
}

}  // namespace vralign
