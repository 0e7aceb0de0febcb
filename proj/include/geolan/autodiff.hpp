// Copyright 2026 The GeoLAN Workbench Authors
// SPDX-License-Identifier: Apache-2.0
//
// Tape-based reverse-mode differentiation over Tensors.
//
// A Tape owns every value computed in one forward pass. Ops append a node
// holding the output value and, when any input needs a gradient, a closure
// that pushes the output gradient back into its inputs. Because nodes are
// appended in evaluation order, reverse creation order is a valid reverse
// topological order and backward() visits each node once.
//
// The primitive set is closed: a graph can only be built from the functions in
// this header, so "unsupported primitive" is not representable. Mixing values
// from two tapes is rejected when the op is constructed.

#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "geolan/error.hpp"
#include "geolan/linalg.hpp"
#include "geolan/tensor.hpp"

namespace geolan {

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  inline const Tensor& value() const;
  inline const Shape& shape() const;
  inline bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true) {
    nodes_.push_back(Node{std::move(value), requires_grad, nullptr});
    return Var(this, nodes_.size() - 1);
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Append an op output. `backward` is dropped unless some input needs grad.
  Var record(Tensor value, bool needs_grad, Backward backward) {
    nodes_.push_back(Node{std::move(value), needs_grad, needs_grad ? std::move(backward) : nullptr});
    return Var(this, nodes_.size() - 1);
  }

  /// Id the next recorded node will receive; lets a closure refer to its own output.
  std::size_t next_id() const { return nodes_.size(); }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient accumulator for node `id`, allocated on first use.
  Tensor& grad_slot(std::size_t id) {
    if (grads_.size() < nodes_.size()) grads_.resize(nodes_.size());
    Tensor& g = grads_[id];
    if (g.size() == 0 && nodes_[id].value.size() != 0) g = Tensor::zeros(nodes_[id].value.shape());
    return g;
  }

  /// Run the backward pass from a scalar root; seeds d(root)/d(root) = 1.
  void backward(Var root) {
    check(root);
    if (root.value().size() != 1)
      throw GraphError("backward: root must be a scalar, got shape " + shape_str(root.shape()));
    grads_.assign(nodes_.size(), Tensor());
    grad_slot(root.id())[0] = 1.0;
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || grads_[i].size() == 0) continue;
      n.backward(*this, grads_[i]);
    }
  }

  /// Gradient of the last backward() root with respect to `v` (zeros if none flowed).
  Tensor grad(Var v) const {
    check(v);
    if (v.id() < grads_.size() && grads_[v.id()].size() != 0) return grads_[v.id()];
    return Tensor::zeros(v.value().shape());
  }

  void check(Var v) const {
    if (!v.valid() || &v.tape() != this) throw GraphError("value belongs to a different tape");
  }

 private:
  struct Node {
    Tensor value;
    bool requires_grad;
    Backward backward;
  };
  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline const Shape& Var::shape() const { return tape_->value(id_).shape(); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

namespace detail {

inline Tape& same_tape(Var a, Var b) {
  if (!a.valid() || !b.valid() || &a.tape() != &b.tape())
    throw GraphError("op inputs belong to different tapes");
  return a.tape();
}

inline void accumulate(Tape& t, Var v, const Tensor& g, double scale = 1.0) {
  if (!v.requires_grad()) return;
  Tensor& slot = t.grad_slot(v.id());
  for (std::size_t i = 0; i < slot.size(); ++i) slot[i] += scale * g[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reductions

inline Var add(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  detail::require(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " +
                                              shape_str(b.shape()));
  return t.record(a.value() + b.value(), a.requires_grad() || b.requires_grad(),
                  [a, b](Tape& tp, const Tensor& g) {
                    detail::accumulate(tp, a, g);
                    detail::accumulate(tp, b, g);
                  });
}

inline Var sub(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  detail::require(a.shape() == b.shape(), "sub: shape mismatch");
  return t.record(a.value() - b.value(), a.requires_grad() || b.requires_grad(),
                  [a, b](Tape& tp, const Tensor& g) {
                    detail::accumulate(tp, a, g);
                    detail::accumulate(tp, b, g, -1.0);
                  });
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  detail::require(a.shape() == b.shape(), "mul: shape mismatch");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return t.record(std::move(out), a.requires_grad() || b.requires_grad(),
                  [a, b](Tape& tp, const Tensor& g) {
                    if (a.requires_grad()) {
                      Tensor& ga = tp.grad_slot(a.id());
                      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.value()[i];
                    }
                    if (b.requires_grad()) {
                      Tensor& gb = tp.grad_slot(b.id());
                      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.value()[i];
                    }
                  });
}

inline Var scale(Var a, double s) {
  return a.tape().record(s * a.value(), a.requires_grad(),
                         [a, s](Tape& tp, const Tensor& g) { detail::accumulate(tp, a, g, s); });
}

inline Var add_scalar(Var a, double s) {
  Tensor out = a.value();
  for (auto& v : out.values()) v += s;
  return a.tape().record(std::move(out), a.requires_grad(),
                         [a](Tape& tp, const Tensor& g) { detail::accumulate(tp, a, g); });
}

inline Var square(Var a) {
  Tensor out = a.value();
  for (auto& v : out.values()) v *= v;
  return a.tape().record(std::move(out), a.requires_grad(), [a](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad_slot(a.id());
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += 2.0 * a.value()[i] * g[i];
  });
}

inline Var exp(Var a) {
  Tensor out = a.value();
  for (auto& v : out.values()) v = std::exp(v);
  Tape& t = a.tape();
  const Var self(&t, t.next_id());
  return t.record(std::move(out), a.requires_grad(), [a, self](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad_slot(a.id());
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * self.value()[i];
  });
}

inline Var log(Var a) {
  Tensor out = a.value();
  for (auto& v : out.values()) {
    if (!(v > 0.0)) throw DegenerateInputError("log: non-positive argument");
    v = std::log(v);
  }
  return a.tape().record(std::move(out), a.requires_grad(), [a](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad_slot(a.id());
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / a.value()[i];
  });
}

/// x * ln(x) with 0 ln 0 := 0. The derivative at exactly 0 is taken as 0.
inline Var xlogx(Var a) {
  Tensor out = a.value();
  for (auto& v : out.values()) {
    if (v < 0.0) throw DegenerateInputError("xlogx: negative argument");
    v = v > 0.0 ? v * std::log(v) : 0.0;
  }
  return a.tape().record(std::move(out), a.requires_grad(), [a](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad_slot(a.id());
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = a.value()[i];
      if (x > 0.0) ga[i] += g[i] * (std::log(x) + 1.0);
    }
  });
}

/// Sum of all entries, as a scalar.
inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return a.tape().record(Tensor::scalar(s), a.requires_grad(), [a](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad_slot(a.id());
    for (auto& v : ga.values()) v += g[0];
  });
}

inline Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

/// Sum of a list of same-shaped values, accumulated left to right.
inline Var add_n(std::span<const Var> xs) {
  detail::require(!xs.empty(), "add_n: empty list");
  Var acc = xs[0];
  for (std::size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
  return acc;
}

inline Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return a.tape().record(std::move(out), a.requires_grad(),
                         [a](Tape& tp, const Tensor& g) { detail::accumulate(tp, a, g); });
}

// ---------------------------------------------------------------------------
// Row-wise ops on matrices

/// Row sums of a K x r matrix -> K-vector.
inline Var row_sum(Var a) {
  require_matrix(a.value(), "row_sum");
  const Tensor& x = a.value();
  Tensor out(Shape{x.rows()});
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (double v : x.row(i)) out[i] += v;
  return a.tape().record(std::move(out), a.requires_grad(), [a](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad_slot(a.id());
    const std::size_t c = ga.cols();
    for (std::size_t i = 0; i < ga.rows(); ++i)
      for (std::size_t j = 0; j < c; ++j) ga(i, j) += g[i];
  });
}

/// Divide each row by its sum: rows become distributions.
inline Var normalize_sum_rows(Var a) {
  require_matrix(a.value(), "normalize_sum_rows");
  const Tensor& x = a.value();
  Tensor out = x;
  std::vector<double> sums(x.rows(), 0.0);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (double v : x.row(i)) sums[i] += v;
    if (!(sums[i] > 0.0)) throw DegenerateInputError("normalize_sum_rows: row sum is not positive");
    for (auto& v : out.row(i)) v /= sums[i];
  }
  Tape& t = a.tape();
  const Var r(&t, t.next_id());
  return t.record(std::move(out), a.requires_grad(), [a, r, sums](Tape& tp, const Tensor& g) {
    const Tensor& p = r.value();
    Tensor& ga = tp.grad_slot(a.id());
    for (std::size_t i = 0; i < p.rows(); ++i) {
      double pg = 0.0;
      for (std::size_t j = 0; j < p.cols(); ++j) pg += p(i, j) * g(i, j);
      for (std::size_t j = 0; j < p.cols(); ++j) ga(i, j) += (g(i, j) - pg) / sums[i];
    }
  });
}

/// Scale each row of an M x d matrix to unit Euclidean norm.
inline Var normalize_rows(Var a) {
  require_matrix(a.value(), "normalize_rows");
  const Tensor& x = a.value();
  Tensor out = x;
  std::vector<double> norms(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    norms[i] = norm2(x.row(i));
    if (norms[i] == 0.0)
      throw DegenerateInputError("normalize_rows: row " + std::to_string(i) + " has zero norm");
    for (auto& v : out.row(i)) v /= norms[i];
  }
  auto shared_norms = std::make_shared<std::vector<double>>(std::move(norms));
  return a.tape().record(std::move(out), a.requires_grad(), [a, shared_norms](Tape& tp, const Tensor& g) {
    const Tensor& x = a.value();
    Tensor& ga = tp.grad_slot(a.id());
    const std::size_t d = x.cols();
    for (std::size_t i = 0; i < x.rows(); ++i) {
      const double n = (*shared_norms)[i];
      double yg = 0.0;
      for (std::size_t j = 0; j < d; ++j) yg += x(i, j) * g(i, j);
      yg /= n;
      for (std::size_t j = 0; j < d; ++j) ga(i, j) += (g(i, j) - x(i, j) / n * yg) / n;
    }
  });
}

/// Population variance of each column of an M x P matrix -> P-vector.
inline Var col_variance(Var a) {
  require_matrix(a.value(), "col_variance");
  const Tensor& x = a.value();
  const std::size_t m = x.rows(), p = x.cols();
  detail::require(m >= 1, "col_variance: no rows");
  auto means = std::make_shared<std::vector<double>>(p, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < p; ++j) (*means)[j] += x(i, j);
  for (auto& v : *means) v /= static_cast<double>(m);
  Tensor out(Shape{p});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < p; ++j) {
      const double c = x(i, j) - (*means)[j];
      out[j] += c * c;
    }
  for (auto& v : out.values()) v /= static_cast<double>(m);
  return a.tape().record(std::move(out), a.requires_grad(), [a, means](Tape& tp, const Tensor& g) {
    const Tensor& x = a.value();
    Tensor& ga = tp.grad_slot(a.id());
    const double inv = 2.0 / static_cast<double>(x.rows());
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t j = 0; j < x.cols(); ++j) ga(i, j) += g[j] * inv * (x(i, j) - (*means)[j]);
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Var matmul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  return t.record(matmul(a.value(), b.value()), a.requires_grad() || b.requires_grad(),
                  [a, b](Tape& tp, const Tensor& g) {
                    if (a.requires_grad()) {
                      Tensor ga = matmul_nt(g, b.value());
                      detail::accumulate(tp, a, ga);
                    }
                    if (b.requires_grad()) {
                      Tensor gb = matmul_tn(a.value(), g);
                      detail::accumulate(tp, b, gb);
                    }
                  });
}

/// a * b^T.
inline Var matmul_nt(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  return t.record(matmul_nt(a.value(), b.value()), a.requires_grad() || b.requires_grad(),
                  [a, b](Tape& tp, const Tensor& g) {
                    if (a.requires_grad()) detail::accumulate(tp, a, matmul(g, b.value()));
                    if (b.requires_grad()) detail::accumulate(tp, b, matmul_tn(g, a.value()));
                  });
}

/// x (T x n) + bias (n), broadcast over rows.
inline Var add_bias(Var x, Var bias) {
  Tape& t = detail::same_tape(x, bias);
  require_matrix(x.value(), "add_bias");
  detail::require(bias.value().rank() == 1 && bias.value().size() == x.value().cols(),
                  "add_bias: bias length mismatch");
  Tensor out = x.value();
  const std::size_t n = out.cols();
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < n; ++j) out(i, j) += bias.value()[j];
  return t.record(std::move(out), x.requires_grad() || bias.requires_grad(),
                  [x, bias](Tape& tp, const Tensor& g) {
                    detail::accumulate(tp, x, g);
                    if (bias.requires_grad()) {
                      Tensor& gb = tp.grad_slot(bias.id());
                      const std::size_t n = g.cols();
                      for (std::size_t i = 0; i < g.rows(); ++i)
                        for (std::size_t j = 0; j < n; ++j) gb[j] += g(i, j);
                    }
                  });
}

/// Rows table[ids[i]] stacked into a (len(ids) x d) matrix.
inline Var gather_rows(Var table, std::vector<std::size_t> ids) {
  require_matrix(table.value(), "gather_rows");
  const Tensor& tb = table.value();
  const std::size_t d = tb.cols();
  Tensor out(Shape{ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= tb.rows())
      throw InputError("gather_rows: id " + std::to_string(ids[i]) + " out of range " +
                       std::to_string(tb.rows()));
    std::copy(tb.row(ids[i]).begin(), tb.row(ids[i]).end(), out.row(i).begin());
  }
  return table.tape().record(std::move(out), table.requires_grad(),
                             [table, ids = std::move(ids)](Tape& tp, const Tensor& g) {
                               Tensor& gt = tp.grad_slot(table.id());
                               const std::size_t d = g.cols();
                               for (std::size_t i = 0; i < ids.size(); ++i)
                                 for (std::size_t j = 0; j < d; ++j) gt(ids[i], j) += g(i, j);
                             });
}

/// Copy of x with the listed rows replaced by `donor` rows; replaced rows
/// receive no gradient.
inline Var overwrite_rows(Var x, const std::vector<std::size_t>& rows, const Tensor& donor) {
  require_matrix(x.value(), "overwrite_rows");
  const std::size_t d = x.value().cols();
  if (donor.rank() != 2 || donor.rows() != rows.size() || donor.cols() != d)
    throw InputError("overwrite_rows: donor shape " + shape_str(donor.shape()) + " does not match (" +
                     std::to_string(rows.size()) + ", " + std::to_string(d) + ")");
  Tensor out = x.value();
  std::vector<char> replaced(out.rows(), 0);
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k] >= out.rows()) throw InputError("overwrite_rows: row index out of range");
    std::copy(donor.row(k).begin(), donor.row(k).end(), out.row(rows[k]).begin());
    replaced[rows[k]] = 1;
  }
  return x.tape().record(std::move(out), x.requires_grad(), [x, replaced](Tape& tp, const Tensor& g) {
    Tensor& gx = tp.grad_slot(x.id());
    const std::size_t d = g.cols();
    for (std::size_t i = 0; i < g.rows(); ++i)
      if (!replaced[i])
        for (std::size_t j = 0; j < d; ++j) gx(i, j) += g(i, j);
  });
}

// ---------------------------------------------------------------------------
// Network layers

/// Row-wise layer normalization with gain and bias (population variance).
inline Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5) {
  Tape& t = detail::same_tape(x, gain);
  detail::same_tape(x, bias);
  require_matrix(x.value(), "layer_norm");
  const Tensor& xv = x.value();
  const std::size_t rows = xv.rows(), n = xv.cols();
  detail::require(gain.value().size() == n && bias.value().size() == n, "layer_norm: parameter size");
  auto xhat = std::make_shared<Tensor>(Shape{rows, n});
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  Tensor out(Shape{rows, n});
  for (std::size_t i = 0; i < rows; ++i) {
    const auto r = xv.row(i);
    double mu = 0.0;
    for (double v : r) mu += v;
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (double v : r) var += (v - mu) * (v - mu);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (r[j] - mu) * is;
      (*xhat)(i, j) = h;
      out(i, j) = h * gain.value()[j] + bias.value()[j];
    }
  }
  const bool ng = x.requires_grad() || gain.requires_grad() || bias.requires_grad();
  return t.record(std::move(out), ng, [x, gain, bias, xhat, inv_std](Tape& tp, const Tensor& g) {
    const std::size_t rows = g.rows(), n = g.cols();
    if (gain.requires_grad()) {
      Tensor& gg = tp.grad_slot(gain.id());
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < n; ++j) gg[j] += g(i, j) * (*xhat)(i, j);
    }
    if (bias.requires_grad()) {
      Tensor& gb = tp.grad_slot(bias.id());
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g(i, j);
    }
    if (x.requires_grad()) {
      Tensor& gx = tp.grad_slot(x.id());
      const Tensor& gain_v = gain.value();
      std::vector<double> dh(n);
      for (std::size_t i = 0; i < rows; ++i) {
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          dh[j] = g(i, j) * gain_v[j];
          m1 += dh[j];
          m2 += dh[j] * (*xhat)(i, j);
        }
        m1 /= static_cast<double>(n);
        m2 /= static_cast<double>(n);
        const double is = (*inv_std)[i];
        for (std::size_t j = 0; j < n; ++j) gx(i, j) += is * (dh[j] - m1 - (*xhat)(i, j) * m2);
      }
    }
  });
}

/// GELU, tanh approximation.
inline Var gelu(Var x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double c = 0.044715;
  Tensor out = x.value();
  for (auto& v : out.values()) v = 0.5 * v * (1.0 + std::tanh(k * (v + c * v * v * v)));
  return x.tape().record(std::move(out), x.requires_grad(), [x](Tape& tp, const Tensor& g) {
    Tensor& gx = tp.grad_slot(x.id());
    const Tensor& xv = x.value();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xv[i];
      const double th = std::tanh(k * (v + c * v * v * v));
      const double d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * k * (1.0 + 3.0 * c * v * v);
      gx[i] += g[i] * d;
    }
  });
}

/// Layout of packed multi-head activations: rows are (sequence, position),
/// columns are (head, channel).
struct HeadLayout {
  std::size_t n_seq;
  std::size_t seq_len;
  std::size_t n_heads;
  std::size_t d_head;
};

/// Causal softmax(q k^T / sqrt(d_head)) per (sequence, head). q and k are
/// (n_seq*seq_len) x (n_heads*d_head); the result is (n_seq*n_heads) x seq_len x seq_len.
inline Var attention_probs(Var q, Var k, HeadLayout lay) {
  Tape& t = detail::same_tape(q, k);
  const std::size_t B = lay.n_seq, N = lay.seq_len, H = lay.n_heads, D = lay.d_head;
  detail::require(q.shape() == Shape{B * N, H * D} && k.shape() == q.shape(),
                  "attention_probs: q/k shape mismatch");
  const double sc = 1.0 / std::sqrt(static_cast<double>(D));
  Tensor p(Shape{B * H, N, N});
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  std::vector<double> row(N);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t i = 0; i < N; ++i) {
        const double* qi = &qv(b * N + i, h * D);
        double mx = -INFINITY;
        for (std::size_t j = 0; j <= i; ++j) {
          const double* kj = &kv(b * N + j, h * D);
          double s = 0.0;
          for (std::size_t c = 0; c < D; ++c) s += qi[c] * kj[c];
          row[j] = s * sc;
          mx = std::max(mx, row[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          row[j] = std::exp(row[j] - mx);
          z += row[j];
        }
        for (std::size_t j = 0; j <= i; ++j) p(b * H + h, i, j) = row[j] / z;
      }
  const Var out(&t, t.next_id());
  return t.record(std::move(p), q.requires_grad() || k.requires_grad(), [q, k, out, lay, sc](Tape& tp, const Tensor& g) {
    const std::size_t B = lay.n_seq, N = lay.seq_len, H = lay.n_heads, D = lay.d_head;
    const Tensor& p = out.value();
    const Tensor& qv = q.value();
    const Tensor& kv = k.value();
    Tensor* gq = q.requires_grad() ? &tp.grad_slot(q.id()) : nullptr;
    Tensor* gk = k.requires_grad() ? &tp.grad_slot(k.id()) : nullptr;
    std::vector<double> ds(N);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t i = 0; i < N; ++i) {
          double dot_pg = 0.0;
          for (std::size_t j = 0; j <= i; ++j) dot_pg += p(b * H + h, i, j) * g(b * H + h, i, j);
          for (std::size_t j = 0; j <= i; ++j)
            ds[j] = p(b * H + h, i, j) * (g(b * H + h, i, j) - dot_pg) * sc;
          const double* qi = &qv(b * N + i, h * D);
          for (std::size_t j = 0; j <= i; ++j) {
            if (ds[j] == 0.0) continue;
            const double* kj = &kv(b * N + j, h * D);
            if (gq) {
              double* gqi = &(*gq)(b * N + i, h * D);
              for (std::size_t c = 0; c < D; ++c) gqi[c] += ds[j] * kj[c];
            }
            if (gk) {
              double* gkj = &(*gk)(b * N + j, h * D);
              for (std::size_t c = 0; c < D; ++c) gkj[c] += ds[j] * qi[c];
            }
          }
        }
  });
}

/// Weighted sum of values: out[(b,i), (h,:)] = sum_j P[(b,h), i, j] v[(b,j), (h,:)].
inline Var attention_apply(Var p, Var v, HeadLayout lay) {
  Tape& t = detail::same_tape(p, v);
  const std::size_t B = lay.n_seq, N = lay.seq_len, H = lay.n_heads, D = lay.d_head;
  detail::require(p.shape() == Shape{B * H, N, N} && v.shape() == Shape{B * N, H * D},
                  "attention_apply: shape mismatch");
  Tensor out(Shape{B * N, H * D});
  const Tensor& pv = p.value();
  const Tensor& vv = v.value();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t i = 0; i < N; ++i) {
        double* oi = &out(b * N + i, h * D);
        for (std::size_t j = 0; j <= i; ++j) {
          const double w = pv(b * H + h, i, j);
          const double* vj = &vv(b * N + j, h * D);
          for (std::size_t c = 0; c < D; ++c) oi[c] += w * vj[c];
        }
      }
  return t.record(std::move(out), p.requires_grad() || v.requires_grad(), [p, v, lay](Tape& tp, const Tensor& g) {
    const std::size_t B = lay.n_seq, N = lay.seq_len, H = lay.n_heads, D = lay.d_head;
    const Tensor& pv = p.value();
    const Tensor& vv = v.value();
    Tensor* gp = p.requires_grad() ? &tp.grad_slot(p.id()) : nullptr;
    Tensor* gv = v.requires_grad() ? &tp.grad_slot(v.id()) : nullptr;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t i = 0; i < N; ++i) {
          const double* gi = &g(b * N + i, h * D);
          for (std::size_t j = 0; j <= i; ++j) {
            const double* vj = &vv(b * N + j, h * D);
            if (gp) {
              double s = 0.0;
              for (std::size_t c = 0; c < D; ++c) s += gi[c] * vj[c];
              (*gp)(b * H + h, i, j) += s;
            }
            if (gv) {
              const double w = pv(b * H + h, i, j);
              double* gvj = &(*gv)(b * N + j, h * D);
              for (std::size_t c = 0; c < D; ++c) gvj[c] += w * gi[c];
            }
          }
        }
  });
}

/// Mean negative log-likelihood of integer targets under row-wise softmax(logits).
inline Var cross_entropy(Var logits, const std::vector<std::size_t>& targets) {
  require_matrix(logits.value(), "cross_entropy");
  const Tensor& z = logits.value();
  const std::size_t T = z.rows(), V = z.cols();
  if (targets.size() != T)
    throw InputError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(T) + " positions");
  auto probs = std::make_shared<Tensor>(Shape{T, V});
  double total = 0.0;
  for (std::size_t i = 0; i < T; ++i) {
    if (targets[i] >= V) throw InputError("cross_entropy: target id out of range");
    const auto r = z.row(i);
    double mx = -INFINITY;
    for (double v : r) mx = std::max(mx, v);
    double s = 0.0;
    for (std::size_t j = 0; j < V; ++j) {
      const double e = std::exp(r[j] - mx);
      (*probs)(i, j) = e;
      s += e;
    }
    for (std::size_t j = 0; j < V; ++j) (*probs)(i, j) /= s;
    total += (mx + std::log(s)) - r[targets[i]];
  }
  return logits.tape().record(Tensor::scalar(total / static_cast<double>(T)), logits.requires_grad(),
                              [logits, probs, targets](Tape& tp, const Tensor& g) {
                                Tensor& gz = tp.grad_slot(logits.id());
                                const std::size_t T = probs->rows(), V = probs->cols();
                                const double s = g[0] / static_cast<double>(T);
                                for (std::size_t i = 0; i < T; ++i) {
                                  for (std::size_t j = 0; j < V; ++j) gz(i, j) += s * (*probs)(i, j);
                                  gz(i, targets[i]) -= s;
                                }
                              });
}

// ---------------------------------------------------------------------------
// Spectral primitive

/// Threshold below which neighbouring singular values count as tied.
inline constexpr double kSingularTieRelTol = 1e-9;

/// Top-r singular values of each matrix in a stack (K x m x n -> K x r) or of
/// a single matrix (m x n -> r).
///
/// Backward uses d sigma_j = u_j^T dA v_j. Runs of singular values within
/// kSingularTieRelTol of each other share the mean of their incoming
/// gradients, which makes the result independent of the basis chosen inside
/// a degenerate subspace.
inline Var top_singular_values(Var a, std::size_t r) {
  const Tensor& av = a.value();
  detail::require(av.rank() == 2 || av.rank() == 3, "top_singular_values: rank-2 or rank-3 input");
  const bool stacked = av.rank() == 3;
  const std::size_t K = stacked ? av.dim(0) : 1;
  const std::size_t m = stacked ? av.dim(1) : av.dim(0);
  const std::size_t n = stacked ? av.dim(2) : av.dim(1);
  const std::size_t kmax = std::min(m, n);
  detail::require(r >= 1 && r <= kmax, "top_singular_values: r must be in [1, min(m, n)]");

  auto decomp = std::make_shared<std::vector<SvdResult>>();
  decomp->reserve(K);
  Tensor out(stacked ? Shape{K, r} : Shape{r});
  for (std::size_t k = 0; k < K; ++k) {
    SvdResult s = svd(stacked ? av.slice(k) : av);
    for (std::size_t j = 0; j < r; ++j) out[k * r + j] = s.sigma[j];
    if (a.requires_grad()) decomp->push_back(std::move(s));
  }
  return a.tape().record(std::move(out), a.requires_grad(), [a, r, decomp, m, n](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad_slot(a.id());
    const std::size_t kmax = std::min(m, n);
    std::vector<double> gs(kmax);
    for (std::size_t k = 0; k < decomp->size(); ++k) {
      const SvdResult& s = (*decomp)[k];
      std::fill(gs.begin(), gs.end(), 0.0);
      for (std::size_t j = 0; j < r; ++j) gs[j] = g[k * r + j];
      // Average within tie runs.
      std::size_t start = 0;
      while (start < kmax) {
        std::size_t end = start + 1;
        while (end < kmax && std::abs(s.sigma[end - 1] - s.sigma[end]) <=
                                 kSingularTieRelTol * std::max(s.sigma[start], 1e-300))
          ++end;
        if (end - start > 1) {
          double mean_g = 0.0;
          for (std::size_t j = start; j < end; ++j) mean_g += gs[j];
          mean_g /= static_cast<double>(end - start);
          for (std::size_t j = start; j < end; ++j) gs[j] = mean_g;
        }
        start = end;
      }
      double* base = ga.values().data() + k * m * n;
      for (std::size_t j = 0; j < kmax; ++j) {
        if (gs[j] == 0.0) continue;
        for (std::size_t i = 0; i < m; ++i) {
          const double ui = gs[j] * s.u(i, j);
          if (ui == 0.0) continue;
          double* row = base + i * n;
          for (std::size_t c = 0; c < n; ++c) row[c] += ui * s.v(c, j);
        }
      }
    }
  });
}

}  // namespace geolan
