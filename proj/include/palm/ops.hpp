#pragma once

// Differentiable primitives. Each op computes its value with Eigen, records it on the
// operand's graph, and registers the vector-Jacobian product for the backward pass.

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "palm/rng.hpp"
#include "palm/tensor.hpp"

namespace palm {

namespace detail {

inline void require(bool ok, const char* message) {
  if (!ok) {
    throw std::invalid_argument(message);
  }
}

template <typename S>
Graph<S>& graph_of(const Tensor<S>& a, const Tensor<S>& b) {
  require(&a.graph() == &b.graph(), "operands live on different graphs");
  return a.graph();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// a (n x k) * b (k x m)
template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  auto& g = detail::graph_of(a, b);
  detail::require(a.cols() == b.rows(), "matmul: inner dimensions differ");
  Matrix<S> out = a.value() * b.value();
  return g.record(
      std::move(out), {a, b},
      [a, b](Graph<S>& gr, const Matrix<S>& go) {
        if (a.requires_grad()) {
          gr.accumulate(a, go * b.value().transpose());
        }
        if (b.requires_grad()) {
          gr.accumulate(b, a.value().transpose() * go);
        }
      },
      "matmul");
}

/// a (n x k) * b^T where b is (m x k). Used for projections through a stored
/// (out x in) weight and for the tied output embedding.
template <typename S>
Tensor<S> matmul_nt(const Tensor<S>& a, const Tensor<S>& b) {
  auto& g = detail::graph_of(a, b);
  detail::require(a.cols() == b.cols(), "matmul_nt: inner dimensions differ");
  Matrix<S> out = a.value() * b.value().transpose();
  return g.record(
      std::move(out), {a, b},
      [a, b](Graph<S>& gr, const Matrix<S>& go) {
        if (a.requires_grad()) {
          gr.accumulate(a, go * b.value());
        }
        if (b.requires_grad()) {
          gr.accumulate(b, go.transpose() * a.value());
        }
      },
      "matmul_nt");
}

// ---------------------------------------------------------------------------
// Elementwise and broadcasting

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  auto& g = detail::graph_of(a, b);
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
  Matrix<S> out = a.value() + b.value();
  return g.record(
      std::move(out), {a, b},
      [a, b](Graph<S>& gr, const Matrix<S>& go) {
        gr.accumulate(a, go);
        gr.accumulate(b, go);
      },
      "add");
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  auto& g = detail::graph_of(a, b);
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
  Matrix<S> out = a.value() - b.value();
  return g.record(
      std::move(out), {a, b},
      [a, b](Graph<S>& gr, const Matrix<S>& go) {
        gr.accumulate(a, go);
        gr.accumulate(b, -go);
      },
      "sub");
}

/// Hadamard product.
template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  auto& g = detail::graph_of(a, b);
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "mul: shape mismatch");
  Matrix<S> out = a.value().cwiseProduct(b.value());
  return g.record(
      std::move(out), {a, b},
      [a, b](Graph<S>& gr, const Matrix<S>& go) {
        gr.accumulate(a, go.cwiseProduct(b.value()));
        gr.accumulate(b, go.cwiseProduct(a.value()));
      },
      "mul");
}

/// Adds a (1 x c) row vector to every row of a (n x c).
template <typename S>
Tensor<S> add_row(const Tensor<S>& a, const Tensor<S>& row) {
  auto& g = detail::graph_of(a, row);
  detail::require(row.rows() == 1 && row.cols() == a.cols(), "add_row: bias shape mismatch");
  Matrix<S> out = a.value().rowwise() + row.value().row(0);
  return g.record(
      std::move(out), {a, row},
      [a, row](Graph<S>& gr, const Matrix<S>& go) {
        gr.accumulate(a, go);
        gr.accumulate(row, go.colwise().sum());
      },
      "add_row");
}

/// Scales row i of a (n x c) by column-vector entry c(i).
template <typename S>
Tensor<S> mul_col(const Tensor<S>& a, const Tensor<S>& col) {
  auto& g = detail::graph_of(a, col);
  detail::require(col.cols() == 1 && col.rows() == a.rows(), "mul_col: shape mismatch");
  Matrix<S> out = col.value().col(0).asDiagonal() * a.value();
  return g.record(
      std::move(out), {a, col},
      [a, col](Graph<S>& gr, const Matrix<S>& go) {
        gr.accumulate(a, col.value().col(0).asDiagonal() * go);
        gr.accumulate(col, go.cwiseProduct(a.value()).rowwise().sum());
      },
      "mul_col");
}

/// scale * a + shift, elementwise.
template <typename S>
Tensor<S> affine(const Tensor<S>& a, S scale, S shift = S(0)) {
  Matrix<S> out = (a.value().array() * scale + shift).matrix();
  return a.graph().record(
      std::move(out), {a},
      [a, scale](Graph<S>& gr, const Matrix<S>& go) { gr.accumulate(a, go * scale); }, "affine");
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S factor) {
  return affine(a, factor);
}

template <typename S>
Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) {
  return add(a, b);
}

template <typename S>
Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) {
  return sub(a, b);
}

template <typename S>
Tensor<S> tanh(const Tensor<S>& a) {
  Matrix<S> out = a.value().array().tanh().matrix();
  return a.graph().record(
      std::move(out), {a},
      [a](Graph<S>& gr, const Matrix<S>& go) {
        const auto t = a.value().array().tanh();
        gr.accumulate(a, (go.array() * (S(1) - t * t)).matrix());
      },
      "tanh");
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& a) {
  Matrix<S> out = (S(1) / (S(1) + (-a.value().array()).exp())).matrix();
  Matrix<S> saved = out;
  return a.graph().record(
      std::move(out), {a},
      [a, saved = std::move(saved)](Graph<S>& gr, const Matrix<S>& go) {
        gr.accumulate(a, (go.array() * saved.array() * (S(1) - saved.array())).matrix());
      },
      "sigmoid");
}

/// GELU, tanh approximation:
///   0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
/// Differs from the exact x * Phi(x) by less than 1e-3 everywhere.
template <typename S>
Tensor<S> gelu(const Tensor<S>& a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kCubic = 0.044715;
  const auto x = a.value().array();
  Matrix<S> out =
      (S(0.5) * x * (S(1) + (S(kC) * (x + S(kCubic) * x * x * x)).tanh())).matrix();
  return a.graph().record(
      std::move(out), {a},
      [a](Graph<S>& gr, const Matrix<S>& go) {
        const auto xv = a.value().array();
        const auto t = (S(kC) * (xv + S(kCubic) * xv * xv * xv)).tanh();
        const auto du = S(kC) * (S(1) + S(3 * kCubic) * xv * xv);
        const auto d = S(0.5) * (S(1) + t) + S(0.5) * xv * (S(1) - t * t) * du;
        gr.accumulate(a, (go.array() * d).matrix());
      },
      "gelu");
}

/// Inverted dropout. Identity (no node recorded) when rate is 0 or rng is null.
template <typename S>
Tensor<S> dropout(const Tensor<S>& a, double rate, Rng* rng) {
  if (rate <= 0.0 || rng == nullptr) {
    return a;
  }
  detail::require(rate < 1.0, "dropout: rate must be < 1");
  Matrix<S> mask(a.rows(), a.cols());
  const S keep_scale = S(1.0 / (1.0 - rate));
  for (Index i = 0; i < mask.size(); ++i) {
    mask.data()[i] = rng->uniform() < rate ? S(0) : keep_scale;
  }
  Matrix<S> out = a.value().cwiseProduct(mask);
  return a.graph().record(
      std::move(out), {a},
      [a, mask = std::move(mask)](Graph<S>& gr, const Matrix<S>& go) {
        gr.accumulate(a, go.cwiseProduct(mask));
      },
      "dropout");
}

// ---------------------------------------------------------------------------
// Normalization

/// Row-wise softmax with max subtraction.
template <typename S>
Tensor<S> softmax(const Tensor<S>& a) {
  detail::require(a.cols() > 0, "softmax: empty rows");
  if (!a.value().allFinite()) {
    throw NumericError("softmax: non-finite input");
  }
  Matrix<S> out = a.value();
  for (Index i = 0; i < out.rows(); ++i) {
    auto row = out.row(i);
    row.array() -= row.maxCoeff();
    row = row.array().exp().matrix();
    row /= row.sum();
  }
  Matrix<S> saved = out;
  return a.graph().record(
      std::move(out), {a},
      [a, p = std::move(saved)](Graph<S>& gr, const Matrix<S>& go) {
        const Matrix<S> inner = go.cwiseProduct(p).rowwise().sum();
        Matrix<S> d = p.cwiseProduct(go - inner.col(0).replicate(1, go.cols()));
        gr.accumulate(a, d);
      },
      "softmax");
}

/// Row-wise log-softmax.
template <typename S>
Tensor<S> log_softmax(const Tensor<S>& a) {
  detail::require(a.cols() > 0, "log_softmax: empty rows");
  if (!a.value().allFinite()) {
    throw NumericError("log_softmax: non-finite input");
  }
  Matrix<S> out = a.value();
  for (Index i = 0; i < out.rows(); ++i) {
    auto row = out.row(i);
    const S mx = row.maxCoeff();
    const S lse = mx + std::log((row.array() - mx).exp().sum());
    row.array() -= lse;
  }
  Matrix<S> saved = out;
  return a.graph().record(
      std::move(out), {a},
      [a, lp = std::move(saved)](Graph<S>& gr, const Matrix<S>& go) {
        const Matrix<S> total = go.rowwise().sum();
        Matrix<S> d = go - lp.array().exp().matrix().cwiseProduct(
                               total.col(0).replicate(1, go.cols()));
        gr.accumulate(a, d);
      },
      "log_softmax");
}

/// Per-row layer normalization: (x - mean) / sqrt(var + eps) * gain + bias, with the
/// population variance. gain and bias are (1 x c).
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias,
                     double eps = 1e-5) {
  detail::require(x.cols() > 0, "layer_norm: zero-length input");
  detail::require(gain.rows() == 1 && gain.cols() == x.cols() && bias.rows() == 1 &&
                      bias.cols() == x.cols(),
                  "layer_norm: gain/bias length differs from input");
  const Index n = x.rows();
  const Index c = x.cols();
  Matrix<S> xhat(n, c);
  Matrix<S> inv_std(n, 1);
  for (Index i = 0; i < n; ++i) {
    const auto row = x.value().row(i).array();
    const S mu = row.mean();
    const S var = (row - mu).square().mean();
    inv_std(i, 0) = S(1) / std::sqrt(var + S(eps));
    xhat.row(i) = ((row - mu) * inv_std(i, 0)).matrix();
  }
  if (!xhat.allFinite()) {
    throw NumericError("layer_norm: zero variance with eps = 0");
  }
  Matrix<S> out =
      (xhat.array().rowwise() * gain.value().row(0).array()).rowwise() + bias.value().row(0).array();
  return x.graph().record(
      std::move(out), {x, gain, bias},
      [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph<S>& gr,
                                                                           const Matrix<S>& go) {
        gr.accumulate(bias, go.colwise().sum());
        gr.accumulate(gain, go.cwiseProduct(xhat).colwise().sum());
        if (x.requires_grad()) {
          const Index cols = go.cols();
          Matrix<S> dxhat = go.array().rowwise() * gain.value().row(0).array();
          Matrix<S> dx(go.rows(), cols);
          for (Index i = 0; i < go.rows(); ++i) {
            const S m1 = dxhat.row(i).mean();
            const S m2 = dxhat.row(i).cwiseProduct(xhat.row(i)).mean();
            dx.row(i) = (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2) * inv_std(i, 0);
          }
          gr.accumulate(x, dx);
        }
      },
      "layer_norm");
}

// ---------------------------------------------------------------------------
// Indexing

/// Rows `ids` of `table` (embedding lookup). Gradient is scatter-added.
template <typename S>
Tensor<S> gather_rows(const Tensor<S>& table, std::span<const int> ids) {
  Matrix<S> out(static_cast<Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    detail::require(ids[i] >= 0 && ids[i] < table.rows(), "gather_rows: index out of range");
    out.row(static_cast<Index>(i)) = table.value().row(ids[i]);
  }
  std::vector<int> idx(ids.begin(), ids.end());
  return table.graph().record(
      std::move(out), {table},
      [table, idx = std::move(idx)](Graph<S>& gr, const Matrix<S>& go) {
        if (!table.requires_grad()) {
          return;
        }
        Matrix<S>& gt = gr.grad_buffer(table);
        for (std::size_t i = 0; i < idx.size(); ++i) {
          gt.row(idx[i]) += go.row(static_cast<Index>(i));
        }
      },
      "gather_rows");
}

/// Contiguous rows [begin, begin + count).
template <typename S>
Tensor<S> slice_rows(const Tensor<S>& a, Index begin, Index count) {
  detail::require(begin >= 0 && count >= 0 && begin + count <= a.rows(), "slice_rows: out of range");
  Matrix<S> out = a.value().middleRows(begin, count);
  return a.graph().record(
      std::move(out), {a},
      [a, begin, count](Graph<S>& gr, const Matrix<S>& go) {
        if (!a.requires_grad()) {
          return;
        }
        gr.grad_buffer(a).middleRows(begin, count) += go;
      },
      "slice_rows");
}

/// out(i, 0) = a(i, ids[i]).
template <typename S>
Tensor<S> pick(const Tensor<S>& a, std::span<const int> ids) {
  detail::require(static_cast<Index>(ids.size()) == a.rows(), "pick: one index per row required");
  Matrix<S> out(a.rows(), 1);
  for (Index i = 0; i < a.rows(); ++i) {
    detail::require(ids[i] >= 0 && ids[i] < a.cols(), "pick: index out of range");
    out(i, 0) = a.value()(i, ids[i]);
  }
  std::vector<int> idx(ids.begin(), ids.end());
  return a.graph().record(
      std::move(out), {a},
      [a, idx = std::move(idx)](Graph<S>& gr, const Matrix<S>& go) {
        if (!a.requires_grad()) {
          return;
        }
        Matrix<S>& ga = gr.grad_buffer(a);
        for (std::size_t i = 0; i < idx.size(); ++i) {
          ga(static_cast<Index>(i), idx[i]) += go(static_cast<Index>(i), 0);
        }
      },
      "pick");
}

/// out(i, 0) = log(max(p(i, ids[i]), floor)). Entries at or below the floor are
/// counted in `*clamped` and receive no gradient.
template <typename S>
Tensor<S> log_pick(const Tensor<S>& p, std::span<const int> ids, S floor, int* clamped = nullptr) {
  detail::require(static_cast<Index>(ids.size()) == p.rows(), "log_pick: one index per row required");
  Matrix<S> out(p.rows(), 1);
  std::vector<int> idx(ids.begin(), ids.end());
  for (Index i = 0; i < p.rows(); ++i) {
    detail::require(idx[i] >= 0 && idx[i] < p.cols(), "log_pick: index out of range");
    const S v = p.value()(i, idx[i]);
    if (v <= floor) {
      if (clamped != nullptr) {
        ++*clamped;
      }
      out(i, 0) = std::log(floor);
    } else {
      out(i, 0) = std::log(v);
    }
  }
  return p.graph().record(
      std::move(out), {p},
      [p, idx = std::move(idx), floor](Graph<S>& gr, const Matrix<S>& go) {
        if (!p.requires_grad()) {
          return;
        }
        Matrix<S>& gp = gr.grad_buffer(p);
        for (std::size_t i = 0; i < idx.size(); ++i) {
          const S v = p.value()(static_cast<Index>(i), idx[i]);
          if (v > floor) {
            gp(static_cast<Index>(i), idx[i]) += go(static_cast<Index>(i), 0) / v;
          }
        }
      },
      "log_pick");
}

/// Zero-extends a (n x c) to (n x total_cols).
template <typename S>
Tensor<S> pad_cols(const Tensor<S>& a, Index total_cols) {
  detail::require(total_cols >= a.cols(), "pad_cols: target narrower than input");
  Matrix<S> out = Matrix<S>::Zero(a.rows(), total_cols);
  out.leftCols(a.cols()) = a.value();
  const Index c = a.cols();
  return a.graph().record(
      std::move(out), {a},
      [a, c](Graph<S>& gr, const Matrix<S>& go) { gr.accumulate(a, go.leftCols(c)); }, "pad_cols");
}

/// out(t, index[l]) += w(t, l): folds per-position weights onto the ids they hold.
template <typename S>
Tensor<S> scatter_cols(const Tensor<S>& w, std::span<const int> index, Index total_cols) {
  detail::require(static_cast<Index>(index.size()) == w.cols(), "scatter_cols: one index per column");
  Matrix<S> out = Matrix<S>::Zero(w.rows(), total_cols);
  std::vector<int> idx(index.begin(), index.end());
  for (Index l = 0; l < w.cols(); ++l) {
    detail::require(idx[l] >= 0 && idx[l] < total_cols, "scatter_cols: index out of range");
    out.col(idx[l]) += w.value().col(l);
  }
  return w.graph().record(
      std::move(out), {w},
      [w, idx = std::move(idx)](Graph<S>& gr, const Matrix<S>& go) {
        if (!w.requires_grad()) {
          return;
        }
        Matrix<S>& gw = gr.grad_buffer(w);
        for (std::size_t l = 0; l < idx.size(); ++l) {
          gw.col(static_cast<Index>(l)) += go.col(idx[l]);
        }
      },
      "scatter_cols");
}

// ---------------------------------------------------------------------------
// Reductions

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
  Matrix<S> out(1, 1);
  out(0, 0) = a.value().sum();
  return a.graph().record(
      std::move(out), {a},
      [a](Graph<S>& gr, const Matrix<S>& go) {
        gr.accumulate(a, Matrix<S>::Constant(a.rows(), a.cols(), go(0, 0)));
      },
      "sum");
}

template <typename S>
Tensor<S> mean(const Tensor<S>& a) {
  detail::require(a.value().size() > 0, "mean: empty tensor");
  return scale(sum(a), S(1) / static_cast<S>(a.value().size()));
}

template <typename S>
Tensor<S> dot(const Tensor<S>& a, const Tensor<S>& b) {
  return sum(mul(a, b));
}

// ---------------------------------------------------------------------------
// Attention

/// Additive (Bahdanau-style) scores:
///   out(t, l) = sum_k w(k) * tanh(keys(l, k) + queries(t, k))
/// keys (m x d), queries (n x d), w (1 x d) -> (n x m). Computed without
/// materializing the n x m x d intermediate.
template <typename S>
Tensor<S> additive_scores(const Tensor<S>& keys, const Tensor<S>& queries, const Tensor<S>& w) {
  auto& g = detail::graph_of(keys, queries);
  detail::require(keys.cols() == queries.cols() && w.rows() == 1 && w.cols() == keys.cols(),
                  "additive_scores: width mismatch");
  const Index n = queries.rows();
  const Index m = keys.rows();
  Matrix<S> out(n, m);
  for (Index t = 0; t < n; ++t) {
    const Matrix<S> th = (keys.value().rowwise() + queries.value().row(t)).array().tanh().matrix();
    out.row(t) = (th * w.value().row(0).transpose()).transpose();
  }
  return g.record(
      std::move(out), {keys, queries, w},
      [keys, queries, w](Graph<S>& gr, const Matrix<S>& go) {
        const Index rows = queries.rows();
        Matrix<S> dkeys = Matrix<S>::Zero(keys.rows(), keys.cols());
        Matrix<S> dq(rows, queries.cols());
        Matrix<S> dw = Matrix<S>::Zero(1, w.cols());
        for (Index t = 0; t < rows; ++t) {
          const Matrix<S> th =
              (keys.value().rowwise() + queries.value().row(t)).array().tanh().matrix();
          // d(score)/d(pre-activation) for every (l, k)
          const Matrix<S> dpre =
              ((go.row(t).transpose() * w.value().row(0)).array() * (S(1) - th.array().square()))
                  .matrix();
          dkeys += dpre;
          dq.row(t) = dpre.colwise().sum();
          dw += go.row(t) * th;
        }
        gr.accumulate(keys, dkeys);
        gr.accumulate(queries, dq);
        gr.accumulate(w, dw);
      },
      "additive_scores");
}

/// Multi-head scaled dot-product attention over already-projected inputs.
/// q (n x h), k and v (m x h); h is split into `heads` equal slices. With `causal`,
/// query i only sees keys j <= i. Attention weights get inverted dropout when
/// dropout_rate > 0 and rng is provided.
template <typename S>
Tensor<S> attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v, int heads,
                    bool causal, double dropout_rate = 0.0, Rng* rng = nullptr) {
  auto& g = detail::graph_of(q, k);
  detail::require(&k.graph() == &v.graph(), "attention: operands on different graphs");
  detail::require(heads > 0 && q.cols() % heads == 0, "attention: width not divisible by heads");
  detail::require(k.cols() == q.cols() && v.cols() == q.cols() && k.rows() == v.rows(),
                  "attention: shape mismatch");
  detail::require(!causal || q.rows() <= k.rows(), "attention: causal needs n <= m");
  const Index n = q.rows();
  const Index m = k.rows();
  const Index d = q.cols() / heads;
  const S factor = S(1) / std::sqrt(static_cast<S>(d));
  const bool drop = dropout_rate > 0.0 && rng != nullptr;
  const S keep_scale = drop ? S(1.0 / (1.0 - dropout_rate)) : S(1);

  std::vector<Matrix<S>> probs(heads);
  std::vector<Matrix<S>> masks(drop ? heads : 0);
  Matrix<S> out(n, q.cols());
  for (int h = 0; h < heads; ++h) {
    Matrix<S> s = q.value().middleCols(h * d, d) * k.value().middleCols(h * d, d).transpose();
    s *= factor;
    for (Index i = 0; i < n; ++i) {
      auto row = s.row(i);
      const Index visible = causal ? i + 1 : m;
      const S mx = row.head(visible).maxCoeff();
      row.head(visible) = (row.head(visible).array() - mx).exp().matrix();
      if (visible < m) {
        row.tail(m - visible).setZero();
      }
      row /= row.sum();
    }
    Matrix<S> used = s;
    if (drop) {
      Matrix<S> mask(n, m);
      for (Index i = 0; i < mask.size(); ++i) {
        mask.data()[i] = rng->uniform() < dropout_rate ? S(0) : keep_scale;
      }
      used = used.cwiseProduct(mask);
      masks[h] = std::move(mask);
    }
    out.middleCols(h * d, d) = used * v.value().middleCols(h * d, d);
    probs[h] = std::move(s);
  }
  return g.record(
      std::move(out), {q, k, v},
      [q, k, v, heads, d, factor, probs = std::move(probs), masks = std::move(masks)](
          Graph<S>& gr, const Matrix<S>& go) {
        Matrix<S> dq = Matrix<S>::Zero(q.rows(), q.cols());
        Matrix<S> dk = Matrix<S>::Zero(k.rows(), k.cols());
        Matrix<S> dv = Matrix<S>::Zero(v.rows(), v.cols());
        for (int h = 0; h < heads; ++h) {
          const Matrix<S>& p = probs[h];
          const auto goh = go.middleCols(h * d, d);
          Matrix<S> used = masks.empty() ? p : p.cwiseProduct(masks[h]);
          dv.middleCols(h * d, d) += used.transpose() * goh;
          Matrix<S> dp = goh * v.value().middleCols(h * d, d).transpose();
          if (!masks.empty()) {
            dp = dp.cwiseProduct(masks[h]);
          }
          const Matrix<S> inner = dp.cwiseProduct(p).rowwise().sum();
          const Matrix<S> ds = p.cwiseProduct(dp - inner.col(0).replicate(1, dp.cols())) * factor;
          dq.middleCols(h * d, d) += ds * k.value().middleCols(h * d, d);
          dk.middleCols(h * d, d) += ds.transpose() * q.value().middleCols(h * d, d);
        }
        gr.accumulate(q, dq);
        gr.accumulate(k, dk);
        gr.accumulate(v, dv);
      },
      "attention");
}

}  // namespace palm
