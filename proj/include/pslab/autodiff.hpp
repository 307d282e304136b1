#pragma once

// Tape-based reverse-mode differentiation over dense Tensors.
//
// A Graph records every operation in creation order, which is already a
// topological order, so backward() is a single reverse sweep. Gradients are
// always accumulated (never overwritten) so a value used twice receives the
// sum of both contributions.

#include <cmath>
#include <cstddef>
#include <deque>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "pslab/error.hpp"
#include "pslab/tensor.hpp"

namespace pslab {

enum class ActivationKind : std::uint8_t { kRelu = 0, kGelu = 1, kSilu = 2 };

inline std::string_view to_string(ActivationKind kind) {
  switch (kind) {
    case ActivationKind::kRelu: return "relu";
    case ActivationKind::kGelu: return "gelu";
    case ActivationKind::kSilu: return "silu";
  }
  return "unknown";
}

namespace ad {

struct Var {
  std::size_t id = std::numeric_limits<std::size_t>::max();
};

template <typename T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, const Tensor<T>&)>;

  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) noexcept = default;
  Graph& operator=(Graph&&) noexcept = default;

  bool grad_enabled() const noexcept { return grad_enabled_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var constant(Tensor<T> value) {
    nodes_.push_back(Node{std::move(value), nullptr, {}, false, false, {}});
    return Var{nodes_.size() - 1};
  }

  // The referenced tensor must outlive the graph.
  Var constant_ref(const Tensor<T>& value) {
    nodes_.push_back(Node{{}, &value, {}, false, false, {}});
    return Var{nodes_.size() - 1};
  }

  // Leaf whose gradient is tracked. Held by reference; the tensor must outlive the graph.
  Var parameter(const Tensor<T>& value) {
    nodes_.push_back(Node{{}, &value, {}, false, grad_enabled_, {}});
    return Var{nodes_.size() - 1};
  }

  Var record(Tensor<T> value, std::initializer_list<Var> parents, BackwardFn fn) {
    bool needs = false;
    if (grad_enabled_) {
      for (Var p : parents) needs = needs || node(p).requires_grad;
    }
    nodes_.push_back(Node{std::move(value), nullptr, {}, false, needs, needs ? std::move(fn) : BackwardFn{}});
    return Var{nodes_.size() - 1};
  }

  const Tensor<T>& value(Var v) const {
    const Node& n = node(v);
    return n.ref != nullptr ? *n.ref : n.owned;
  }

  bool requires_grad(Var v) const { return node(v).requires_grad; }
  bool has_grad(Var v) const { return node(v).has_grad; }

  const Tensor<T>& grad(Var v) const {
    const Node& n = node(v);
    if (!n.has_grad) throw UsageError("node " + std::to_string(v.id) + " has no gradient");
    return n.grad;
  }

  Tensor<T>& accumulate_into(Var v) {
    Node& n = node(v);
    if (!n.has_grad) {
      n.grad = Tensor<T>(value(v).shape());
      n.has_grad = true;
    }
    return n.grad;
  }

  void backward(Var loss) {
    if (value(loss).numel() != 1) {
      throw UsageError("backward requires a scalar loss, got shape " + shape_string(value(loss).shape()));
    }
    if (!requires_grad(loss)) throw UsageError("backward on a value that does not depend on any parameter");
    accumulate_into(loss)[0] += T{1};
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.has_grad && n.backward) n.backward(*this, n.grad);
    }
  }

 private:
  struct Node {
    Tensor<T> owned;
    const Tensor<T>* ref;
    Tensor<T> grad;
    bool has_grad;
    bool requires_grad;
    BackwardFn backward;
  };

  Node& node(Var v) {
    if (v.id >= nodes_.size()) throw UsageError("invalid graph variable");
    return nodes_[v.id];
  }
  const Node& node(Var v) const {
    if (v.id >= nodes_.size()) throw UsageError("invalid graph variable");
    return nodes_[v.id];
  }

  bool grad_enabled_;
  std::deque<Node> nodes_;  // deque: value() references survive later pushes
};

namespace detail {

template <typename T>
void require_rank2(const Tensor<T>& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got shape " + shape_string(t.shape()));
  }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()) + " differ");
  }
}

// Evaluated in the tensor's own precision (erff for float tensors).
template <typename T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * static_cast<T>(std::numbers::sqrt2 / 2.0)));
}

template <typename T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * static_cast<T>(std::numbers::sqrt2 / 2.0)));
  const T pdf = std::exp(T(-0.5) * x * x) * static_cast<T>(1.0 / std::sqrt(2.0 * std::numbers::pi));
  return cdf + x * pdf;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace detail

// ---------------------------------------------------------------- linear algebra

template <typename T>
Var matmul(Graph<T>& g, Var a, Var b) {
  const Tensor<T>& av = g.value(a);
  const Tensor<T>& bv = g.value(b);
  detail::require_rank2(av, "matmul");
  detail::require_rank2(bv, "matmul");
  if (av.cols() != bv.rows()) {
    throw DimensionError("matmul: inner dimensions disagree, " + shape_string(av.shape()) + " x " +
                         shape_string(bv.shape()));
  }
  Tensor<T> out({av.rows(), bv.cols()});
  as_matrix(out).noalias() = as_matrix(av) * as_matrix(bv);
  require_finite(out, "matmul");
  return g.record(std::move(out), {a, b}, [a, b](Graph<T>& gr, const Tensor<T>& go) {
    if (gr.requires_grad(a)) {
      as_matrix(gr.accumulate_into(a)).noalias() += as_matrix(go) * as_matrix(gr.value(b)).transpose();
    }
    if (gr.requires_grad(b)) {
      as_matrix(gr.accumulate_into(b)).noalias() += as_matrix(gr.value(a)).transpose() * as_matrix(go);
    }
  });
}

template <typename T>
Var add(Graph<T>& g, Var a, Var b) {
  const Tensor<T>& av = g.value(a);
  const Tensor<T>& bv = g.value(b);
  detail::require_same_shape(av, bv, "add");
  Tensor<T> out = av;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
  require_finite(out, "add");
  return g.record(std::move(out), {a, b}, [a, b](Graph<T>& gr, const Tensor<T>& go) {
    for (Var p : {a, b}) {
      if (!gr.requires_grad(p)) continue;
      Tensor<T>& acc = gr.accumulate_into(p);
      for (std::size_t i = 0; i < go.numel(); ++i) acc[i] += go[i];
    }
  });
}

// a[r x c] + bias[c] broadcast over rows.
template <typename T>
Var add_row(Graph<T>& g, Var a, Var bias) {
  const Tensor<T>& av = g.value(a);
  const Tensor<T>& bv = g.value(bias);
  if (bv.numel() != av.cols()) {
    throw DimensionError("add_row: bias " + shape_string(bv.shape()) + " does not match " + shape_string(av.shape()));
  }
  Tensor<T> out = av;
  const std::size_t cols = av.cols();
  for (std::size_t r = 0; r < av.rows(); ++r) {
    for (std::size_t c = 0; c < cols; ++c) out(r, c) += bv[c];
  }
  require_finite(out, "add_row");
  return g.record(std::move(out), {a, bias}, [a, bias](Graph<T>& gr, const Tensor<T>& go) {
    if (gr.requires_grad(a)) {
      Tensor<T>& acc = gr.accumulate_into(a);
      for (std::size_t i = 0; i < go.numel(); ++i) acc[i] += go[i];
    }
    if (gr.requires_grad(bias)) {
      Tensor<T>& acc = gr.accumulate_into(bias);
      const std::size_t cols = go.cols();
      for (std::size_t c = 0; c < cols; ++c) {
        double s = 0.0;
        for (std::size_t r = 0; r < go.rows(); ++r) s += go(r, c);
        acc[c] += static_cast<T>(s);
      }
    }
  });
}

template <typename T>
Var mul(Graph<T>& g, Var a, Var b) {
  const Tensor<T>& av = g.value(a);
  const Tensor<T>& bv = g.value(b);
  detail::require_same_shape(av, bv, "mul");
  Tensor<T> out = av;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  require_finite(out, "mul");
  return g.record(std::move(out), {a, b}, [a, b](Graph<T>& gr, const Tensor<T>& go) {
    if (gr.requires_grad(a)) {
      Tensor<T>& acc = gr.accumulate_into(a);
      const Tensor<T>& bv2 = gr.value(b);
      for (std::size_t i = 0; i < go.numel(); ++i) acc[i] += go[i] * bv2[i];
    }
    if (gr.requires_grad(b)) {
      Tensor<T>& acc = gr.accumulate_into(b);
      const Tensor<T>& av2 = gr.value(a);
      for (std::size_t i = 0; i < go.numel(); ++i) acc[i] += go[i] * av2[i];
    }
  });
}

template <typename T>
Var scale(Graph<T>& g, Var a, T factor) {
  Tensor<T> out = g.value(a);
  for (auto& v : out.data()) v *= factor;
  require_finite(out, "scale");
  return g.record(std::move(out), {a}, [a, factor](Graph<T>& gr, const Tensor<T>& go) {
    Tensor<T>& acc = gr.accumulate_into(a);
    for (std::size_t i = 0; i < go.numel(); ++i) acc[i] += go[i] * factor;
  });
}

template <typename T>
Var sum(Graph<T>& g, Var a) {
  const Tensor<T>& av = g.value(a);
  double s = 0.0;
  for (T v : av.data()) s += v;
  Tensor<T> out(Shape{}, static_cast<T>(s));
  require_finite(out, "sum");
  return g.record(std::move(out), {a}, [a](Graph<T>& gr, const Tensor<T>& go) {
    Tensor<T>& acc = gr.accumulate_into(a);
    for (auto& v : acc.data()) v += go[0];
  });
}

// ---------------------------------------------------------------- nonlinearity

template <typename T>
Var activation(Graph<T>& g, Var a, ActivationKind kind) {
  const Tensor<T>& av = g.value(a);
  Tensor<T> out(av.shape());
  switch (kind) {
    case ActivationKind::kRelu:
      for (std::size_t i = 0; i < av.numel(); ++i) out[i] = av[i] > T{0} ? av[i] : T{0};
      break;
    case ActivationKind::kGelu:
      for (std::size_t i = 0; i < av.numel(); ++i) out[i] = detail::gelu(av[i]);
      break;
    case ActivationKind::kSilu:
      for (std::size_t i = 0; i < av.numel(); ++i) out[i] = static_cast<T>(av[i] * detail::sigmoid(av[i]));
      break;
    default:
      throw ConfigError("unknown activation kind " + std::to_string(static_cast<int>(kind)));
  }
  require_finite(out, "activation");
  return g.record(std::move(out), {a}, [a, kind](Graph<T>& gr, const Tensor<T>& go) {
    const Tensor<T>& x = gr.value(a);
    Tensor<T>& acc = gr.accumulate_into(a);
    for (std::size_t i = 0; i < go.numel(); ++i) {
      double d = 0.0;
      switch (kind) {
        case ActivationKind::kRelu: d = x[i] > T{0} ? 1.0 : 0.0; break;
        case ActivationKind::kGelu: d = detail::gelu_grad(x[i]); break;
        case ActivationKind::kSilu: {
          const double s = detail::sigmoid(x[i]);
          d = s * (1.0 + x[i] * (1.0 - s));
          break;
        }
      }
      acc[i] += static_cast<T>(go[i] * d);
    }
  });
}

// ---------------------------------------------------------------- normalization

inline constexpr double kLayerNormEps = 1e-5;

template <typename T>
Var layer_norm(Graph<T>& g, Var x, Var gain, Var bias) {
  const Tensor<T>& xv = g.value(x);
  const Tensor<T>& gv = g.value(gain);
  const Tensor<T>& bv = g.value(bias);
  const std::size_t cols = xv.cols();
  if (xv.rank() == 0 || cols == 0) throw DimensionError("layer_norm: zero-length row");
  if (gv.numel() != cols || bv.numel() != cols) {
    throw DimensionError("layer_norm: gain/bias must have " + std::to_string(cols) + " elements");
  }
  const std::size_t rows = xv.rows();
  Tensor<T> out(xv.shape());
  Tensor<T> normed(xv.shape());
  std::vector<double> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    auto in = xv.row(r);
    double mean = 0.0;
    for (T v : in) mean += v;
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (T v : in) var += (v - mean) * (v - mean);
    var /= static_cast<double>(cols);
    rstd[r] = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t c = 0; c < cols; ++c) {
      const double xh = (in[c] - mean) * rstd[r];
      normed(r, c) = static_cast<T>(xh);
      out(r, c) = static_cast<T>(xh * gv[c] + bv[c]);
    }
  }
  require_finite(out, "layer_norm");
  return g.record(std::move(out), {x, gain, bias},
                  [x, gain, bias, normed = std::move(normed), rstd = std::move(rstd)](Graph<T>& gr,
                                                                                       const Tensor<T>& go) {
                    const std::size_t cols = go.cols();
                    const std::size_t rows = go.rows();
                    const Tensor<T>& gv = gr.value(gain);
                    if (gr.requires_grad(x)) {
                      Tensor<T>& acc = gr.accumulate_into(x);
                      for (std::size_t r = 0; r < rows; ++r) {
                        double mean_d = 0.0;
                        double mean_dx = 0.0;
                        for (std::size_t c = 0; c < cols; ++c) {
                          const double d = static_cast<double>(go(r, c)) * gv[c];
                          mean_d += d;
                          mean_dx += d * normed(r, c);
                        }
                        mean_d /= static_cast<double>(cols);
                        mean_dx /= static_cast<double>(cols);
                        for (std::size_t c = 0; c < cols; ++c) {
                          const double d = static_cast<double>(go(r, c)) * gv[c];
                          acc(r, c) += static_cast<T>(rstd[r] * (d - mean_d - normed(r, c) * mean_dx));
                        }
                      }
                    }
                    if (gr.requires_grad(gain)) {
                      Tensor<T>& acc = gr.accumulate_into(gain);
                      for (std::size_t c = 0; c < cols; ++c) {
                        double s = 0.0;
                        for (std::size_t r = 0; r < rows; ++r) s += static_cast<double>(go(r, c)) * normed(r, c);
                        acc[c] += static_cast<T>(s);
                      }
                    }
                    if (gr.requires_grad(bias)) {
                      Tensor<T>& acc = gr.accumulate_into(bias);
                      for (std::size_t c = 0; c < cols; ++c) {
                        double s = 0.0;
                        for (std::size_t r = 0; r < rows; ++r) s += go(r, c);
                        acc[c] += static_cast<T>(s);
                      }
                    }
                  });
}

// ---------------------------------------------------------------- indexing

template <typename T>
Var embedding(Graph<T>& g, Var table, std::span<const std::int32_t> ids) {
  const Tensor<T>& tv = g.value(table);
  detail::require_rank2(tv, "embedding");
  const std::size_t width = tv.cols();
  Tensor<T> out({ids.size(), width});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= tv.rows()) {
      throw InputError("embedding: id " + std::to_string(ids[i]) + " outside table of " +
                       std::to_string(tv.rows()) + " rows");
    }
    std::copy_n(tv.row(static_cast<std::size_t>(ids[i])).data(), width, out.row(i).data());
  }
  std::vector<std::int32_t> saved(ids.begin(), ids.end());
  return g.record(std::move(out), {table}, [table, saved = std::move(saved)](Graph<T>& gr, const Tensor<T>& go) {
    Tensor<T>& acc = gr.accumulate_into(table);
    const std::size_t width = go.cols();
    for (std::size_t i = 0; i < saved.size(); ++i) {
      auto dst = acc.row(static_cast<std::size_t>(saved[i]));
      auto src = go.row(i);
      for (std::size_t c = 0; c < width; ++c) dst[c] += src[c];
    }
  });
}

// Zeroes the listed columns. Used for coefficient ablation; gradients through
// the zeroed columns are zero as well.
template <typename T>
Var zero_columns(Graph<T>& g, Var a, std::span<const std::size_t> columns) {
  const Tensor<T>& av = g.value(a);
  const std::size_t cols = av.cols();
  std::vector<std::uint8_t> dropped(cols, 0);
  for (std::size_t c : columns) {
    if (c >= cols) {
      throw MaskError("mask index " + std::to_string(c) + " outside " + std::to_string(cols) + " columns");
    }
    dropped[c] = 1;
  }
  Tensor<T> out = av;
  for (std::size_t r = 0; r < av.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < cols; ++c) {
      if (dropped[c]) row[c] = T{0};
    }
  }
  return g.record(std::move(out), {a}, [a, dropped = std::move(dropped)](Graph<T>& gr, const Tensor<T>& go) {
    Tensor<T>& acc = gr.accumulate_into(a);
    const std::size_t cols = go.cols();
    for (std::size_t r = 0; r < go.rows(); ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        if (!dropped[c]) acc(r, c) += go(r, c);
      }
    }
  });
}

// ---------------------------------------------------------------- attention

// Multi-head causal self-attention over a packed batch. `offsets` delimits the
// sequences (offsets.front() == 0, offsets.back() == rows); tokens attend only
// to earlier tokens of their own sequence.
template <typename T>
Var causal_attention(Graph<T>& g, Var q, Var k, Var v, std::span<const std::size_t> offsets, std::size_t n_heads) {
  const Tensor<T>& qv = g.value(q);
  const Tensor<T>& kv = g.value(k);
  const Tensor<T>& vv = g.value(v);
  detail::require_rank2(qv, "causal_attention");
  detail::require_same_shape(qv, kv, "causal_attention");
  detail::require_same_shape(qv, vv, "causal_attention");
  const std::size_t width = qv.cols();
  if (n_heads == 0 || width % n_heads != 0) {
    throw DimensionError("causal_attention: width " + std::to_string(width) + " not divisible by " +
                         std::to_string(n_heads) + " heads");
  }
  if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != qv.rows()) {
    throw DimensionError("causal_attention: sequence offsets do not cover the batch");
  }
  const std::size_t head_dim = width / n_heads;
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(head_dim));

  // probs layout: per sequence, per head, a len x len lower-triangular block.
  std::vector<std::size_t> prob_base(offsets.size(), 0);
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    const std::size_t len = offsets[s + 1] - offsets[s];
    prob_base[s + 1] = prob_base[s] + n_heads * len * len;
  }
  std::vector<T> probs(prob_base.back(), T{0});
  Tensor<T> out(qv.shape());
  std::vector<double> scores;
  std::vector<double> acc;
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    const std::size_t begin = offsets[s];
    const std::size_t len = offsets[s + 1] - begin;
    if (offsets[s + 1] < begin) throw DimensionError("causal_attention: offsets not ascending");
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::size_t c0 = h * head_dim;
      T* block = probs.data() + prob_base[s] + h * len * len;
      for (std::size_t i = 0; i < len; ++i) {
        scores.assign(i + 1, 0.0);
        double mx = -std::numeric_limits<double>::infinity();
        const T* qi = qv.raw() + (begin + i) * width + c0;
        for (std::size_t j = 0; j <= i; ++j) {
          const T* kj = kv.raw() + (begin + j) * width + c0;
          double dot = 0.0;
          for (std::size_t c = 0; c < head_dim; ++c) dot += static_cast<double>(qi[c]) * kj[c];
          scores[j] = dot * scale_factor;
          mx = std::max(mx, scores[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          scores[j] = std::exp(scores[j] - mx);
          z += scores[j];
        }
        T* oi = out.raw() + (begin + i) * width + c0;
        acc.assign(head_dim, 0.0);
        for (std::size_t j = 0; j <= i; ++j) {
          const double p = scores[j] / z;
          block[i * len + j] = static_cast<T>(p);
          const T* vj = vv.raw() + (begin + j) * width + c0;
          for (std::size_t c = 0; c < head_dim; ++c) acc[c] += p * vj[c];
        }
        for (std::size_t c = 0; c < head_dim; ++c) oi[c] = static_cast<T>(acc[c]);
      }
    }
  }
  require_finite(out, "causal_attention");
  std::vector<std::size_t> saved_offsets(offsets.begin(), offsets.end());
  return g.record(
      std::move(out), {q, k, v},
      [q, k, v, n_heads, head_dim, scale_factor, probs = std::move(probs), prob_base = std::move(prob_base),
       offs = std::move(saved_offsets)](Graph<T>& gr, const Tensor<T>& go) {
        const Tensor<T>& qv = gr.value(q);
        const Tensor<T>& kv = gr.value(k);
        const Tensor<T>& vv = gr.value(v);
        const std::size_t width = qv.cols();
        Tensor<T>* dq = gr.requires_grad(q) ? &gr.accumulate_into(q) : nullptr;
        Tensor<T>* dk = gr.requires_grad(k) ? &gr.accumulate_into(k) : nullptr;
        Tensor<T>* dv = gr.requires_grad(v) ? &gr.accumulate_into(v) : nullptr;
        std::vector<double> dp;
        for (std::size_t s = 0; s + 1 < offs.size(); ++s) {
          const std::size_t begin = offs[s];
          const std::size_t len = offs[s + 1] - begin;
          for (std::size_t h = 0; h < n_heads; ++h) {
            const std::size_t c0 = h * head_dim;
            const T* block = probs.data() + prob_base[s] + h * len * len;
            for (std::size_t i = 0; i < len; ++i) {
              const T* goi = go.raw() + (begin + i) * width + c0;
              dp.assign(i + 1, 0.0);
              double weighted = 0.0;
              for (std::size_t j = 0; j <= i; ++j) {
                const T* vj = vv.raw() + (begin + j) * width + c0;
                double d = 0.0;
                for (std::size_t c = 0; c < head_dim; ++c) d += static_cast<double>(goi[c]) * vj[c];
                dp[j] = d;
                weighted += d * block[i * len + j];
              }
              for (std::size_t j = 0; j <= i; ++j) {
                const double p = block[i * len + j];
                if (dv != nullptr) {
                  T* dvj = dv->raw() + (begin + j) * width + c0;
                  for (std::size_t c = 0; c < head_dim; ++c) dvj[c] += static_cast<T>(p * goi[c]);
                }
                const double ds = p * (dp[j] - weighted) * scale_factor;
                if (dq != nullptr) {
                  T* dqi = dq->raw() + (begin + i) * width + c0;
                  const T* kj = kv.raw() + (begin + j) * width + c0;
                  for (std::size_t c = 0; c < head_dim; ++c) dqi[c] += static_cast<T>(ds * kj[c]);
                }
                if (dk != nullptr) {
                  T* dkj = dk->raw() + (begin + j) * width + c0;
                  const T* qi = qv.raw() + (begin + i) * width + c0;
                  for (std::size_t c = 0; c < head_dim; ++c) dkj[c] += static_cast<T>(ds * qi[c]);
                }
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------- loss

inline constexpr std::int32_t kIgnoreTarget = -1;

// Mean next-token cross-entropy over rows whose target is not kIgnoreTarget.
template <typename T>
Var cross_entropy(Graph<T>& g, Var logits, std::span<const std::int32_t> targets) {
  const Tensor<T>& lv = g.value(logits);
  detail::require_rank2(lv, "cross_entropy");
  if (targets.size() != lv.rows()) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(lv.rows()) + " rows");
  }
  const std::size_t vocab = lv.cols();
  std::size_t count = 0;
  for (auto t : targets) {
    if (t == kIgnoreTarget) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) throw InputError("cross_entropy: target out of range");
    ++count;
  }
  if (count == 0) throw UsageError("cross_entropy: no targets");
  Tensor<T> probs(lv.shape());
  double total = 0.0;
  for (std::size_t r = 0; r < lv.rows(); ++r) {
    if (targets[r] == kIgnoreTarget) continue;
    auto row = lv.row(r);
    double mx = -std::numeric_limits<double>::infinity();
    for (T v : row) mx = std::max(mx, static_cast<double>(v));
    double z = 0.0;
    for (T v : row) z += std::exp(v - mx);
    const double log_z = mx + std::log(z);
    for (std::size_t c = 0; c < vocab; ++c) probs(r, c) = static_cast<T>(std::exp(row[c] - log_z));
    total -= row[static_cast<std::size_t>(targets[r])] - log_z;
  }
  Tensor<T> out(Shape{}, static_cast<T>(total / static_cast<double>(count)));
  require_finite(out, "cross_entropy");
  std::vector<std::int32_t> saved(targets.begin(), targets.end());
  return g.record(std::move(out), {logits},
                  [logits, count, probs = std::move(probs), saved = std::move(saved)](Graph<T>& gr,
                                                                                      const Tensor<T>& go) {
                    Tensor<T>& acc = gr.accumulate_into(logits);
                    const double w = static_cast<double>(go[0]) / static_cast<double>(count);
                    const std::size_t vocab = probs.cols();
                    for (std::size_t r = 0; r < probs.rows(); ++r) {
                      if (saved[r] == kIgnoreTarget) continue;
                      for (std::size_t c = 0; c < vocab; ++c) {
                        double d = probs(r, c);
                        if (static_cast<std::int32_t>(c) == saved[r]) d -= 1.0;
                        acc(r, c) += static_cast<T>(w * d);
                      }
                    }
                  });
}

}  // namespace ad
}  // namespace pslab
