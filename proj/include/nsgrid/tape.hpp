#pragma once

// Reverse-mode autodiff over Array values.
//
// A Tape owns a growing list of nodes; each op appends one node holding its
// forward value and a backward closure that scatters the node's gradient
// into its parents. backward() walks the node list once in reverse creation
// order (a valid topological order of the DAG), so every node is visited
// exactly once and nodes the root does not reach keep zero gradients.
//
// A Tape is confined to one logical thread; independent tapes may run
// concurrently on disjoint data.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "nsgrid/array.hpp"

namespace nsgrid {

class Tape;

struct Value {
  Tape* tape = nullptr;
  std::uint32_t id = 0;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Differentiable leaf (parameter or checked input).
  Value leaf(Array v) { return push(std::move(v), nullptr); }

  // Non-differentiable leaf. Also the carrier for stop-gradient thresholds.
  Value constant(Array v) { return push(std::move(v), nullptr); }
  Value constant(double v) { return constant(Array::scalar(v)); }

  const Array& val(Value v) const { return nodes_[v.id].value; }
  const Array& grad(Value v) const { return nodes_[v.id].grad; }

  std::size_t size() const { return nodes_.size(); }

  // Seeds d(root)/d(root) = 1 and accumulates gradients for every node the
  // root reaches. root must be scalar.
  void backward(Value root) {
    if (!nodes_[root.id].value.is_scalar())
      throw std::logic_error("Tape::backward: root is not scalar");
    for (auto& n : nodes_) {
      n.grad.shape = n.value.shape;
      n.grad.data.assign(n.value.numel(), 0.0);
    }
    nodes_[root.id].grad.data[0] = 1.0;
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      if (nodes_[i].backward) nodes_[i].backward();
    }
  }

  // ---- node plumbing (used by the free-function ops below) ----
  Value push(Array v, std::function<void()> bw) {
    nodes_.push_back(Node{std::move(v), Array{}, std::move(bw)});
    return Value{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
  }
  Array& grad_slot(std::uint32_t id) { return nodes_[id].grad; }
  void set_backward(std::uint32_t id, std::function<void()> bw) {
    nodes_[id].backward = std::move(bw);
  }

 private:
  struct Node {
    Array value;
    Array grad;
    std::function<void()> backward;
  };
  std::vector<Node> nodes_;
};

namespace detail {

inline void accumulate(Tape* t, std::uint32_t id, const Array& g) {
  Array& slot = t->grad_slot(id);
  for (std::size_t i = 0; i < g.numel(); ++i) slot.data[i] += g.data[i];
}

// Builds a unary op: forward via f, backward adds dy * dfdx.
template <typename Fwd, typename Bwd>
Value unary(Value x, Fwd f, Bwd dfdx) {
  Tape* t = x.tape;
  const Array& xv = t->val(x);
  Array out = xv;
  for (auto& v : out.data) v = f(v);
  Value y = t->push(std::move(out), nullptr);
  t->set_backward(y.id, [t, x, y, dfdx]() {
    const Array& xv = t->val(x);
    const Array& gy = t->grad_slot(y.id);
    Array gx(xv.shape);
    for (std::size_t i = 0; i < xv.numel(); ++i)
      gx.data[i] = gy.data[i] * dfdx(xv.data[i], t->val(y).data[i]);
    accumulate(t, x.id, gx);
  });
  return y;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

inline Value add(Value a, Value b) {
  Tape* t = a.tape;
  require_same_shape(t->val(a), t->val(b), "add");
  Array out = t->val(a);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += t->val(b).data[i];
  Value y = t->push(std::move(out), nullptr);
  t->set_backward(y.id, [t, a, b, y]() {
    const Array& gy = t->grad_slot(y.id);
    detail::accumulate(t, a.id, gy);
    detail::accumulate(t, b.id, gy);
  });
  return y;
}

inline Value sub(Value a, Value b) {
  Tape* t = a.tape;
  require_same_shape(t->val(a), t->val(b), "sub");
  Array out = t->val(a);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] -= t->val(b).data[i];
  Value y = t->push(std::move(out), nullptr);
  t->set_backward(y.id, [t, a, b, y]() {
    const Array& gy = t->grad_slot(y.id);
    detail::accumulate(t, a.id, gy);
    Array gb = gy;
    for (auto& v : gb.data) v = -v;
    detail::accumulate(t, b.id, gb);
  });
  return y;
}

inline Value mul(Value a, Value b) {
  Tape* t = a.tape;
  require_same_shape(t->val(a), t->val(b), "mul");
  Array out = t->val(a);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] *= t->val(b).data[i];
  Value y = t->push(std::move(out), nullptr);
  t->set_backward(y.id, [t, a, b, y]() {
    const Array& gy = t->grad_slot(y.id);
    const Array& av = t->val(a);
    const Array& bv = t->val(b);
    Array ga(av.shape), gb(bv.shape);
    for (std::size_t i = 0; i < av.numel(); ++i) {
      ga.data[i] = gy.data[i] * bv.data[i];
      gb.data[i] = gy.data[i] * av.data[i];
    }
    detail::accumulate(t, a.id, ga);
    detail::accumulate(t, b.id, gb);
  });
  return y;
}

inline Value div(Value a, Value b) {
  Tape* t = a.tape;
  require_same_shape(t->val(a), t->val(b), "div");
  Array out = t->val(a);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] /= t->val(b).data[i];
  Value y = t->push(std::move(out), nullptr);
  t->set_backward(y.id, [t, a, b, y]() {
    const Array& gy = t->grad_slot(y.id);
    const Array& av = t->val(a);
    const Array& bv = t->val(b);
    Array ga(av.shape), gb(bv.shape);
    for (std::size_t i = 0; i < av.numel(); ++i) {
      ga.data[i] = gy.data[i] / bv.data[i];
      gb.data[i] = -gy.data[i] * av.data[i] / (bv.data[i] * bv.data[i]);
    }
    detail::accumulate(t, a.id, ga);
    detail::accumulate(t, b.id, gb);
  });
  return y;
}

inline Value mul_scalar(Value a, double c) {
  Tape* t = a.tape;
  Array out = t->val(a);
  for (auto& v : out.data) v *= c;
  Value y = t->push(std::move(out), nullptr);
  t->set_backward(y.id, [t, a, y, c]() {
    const Array& gy = t->grad_slot(y.id);
    Array ga = gy;
    for (auto& v : ga.data) v *= c;
    detail::accumulate(t, a.id, ga);
  });
  return y;
}

inline Value add_scalar(Value a, double c) {
  Tape* t = a.tape;
  Array out = t->val(a);
  for (auto& v : out.data) v += c;
  Value y = t->push(std::move(out), nullptr);
  t->set_backward(y.id, [t, a, y]() {
    detail::accumulate(t, a.id, t->grad_slot(y.id));
  });
  return y;
}

inline Value neg(Value a) { return mul_scalar(a, -1.0); }

// Multiply / divide an array by a scalar Value (broadcast).
inline Value scale_by(Value a, Value s) {
  Tape* t = a.tape;
  if (!t->val(s).is_scalar())
    throw std::invalid_argument("scale_by: scale must be scalar");
  const double sv = t->val(s).data[0];
  Array out = t->val(a);
  for (auto& v : out.data) v *= sv;
  Value y = t->push(std::move(out), nullptr);
  t->set_backward(y.id, [t, a, s, y]() {
    const Array& gy = t->grad_slot(y.id);
    const Array& av = t->val(a);
    const double sv = t->val(s).data[0];
    Array ga(av.shape);
    double gs = 0.0;
    for (std::size_t i = 0; i < av.numel(); ++i) {
      ga.data[i] = gy.data[i] * sv;
      gs += gy.data[i] * av.data[i];
    }
    detail::accumulate(t, a.id, ga);
    detail::accumulate(t, s.id, Array::scalar(gs));
  });
  return y;
}

inline Value div_by(Value a, Value s) {
  Tape* t = a.tape;
  Value inv = t->push(Array::scalar(1.0 / t->val(s).data[0]), nullptr);
  t->set_backward(inv.id, [t, s, inv]() {
    const double sv = t->val(s).data[0];
    const double g = t->grad_slot(inv.id).data[0];
    detail::accumulate(t, s.id, Array::scalar(-g / (sv * sv)));
  });
  return scale_by(a, inv);
}

inline Value exp_v(Value x) {
  return detail::unary(x, [](double v) { return std::exp(v); },
                       [](double, double yv) { return yv; });
}
inline Value log_v(Value x) {
  return detail::unary(x, [](double v) { return std::log(v); },
                       [](double xv, double) { return 1.0 / xv; });
}
inline Value tanh_v(Value x) {
  return detail::unary(x, [](double v) { return std::tanh(v); },
                       [](double, double yv) { return 1.0 - yv * yv; });
}
inline Value sigmoid_v(Value x) {
  return detail::unary(x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
                       [](double, double yv) { return yv * (1.0 - yv); });
}
inline Value square(Value x) {
  return detail::unary(x, [](double v) { return v * v; },
                       [](double xv, double) { return 2.0 * xv; });
}

// Exact (erf) GELU.
inline Value gelu(Value x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  return detail::unary(
      x,
      [=](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [=](double xv, double) {
        const double cdf = 0.5 * (1.0 + std::erf(xv * inv_sqrt2));
        return cdf + xv * inv_sqrt2pi * std::exp(-0.5 * xv * xv);
      });
}

// Pass-through gradient strictly inside [lo, hi], zero outside.
inline Value clamp_v(Value x, double lo, double hi) {
  Tape* t = x.tape;
  Array out = t->val(x);
  for (auto& v : out.data) v = std::min(hi, std::max(lo, v));
  Value y = t->push(std::move(out), nullptr);
  t->set_backward(y.id, [t, x, y, lo, hi]() {
    const Array& xv = t->val(x);
    const Array& gy = t->grad_slot(y.id);
    Array gx(xv.shape);
    for (std::size_t i = 0; i < xv.numel(); ++i)
      gx.data[i] = (xv.data[i] > lo && xv.data[i] < hi) ? gy.data[i] : 0.0;
    detail::accumulate(t, x.id, gx);
  });
  return y;
}

// Forward identity; backward contributes zero upstream.
inline Value stop_gradient(Value x) {
  Tape* t = x.tape;
  return t->push(t->val(x), nullptr);
}

// ---------------------------------------------------------------------------
// linear algebra and shape ops
// ---------------------------------------------------------------------------

inline Value matmul(Value a, Value b) {
  Tape* t = a.tape;
  const Array& av = t->val(a);
  const Array& bv = t->val(b);
  if (av.cols() != bv.rows())
    throw std::invalid_argument("matmul: shape mismatch " + av.shape_str() +
                                " vs " + bv.shape_str());
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  Array out = av.rank() == 1 && bv.rank() == 2 ? Array({n}) : Array({m, n});
  // ikj order keeps the inner loop contiguous.
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av.data[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = &bv.data[p * n];
      double* orow = &out.data[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  Value y = t->push(std::move(out), nullptr);
  t->set_backward(y.id, [t, a, b, y, m, k, n]() {
    const Array& gy = t->grad_slot(y.id);
    const Array& av = t->val(a);
    const Array& bv = t->val(b);
    Array ga(av.shape), gb(bv.shape);
    // ga = gy . b^T
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double g = gy.data[i * n + j];
        if (g == 0.0) continue;
        const double* brow = &bv.data[0] + j;
        for (std::size_t p = 0; p < k; ++p)
          ga.data[i * k + p] += g * brow[p * n];
      }
    // gb = a^T . gy
    for (std::size_t p = 0; p < k; ++p)
      for (std::size_t i = 0; i < m; ++i) {
        const double aip = av.data[i * k + p];
        if (aip == 0.0) continue;
        const double* grow = &gy.data[i * n];
        double* gbrow = &gb.data[p * n];
        for (std::size_t j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
      }
    detail::accumulate(t, a.id, ga);
    detail::accumulate(t, b.id, gb);
  });
  return y;
}

inline Value transpose(Value a) {
  Tape* t = a.tape;
  const Array& av = t->val(a);
  const std::size_t m = av.rows(), n = av.cols();
  Array out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.data[j * m + i] = av.data[i * n + j];
  Value y = t->push(std::move(out), nullptr);
  t->set_backward(y.id, [t, a, y, m, n]() {
    const Array& gy = t->grad_slot(y.id);
    Array ga({m, n});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j)
        ga.data[i * n + j] = gy.data[j * m + i];
    detail::accumulate(t, a.id, ga);
  });
  return y;
}

// Adds row vector v (length n) to every row of a (m x n).
inline Value add_rowvec(Value a, Value v) {
  Tape* t = a.tape;
  const Array& av = t->val(a);
  const Array& vv = t->val(v);
  if (av.cols() != vv.numel())
    throw std::invalid_argument("add_rowvec: shape mismatch " +
                                av.shape_str() + " vs " + vv.shape_str());
  const std::size_t m = av.rows(), n = av.cols();
  Array out = av;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.data[i * n + j] += vv.data[j];
  Value y = t->push(std::move(out), nullptr);
  t->set_backward(y.id, [t, a, v, y, m, n]() {
    const Array& gy = t->grad_slot(y.id);
    detail::accumulate(t, a.id, gy);
    Array gv(t->val(v).shape);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) gv.data[j] += gy.data[i * n + j];
    detail::accumulate(t, v.id, gv);
  });
  return y;
}

// Multiplies column j of a by v[j].
inline Value scale_cols(Value a, Value v) {
  Tape* t = a.tape;
  const Array& av = t->val(a);
  const Array& vv = t->val(v);
  if (av.cols() != vv.numel())
    throw std::invalid_argument("scale_cols: shape mismatch " +
                                av.shape_str() + " vs " + vv.shape_str());
  const std::size_t m = av.rows(), n = av.cols();
  Array out = av;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.data[i * n + j] *= vv.data[j];
  Value y = t->push(std::move(out), nullptr);
  t->set_backward(y.id, [t, a, v, y, m, n]() {
    const Array& gy = t->grad_slot(y.id);
    const Array& av = t->val(a);
    const Array& vv = t->val(v);
    Array ga(av.shape), gv(vv.shape);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        ga.data[i * n + j] = gy.data[i * n + j] * vv.data[j];
        gv.data[j] += gy.data[i * n + j] * av.data[i * n + j];
      }
    detail::accumulate(t, a.id, ga);
    detail::accumulate(t, v.id, gv);
  });
  return y;
}

inline Value reshape(Value a, std::vector<std::size_t> shape) {
  Tape* t = a.tape;
  const Array& av = t->val(a);
  if (Array::count(shape) != av.numel())
    throw std::invalid_argument("reshape: element count mismatch");
  Array out = av;
  out.shape = shape;
  Value y = t->push(std::move(out), nullptr);
  t->set_backward(y.id, [t, a, y]() {
    Array g = t->grad_slot(y.id);
    g.shape = t->val(a).shape;
    detail::accumulate(t, a.id, g);
  });
  return y;
}

inline Value concat_cols(Value a, Value b) {
  Tape* t = a.tape;
  const Array& av = t->val(a);
  const Array& bv = t->val(b);
  if (av.rows() != bv.rows())
    throw std::invalid_argument("concat_cols: row mismatch " + av.shape_str() +
                                " vs " + bv.shape_str());
  const std::size_t m = av.rows(), na = av.cols(), nb = bv.cols();
  const bool vec = av.rank() == 1 && bv.rank() == 1;
  Array out = vec ? Array({na + nb}) : Array({m, na + nb});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < na; ++j)
      out.data[i * (na + nb) + j] = av.data[i * na + j];
    for (std::size_t j = 0; j < nb; ++j)
      out.data[i * (na + nb) + na + j] = bv.data[i * nb + j];
  }
  Value y = t->push(std::move(out), nullptr);
  t->set_backward(y.id, [t, a, b, y, m, na, nb]() {
    const Array& gy = t->grad_slot(y.id);
    Array ga(t->val(a).shape), gb(t->val(b).shape);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < na; ++j)
        ga.data[i * na + j] = gy.data[i * (na + nb) + j];
      for (std::size_t j = 0; j < nb; ++j)
        gb.data[i * nb + j] = gy.data[i * (na + nb) + na + j];
    }
    detail::accumulate(t, a.id, ga);
    detail::accumulate(t, b.id, gb);
  });
  return y;
}

inline Value concat_rows(Value a, Value b) {
  Tape* t = a.tape;
  const Array& av = t->val(a);
  const Array& bv = t->val(b);
  if (av.cols() != bv.cols())
    throw std::invalid_argument("concat_rows: column mismatch " +
                                av.shape_str() + " vs " + bv.shape_str());
  const std::size_t ma = av.rows(), mb = bv.rows(), n = av.cols();
  Array out({ma + mb, n});
  std::copy(av.data.begin(), av.data.end(), out.data.begin());
  std::copy(bv.data.begin(), bv.data.end(), out.data.begin() + ma * n);
  Value y = t->push(std::move(out), nullptr);
  t->set_backward(y.id, [t, a, b, y, ma, mb, n]() {
    const Array& gy = t->grad_slot(y.id);
    Array ga(t->val(a).shape), gb(t->val(b).shape);
    std::copy(gy.data.begin(), gy.data.begin() + ma * n, ga.data.begin());
    std::copy(gy.data.begin() + ma * n, gy.data.end(), gb.data.begin());
    detail::accumulate(t, a.id, ga);
    detail::accumulate(t, b.id, gb);
  });
  return y;
}

inline Value slice_cols(Value a, std::size_t j0, std::size_t j1) {
  Tape* t = a.tape;
  const Array& av = t->val(a);
  const std::size_t m = av.rows(), n = av.cols(), w = j1 - j0;
  if (j1 > n || j0 >= j1)
    throw std::invalid_argument("slice_cols: bad range");
  Array out = av.rank() == 1 ? Array({w}) : Array({m, w});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < w; ++j)
      out.data[i * w + j] = av.data[i * n + j0 + j];
  Value y = t->push(std::move(out), nullptr);
  t->set_backward(y.id, [t, a, y, m, n, j0, w]() {
    const Array& gy = t->grad_slot(y.id);
    Array ga(t->val(a).shape);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j)
        ga.data[i * n + j0 + j] = gy.data[i * w + j];
    detail::accumulate(t, a.id, ga);
  });
  return y;
}

inline Value slice_rows(Value a, std::size_t r0, std::size_t r1) {
  Tape* t = a.tape;
  const Array& av = t->val(a);
  const std::size_t m = av.rows(), n = av.cols(), h = r1 - r0;
  if (r1 > m || r0 >= r1)
    throw std::invalid_argument("slice_rows: bad range");
  Array out({h, n});
  std::copy(av.data.begin() + r0 * n, av.data.begin() + r1 * n,
            out.data.begin());
  Value y = t->push(std::move(out), nullptr);
  t->set_backward(y.id, [t, a, y, n, r0, h]() {
    const Array& gy = t->grad_slot(y.id);
    Array ga(t->val(a).shape);
    std::copy(gy.data.begin(), gy.data.end(), ga.data.begin() + r0 * n);
    detail::accumulate(t, a.id, ga);
  });
  return y;
}

// Row r of a matrix as a rank-1 value.
inline Value row(Value a, std::size_t r) {
  Tape* t = a.tape;
  const Array& av = t->val(a);
  const std::size_t n = av.cols();
  if (r >= av.rows()) throw std::invalid_argument("row: index out of range");
  Array out({n});
  std::copy(av.data.begin() + r * n, av.data.begin() + (r + 1) * n,
            out.data.begin());
  Value y = t->push(std::move(out), nullptr);
  t->set_backward(y.id, [t, a, y, r, n]() {
    const Array& gy = t->grad_slot(y.id);
    Array ga(t->val(a).shape);
    for (std::size_t j = 0; j < n; ++j) ga.data[r * n + j] = gy.data[j];
    detail::accumulate(t, a.id, ga);
  });
  return y;
}

// Rows of a matrix selected by index (duplicates allowed); also the
// embedding-lookup primitive.
inline Value gather_rows(Value a, std::vector<std::size_t> idx) {
  Tape* t = a.tape;
  const Array& av = t->val(a);
  const std::size_t n = av.cols();
  Array out({idx.size(), n});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= av.rows())
      throw std::invalid_argument("gather_rows: index out of range");
    std::copy(av.data.begin() + idx[r] * n, av.data.begin() + (idx[r] + 1) * n,
              out.data.begin() + r * n);
  }
  Value y = t->push(std::move(out), nullptr);
  t->set_backward(y.id, [t, a, y, idx = std::move(idx), n]() {
    const Array& gy = t->grad_slot(y.id);
    Array ga(t->val(a).shape);
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t j = 0; j < n; ++j)
        ga.data[idx[r] * n + j] += gy.data[r * n + j];
    detail::accumulate(t, a.id, ga);
  });
  return y;
}

// Flat-index element gather into a rank-1 value.
inline Value gather(Value a, std::vector<std::size_t> idx) {
  Tape* t = a.tape;
  const Array& av = t->val(a);
  Array out({idx.size()});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= av.numel())
      throw std::invalid_argument("gather: index out of range");
    out.data[i] = av.data[idx[i]];
  }
  Value y = t->push(std::move(out), nullptr);
  t->set_backward(y.id, [t, a, y, idx = std::move(idx)]() {
    const Array& gy = t->grad_slot(y.id);
    Array ga(t->val(a).shape);
    for (std::size_t i = 0; i < idx.size(); ++i)
      ga.data[idx[i]] += gy.data[i];
    detail::accumulate(t, a.id, ga);
  });
  return y;
}

// Single element as a scalar value.
inline Value pick(Value a, std::size_t index) {
  Tape* t = a.tape;
  const Array& av = t->val(a);
  if (index >= av.numel()) throw std::invalid_argument("pick: out of range");
  Value y = t->push(Array::scalar(av.data[index]), nullptr);
  t->set_backward(y.id, [t, a, y, index]() {
    Array ga(t->val(a).shape);
    ga.data[index] = t->grad_slot(y.id).data[0];
    detail::accumulate(t, a.id, ga);
  });
  return y;
}

// ---------------------------------------------------------------------------
// reductions and normalizations
// ---------------------------------------------------------------------------

inline Value sum_all(Value a) {
  Tape* t = a.tape;
  const Array& av = t->val(a);
  double s = 0.0;
  for (double v : av.data) s += v;
  Value y = t->push(Array::scalar(s), nullptr);
  t->set_backward(y.id, [t, a, y]() {
    const double g = t->grad_slot(y.id).data[0];
    Array ga(t->val(a).shape);
    for (auto& v : ga.data) v = g;
    detail::accumulate(t, a.id, ga);
  });
  return y;
}

inline Value mean_all(Value a) {
  return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a.tape->val(a).numel()));
}

// Softmax along each row (axis=1) or each column (axis=0); rank-1 input is
// one row. Max-shifted before exponentiation.
inline Value softmax(Value a, int axis = 1) {
  if (axis == 0) return transpose(softmax(transpose(a), 1));
  Tape* t = a.tape;
  const Array& av = t->val(a);
  const std::size_t m = av.rows(), n = av.cols();
  Array out = av;
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, av.data[i * n + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      out.data[i * n + j] = std::exp(av.data[i * n + j] - mx);
      s += out.data[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out.data[i * n + j] /= s;
  }
  Value y = t->push(std::move(out), nullptr);
  t->set_backward(y.id, [t, a, y, m, n]() {
    const Array& gy = t->grad_slot(y.id);
    const Array& yv = t->val(y);
    Array ga(t->val(a).shape);
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j)
        dot += gy.data[i * n + j] * yv.data[i * n + j];
      for (std::size_t j = 0; j < n; ++j)
        ga.data[i * n + j] = yv.data[i * n + j] * (gy.data[i * n + j] - dot);
    }
    detail::accumulate(t, a.id, ga);
  });
  return y;
}

inline Value log_softmax(Value a, int axis = 1) {
  if (axis == 0) return transpose(log_softmax(transpose(a), 1));
  Tape* t = a.tape;
  const Array& av = t->val(a);
  const std::size_t m = av.rows(), n = av.cols();
  Array out = av;
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, av.data[i * n + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(av.data[i * n + j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < n; ++j) out.data[i * n + j] = av.data[i * n + j] - lse;
  }
  Value y = t->push(std::move(out), nullptr);
  t->set_backward(y.id, [t, a, y, m, n]() {
    const Array& gy = t->grad_slot(y.id);
    const Array& yv = t->val(y);
    Array ga(t->val(a).shape);
    for (std::size_t i = 0; i < m; ++i) {
      double gsum = 0.0;
      for (std::size_t j = 0; j < n; ++j) gsum += gy.data[i * n + j];
      for (std::size_t j = 0; j < n; ++j)
        ga.data[i * n + j] =
            gy.data[i * n + j] - std::exp(yv.data[i * n + j]) * gsum;
    }
    detail::accumulate(t, a.id, ga);
  });
  return y;
}

// Per-row layer normalization without affine terms: (x - mean) / sqrt(var + eps).
inline Value layer_norm(Value a, double eps = 1e-5) {
  Tape* t = a.tape;
  const Array& av = t->val(a);
  const std::size_t m = av.rows(), n = av.cols();
  Array out = av;
  std::vector<double> inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += av.data[i * n + j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = av.data[i * n + j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j)
      out.data[i * n + j] = (av.data[i * n + j] - mean) * inv_std[i];
  }
  Value y = t->push(std::move(out), nullptr);
  t->set_backward(y.id, [t, a, y, m, n, inv_std]() {
    const Array& gy = t->grad_slot(y.id);
    const Array& yv = t->val(y);
    Array ga(t->val(a).shape);
    const double dn = static_cast<double>(n);
    for (std::size_t i = 0; i < m; ++i) {
      double gsum = 0.0, gysum = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        gsum += gy.data[i * n + j];
        gysum += gy.data[i * n + j] * yv.data[i * n + j];
      }
      for (std::size_t j = 0; j < n; ++j)
        ga.data[i * n + j] =
            inv_std[i] * (gy.data[i * n + j] - gsum / dn -
                          yv.data[i * n + j] * gysum / dn);
    }
    detail::accumulate(t, a.id, ga);
  });
  return y;
}

// ---------------------------------------------------------------------------
// composed helpers
// ---------------------------------------------------------------------------

inline Value affine(Value x, Value w, Value b) {
  return add_rowvec(matmul(x, w), b);
}

// Scaled dot-product attention with an additive mask (use -inf above the
// diagonal for causal decoding; exp(-inf) underflows to exact zero so later
// tokens cannot perturb earlier outputs even bitwise).
inline Value masked_attention(Value q, Value k, Value v, Value mask,
                              double scale) {
  Value scores = mul_scalar(matmul(q, transpose(k)), scale);
  return matmul(softmax(add(scores, mask), 1), v);
}

inline Value operator+(Value a, Value b) { return add(a, b); }
inline Value operator-(Value a, Value b) { return sub(a, b); }
inline Value operator*(Value a, Value b) { return mul(a, b); }
inline Value operator/(Value a, Value b) { return div(a, b); }

// ---------------------------------------------------------------------------
// gradient verification
// ---------------------------------------------------------------------------

// Max over coordinates of |analytic - central difference| / max(1, |central|).
// f must be a pure function of the given leaves (it may capture constants).
inline double grad_check(
    const std::function<Value(Tape&, const std::vector<Value>&)>& f,
    const std::vector<Array>& inputs, double step = 1e-5) {
  auto eval = [&](const std::vector<Array>& xs) {
    Tape tape;
    std::vector<Value> leaves;
    leaves.reserve(xs.size());
    for (const auto& x : xs) leaves.push_back(tape.leaf(x));
    Value out = f(tape, leaves);
    const double v = tape.val(out).value();
    if (!std::isfinite(v))
      throw std::runtime_error("grad_check: non-finite objective value");
    return v;
  };

  Tape tape;
  std::vector<Value> leaves;
  leaves.reserve(inputs.size());
  for (const auto& x : inputs) leaves.push_back(tape.leaf(x));
  Value out = f(tape, leaves);
  tape.backward(out);

  double worst = 0.0;
  std::vector<Array> work = inputs;
  for (std::size_t a = 0; a < inputs.size(); ++a) {
    const Array& analytic = tape.grad(leaves[a]);
    for (std::size_t i = 0; i < work[a].numel(); ++i) {
      const double keep = work[a].data[i];
      work[a].data[i] = keep + step;
      double fp, fm;
      try {
        fp = eval(work);
        work[a].data[i] = keep - step;
        fm = eval(work);
      } catch (const std::runtime_error& e) {
        throw std::runtime_error(std::string(e.what()) + " at input " +
                                 std::to_string(a) + " coordinate " +
                                 std::to_string(i));
      }
      work[a].data[i] = keep;
      const double numeric = (fp - fm) / (2.0 * step);
      const double err = std::abs(analytic.data[i] - numeric) /
                         std::max(1.0, std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace nsgrid
