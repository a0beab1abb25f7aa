#pragma once

// Chunked action generator: a causal transformer over solver tokens with a
// head emitting H-step action-chunk means plus a learned per-dimension
// log-std (shared across time within a chunk). Two forward paths exist on
// purpose: a plain one for rollouts and evaluation and a tape one for
// training; they apply the same operations in the same order and are held
// together by an equality test.

#include <cmath>
#include <stdexcept>
#include <vector>

#include "nsgrid/array.hpp"
#include "nsgrid/rng.hpp"
#include "nsgrid/tape.hpp"

namespace nsgrid {

inline constexpr double kLogStdMin = -5.0;
inline constexpr double kLogStdMax = 2.0;
inline constexpr double kLog2Pi = 1.8378770664093454836;

struct SolverLayerParams {
  Array ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, mlp_w1, mlp_b1, mlp_w2,
      mlp_b2;
};

struct SolverParams {
  int d_model = 64;
  int n_heads = 4;
  int horizon = 4;
  int a_dim = 4;
  Array in_w, in_b;  // e_dim -> d_model
  std::vector<SolverLayerParams> layers;
  Array lnf_g, lnf_b;
  Array head_w, head_b;  // d_model -> horizon * a_dim
  Array log_std;         // a_dim, clamped to [kLogStdMin, kLogStdMax]

  static SolverParams init(int e_dim, int d_model, int n_layers, int n_heads,
                           int horizon, int a_dim, double init_log_std,
                           Rng& rng) {
    if (d_model % n_heads != 0)
      throw std::invalid_argument("solver: d_model must divide into heads");
    SolverParams p;
    p.d_model = d_model;
    p.n_heads = n_heads;
    p.horizon = horizon;
    p.a_dim = a_dim;
    auto gs = [&rng](std::size_t r, std::size_t c) {
      return Array::gaussian({r, c}, rng,
                             1.0 / std::sqrt(static_cast<double>(r)));
    };
    const auto d = static_cast<std::size_t>(d_model);
    p.in_w = gs(static_cast<std::size_t>(e_dim), d);
    p.in_b = Array({d});
    for (int l = 0; l < n_layers; ++l) {
      SolverLayerParams layer;
      layer.ln1_g = Array::full({d}, 1.0);
      layer.ln1_b = Array({d});
      layer.wq = gs(d, d);
      layer.wk = gs(d, d);
      layer.wv = gs(d, d);
      layer.wo = gs(d, d);
      layer.ln2_g = Array::full({d}, 1.0);
      layer.ln2_b = Array({d});
      layer.mlp_w1 = gs(d, 4 * d);
      layer.mlp_b1 = Array({4 * d});
      layer.mlp_w2 = gs(4 * d, d);
      layer.mlp_b2 = Array({d});
      p.layers.push_back(std::move(layer));
    }
    p.lnf_g = Array::full({d}, 1.0);
    p.lnf_b = Array({d});
    p.head_w = gs(d, static_cast<std::size_t>(horizon * a_dim));
    p.head_b = Array({static_cast<std::size_t>(horizon * a_dim)});
    p.log_std = Array::full({static_cast<std::size_t>(a_dim)}, init_log_std);
    return p;
  }

  template <typename F>
  void visit_impl(F&& f) const {
    auto& self = const_cast<SolverParams&>(*this);
    f("solver.in_w", self.in_w);
    f("solver.in_b", self.in_b);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      auto& L = self.layers[l];
      const std::string prefix = "solver.layer" + std::to_string(l) + ".";
      f(prefix + "ln1_g", L.ln1_g);
      f(prefix + "ln1_b", L.ln1_b);
      f(prefix + "wq", L.wq);
      f(prefix + "wk", L.wk);
      f(prefix + "wv", L.wv);
      f(prefix + "wo", L.wo);
      f(prefix + "ln2_g", L.ln2_g);
      f(prefix + "ln2_b", L.ln2_b);
      f(prefix + "mlp_w1", L.mlp_w1);
      f(prefix + "mlp_b1", L.mlp_b1);
      f(prefix + "mlp_w2", L.mlp_w2);
      f(prefix + "mlp_b2", L.mlp_b2);
    }
    f("solver.lnf_g", self.lnf_g);
    f("solver.lnf_b", self.lnf_b);
    f("solver.head_w", self.head_w);
    f("solver.head_b", self.head_b);
    f("solver.log_std", self.log_std);
  }
  template <typename F>
  void visit(F&& f) {
    visit_impl(std::forward<F>(f));
  }
  template <typename F>
  void visit(F&& f) const {
    visit_impl(std::forward<F>(f));
  }
};

struct ChunkDistribution {
  Array mean;    // horizon x a_dim
  Array stddev;  // a_dim, shared across the chunk's rows
};

// ---------------------------------------------------------------------------
// shared building blocks
// ---------------------------------------------------------------------------

inline Array causal_mask(std::size_t T) {
  Array m({T, T});
  const double ninf = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < T; ++i)
    for (std::size_t j = i + 1; j < T; ++j) m.at(i, j) = ninf;
  return m;
}

namespace plainops {

inline Array matmul(const Array& a, const Array& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Array out = a.rank() == 1 ? Array({n}) : Array({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a.data[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = &b.data[p * n];
      double* orow = &out.data[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  return out;
}

inline Array add_rowvec(Array a, const Array& v) {
  const std::size_t m = a.rows(), n = a.cols();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) a.data[i * n + j] += v[j];
  return a;
}

inline Array layer_norm_affine(const Array& x, const Array& g, const Array& b,
                               double eps = 1e-5) {
  const std::size_t m = x.rows(), n = x.cols();
  Array out = x;
  for (std::size_t i = 0; i < m; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += x.data[i * n + j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = x.data[i * n + j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j)
      out.data[i * n + j] = (x.data[i * n + j] - mean) * inv * g[j] + b[j];
  }
  return out;
}

inline Array gelu(Array x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  for (auto& v : x.data) v = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
  return x;
}

inline Array softmax_rows(Array x) {
  const std::size_t m = x.rows(), n = x.cols();
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, x.data[i * n + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      x.data[i * n + j] = std::exp(x.data[i * n + j] - mx);
      s += x.data[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) x.data[i * n + j] /= s;
  }
  return x;
}

inline Array slice_cols(const Array& a, std::size_t j0, std::size_t j1) {
  const std::size_t m = a.rows(), n = a.cols(), w = j1 - j0;
  Array out({m, w});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < w; ++j)
      out.data[i * w + j] = a.data[i * n + j0 + j];
  return out;
}

inline Array transpose(const Array& a) {
  const std::size_t m = a.rows(), n = a.cols();
  Array out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.data[j * m + i] = a.data[i * n + j];
  return out;
}

inline Array add(Array a, const Array& b) {
  for (std::size_t i = 0; i < a.numel(); ++i) a.data[i] += b.data[i];
  return a;
}

}  // namespace plainops

// ---------------------------------------------------------------------------
// plain forward (rollouts, evaluation)
// ---------------------------------------------------------------------------

// Head outputs at every position: T x (horizon * a_dim).
inline Array solver_forward(const SolverParams& p, const Array& e_tokens) {
  using namespace plainops;
  const std::size_t T = e_tokens.rows();
  if (T == 0) throw std::invalid_argument("solver_forward: empty history");
  const int hd = p.d_model / p.n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const Array mask = causal_mask(T);

  Array x = add_rowvec(matmul(e_tokens, p.in_w), p.in_b);
  for (const auto& L : p.layers) {
    const Array xn = layer_norm_affine(x, L.ln1_g, L.ln1_b);
    const Array q = matmul(xn, L.wq), k = matmul(xn, L.wk),
                v = matmul(xn, L.wv);
    Array heads({T, static_cast<std::size_t>(p.d_model)});
    for (int h = 0; h < p.n_heads; ++h) {
      const std::size_t j0 = static_cast<std::size_t>(h * hd),
                        j1 = static_cast<std::size_t>((h + 1) * hd);
      const Array qh = slice_cols(q, j0, j1), kh = slice_cols(k, j0, j1),
                  vh = slice_cols(v, j0, j1);
      Array s = matmul(qh, transpose(kh));
      for (std::size_t i = 0; i < s.numel(); ++i) s.data[i] *= scale;
      const Array a = softmax_rows(add(std::move(s), mask));
      const Array oh = matmul(a, vh);
      for (std::size_t i = 0; i < T; ++i)
        for (std::size_t j = 0; j < static_cast<std::size_t>(hd); ++j)
          heads.at(i, j0 + j) = oh.at(i, j);
    }
    x = add(std::move(x), matmul(heads, L.wo));
    const Array xn2 = layer_norm_affine(x, L.ln2_g, L.ln2_b);
    x = add(std::move(x),
            add_rowvec(matmul(gelu(add_rowvec(matmul(xn2, L.mlp_w1), L.mlp_b1)),
                              L.mlp_w2),
                       L.mlp_b2));
  }
  const Array xf = layer_norm_affine(x, p.lnf_g, p.lnf_b);
  return add_rowvec(matmul(xf, p.head_w), p.head_b);
}

inline Array chunk_std(const SolverParams& p) {
  Array s = p.log_std;
  for (auto& v : s.data)
    v = std::exp(std::min(kLogStdMax, std::max(kLogStdMin, v)));
  return s;
}

// Distribution at the last history position.
inline ChunkDistribution chunk_dist(const SolverParams& p,
                                    const Array& e_tokens) {
  const Array out = solver_forward(p, e_tokens);
  const std::size_t T = out.rows(), w = out.cols();
  ChunkDistribution d;
  d.mean = Array({static_cast<std::size_t>(p.horizon),
                  static_cast<std::size_t>(p.a_dim)});
  for (std::size_t j = 0; j < w; ++j) d.mean.data[j] = out.at(T - 1, j);
  d.stddev = chunk_std(p);
  return d;
}

inline Array sample_chunk(const ChunkDistribution& d, Rng& rng) {
  Array a = d.mean;
  const std::size_t cols = d.mean.cols();
  for (std::size_t i = 0; i < a.numel(); ++i)
    a.data[i] += d.stddev[i % cols] * rng.normal();
  return a;
}

// Exact diagonal-normal log density of a chunk (pre-clipping).
inline double chunk_log_prob(const ChunkDistribution& d, const Array& a) {
  require_same_shape(d.mean, a, "chunk_log_prob");
  const std::size_t cols = d.mean.cols();
  double lp = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double s = d.stddev[i % cols];
    const double z = (a.data[i] - d.mean.data[i]) / s;
    lp += -0.5 * kLog2Pi - std::log(s) - 0.5 * z * z;
  }
  return lp;
}

// Closed-form KL between diagonal normals, summed over chunk coordinates.
inline double chunk_kl(const ChunkDistribution& p, const ChunkDistribution& q) {
  require_same_shape(p.mean, q.mean, "chunk_kl");
  const std::size_t cols = p.mean.cols();
  double kl = 0.0;
  for (std::size_t i = 0; i < p.mean.numel(); ++i) {
    const double sp = p.stddev[i % cols], sq = q.stddev[i % cols];
    const double dm = p.mean.data[i] - q.mean.data[i];
    kl += std::log(sq / sp) + (sp * sp + dm * dm) / (2.0 * sq * sq) - 0.5;
  }
  return kl;
}

// ---------------------------------------------------------------------------
// tape forward (training)
// ---------------------------------------------------------------------------

struct SolverRefs {
  Value in_w, in_b;
  struct Layer {
    Value ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, mlp_w1, mlp_b1, mlp_w2,
        mlp_b2;
  };
  std::vector<Layer> layers;
  Value lnf_g, lnf_b, head_w, head_b, log_std;
  int d_model = 0, n_heads = 0, horizon = 0, a_dim = 0;
};

inline SolverRefs register_solver(Tape& tape, const SolverParams& p) {
  SolverRefs r;
  r.in_w = tape.leaf(p.in_w);
  r.in_b = tape.leaf(p.in_b);
  for (const auto& L : p.layers)
    r.layers.push_back({tape.leaf(L.ln1_g), tape.leaf(L.ln1_b),
                        tape.leaf(L.wq), tape.leaf(L.wk), tape.leaf(L.wv),
                        tape.leaf(L.wo), tape.leaf(L.ln2_g), tape.leaf(L.ln2_b),
                        tape.leaf(L.mlp_w1), tape.leaf(L.mlp_b1),
                        tape.leaf(L.mlp_w2), tape.leaf(L.mlp_b2)});
  r.lnf_g = tape.leaf(p.lnf_g);
  r.lnf_b = tape.leaf(p.lnf_b);
  r.head_w = tape.leaf(p.head_w);
  r.head_b = tape.leaf(p.head_b);
  r.log_std = tape.leaf(p.log_std);
  r.d_model = p.d_model;
  r.n_heads = p.n_heads;
  r.horizon = p.horizon;
  r.a_dim = p.a_dim;
  return r;
}

inline Value layer_norm_affine_t(Value x, Value g, Value b) {
  return add_rowvec(scale_cols(layer_norm(x), g), b);
}

inline Value solver_forward_t(const SolverRefs& r, Value e_tokens) {
  Tape* t = e_tokens.tape;
  const std::size_t T = t->val(e_tokens).rows();
  const int hd = r.d_model / r.n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  Value mask = t->constant(causal_mask(T));

  Value x = add_rowvec(matmul(e_tokens, r.in_w), r.in_b);
  for (const auto& L : r.layers) {
    Value xn = layer_norm_affine_t(x, L.ln1_g, L.ln1_b);
    Value q = matmul(xn, L.wq), k = matmul(xn, L.wk), v = matmul(xn, L.wv);
    Value heads{};
    for (int h = 0; h < r.n_heads; ++h) {
      const std::size_t j0 = static_cast<std::size_t>(h * hd),
                        j1 = static_cast<std::size_t>((h + 1) * hd);
      Value qh = slice_cols(q, j0, j1), kh = slice_cols(k, j0, j1),
            vh = slice_cols(v, j0, j1);
      Value s = add(mul_scalar(matmul(qh, transpose(kh)), scale), mask);
      Value oh = matmul(softmax(s, 1), vh);
      heads = h == 0 ? oh : concat_cols(heads, oh);
    }
    x = add(x, matmul(heads, L.wo));
    Value xn2 = layer_norm_affine_t(x, L.ln2_g, L.ln2_b);
    x = add(x, add_rowvec(matmul(gelu(affine(xn2, L.mlp_w1, L.mlp_b1)),
                                 L.mlp_w2),
                          L.mlp_b2));
  }
  Value xf = layer_norm_affine_t(x, r.lnf_g, r.lnf_b);
  return affine(xf, r.head_w, r.head_b);
}

// Clamped log-std tiled to horizon * a_dim coordinates.
inline Value tiled_log_std_t(const SolverRefs& r) {
  Value cl = clamp_v(r.log_std, kLogStdMin, kLogStdMax);
  std::vector<std::size_t> idx;
  idx.reserve(static_cast<std::size_t>(r.horizon * r.a_dim));
  for (int h = 0; h < r.horizon; ++h)
    for (int j = 0; j < r.a_dim; ++j) idx.push_back(static_cast<std::size_t>(j));
  return gather(cl, idx);
}

// Log density of a recorded chunk given the mean row for that decision.
inline Value chunk_log_prob_t(Value mean_row, Value tiled_log_std,
                              const Array& chunk_flat) {
  Tape* t = mean_row.tape;
  Value diff = sub(t->constant(chunk_flat), mean_row);
  Value inv_var = exp_v(mul_scalar(tiled_log_std, -2.0));
  Value inner = add(tiled_log_std,
                    mul_scalar(mul(square(diff), inv_var), 0.5));
  return add_scalar(neg(sum_all(inner)),
                    -0.5 * kLog2Pi * static_cast<double>(chunk_flat.numel()));
}

// KL(p_theta || q) with q fixed (the BC reference), summed over coordinates.
inline Value chunk_kl_t(Value mean_row, Value tiled_log_std,
                        const Array& q_mean_flat, const Array& q_std_tiled) {
  Tape* t = mean_row.tape;
  const std::size_t n = q_mean_flat.numel();
  Array log_sq({n}), inv_2sq2({n});
  for (std::size_t i = 0; i < n; ++i) {
    log_sq[i] = std::log(q_std_tiled[i]);
    inv_2sq2[i] = 0.5 / (q_std_tiled[i] * q_std_tiled[i]);
  }
  Value dm = sub(mean_row, t->constant(q_mean_flat));
  Value var_p = exp_v(mul_scalar(tiled_log_std, 2.0));
  Value num = add(var_p, square(dm));
  Value kl = add(sub(t->constant(log_sq), tiled_log_std),
                 mul(num, t->constant(inv_2sq2)));
  return add_scalar(sum_all(kl), -0.5 * static_cast<double>(n));
}

// Masked mean-squared error between predicted chunk means and demo blocks.
inline Value masked_mse_t(Value pred, const Array& target, const Array& mask) {
  Tape* t = pred.tape;
  double mask_sum = 0.0;
  for (double v : mask.data) mask_sum += v;
  if (mask_sum <= 0.0) throw std::invalid_argument("masked_mse: empty mask");
  Value diff = sub(pred, t->constant(target));
  Value sq = mul(square(diff), t->constant(mask));
  return mul_scalar(sum_all(sq), 1.0 / mask_sum);
}

}  // namespace nsgrid
