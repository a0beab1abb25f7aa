#pragma once

// Query-conditioned visual token sparsification. The active primitive is
// embedded into a query; token relevance scores feed either a differentiable
// soft Top-K gate (training) or a hard Top-K set (inference), and the gated
// tokens fuse into one context vector.
//
// The gate threshold sits halfway between the K-th and (K+1)-th largest
// scores (the K-th itself when they tie, everything below the minimum when
// K = N) and is always treated as a constant under differentiation. Placing
// it on the boundary midpoint makes the soft gates converge to the hard
// indicator as the temperature goes to zero.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <vector>

#include "nsgrid/array.hpp"
#include "nsgrid/catalog.hpp"
#include "nsgrid/perceive.hpp"
#include "nsgrid/plan.hpp"
#include "nsgrid/rng.hpp"
#include "nsgrid/tape.hpp"

namespace nsgrid {

struct SparsifierParams {
  Array op_emb;   // |ops| x e_op
  Array obj_emb;  // (catalog size + 1) x e_obj; row 0 is the null slot
  Array q_w;      // (e_op + e_obj) x d_z
  Array q_b;      // d_z
  Array w_k;      // d_psi x d_z
  Array w_v;      // d_psi x d_z
  double tau = 0.1;
  int K = 8;

  static SparsifierParams init(int d_psi, int d_z, int e_op, int e_obj, int K,
                               double tau, Rng& rng) {
    SparsifierParams p;
    const auto gs = [&rng](std::size_t r, std::size_t c) {
      return Array::gaussian({r, c}, rng,
                             1.0 / std::sqrt(static_cast<double>(r)));
    };
    p.op_emb = gs(kNumPrimitiveOps, static_cast<std::size_t>(e_op));
    p.obj_emb = gs(catalog().size() + 1, static_cast<std::size_t>(e_obj));
    p.q_w = gs(static_cast<std::size_t>(e_op + e_obj),
               static_cast<std::size_t>(d_z));
    p.q_b = Array({static_cast<std::size_t>(d_z)});
    p.w_k = gs(static_cast<std::size_t>(d_psi), static_cast<std::size_t>(d_z));
    p.w_v = gs(static_cast<std::size_t>(d_psi), static_cast<std::size_t>(d_z));
    p.tau = tau;
    p.K = K;
    return p;
  }

  int d_z() const { return static_cast<int>(q_b.numel()); }

  template <typename F>
  void visit(F&& f) {
    f("sparsifier.op_emb", op_emb);
    f("sparsifier.obj_emb", obj_emb);
    f("sparsifier.q_w", q_w);
    f("sparsifier.q_b", q_b);
    f("sparsifier.w_k", w_k);
    f("sparsifier.w_v", w_v);
  }
  template <typename F>
  void visit(F&& f) const {
    f("sparsifier.op_emb", op_emb);
    f("sparsifier.obj_emb", obj_emb);
    f("sparsifier.q_w", q_w);
    f("sparsifier.q_b", q_b);
    f("sparsifier.w_k", w_k);
    f("sparsifier.w_v", w_v);
  }
};

namespace detail {

inline Array normalized(Array v) {
  double n = 0.0;
  for (double x : v.data) n += x * x;
  n = std::sqrt(n);
  if (n > 0.0)
    for (auto& x : v.data) x /= n;
  return v;
}

// Mean content direction of an entity (containers and devices average their
// two state codes).
inline Array entity_direction(const Featurizer& f, std::size_t cat) {
  const auto& def = catalog()[cat];
  Array dir = f.content_direction(entity_code_base(cat));
  if (def.role == EntityRole::kContainer || def.role == EntityRole::kDevice) {
    const Array other = f.content_direction(entity_code_base(cat) + 1);
    for (std::size_t i = 0; i < dir.numel(); ++i)
      dir[i] = 0.5 * (dir[i] + other[i]);
  }
  return normalized(std::move(dir));
}

inline std::size_t object_row(const Primitive& u) {
  if (u.object.empty()) return 0;
  const auto idx = catalog_index(u.object);
  if (!idx)
    throw std::invalid_argument("embed_primitive: unknown object \"" +
                                u.object + "\"");
  return *idx + 1;
}

}  // namespace detail

// Embeddings seeded from the featurizer's content directions: an object row
// points at its own cell code, a place op points at its target family
// (supports, containers, anchors), and the projections start near identity.
// Relevance scores therefore begin content-matched instead of random; all of
// it remains trainable. Requires d_z == d_psi.
inline SparsifierParams init_sparsifier_structured(const Featurizer& f, int K,
                                                   double tau,
                                                   double query_gain,
                                                   Rng& rng) {
  const int d = f.d_psi();
  SparsifierParams p;
  p.K = K;
  p.tau = tau;
  const std::size_t dz = static_cast<std::size_t>(d);

  auto family_dir = [&f](std::initializer_list<EntityRole> roles) {
    Array acc({static_cast<std::size_t>(f.d_psi())});
    int n = 0;
    for (std::size_t cat = 0; cat < catalog().size(); ++cat) {
      bool in = false;
      for (auto r : roles) in = in || catalog()[cat].role == r;
      if (!in) continue;
      const Array dir = detail::entity_direction(f, cat);
      for (std::size_t i = 0; i < acc.numel(); ++i) acc[i] += dir[i];
      ++n;
    }
    if (n > 0) acc = detail::normalized(std::move(acc));
    return acc;
  };

  p.op_emb = Array({kNumPrimitiveOps, dz});
  auto set_op = [&p, dz](PrimitiveOp op, const Array& dir) {
    for (std::size_t j = 0; j < dz; ++j)
      p.op_emb.at(static_cast<std::size_t>(op), j) = dir[j];
  };
  set_op(PrimitiveOp::kPlaceOn,
         family_dir({EntityRole::kSupport, EntityRole::kDevice}));
  set_op(PrimitiveOp::kPlaceIn, family_dir({EntityRole::kContainer}));
  set_op(PrimitiveOp::kPlaceRel,
         family_dir({EntityRole::kSupport, EntityRole::kContainer,
                     EntityRole::kDevice}));

  p.obj_emb = Array({catalog().size() + 1, dz});  // row 0: null slot
  for (std::size_t cat = 0; cat < catalog().size(); ++cat) {
    const Array dir = detail::entity_direction(f, cat);
    for (std::size_t j = 0; j < dz; ++j) p.obj_emb.at(cat + 1, j) = dir[j];
  }
  for (auto& v : p.op_emb.data) v *= query_gain;
  for (auto& v : p.obj_emb.data) v *= query_gain;

  auto noisy_identity = [&rng](std::size_t rows, std::size_t cols,
                               double noise) {
    Array m({rows, cols});
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j)
        m.at(i, j) = (i % cols == j ? 1.0 : 0.0) + rng.normal(0.0, noise);
    return m;
  };
  p.q_w = noisy_identity(2 * dz, dz, 0.02);  // [I; I]: op + object add up
  p.q_b = Array({dz});
  p.w_k = noisy_identity(dz, dz, 0.02);
  p.w_v = noisy_identity(dz, dz, 0.02);

  // Null the S_t slot directions out of the key projection so the proprio
  // token's magnitude cannot hijack relevance: W_k <- (I - U U^T) W_k over
  // an orthonormal basis U of those directions.
  std::vector<Array> basis;
  for (Array dir : f.proprio_directions()) {
    for (const auto& u : basis) {
      double dot = 0.0;
      for (std::size_t i = 0; i < dz; ++i) dot += dir[i] * u[i];
      for (std::size_t i = 0; i < dz; ++i) dir[i] -= dot * u[i];
    }
    double n = 0.0;
    for (double v : dir.data) n += v * v;
    if (n < 1e-12) continue;
    n = std::sqrt(n);
    for (auto& v : dir.data) v /= n;
    basis.push_back(std::move(dir));
  }
  for (const auto& u : basis) {
    // w_k_row_i -= u_i * (u . w_k_col_j) per column: compute u^T W_k first.
    std::vector<double> ut_wk(dz, 0.0);
    for (std::size_t j = 0; j < dz; ++j)
      for (std::size_t i = 0; i < dz; ++i)
        ut_wk[j] += u[i] * p.w_k.at(i, j);
    for (std::size_t i = 0; i < dz; ++i)
      for (std::size_t j = 0; j < dz; ++j)
        p.w_k.at(i, j) -= u[i] * ut_wk[j];
  }

  // Rebalance the value projection: the solver already knows the primitive's
  // identity from the query, so shrink the (large) content component of the
  // fused token and amplify its position code. W_v <- W_v (I + a P P^T +
  // b C C^T) with orthonormal bases P (position) and C (content residual).
  {
    std::vector<Array> pos_basis;
    auto orthonormalize = [&dz](std::vector<Array>& into, Array dir) {
      for (const auto& u : into) {
        double dot = 0.0;
        for (std::size_t i = 0; i < dz; ++i) dot += dir[i] * u[i];
        for (std::size_t i = 0; i < dz; ++i) dir[i] -= dot * u[i];
      }
      double n = 0.0;
      for (double v : dir.data) n += v * v;
      if (n < 1e-12) return;
      n = std::sqrt(n);
      for (auto& v : dir.data) v /= n;
      into.push_back(std::move(dir));
    };
    for (Array dir : f.position_directions())
      orthonormalize(pos_basis, std::move(dir));
    std::vector<Array> content_basis = pos_basis;  // complement of positions
    for (Array dir : f.content_directions())
      orthonormalize(content_basis, std::move(dir));
    content_basis.erase(content_basis.begin(),
                        content_basis.begin() +
                            static_cast<std::ptrdiff_t>(pos_basis.size()));
    const double pos_gain = 4.0, content_shrink = -0.9;
    auto add_projector = [&p, dz](const std::vector<Array>& basis,
                                  double coeff) {
      for (const auto& u : basis) {
        std::vector<double> wk_u(dz, 0.0);  // W_v u
        for (std::size_t i = 0; i < dz; ++i)
          for (std::size_t j = 0; j < dz; ++j)
            wk_u[i] += p.w_v.at(i, j) * u[j];
        for (std::size_t i = 0; i < dz; ++i)
          for (std::size_t j = 0; j < dz; ++j)
            p.w_v.at(i, j) += coeff * wk_u[i] * u[j];
      }
    };
    add_projector(pos_basis, pos_gain - 1.0);
    add_projector(content_basis, content_shrink);
  }
  return p;
}

// ---- primitive embedding ----------------------------------------------------
// q = proj(concat(emb_op, emb_obj)); the support argument never enters.

inline Array embed_primitive(const SparsifierParams& p, const Primitive& u) {
  if (u.op == PrimitiveOp::kPad)
    throw std::invalid_argument("embed_primitive: pad primitive rejected");
  const std::size_t op_row = static_cast<std::size_t>(u.op);
  const std::size_t obj_row = detail::object_row(u);
  const std::size_t e_op = p.op_emb.cols(), e_obj = p.obj_emb.cols(),
                    d = p.q_b.numel();
  Array q({d});
  for (std::size_t j = 0; j < d; ++j) {
    double acc = p.q_b[j];
    for (std::size_t i = 0; i < e_op; ++i)
      acc += p.op_emb.at(op_row, i) * p.q_w.at(i, j);
    for (std::size_t i = 0; i < e_obj; ++i)
      acc += p.obj_emb.at(obj_row, i) * p.q_w.at(e_op + i, j);
    q[j] = acc;
  }
  return q;
}

// ---- relevance scores (alpha_i = q . W_k z_i / sqrt(d_z)) -------------------

inline Array relevance(const SparsifierParams& p, const Array& q,
                       const Array& tokens) {
  const std::size_t n = tokens.rows(), d_psi = tokens.cols(),
                    d_z = q.numel();
  if (p.w_k.rows() != d_psi || p.w_k.cols() != d_z)
    throw std::invalid_argument("relevance: shape mismatch tokens " +
                                tokens.shape_str() + " vs W_k " +
                                p.w_k.shape_str());
  const double scale = 1.0 / std::sqrt(static_cast<double>(d_z));
  // qk = W_k q, then scores = tokens . qk.
  std::vector<double> qk(d_psi, 0.0);
  for (std::size_t i = 0; i < d_psi; ++i)
    for (std::size_t j = 0; j < d_z; ++j) qk[i] += p.w_k.at(i, j) * q[j];
  Array scores({n});
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t k = 0; k < d_psi; ++k) acc += tokens.at(i, k) * qk[k];
    scores[i] = acc * scale;
  }
  return scores;
}

// ---- Top-K machinery --------------------------------------------------------

// Stop-gradient threshold: midpoint of the K-th and (K+1)-th largest scores.
inline double topk_threshold(const Array& scores, int K) {
  const std::size_t n = scores.numel();
  if (K < 1 || static_cast<std::size_t>(K) > n)
    throw std::invalid_argument("topk_threshold: K out of range");
  std::vector<double> sorted(scores.data);
  std::sort(sorted.begin(), sorted.end(), std::greater<double>());
  const double kth = sorted[static_cast<std::size_t>(K - 1)];
  const double next =
      static_cast<std::size_t>(K) < n ? sorted[static_cast<std::size_t>(K)]
                                      : kth - 1.0;
  return 0.5 * (kth + next);
}

inline Array soft_topk_gate_at(const Array& scores, double threshold,
                               double tau) {
  if (tau <= 0.0) throw std::invalid_argument("soft_topk_gate: tau <= 0");
  Array g = scores;
  for (auto& v : g.data) v = 1.0 / (1.0 + std::exp(-(v - threshold) / tau));
  return g;
}

inline Array soft_topk_gate(const Array& scores, int K, double tau) {
  return soft_topk_gate_at(scores, topk_threshold(scores, K), tau);
}

// Indices of the K largest scores, ties broken toward the lower index;
// returned ascending, always exactly K of them.
inline std::vector<std::size_t> hard_topk(const Array& scores, int K) {
  const std::size_t n = scores.numel();
  if (K < 1 || static_cast<std::size_t>(K) > n)
    throw std::invalid_argument("hard_topk: K out of range");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&scores](std::size_t a, std::size_t b) {
                     if (scores[a] != scores[b]) return scores[a] > scores[b];
                     return a < b;
                   });
  std::vector<std::size_t> sel(order.begin(),
                               order.begin() + static_cast<std::size_t>(K));
  std::sort(sel.begin(), sel.end());
  return sel;
}

// ---- fusion -----------------------------------------------------------------
// w_i = exp(alpha_i) g_i / sum_j exp(alpha_j) g_j; c = sum_i w_i W_v z_i.
// Scores are max-shifted before exponentiation. The hard path touches only
// the selected tokens, so perturbing the rest cannot change c even bitwise.

inline Array fuse_soft(const SparsifierParams& p, const Array& scores,
                       const Array& gates, const Array& tokens) {
  require_same_shape(scores, gates, "fuse_soft");
  const std::size_t n = tokens.rows(), d_psi = tokens.cols(),
                    d_z = p.w_v.cols();
  double shift = scores[0];
  for (double v : scores.data) shift = std::max(shift, v);
  std::vector<double> w(n);
  double norm = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = std::exp(scores[i] - shift) * gates[i];
    norm += w[i];
  }
  Array c({d_z});
  for (std::size_t i = 0; i < n; ++i) {
    const double wi = w[i] / norm;
    for (std::size_t j = 0; j < d_z; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < d_psi; ++k)
        acc += tokens.at(i, k) * p.w_v.at(k, j);
      c[j] += wi * acc;
    }
  }
  return c;
}

inline Array fuse_hard(const SparsifierParams& p, const Array& scores,
                       const std::vector<std::size_t>& selected,
                       const Array& tokens) {
  if (selected.empty()) throw std::invalid_argument("fuse_hard: empty set");
  const std::size_t d_psi = tokens.cols(), d_z = p.w_v.cols();
  double shift = scores[selected[0]];
  for (auto i : selected) shift = std::max(shift, scores[i]);
  double norm = 0.0;
  std::vector<double> w(selected.size());
  for (std::size_t r = 0; r < selected.size(); ++r) {
    w[r] = std::exp(scores[selected[r]] - shift);
    norm += w[r];
  }
  Array c({d_z});
  for (std::size_t r = 0; r < selected.size(); ++r) {
    const double wi = w[r] / norm;
    for (std::size_t j = 0; j < d_z; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < d_psi; ++k)
        acc += tokens.at(selected[r], k) * p.w_v.at(k, j);
      c[j] += wi * acc;
    }
  }
  return c;
}

// Sparsifier ablation: plain mean of the value-projected tokens.
inline Array fuse_mean(const SparsifierParams& p, const Array& tokens) {
  const std::size_t n = tokens.rows(), d_psi = tokens.cols(),
                    d_z = p.w_v.cols();
  Array c({d_z});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d_z; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < d_psi; ++k)
        acc += tokens.at(i, k) * p.w_v.at(k, j);
      c[j] += acc;
    }
  for (auto& v : c.data) v /= static_cast<double>(n);
  return c;
}

// Fused weights on the full token set (soft) or the selected set (hard);
// used by tests and the attention CSV dump.
inline Array fuse_weights_soft(const Array& scores, const Array& gates) {
  double shift = scores[0];
  for (double v : scores.data) shift = std::max(shift, v);
  Array w = scores;
  double norm = 0.0;
  for (std::size_t i = 0; i < w.numel(); ++i) {
    w[i] = std::exp(scores[i] - shift) * gates[i];
    norm += w[i];
  }
  for (auto& v : w.data) v /= norm;
  return w;
}

inline Array fuse_weights_hard(const Array& scores,
                               const std::vector<std::size_t>& selected) {
  Array w({scores.numel()});
  double shift = scores[selected[0]];
  for (auto i : selected) shift = std::max(shift, scores[i]);
  double norm = 0.0;
  for (auto i : selected) {
    w[i] = std::exp(scores[i] - shift);
    norm += w[i];
  }
  for (auto i : selected) w[i] /= norm;
  return w;
}

// ---- tape versions ----------------------------------------------------------

struct SparsifierRefs {
  Value op_emb, obj_emb, q_w, q_b, w_k, w_v;
};

inline SparsifierRefs register_sparsifier(Tape& tape,
                                          const SparsifierParams& p) {
  return {tape.leaf(p.op_emb), tape.leaf(p.obj_emb), tape.leaf(p.q_w),
          tape.leaf(p.q_b),    tape.leaf(p.w_k),     tape.leaf(p.w_v)};
}

inline Value embed_primitive_t(const SparsifierRefs& r, const Primitive& u) {
  if (u.op == PrimitiveOp::kPad)
    throw std::invalid_argument("embed_primitive: pad primitive rejected");
  Value op_row = row(r.op_emb, static_cast<std::size_t>(u.op));
  Value obj_row = row(r.obj_emb, detail::object_row(u));
  Value cat = concat_cols(op_row, obj_row);
  return add(matmul(cat, r.q_w), r.q_b);
}

// Relevance scores as a rank-1 value of length N.
inline Value relevance_t(const SparsifierRefs& r, Value q, Value tokens) {
  Tape* t = q.tape;
  const std::size_t d_z = t->val(q).numel();
  const double scale = 1.0 / std::sqrt(static_cast<double>(d_z));
  Value keys = matmul(tokens, r.w_k);  // N x d_z
  Value scores = matmul(keys, reshape(q, {d_z, 1}));
  return mul_scalar(reshape(scores, {t->val(scores).numel()}), scale);
}

// Soft gate with an explicitly frozen threshold (the stop-gradient path).
inline Value soft_gate_t(Value scores, double frozen_threshold, double tau) {
  return sigmoid_v(mul_scalar(add_scalar(scores, -frozen_threshold),
                              1.0 / tau));
}

inline Value fuse_soft_t(const SparsifierRefs& r, Value scores, Value gates,
                         Value tokens) {
  Tape* t = scores.tape;
  double shift = t->val(scores).data[0];
  for (double v : t->val(scores).data) shift = std::max(shift, v);
  Value num = mul(exp_v(add_scalar(scores, -shift)), gates);
  Value weights = div_by(num, sum_all(num));
  const std::size_t n = t->val(weights).numel();
  Value c = matmul(reshape(weights, {1, n}), matmul(tokens, r.w_v));
  return reshape(c, {t->val(c).numel()});
}

inline Value fuse_hard_t(const SparsifierRefs& r, Value scores,
                         const std::vector<std::size_t>& selected,
                         Value tokens) {
  if (selected.empty()) throw std::invalid_argument("fuse_hard: empty set");
  Tape* t = scores.tape;
  Value sel_scores = gather(scores, selected);
  Value weights = softmax(sel_scores, 1);
  Value sel_tokens = gather_rows(tokens, selected);
  Value c = matmul(reshape(weights, {1, selected.size()}),
                   matmul(sel_tokens, r.w_v));
  return reshape(c, {t->val(c).numel()});
}

inline Value fuse_mean_t(const SparsifierRefs& r, Value tokens) {
  Tape* t = tokens.tape;
  const std::size_t n = t->val(tokens).rows();
  Value values = matmul(tokens, r.w_v);
  Value ones = t->constant(
      Array::full({1, n}, 1.0 / static_cast<double>(n)));
  Value c = matmul(ones, values);
  return reshape(c, {t->val(c).numel()});
}

// ---- attention inspection dump ----------------------------------------------
// One CSV row per decision: scores, the selected set, fused weights.

inline void append_attention_csv(std::ostream& os, int episode, int decision,
                                 const Array& scores,
                                 const std::vector<std::size_t>& selected,
                                 const Array& weights) {
  os << episode << ',' << decision << ',';
  for (std::size_t i = 0; i < scores.numel(); ++i)
    os << (i ? ";" : "") << scores[i];
  os << ',';
  for (std::size_t i = 0; i < selected.size(); ++i)
    os << (i ? ";" : "") << selected[i];
  os << ',';
  for (std::size_t i = 0; i < weights.numel(); ++i)
    os << (i ? ";" : "") << weights[i];
  os << '\n';
}

}  // namespace nsgrid
