#pragma once

// Symbolic classifier: MLP over pooled features -> distribution over the
// primitive vocabulary, plan-constrained masked inference with the monotone
// pointer, and the segment-end window loss used for Stage-I supervision.

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "nsgrid/array.hpp"
#include "nsgrid/plan.hpp"
#include "nsgrid/rng.hpp"
#include "nsgrid/tape.hpp"

namespace nsgrid {

inline constexpr double kTieTolerance = 1e-12;

struct ClassifierParams {
  Array w1, b1, w2, b2;  // d_psi -> hidden (GELU) -> |U|

  static ClassifierParams init(int d_psi, int hidden, Rng& rng) {
    ClassifierParams p;
    p.w1 = Array::gaussian({static_cast<std::size_t>(d_psi),
                            static_cast<std::size_t>(hidden)},
                           rng, 1.0 / std::sqrt(static_cast<double>(d_psi)));
    p.b1 = Array({static_cast<std::size_t>(hidden)});
    p.w2 = Array::gaussian({static_cast<std::size_t>(hidden),
                            static_cast<std::size_t>(kNumPrimitiveOps)},
                           rng, 1.0 / std::sqrt(static_cast<double>(hidden)));
    p.b2 = Array({static_cast<std::size_t>(kNumPrimitiveOps)});
    return p;
  }

  template <typename F>
  void visit(F&& f) {
    f("classifier.w1", w1);
    f("classifier.b1", b1);
    f("classifier.w2", w2);
    f("classifier.b2", b2);
  }
  template <typename F>
  void visit(F&& f) const {
    f("classifier.w1", w1);
    f("classifier.b1", b1);
    f("classifier.w2", w2);
    f("classifier.b2", b2);
  }
};

// ---- plain forward --------------------------------------------------------

inline Array classifier_logits(const ClassifierParams& p,
                               const Array& psi_bar) {
  const std::size_t d = psi_bar.numel(), h = p.b1.numel(),
                    u = p.b2.numel();
  Array hid({h});
  for (std::size_t j = 0; j < h; ++j) {
    double acc = p.b1[j];
    for (std::size_t i = 0; i < d; ++i) acc += psi_bar[i] * p.w1.at(i, j);
    const double cdf = 0.5 * (1.0 + std::erf(acc * 0.70710678118654752440));
    hid[j] = acc * cdf;
  }
  Array out({u});
  for (std::size_t j = 0; j < u; ++j) {
    double acc = p.b2[j];
    for (std::size_t i = 0; i < h; ++i) acc += hid[i] * p.w2.at(i, j);
    out[j] = acc;
  }
  return out;
}

inline Array softmax_vec(const Array& logits) {
  Array out = logits;
  double mx = out[0];
  for (double v : out.data) mx = std::max(mx, v);
  double s = 0.0;
  for (auto& v : out.data) {
    v = std::exp(v - mx);
    s += v;
  }
  for (auto& v : out.data) v /= s;
  return out;
}

// p_phi(u | psi): softmax over the primitive vocabulary.
inline Array primitive_dist(const ClassifierParams& p, const Array& psi_bar) {
  return softmax_vec(classifier_logits(p, psi_bar));
}

// ---- masked inference -------------------------------------------------------

// Masked index policy over the admissible set K(m_prev): probabilities of
// each admissible plan index, renormalized. The normalizer is positive
// because softmax outputs are and K is nonempty.
inline std::vector<double> masked_index_policy(const Array& dist,
                                               const Plan& plan, int m_prev) {
  const auto K = admissible_set(m_prev, plan.length());
  std::vector<double> probs(K.size());
  double norm = 0.0;
  for (std::size_t i = 0; i < K.size(); ++i) {
    probs[i] = dist[static_cast<std::size_t>(plan.at(K[i]).op)];
    norm += probs[i];
  }
  for (auto& v : probs) v /= norm;
  return probs;
}

struct ConstrainedChoice {
  int m_hat = 1;
  Primitive primitive;
};

// Argmax of the masked policy; exact ties (within kTieTolerance, including
// repeated primitives) resolve to the larger index, preferring advancement.
inline ConstrainedChoice constrained_inference(const Array& dist,
                                               const Plan& plan, int m_prev) {
  const auto K = admissible_set(m_prev, plan.length());
  const auto probs = masked_index_policy(dist, plan, m_prev);
  std::size_t best = 0;
  for (std::size_t i = 1; i < K.size(); ++i)
    if (probs[i] >= probs[best] - kTieTolerance) best = i;
  return {K[best], plan.at(K[best])};
}

// ---- tape forward -----------------------------------------------------------

struct ClassifierRefs {
  Value w1, b1, w2, b2;
};

inline ClassifierRefs register_classifier(Tape& tape,
                                          const ClassifierParams& p) {
  return {tape.leaf(p.w1), tape.leaf(p.b1), tape.leaf(p.w2), tape.leaf(p.b2)};
}

// Batched logits: rows of psi_bar -> rows over the vocabulary.
inline Value classifier_logits_t(const ClassifierRefs& r, Value psi_rows) {
  Value hidden = gelu(affine(psi_rows, r.w1, r.b1));
  return affine(hidden, r.w2, r.b2);
}

// Log-probability of plan index m_hat under the masked policy, from a
// single-frame log-softmax row.
inline Value masked_index_log_prob_t(Value log_probs_row, const Plan& plan,
                                     int m_prev, int m_hat) {
  Tape* t = log_probs_row.tape;
  const auto K = admissible_set(m_prev, plan.length());
  Value chosen = pick(log_probs_row,
                      static_cast<std::size_t>(plan.at(m_hat).op));
  if (K.size() == 1) return sub(chosen, chosen);  // log 1: point mass
  Value a = pick(log_probs_row, static_cast<std::size_t>(plan.at(K[0]).op));
  Value b = pick(log_probs_row, static_cast<std::size_t>(plan.at(K[1]).op));
  // log(exp(a) + exp(b)); both arguments are log-probabilities <= 0.
  Value lse = log_v(add(exp_v(a), exp_v(b)));
  (void)t;
  return sub(chosen, lse);
}

// ---- window supervision -----------------------------------------------------

struct WindowFrame {
  std::size_t step = 0;  // env-step index into the demo
  int label = 0;         // PrimitiveOp index
};

// Frames in [max(segment start, segment end - w), segment end] for each
// maximal constant run of the annotation trace.
inline std::vector<WindowFrame> window_frames(const std::vector<int>& trace,
                                              const Plan& plan, int w) {
  if (w < 0) throw std::invalid_argument("window_frames: w must be >= 0");
  std::vector<WindowFrame> out;
  std::size_t start = 0;
  for (std::size_t t = 0; t < trace.size(); ++t) {
    const bool last = t + 1 == trace.size();
    if (!last && trace[t + 1] == trace[t]) continue;
    const std::size_t lo =
        t >= static_cast<std::size_t>(w) + start ? t - static_cast<std::size_t>(w)
                                                 : start;
    const int label = static_cast<int>(plan.at(trace[t]).op);
    for (std::size_t f = lo; f <= t; ++f) out.push_back({f, label});
    start = t + 1;
  }
  return out;
}

// Class weights inversely proportional to window-frame frequency, normalized
// to mean 1 over observed classes; unseen classes default to the maximum
// observed weight.
inline Array class_weights(const std::vector<WindowFrame>& frames) {
  Array alpha = Array::full({kNumPrimitiveOps}, 0.0);
  std::vector<std::size_t> freq(kNumPrimitiveOps, 0);
  for (const auto& f : frames) ++freq[static_cast<std::size_t>(f.label)];
  double sum = 0.0;
  std::size_t observed = 0;
  for (std::size_t u = 0; u < kNumPrimitiveOps; ++u) {
    if (freq[u] == 0) continue;
    alpha[u] = 1.0 / static_cast<double>(freq[u]);
    sum += alpha[u];
    ++observed;
  }
  if (observed == 0)
    throw std::invalid_argument("class_weights: empty frame set");
  const double scale = static_cast<double>(observed) / sum;
  double mx = 0.0;
  for (std::size_t u = 0; u < kNumPrimitiveOps; ++u) {
    alpha[u] *= scale;
    mx = std::max(mx, alpha[u]);
  }
  for (std::size_t u = 0; u < kNumPrimitiveOps; ++u)
    if (freq[u] == 0) alpha[u] = mx;
  return alpha;
}

// Eq-style window loss over prepared frames: -sum_k sum_{t in W_k}
// alpha_{u_k} log p(u_k | psi_t). psi_rows holds one row per frame.
inline Value window_loss_t(const ClassifierRefs& r, Value psi_rows,
                           const std::vector<int>& labels, const Array& alpha) {
  if (labels.empty())
    throw std::invalid_argument("window_loss: empty frame set");
  Tape* t = psi_rows.tape;
  Value logp = log_softmax(classifier_logits_t(r, psi_rows), 1);
  const std::size_t n = labels.size(), u = alpha.numel();
  // Weighted label picker as a constant matrix: loss = -sum(logp * sel).
  Array sel({n, u});
  for (std::size_t i = 0; i < n; ++i)
    sel.at(i, static_cast<std::size_t>(labels[i])) =
        alpha[static_cast<std::size_t>(labels[i])];
  return neg(sum_all(mul(logp, t->constant(sel))));
}

// Convenience plain evaluation of the same quantity.
inline double window_loss(const ClassifierParams& p,
                          const std::vector<Array>& psi_rows,
                          const std::vector<int>& labels, const Array& alpha) {
  if (labels.empty())
    throw std::invalid_argument("window_loss: empty frame set");
  double loss = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const Array logits = classifier_logits(p, psi_rows[i]);
    double mx = logits[0];
    for (double v : logits.data) mx = std::max(mx, v);
    double s = 0.0;
    for (double v : logits.data) s += std::exp(v - mx);
    const double logp =
        logits[static_cast<std::size_t>(labels[i])] - mx - std::log(s);
    loss -= alpha[static_cast<std::size_t>(labels[i])] * logp;
  }
  return loss;
}

}  // namespace nsgrid
