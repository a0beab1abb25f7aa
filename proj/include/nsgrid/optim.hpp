#pragma once

// Adam with global gradient-norm clipping, generic over any visit()-able
// parameter struct. Gradients arrive as a flat vector aligned with visit
// order (see collect_param_grads).

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "nsgrid/array.hpp"
#include "nsgrid/tape.hpp"

namespace nsgrid {

// Gradients of parameters that were registered as the FIRST leaves of the
// tape, in visit order.
template <typename Params>
std::vector<Array> collect_param_grads(Tape& tape, const Params& params) {
  std::vector<Array> grads;
  std::uint32_t next = 0;
  params.visit([&](const std::string&, const Array&) {
    grads.push_back(tape.grad(Value{&tape, next++}));
  });
  return grads;
}

// First non-finite gradient's parameter name, empty when all finite.
template <typename Params>
std::string find_nonfinite_grad(const Params& params,
                                const std::vector<Array>& grads) {
  std::string bad;
  std::size_t i = 0;
  params.visit([&](const std::string& name, const Array&) {
    if (bad.empty() && !grads[i].all_finite()) bad = name;
    ++i;
  });
  return bad;
}

inline void accumulate_grads(std::vector<Array>& into,
                             const std::vector<Array>& from, double scale) {
  if (into.empty()) {
    into = from;
    for (auto& g : into)
      for (auto& v : g.data) v *= scale;
    return;
  }
  for (std::size_t i = 0; i < into.size(); ++i)
    for (std::size_t j = 0; j < into[i].numel(); ++j)
      into[i].data[j] += scale * from[i].data[j];
}

class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void set_weight_decay(double wd) { weight_decay_ = wd; }

  // Applies one step along -grads (minimize) or +grads (maximize), after
  // clipping the global gradient norm to grad_clip (<= 0 disables clipping).
  // Weight decay, when set, is decoupled (AdamW style).
  template <typename Params>
  void step(Params& params, const std::vector<Array>& grads, double grad_clip,
            bool maximize = false) {
    double norm_sq = 0.0;
    for (const auto& g : grads)
      for (double v : g.data) norm_sq += v * v;
    const double norm = std::sqrt(norm_sq);
    const double clip_scale =
        (grad_clip > 0.0 && norm > grad_clip) ? grad_clip / norm : 1.0;
    const double sign = maximize ? -1.0 : 1.0;  // Adam descends

    if (m_.empty()) {
      for (const auto& g : grads) {
        m_.push_back(Array(g.shape));
        v_.push_back(Array(g.shape));
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);

    std::size_t i = 0;
    params.visit([&](const std::string&, Array& p) {
      const Array& g = grads[i];
      for (std::size_t j = 0; j < p.numel(); ++j) {
        const double gj = sign * clip_scale * g.data[j];
        m_[i].data[j] = beta1_ * m_[i].data[j] + (1.0 - beta1_) * gj;
        v_[i].data[j] = beta2_ * v_[i].data[j] + (1.0 - beta2_) * gj * gj;
        const double mhat = m_[i].data[j] / bc1;
        const double vhat = v_[i].data[j] / bc2;
        p.data[j] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) +
                            weight_decay_ * p.data[j]);
      }
      ++i;
    });
  }

 private:
  double lr_, beta1_, beta2_, eps_;
  double weight_decay_ = 0.0;
  long t_ = 0;
  std::vector<Array> m_, v_;
};

}  // namespace nsgrid
