#pragma once

// The assembled hierarchical policy: featurize -> classify (plan-constrained)
// -> sparsify -> chunked solver. PolicyRuntime drives one episode in plain
// (no-tape) mode for rollouts and evaluation; the register/stack helpers
// support the tape-side loss builders in bc.hpp and grpo.hpp.

#include <cmath>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "nsgrid/classifier.hpp"
#include "nsgrid/env.hpp"
#include "nsgrid/perceive.hpp"
#include "nsgrid/plan.hpp"
#include "nsgrid/solver.hpp"
#include "nsgrid/sparsifier.hpp"

namespace nsgrid {

// Theta = {phi, theta}: classifier plus sparsifier and solver. Plain value
// semantics; copying it is the parameter snapshot.
struct PolicyParams {
  ClassifierParams classifier;
  SparsifierParams sparsifier;
  SolverParams solver;

  template <typename F>
  void visit(F&& f) {
    classifier.visit(f);
    sparsifier.visit(f);
    solver.visit(f);
  }
  template <typename F>
  void visit(F&& f) const {
    classifier.visit(f);
    sparsifier.visit(f);
    solver.visit(f);
  }

  int e_dim() const { return 2 * sparsifier.d_z() + kProprioDim; }
};

struct AblationFlags {
  bool no_plan_constraint = false;
  bool no_sparsifier = false;
  bool no_seg_reward = false;
  bool no_prog_reward = false;
  bool no_kl = false;
};

// ---------------------------------------------------------------------------
// index selection (shared by acting and scoring)
// ---------------------------------------------------------------------------

// Distribution over non-pad ops, renormalized; the --no-plan-constraint
// decoder. pad is excluded because it can never execute.
inline std::vector<double> unmasked_op_dist(const Array& dist) {
  std::vector<double> probs(kNumPrimitiveOps - 1);
  double norm = 0.0;
  for (int u = 0; u + 1 < kNumPrimitiveOps; ++u) {
    probs[static_cast<std::size_t>(u)] = dist[static_cast<std::size_t>(u)];
    norm += probs[static_cast<std::size_t>(u)];
  }
  for (auto& p : probs) p /= norm;
  return probs;
}

// First unvisited plan index carrying the op, else 0 (meaning: keep pointer).
inline int first_unvisited_occurrence(const Plan& plan, PrimitiveOp op,
                                      const std::set<int>& visited) {
  for (int m = 1; m <= plan.length(); ++m)
    if (plan.at(m).op == op && visited.find(m) == visited.end()) return m;
  return 0;
}

// ---------------------------------------------------------------------------
// per-decision record of everything scoring needs later
// ---------------------------------------------------------------------------

struct DecisionRecord {
  TokenGrid psi;
  Array psi_bar;
  int m_prev = 1;
  int m_hat = 1;
  Primitive u_hat;
  std::vector<std::size_t> selected;  // hard Top-K set used when acting
  Array context;                      // c_t as recorded
  Array e_token;                      // [c_t; Embed(u_hat); S_t]
  Array proprio;                      // S_t
  Array chunk;                        // executed H x a_dim block
  double log_index_old = 0.0;
  double log_chunk_old = 0.0;
  double r_task = 0.0;  // summed over the chunk's env steps
  double reward = 0.0;  // shaped
  int b = 0;
  Array latent;     // shaping latent at the decision boundary
  int env_steps = 0;  // steps actually executed in this chunk
};

// ---------------------------------------------------------------------------
// plain-mode runtime
// ---------------------------------------------------------------------------

class PolicyRuntime {
 public:
  PolicyRuntime(const PolicyParams& params, const Featurizer& featurizer,
                const Plan& plan, AblationFlags flags = {})
      : params_(params),
        featurizer_(featurizer),
        plan_(plan),
        flags_(flags),
        e_history_({0, static_cast<std::size_t>(params.e_dim())}) {
    pointer_ = 1;
  }

  struct Decision {
    DecisionRecord record;
    ChunkDistribution dist;
  };

  // One solver decision. With sample_index the plan index is drawn from the
  // masked policy (rng required); otherwise constrained argmax decoding.
  Decision decide(const Observation& obs, const std::string& instruction,
                  bool sample_index, Rng* rng) {
    Decision d;
    DecisionRecord& rec = d.record;
    rec.psi = featurizer_.encode_tokens(obs, instruction);
    rec.psi_bar = featurizer_.pool(rec.psi);
    rec.m_prev = pointer_;

    const Array dist = primitive_dist(params_.classifier, rec.psi_bar);
    if (!flags_.no_plan_constraint) {
      const auto K = admissible_set(pointer_, plan_.length());
      const auto probs = masked_index_policy(dist, plan_, pointer_);
      std::size_t choice;
      if (sample_index) {
        choice = sample_categorical(probs, *rng);
      } else {
        const auto c = constrained_inference(dist, plan_, pointer_);
        choice = 0;
        while (K[choice] != c.m_hat) ++choice;
      }
      rec.m_hat = K[choice];
      rec.log_index_old = std::log(probs[choice]);
    } else {
      const auto probs = unmasked_op_dist(dist);
      std::size_t op_idx;
      if (sample_index) {
        op_idx = sample_categorical(probs, *rng);
      } else {
        op_idx = 0;
        for (std::size_t u = 1; u < probs.size(); ++u)
          if (probs[u] > probs[op_idx]) op_idx = u;
      }
      rec.log_index_old = std::log(probs[op_idx]);
      const int m = first_unvisited_occurrence(
          plan_, static_cast<PrimitiveOp>(op_idx), visited_);
      rec.m_hat = m > 0 ? m : pointer_;
    }
    rec.u_hat = plan_.at(rec.m_hat);
    rec.b = boundary_flag(rec.m_hat, pointer_);
    pointer_ = rec.m_hat;
    visited_.insert(rec.m_hat);
    trace_.push_back(rec.m_hat);

    const Array q = embed_primitive(params_.sparsifier, rec.u_hat);
    const Array scores = relevance(params_.sparsifier, q, rec.psi.tokens);
    rec.selected = hard_topk(scores, params_.sparsifier.K);
    rec.context = flags_.no_sparsifier
                      ? fuse_mean(params_.sparsifier, rec.psi.tokens)
                      : fuse_hard(params_.sparsifier, scores, rec.selected,
                                  rec.psi.tokens);
    last_scores_ = scores;

    rec.proprio = Array({kProprioDim});
    for (int i = 0; i < kProprioDim; ++i)
      rec.proprio[static_cast<std::size_t>(i)] =
          obs.proprio[static_cast<std::size_t>(i)];
    rec.e_token = Array({static_cast<std::size_t>(params_.e_dim())});
    std::size_t off = 0;
    for (std::size_t i = 0; i < rec.context.numel(); ++i)
      rec.e_token[off++] = rec.context[i];
    for (std::size_t i = 0; i < q.numel(); ++i) rec.e_token[off++] = q[i];
    for (std::size_t i = 0; i < rec.proprio.numel(); ++i)
      rec.e_token[off++] = rec.proprio[i];

    append_history(rec.e_token);
    d.dist = chunk_dist(params_.solver, e_history_);
    ++invocations_;
    return d;
  }

  int invocations() const { return invocations_; }
  const std::vector<int>& pointer_trace() const { return trace_; }
  int pointer() const { return pointer_; }
  const Array& last_scores() const { return last_scores_; }

  static std::size_t sample_categorical(const std::vector<double>& probs,
                                        Rng& rng) {
    const double r = rng.uniform01();
    double acc = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      acc += probs[i];
      if (r < acc) return i;
    }
    return probs.size() - 1;
  }

 private:
  int boundary_flag(int m, int m_prev) const { return m != m_prev ? 1 : 0; }

  void append_history(const Array& e) {
    const std::size_t n = e.numel();
    Array next({e_history_.rows() + 1, n});
    std::copy(e_history_.data.begin(), e_history_.data.end(),
              next.data.begin());
    std::copy(e.data.begin(), e.data.end(),
              next.data.begin() + e_history_.rows() * n);
    e_history_ = std::move(next);
  }

  const PolicyParams& params_;
  const Featurizer& featurizer_;
  Plan plan_;
  AblationFlags flags_;
  Array e_history_;
  int pointer_ = 1;
  std::set<int> visited_;
  std::vector<int> trace_;
  Array last_scores_;
  int invocations_ = 0;
};

// ---------------------------------------------------------------------------
// deterministic evaluation episode (argmax decoding, mean-action execution)
// ---------------------------------------------------------------------------

struct EpisodeResult {
  bool success = false;
  int env_steps = 0;
  int decisions = 0;
  double task_reward = 0.0;
  std::vector<int> pointer_trace;
};

inline EpisodeResult run_eval_episode(ManipGrid& env, const Task& task,
                                      const PolicyParams& params,
                                      const Featurizer& featurizer,
                                      AblationFlags flags = {},
                                      std::ostream* attention_csv = nullptr,
                                      int episode_index = 0) {
  PolicyRuntime rt(params, featurizer, task.plan, flags);
  Observation obs = env.reset(task);
  EpisodeResult res;
  while (!env.done()) {
    auto d = rt.decide(obs, task.instruction, /*sample_index=*/false, nullptr);
    if (attention_csv)
      append_attention_csv(*attention_csv, episode_index, res.decisions,
                           rt.last_scores(), d.record.selected,
                           fuse_weights_hard(rt.last_scores(),
                                             d.record.selected));
    ++res.decisions;
    for (int h = 0; h < params.solver.horizon && !env.done(); ++h) {
      ActionVec a{d.dist.mean.at(static_cast<std::size_t>(h), 0),
                  d.dist.mean.at(static_cast<std::size_t>(h), 1),
                  d.dist.mean.at(static_cast<std::size_t>(h), 2),
                  d.dist.mean.at(static_cast<std::size_t>(h), 3)};
      auto sr = env.step(a);
      res.task_reward += sr.r_task;
      ++res.env_steps;
      obs = sr.obs;
    }
  }
  res.success = env.success();
  res.pointer_trace = rt.pointer_trace();
  return res;
}

// ---------------------------------------------------------------------------
// tape-side registration and helpers
// ---------------------------------------------------------------------------

struct PolicyRefs {
  ClassifierRefs classifier;
  SparsifierRefs sparsifier;
  SolverRefs solver;
};

inline PolicyRefs register_policy(Tape& tape, const PolicyParams& p) {
  return {register_classifier(tape, p.classifier),
          register_sparsifier(tape, p.sparsifier),
          register_solver(tape, p.solver)};
}

// Stack rank-1 values into a matrix (rows in order).
inline Value stack_rows(const std::vector<Value>& rows) {
  Tape* t = rows.at(0).tape;
  Value m = reshape(rows[0], {1, t->val(rows[0]).numel()});
  for (std::size_t i = 1; i < rows.size(); ++i)
    m = concat_rows(m, reshape(rows[i], {1, t->val(rows[i]).numel()}));
  return m;
}

// Rebuilds one decision's solver token on the tape. In the hard mode the
// recorded Top-K set is reused so the scoring path stays smooth in Theta;
// in soft mode the caller provides the frozen gate threshold.
inline Value build_e_token_t(Tape& tape, const PolicyRefs& refs,
                             const DecisionRecord& rec, bool no_sparsifier,
                             std::optional<double> soft_threshold,
                             double tau) {
  Value tokens = tape.constant(rec.psi.tokens);
  Value q = embed_primitive_t(refs.sparsifier, rec.u_hat);
  Value c;
  if (no_sparsifier) {
    c = fuse_mean_t(refs.sparsifier, tokens);
  } else if (soft_threshold) {
    Value scores = relevance_t(refs.sparsifier, q, tokens);
    Value gates = soft_gate_t(scores, *soft_threshold, tau);
    c = fuse_soft_t(refs.sparsifier, scores, gates, tokens);
  } else {
    Value scores = relevance_t(refs.sparsifier, q, tokens);
    c = fuse_hard_t(refs.sparsifier, scores, rec.selected, tokens);
  }
  return concat_cols(concat_cols(c, q), tape.constant(rec.proprio));
}

}  // namespace nsgrid
