#pragma once

// Stage I: scripted-expert demonstration generation with primitive
// annotations, classifier pretraining under the segment-end window loss, and
// the solver's behavior-cloning warm start (teacher-forced on ground-truth
// primitive labels). The frozen copy of the resulting parameters is the
// pi_BC reference for the online stage.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "nsgrid/demo.hpp"
#include "nsgrid/optim.hpp"
#include "nsgrid/pipeline.hpp"

namespace nsgrid {

// ---------------------------------------------------------------------------
// demonstration generation
// ---------------------------------------------------------------------------

struct DemoGenError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// One expert episode; throws DemoGenError if the expert cannot finish.
inline Demo run_expert_episode(const Task& task, EnvParams env_params = {}) {
  ManipGrid env(env_params);
  Observation obs = env.reset(task);
  Demo demo;
  demo.task = task;
  while (!env.done()) {
    // Active primitive: first unsatisfied goal.
    const auto& latched = env.latched();
    int m = 1;
    for (std::size_t k = 0; k < latched.size(); ++k)
      if (latched[k]) m = static_cast<int>(k) + 2;
    m = std::min(m, task.plan.length());

    const auto ea = scripted_expert(env.world(), task.plan, m);
    if (ea.failed)
      throw DemoGenError("expert failure on \"" + task.instruction +
                         "\" at primitive " + std::to_string(m));
    auto sr = env.step(ea.action);
    DemoStep step;
    step.obs = obs;
    step.action = ea.action.clipped();
    step.true_primitive_index = ea.true_index;
    step.r_task = sr.r_task;
    step.done = sr.done;
    demo.steps.push_back(std::move(step));
    obs = sr.obs;
  }
  if (!env.success())
    throw DemoGenError("expert timed out on \"" + task.instruction + "\"");
  return demo;
}

// n_per_task demonstrations per task, deterministic in the seed. Tasks the
// expert cannot solve are excluded with a warning (none exist in the shipped
// grammar; the completeness test keeps it that way).
inline std::vector<Demo> generate_demos(const std::vector<Task>& tasks,
                                        int n_per_task, std::uint64_t seed,
                                        EnvParams env_params = {}) {
  std::vector<Demo> out;
  for (std::size_t ti = 0; ti < tasks.size(); ++ti) {
    for (int k = 0; k < n_per_task; ++k) {
      Task t = tasks[ti];
      t.seed = Rng::derive(seed, ti, static_cast<std::uint64_t>(k));
      try {
        out.push_back(run_expert_episode(t, env_params));
      } catch (const DemoGenError& e) {
        std::fprintf(stderr, "[gen-demos] warning: %s (task excluded)\n",
                     e.what());
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// shared featurization of demos
// ---------------------------------------------------------------------------

struct AnnotatedFrames {
  std::vector<Array> psi_bar;  // pooled features per env step
  std::vector<int> trace;      // true primitive indices per env step
};

inline AnnotatedFrames featurize_demo(const Demo& demo,
                                      const Featurizer& featurizer) {
  AnnotatedFrames out;
  out.psi_bar.reserve(demo.steps.size());
  out.trace.reserve(demo.steps.size());
  for (const auto& s : demo.steps) {
    out.psi_bar.push_back(
        featurizer.pool(featurizer.encode_tokens(s.obs, demo.task.instruction)));
    out.trace.push_back(s.true_primitive_index);
  }
  return out;
}

// ---------------------------------------------------------------------------
// classifier pretraining (Eq-style window loss)
// ---------------------------------------------------------------------------

struct BcConfig {
  int classifier_epochs = 600;
  int solver_epochs = 300;
  int batch = 32;
  double lr = 3e-3;
  double solver_lr = 1e-3;
  double solver_weight_decay = 1e-3;
  double grad_clip = 1.0;
  int window = 3;
  double validation_fraction = 0.1;  // last 10% of steps per demo
  std::uint64_t seed = 2;
};

struct ClassifierTrainReport {
  double final_loss = 0.0;
  double best_validation_accuracy = 0.0;
  Array alpha;  // class weights actually used
};

// Minimizes the window loss over all demos with Adam + gradient clipping;
// keeps the checkpoint with the best validation primitive accuracy
// (validation: the last fraction of steps of each demo).
inline ClassifierTrainReport pretrain_classifier(
    ClassifierParams& params, const std::vector<Demo>& demos,
    const Featurizer& featurizer, const BcConfig& cfg) {
  if (demos.empty())
    throw std::invalid_argument("pretrain_classifier: no demonstrations");

  struct Frame {
    Array psi_bar;
    int label;
    bool validation;
  };
  std::vector<Frame> frames;
  std::vector<WindowFrame> all_window_frames;
  for (const auto& demo : demos) {
    const auto annotated = featurize_demo(demo, featurizer);
    const std::size_t val_from = annotated.trace.size() -
                                 static_cast<std::size_t>(std::ceil(
                                     cfg.validation_fraction *
                                     static_cast<double>(annotated.trace.size())));
    const auto wf =
        window_frames(annotated.trace, demo.task.plan, cfg.window);
    for (const auto& f : wf) {
      frames.push_back(
          {annotated.psi_bar[f.step], f.label, f.step >= val_from});
      all_window_frames.push_back(f);
    }
  }
  const Array alpha = class_weights(all_window_frames);

  std::vector<std::size_t> train_idx, val_idx;
  for (std::size_t i = 0; i < frames.size(); ++i)
    (frames[i].validation ? val_idx : train_idx).push_back(i);
  if (train_idx.empty())
    throw std::invalid_argument("pretrain_classifier: no training frames");

  auto validation_accuracy = [&](const ClassifierParams& p) {
    if (val_idx.empty()) return 1.0;
    std::size_t hit = 0;
    for (auto i : val_idx) {
      const Array dist = primitive_dist(p, frames[i].psi_bar);
      std::size_t best = 0;
      for (std::size_t u = 1; u < dist.numel(); ++u)
        if (dist[u] > dist[best]) best = u;
      if (static_cast<int>(best) == frames[i].label) ++hit;
    }
    return static_cast<double>(hit) / static_cast<double>(val_idx.size());
  };

  Adam adam(cfg.lr);
  Rng rng(cfg.seed);
  ClassifierParams best = params;
  ClassifierTrainReport report;
  report.alpha = alpha;
  report.best_validation_accuracy = validation_accuracy(params);

  std::vector<std::size_t> order = train_idx;
  for (int epoch = 0; epoch < cfg.classifier_epochs; ++epoch) {
    // Deterministic shuffle.
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng.uniform_index(i)]);
    double epoch_loss = 0.0;
    for (std::size_t b0 = 0; b0 < order.size();
         b0 += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t b1 =
          std::min(order.size(), b0 + static_cast<std::size_t>(cfg.batch));
      Tape tape;
      ClassifierRefs refs = register_classifier(tape, params);
      Array batch_psi({b1 - b0, frames[order[b0]].psi_bar.numel()});
      std::vector<int> labels;
      for (std::size_t i = b0; i < b1; ++i) {
        const auto& f = frames[order[i]];
        std::copy(f.psi_bar.data.begin(), f.psi_bar.data.end(),
                  batch_psi.data.begin() + (i - b0) * batch_psi.cols());
        labels.push_back(f.label);
      }
      Value loss =
          window_loss_t(refs, tape.constant(batch_psi), labels, alpha);
      const double lv = tape.val(loss).value();
      if (!std::isfinite(lv))
        throw std::runtime_error(
            "pretrain_classifier: loss diverged; keeping last checkpoint");
      epoch_loss += lv;
      tape.backward(loss);
      auto grads = collect_param_grads(tape, params);
      adam.step(params, grads, cfg.grad_clip);
    }
    report.final_loss = epoch_loss;
    const double acc = validation_accuracy(params);
    if (acc >= report.best_validation_accuracy) {
      report.best_validation_accuracy = acc;
      best = params;
    }
  }
  params = best;
  return report;
}

// ---------------------------------------------------------------------------
// solver BC warm start (teacher-forced)
// ---------------------------------------------------------------------------

// Trainable view for the BC stage: sparsifier + solver, classifier excluded.
struct SolverBundleView {
  SparsifierParams& sparsifier;
  SolverParams& solver;
  template <typename F>
  void visit(F&& f) {
    sparsifier.visit(f);
    solver.visit(f);
  }
  template <typename F>
  void visit(F&& f) const {
    sparsifier.visit(f);
    solver.visit(f);
  }
};

// Teacher-forced training sequence of one demo: decisions every H steps with
// the ground-truth primitive, target blocks zero-padded to H with a mask.
// A nonzero phase offset starts the chunking at that step, so one demo
// yields H aligned sequences; decision spacing stays H either way, matching
// rollout-time history statistics.
struct TeacherSequence {
  std::vector<DecisionRecord> decisions;  // psi, u_hat, proprio filled
  Array targets;                          // T' x (H * a_dim)
  Array mask;                             // same shape, 1 on real steps
};

inline TeacherSequence build_teacher_sequence(const Demo& demo,
                                              const Featurizer& featurizer,
                                              int horizon, int a_dim,
                                              int offset = 0) {
  TeacherSequence seq;
  const std::size_t T = demo.steps.size() - static_cast<std::size_t>(offset);
  const std::size_t n_dec =
      (T + static_cast<std::size_t>(horizon) - 1) /
      static_cast<std::size_t>(horizon);
  const std::size_t w = static_cast<std::size_t>(horizon * a_dim);
  seq.targets = Array({n_dec, w});
  seq.mask = Array({n_dec, w});
  for (std::size_t d = 0; d < n_dec; ++d) {
    const std::size_t t0 =
        static_cast<std::size_t>(offset) + d * static_cast<std::size_t>(horizon);
    DecisionRecord rec;
    rec.psi = featurizer.encode_tokens(demo.steps[t0].obs,
                                       demo.task.instruction);
    rec.psi_bar = featurizer.pool(rec.psi);
    rec.m_hat = demo.steps[t0].true_primitive_index;
    rec.u_hat = demo.task.plan.at(rec.m_hat);
    rec.proprio = Array({kProprioDim});
    for (int i = 0; i < kProprioDim; ++i)
      rec.proprio[static_cast<std::size_t>(i)] =
          demo.steps[t0].obs.proprio[static_cast<std::size_t>(i)];
    seq.decisions.push_back(std::move(rec));
    for (int h = 0; h < horizon; ++h) {
      const std::size_t t = t0 + static_cast<std::size_t>(h);
      if (t >= demo.steps.size()) break;
      const auto a = demo.steps[t].action.to_array();
      for (int j = 0; j < a_dim; ++j) {
        seq.targets.at(d, static_cast<std::size_t>(h * a_dim + j)) =
            a[static_cast<std::size_t>(j)];
        seq.mask.at(d, static_cast<std::size_t>(h * a_dim + j)) = 1.0;
      }
    }
  }
  return seq;
}

// Chunk-mean loss of one teacher-forced sequence under soft Top-K gating.
// Gate thresholds are taken from the current scores unless the caller
// supplies frozen ones (gradient checks do).
inline Value bc_sequence_loss_t(Tape& tape, const SparsifierRefs& sp_refs,
                                const SolverRefs& sol_refs,
                                const TeacherSequence& seq,
                                const SparsifierParams& sp_params,
                                bool no_sparsifier,
                                const std::vector<double>* frozen_thresholds =
                                    nullptr) {
  std::vector<Value> e_rows;
  e_rows.reserve(seq.decisions.size());
  for (std::size_t d = 0; d < seq.decisions.size(); ++d) {
    const DecisionRecord& rec = seq.decisions[d];
    std::optional<double> threshold;
    if (!no_sparsifier) {
      if (frozen_thresholds) {
        threshold = frozen_thresholds->at(d);
      } else {
        const Array q = embed_primitive(sp_params, rec.u_hat);
        const Array scores = relevance(sp_params, q, rec.psi.tokens);
        threshold = topk_threshold(scores, sp_params.K);
      }
    }
    PolicyRefs refs{ClassifierRefs{}, sp_refs, sol_refs};
    e_rows.push_back(build_e_token_t(tape, refs, rec, no_sparsifier, threshold,
                                     sp_params.tau));
  }
  Value means = solver_forward_t(sol_refs, stack_rows(e_rows));
  return masked_mse_t(means, seq.targets, seq.mask);
}

struct SolverTrainReport {
  double final_loss = 0.0;
};

// Minimizes the chunked l2 BC loss over all demos. The loss reported and
// minimized is the mean over demo sequences.
inline SolverTrainReport pretrain_solver(PolicyParams& params,
                                         const std::vector<Demo>& demos,
                                         const Featurizer& featurizer,
                                         const BcConfig& cfg,
                                         AblationFlags flags = {}) {
  if (demos.empty())
    throw std::invalid_argument("pretrain_solver: no demonstrations");
  std::vector<TeacherSequence> seqs;
  seqs.reserve(demos.size() * static_cast<std::size_t>(params.solver.horizon));
  for (const auto& demo : demos)
    for (int offset = 0; offset < params.solver.horizon; ++offset) {
      if (static_cast<std::size_t>(offset) >= demo.steps.size()) break;
      seqs.push_back(build_teacher_sequence(demo, featurizer,
                                            params.solver.horizon,
                                            params.solver.a_dim, offset));
    }

  SolverBundleView view{params.sparsifier, params.solver};
  Adam adam(cfg.solver_lr);
  adam.set_weight_decay(cfg.solver_weight_decay);
  Rng rng(Rng::derive(cfg.seed, 0x50));
  SolverTrainReport report;
  std::vector<std::size_t> order(seqs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  // Each pass trains on a seeded random suffix of every sequence: histories
  // then start anywhere, so step bookkeeping cannot stand in for the state.
  auto suffix_of = [](const TeacherSequence& seq, std::size_t from) {
    if (from == 0) return seq;
    TeacherSequence out;
    out.decisions.assign(seq.decisions.begin() +
                             static_cast<std::ptrdiff_t>(from),
                         seq.decisions.end());
    const std::size_t rows = seq.targets.rows() - from, w = seq.targets.cols();
    out.targets = Array({rows, w});
    out.mask = Array({rows, w});
    std::copy(seq.targets.data.begin() + from * w, seq.targets.data.end(),
              out.targets.data.begin());
    std::copy(seq.mask.data.begin() + from * w, seq.mask.data.end(),
              out.mask.data.begin());
    return out;
  };

  for (int epoch = 0; epoch < cfg.solver_epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng.uniform_index(i)]);
    double epoch_loss = 0.0;
    for (auto si : order) {
      const std::size_t crop =
          epoch % 2 == 0 ? 0
                         : rng.uniform_index(seqs[si].decisions.size());
      const TeacherSequence seq = suffix_of(seqs[si], crop);
      Tape tape;
      SparsifierRefs sp_refs = register_sparsifier(tape, params.sparsifier);
      SolverRefs sol_refs = register_solver(tape, params.solver);
      Value loss = bc_sequence_loss_t(tape, sp_refs, sol_refs, seq,
                                      params.sparsifier, flags.no_sparsifier);
      const double lv = tape.val(loss).value();
      if (!std::isfinite(lv))
        throw std::runtime_error(
            "pretrain_solver: loss diverged; keeping last checkpoint");
      epoch_loss += lv;
      tape.backward(loss);
      auto grads = collect_param_grads(tape, view);
      adam.step(view, grads, cfg.grad_clip);
    }
    report.final_loss = epoch_loss / static_cast<double>(seqs.size());
  }
  return report;
}

// Whole-pipeline BC loss of the spec's contract: mean over demos of the
// masked chunk-mean MSE, teacher-forced.
inline double bc_loss(const PolicyParams& params,
                      const std::vector<Demo>& demos,
                      const Featurizer& featurizer,
                      AblationFlags flags = {}) {
  double total = 0.0;
  for (const auto& demo : demos) {
    const auto seq = build_teacher_sequence(demo, featurizer,
                                            params.solver.horizon,
                                            params.solver.a_dim);
    Tape tape;
    SparsifierRefs sp = register_sparsifier(tape, params.sparsifier);
    SolverRefs sol = register_solver(tape, params.solver);
    total += tape
                 .val(bc_sequence_loss_t(tape, sp, sol, seq, params.sparsifier,
                                         flags.no_sparsifier))
                 .value();
  }
  return total / static_cast<double>(demos.size());
}

}  // namespace nsgrid
