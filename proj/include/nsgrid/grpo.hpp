#pragma once

// Online optimization: group rollout collection under a frozen snapshot,
// group-normalized advantages, trajectory importance ratios, KL anchoring to
// the behavior-cloning reference, and the outer training loop.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <mutex>
#include <ostream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "nsgrid/optim.hpp"
#include "nsgrid/pipeline.hpp"
#include "nsgrid/reward.hpp"

namespace nsgrid {

struct Rollout {
  std::vector<DecisionRecord> records;
  std::vector<Array> latents;               // per decision
  std::vector<double> r_task_per_decision;  // summed per chunk
  std::vector<int> pointer_trace;
  double ret = 0.0;  // sum_t gamma^t r_t over decisions
  bool success = false;
  int env_steps = 0;
  double stored_log_prob = 0.0;  // index + chunk factors under Theta_old
};

struct RLConfig {
  int group = 8;
  double gamma = 0.99;
  double beta = 0.05;
  double lr = 3e-4;
  double grad_clip = 1.0;
  double lambda_seg = 0.5;
  double lambda_prog = 0.2;
  double adv_epsilon = 1e-8;
  int refresh_period = 10;
  int prototype_count = 3;
  int buffer_cap = 64;
  int iterations = 300;
  std::uint64_t seed = 1;
  int threads = 0;  // 0: hardware concurrency

  void validate() const {
    if (group < 2) throw std::invalid_argument("RLConfig: G >= 2 required");
    if (gamma <= 0.0 || gamma >= 1.0)
      throw std::invalid_argument("RLConfig: gamma must lie in (0,1)");
    if (beta < 0.0) throw std::invalid_argument("RLConfig: beta >= 0 required");
    if (adv_epsilon <= 0.0)
      throw std::invalid_argument("RLConfig: epsilon > 0 required");
  }
};

// ---------------------------------------------------------------------------
// rollout collection (Theta_old snapshot, stochastic index + chunk)
// ---------------------------------------------------------------------------

inline Rollout collect_rollout(ManipGrid& env, const Task& task,
                               const PolicyParams& snapshot,
                               const Featurizer& featurizer,
                               const PrototypeBank& bank, const RLConfig& cfg,
                               AblationFlags flags, Rng& rng) {
  PolicyRuntime rt(snapshot, featurizer, task.plan, flags);
  Observation obs = env.reset(task);
  Rollout out;
  const double lambda_seg = flags.no_seg_reward ? 0.0 : cfg.lambda_seg;
  const double lambda_prog = flags.no_prog_reward ? 0.0 : cfg.lambda_prog;
  int t = 0;
  double discount = 1.0;
  while (!env.done()) {
    auto d = rt.decide(obs, task.instruction, /*sample_index=*/true, &rng);
    DecisionRecord& rec = d.record;

    rec.latent = featurizer.shaping_encode(obs);
    const double phi = potential(rec.latent, rec.m_hat, bank);

    rec.chunk = sample_chunk(d.dist, rng);
    rec.log_chunk_old = chunk_log_prob(d.dist, rec.chunk);

    for (int h = 0; h < snapshot.solver.horizon && !env.done(); ++h) {
      ActionVec a{rec.chunk.at(static_cast<std::size_t>(h), 0),
                  rec.chunk.at(static_cast<std::size_t>(h), 1),
                  rec.chunk.at(static_cast<std::size_t>(h), 2),
                  rec.chunk.at(static_cast<std::size_t>(h), 3)};
      auto sr = env.step(a);
      rec.r_task += sr.r_task;
      ++rec.env_steps;
      obs = sr.obs;
    }
    out.env_steps += rec.env_steps;

    // Potential of the boundary state under the current segment index;
    // terminals are absorbing with Phi = 0.
    const double phi_next =
        env.done() ? 0.0
                   : potential(featurizer.shaping_encode(obs), rec.m_hat, bank);
    rec.reward = shaped_reward(rec.r_task, rec.b, phi, phi_next, cfg.gamma,
                               lambda_seg, lambda_prog);

    out.ret += discount * rec.reward;
    discount *= cfg.gamma;
    out.stored_log_prob += rec.log_index_old + rec.log_chunk_old;
    out.latents.push_back(rec.latent);
    out.r_task_per_decision.push_back(rec.r_task);
    out.records.push_back(std::move(rec));
    ++t;
  }
  out.pointer_trace = rt.pointer_trace();
  out.success = env.success();

  // Chunk accounting (Appendix-style invariant): one invocation per started
  // chunk of H environment steps.
  const int expected =
      (out.env_steps + snapshot.solver.horizon - 1) / snapshot.solver.horizon;
  if (rt.invocations() != expected)
    throw std::logic_error("collect_rollout: decision count mismatch");
  return out;
}

// ---------------------------------------------------------------------------
// group-normalized advantages (population standard deviation)
// ---------------------------------------------------------------------------

inline std::vector<double> group_advantages(const std::vector<double>& returns,
                                            double epsilon) {
  if (returns.size() < 2)
    throw std::invalid_argument("group_advantages: G >= 2 required");
  const double n = static_cast<double>(returns.size());
  double mean = 0.0;
  for (double r : returns) mean += r;
  mean /= n;
  double var = 0.0;
  for (double r : returns) var += (r - mean) * (r - mean);
  var /= n;
  const double denom = std::sqrt(var) + epsilon;
  std::vector<double> adv(returns.size());
  for (std::size_t i = 0; i < returns.size(); ++i)
    adv[i] = (returns[i] - mean) / denom;
  return adv;
}

// ---------------------------------------------------------------------------
// trajectory scoring on the tape
// ---------------------------------------------------------------------------

namespace detail {

// Log-probability rows over ops for every decision (constants: the stored
// pooled features).
inline Value logp_rows_t(Tape& tape, const PolicyRefs& refs,
                         const Rollout& rollout) {
  std::vector<Value> rows;
  rows.reserve(rollout.records.size());
  for (const auto& rec : rollout.records)
    rows.push_back(tape.constant(rec.psi_bar));
  return log_softmax(classifier_logits_t(refs.classifier, stack_rows(rows)),
                     1);
}

// Index-factor log-prob of the recorded choice at decision t.
inline Value index_log_prob_t(Value logp_rows, const Rollout& rollout,
                              const Plan& plan, std::size_t t,
                              AblationFlags flags) {
  const DecisionRecord& rec = rollout.records[t];
  Value lp_row = row(logp_rows, t);
  if (!flags.no_plan_constraint)
    return masked_index_log_prob_t(lp_row, plan, rec.m_prev, rec.m_hat);
  // Unconstrained decoding: renormalize over non-pad ops.
  std::vector<std::size_t> ops;
  for (std::size_t u = 0; u + 1 < kNumPrimitiveOps; ++u) ops.push_back(u);
  Value non_pad = gather(lp_row, ops);
  Value lse = log_v(sum_all(exp_v(non_pad)));
  Value chosen = pick(lp_row, static_cast<std::size_t>(rec.u_hat.op));
  return sub(chosen, lse);
}

// Chunk-mean rows for a rollout, rebuilding the sparsifier path under the
// current parameters with the recorded Top-K selections.
inline Value chunk_mean_rows_t(Tape& tape, const PolicyRefs& refs,
                               const Rollout& rollout, AblationFlags flags) {
  std::vector<Value> e_rows;
  e_rows.reserve(rollout.records.size());
  for (const auto& rec : rollout.records)
    e_rows.push_back(build_e_token_t(tape, refs, rec, flags.no_sparsifier,
                                     std::nullopt, 0.0));
  return solver_forward_t(refs.solver, stack_rows(e_rows));
}

inline Array flat_chunk(const DecisionRecord& rec) {
  Array f = rec.chunk;
  f.shape = {rec.chunk.numel()};
  return f;
}

}  // namespace detail

// Sum over decisions of the masked-index log-prob and the chunk log-prob of
// the recorded actions (Theta's side of the importance ratio).
inline Value traj_log_prob_t(Tape& tape, const PolicyRefs& refs,
                             const Rollout& rollout, const Plan& plan,
                             AblationFlags flags = {}) {
  if (rollout.records.empty())
    throw std::invalid_argument("traj_log_prob: empty rollout");
  Value logp_rows = detail::logp_rows_t(tape, refs, rollout);
  Value mean_rows = detail::chunk_mean_rows_t(tape, refs, rollout, flags);
  Value tiled = tiled_log_std_t(refs.solver);
  Value total = tape.constant(0.0);
  for (std::size_t t = 0; t < rollout.records.size(); ++t) {
    Value idx_lp = detail::index_log_prob_t(logp_rows, rollout, plan, t, flags);
    Value chunk_lp = chunk_log_prob_t(row(mean_rows, t), tiled,
                                      detail::flat_chunk(rollout.records[t]));
    total = add(total, add(idx_lp, chunk_lp));
  }
  return total;
}

inline double traj_log_prob(const PolicyParams& params, const Rollout& rollout,
                            const Plan& plan, AblationFlags flags = {}) {
  Tape tape;
  PolicyRefs refs = register_policy(tape, params);
  return tape.val(traj_log_prob_t(tape, refs, rollout, plan, flags)).value();
}

// Mean over decisions of the closed-form index KL plus the closed-form chunk
// KL against the frozen BC reference, both conditioned on the recorded
// context. Exactly zero at Theta = Theta_BC.
inline Value kl_penalty_t(Tape& tape, const PolicyRefs& refs,
                          const Rollout& rollout, const Plan& plan,
                          const PolicyParams& bc, AblationFlags flags = {}) {
  if (rollout.records.empty())
    throw std::invalid_argument("kl_penalty: empty rollout");
  Value logp_rows = detail::logp_rows_t(tape, refs, rollout);

  // Theta's chunk distributions on the recorded token history.
  Array e_hist({rollout.records.size(),
                rollout.records[0].e_token.numel()});
  for (std::size_t t = 0; t < rollout.records.size(); ++t)
    std::copy(rollout.records[t].e_token.data.begin(),
              rollout.records[t].e_token.data.end(),
              e_hist.data.begin() + t * e_hist.cols());
  Value mean_rows = solver_forward_t(refs.solver, tape.constant(e_hist));
  Value tiled = tiled_log_std_t(refs.solver);

  const Array bc_means = solver_forward(bc.solver, e_hist);
  const Array bc_std = chunk_std(bc.solver);
  const std::size_t chunk_n = bc_means.cols();
  Array bc_std_tiled({chunk_n});
  for (std::size_t i = 0; i < chunk_n; ++i)
    bc_std_tiled[i] = bc_std[i % bc_std.numel()];

  Value total = tape.constant(0.0);
  for (std::size_t t = 0; t < rollout.records.size(); ++t) {
    const DecisionRecord& rec = rollout.records[t];
    // Index-factor KL over the admissible atoms.
    const Array bc_dist = primitive_dist(bc.classifier, rec.psi_bar);
    Value idx_kl = tape.constant(0.0);
    if (!flags.no_plan_constraint) {
      const auto K = admissible_set(rec.m_prev, plan.length());
      if (K.size() == 2) {
        const auto bc_masked = masked_index_policy(bc_dist, plan, rec.m_prev);
        Value lp_row = row(logp_rows, t);
        Value la = pick(lp_row, static_cast<std::size_t>(plan.at(K[0]).op));
        Value lb = pick(lp_row, static_cast<std::size_t>(plan.at(K[1]).op));
        Value lse = log_v(add(exp_v(la), exp_v(lb)));
        Value lam = sub(la, lse), lbm = sub(lb, lse);
        Value ka = mul(exp_v(lam),
                       add_scalar(lam, -std::log(bc_masked[0])));
        Value kb = mul(exp_v(lbm),
                       add_scalar(lbm, -std::log(bc_masked[1])));
        idx_kl = add(ka, kb);
      }
    } else {
      const auto bc_probs = unmasked_op_dist(bc_dist);
      std::vector<std::size_t> ops;
      for (std::size_t u = 0; u + 1 < kNumPrimitiveOps; ++u) ops.push_back(u);
      Value non_pad = gather(row(logp_rows, t), ops);
      Value lse = log_v(sum_all(exp_v(non_pad)));
      for (std::size_t u = 0; u < ops.size(); ++u) {
        Value lpu = sub(pick(non_pad, u), lse);
        idx_kl = add(idx_kl, mul(exp_v(lpu),
                                 add_scalar(lpu, -std::log(bc_probs[u]))));
      }
    }

    Array bc_mean_row({chunk_n});
    for (std::size_t j = 0; j < chunk_n; ++j)
      bc_mean_row[j] = bc_means.at(t, j);
    Value chunk = chunk_kl_t(row(mean_rows, t), tiled, bc_mean_row,
                             bc_std_tiled);
    total = add(total, add(idx_kl, chunk));
  }
  return mul_scalar(total, 1.0 / static_cast<double>(rollout.records.size()));
}

inline double kl_penalty(const PolicyParams& params, const Rollout& rollout,
                         const Plan& plan, const PolicyParams& bc,
                         AblationFlags flags = {}) {
  Tape tape;
  PolicyRefs refs = register_policy(tape, params);
  return tape.val(kl_penalty_t(tape, refs, rollout, plan, bc, flags)).value();
}

// ---------------------------------------------------------------------------
// the GRPO objective
// ---------------------------------------------------------------------------

inline constexpr double kRatioClamp = 20.0;  // ratio in [e^-20, e^20]

struct RolloutTerm {
  Value value;         // r_i(Theta) * A_i - beta * KL_i
  double ratio = 1.0;  // at build time Theta == Theta_old
  double kl = 0.0;
};

inline RolloutTerm rollout_objective_term_t(Tape& tape, const PolicyRefs& refs,
                                            const Rollout& rollout,
                                            const Plan& plan, double advantage,
                                            double beta,
                                            const PolicyParams& bc,
                                            AblationFlags flags = {}) {
  Value lp = traj_log_prob_t(tape, refs, rollout, plan, flags);
  Value ratio = exp_v(clamp_v(add_scalar(lp, -rollout.stored_log_prob),
                              -kRatioClamp, kRatioClamp));
  RolloutTerm term;
  term.value = mul_scalar(ratio, advantage);
  term.ratio = tape.val(ratio).value();
  // KL is always measured (the drift metric is reported even for beta = 0);
  // it enters the objective only when anchoring is on.
  Value kl = kl_penalty_t(tape, refs, rollout, plan, bc, flags);
  term.kl = tape.val(kl).value();
  if (beta != 0.0) term.value = sub(term.value, mul_scalar(kl, beta));
  return term;
}

// Full-group objective on one tape: (1/G) sum_i [r_i A_i - beta KL_i].
inline Value grpo_objective_t(Tape& tape, const PolicyRefs& refs,
                              const std::vector<Rollout>& group,
                              const Plan& plan,
                              const std::vector<double>& advantages,
                              double beta, const PolicyParams& bc,
                              AblationFlags flags = {}) {
  Value acc = tape.constant(0.0);
  for (std::size_t i = 0; i < group.size(); ++i) {
    auto term = rollout_objective_term_t(tape, refs, group[i], plan,
                                         advantages[i], beta, bc, flags);
    acc = add(acc, term.value);
  }
  return mul_scalar(acc, 1.0 / static_cast<double>(group.size()));
}

// ---------------------------------------------------------------------------
// outer training loop
// ---------------------------------------------------------------------------

struct IterationStats {
  int iteration = 0;
  double mean_return = 0.0;
  double success_rate = 0.0;
  double mean_kl = 0.0;
  double mean_ratio = 0.0;
  std::vector<std::size_t> buffer_sizes;
  double wall_ms = 0.0;
  bool skipped = false;  // non-finite gradient
};

struct TrainResult {
  PolicyParams params;
  PrototypeBank bank{kMaxPlanLength};
  SegmentBufferBank buffers{64, kMaxPlanLength};
  std::vector<IterationStats> history;
};

template <typename PerIteration>
TrainResult train_grpo(const RLConfig& cfg, PolicyParams theta,
                       const PolicyParams& bc_ref,
                       const Featurizer& featurizer,
                       const std::vector<Task>& tasks, EnvParams env_params,
                       AblationFlags flags, PerIteration&& per_iteration) {
  cfg.validate();
  if (tasks.empty()) throw std::invalid_argument("train_grpo: no tasks");
  TrainResult result;
  result.buffers = SegmentBufferBank(cfg.buffer_cap, kMaxPlanLength);
  result.bank = PrototypeBank(kMaxPlanLength);

  Adam adam(cfg.lr);
  Rng loop_rng(Rng::derive(cfg.seed, 0xa11ce));
  const double effective_beta = flags.no_kl ? 0.0 : cfg.beta;
  const unsigned n_threads =
      cfg.threads > 0 ? static_cast<unsigned>(cfg.threads)
                      : std::max(1u, std::thread::hardware_concurrency());

  for (int iter = 1; iter <= cfg.iterations; ++iter) {
    const auto t0 = std::chrono::steady_clock::now();
    if (iter > 1 && (iter - 1) % cfg.refresh_period == 0)
      result.bank =
          refresh_prototypes(result.buffers, cfg.prototype_count,
                             Rng::derive(cfg.seed, 0xbead, iter), result.bank);

    const std::size_t task_idx = loop_rng.uniform_index(tasks.size());
    Task task = tasks[task_idx];
    task.seed = loop_rng.next_u64();

    // G rollouts under the frozen snapshot, embarrassingly parallel; every
    // rollout draws from its own seeded stream so scheduling cannot matter.
    const PolicyParams snapshot = theta;
    std::vector<Rollout> group(static_cast<std::size_t>(cfg.group));
    {
      std::vector<std::thread> pool;
      std::size_t next = 0;
      auto worker = [&](std::size_t i) {
        Rng rng(Rng::derive(cfg.seed, static_cast<std::uint64_t>(iter),
                            static_cast<std::uint64_t>(i)));
        ManipGrid env(env_params);
        group[i] = collect_rollout(env, task, snapshot, featurizer,
                                   result.bank, cfg, flags, rng);
      };
      const unsigned workers =
          std::min<unsigned>(n_threads, static_cast<unsigned>(cfg.group));
      std::mutex mu;
      for (unsigned w = 0; w < workers; ++w)
        pool.emplace_back([&]() {
          for (;;) {
            std::size_t i;
            {
              std::lock_guard<std::mutex> lock(mu);
              if (next >= group.size()) return;
              i = next++;
            }
            worker(i);
          }
        });
      for (auto& th : pool) th.join();
    }

    for (auto& rollout : group) {
      auto segs = parse_segments(rollout.pointer_trace, rollout.latents,
                                 !flags.no_plan_constraint);
      update_buffers(result.buffers, segs, rollout.r_task_per_decision,
                     rollout.success);
    }

    std::vector<double> returns;
    returns.reserve(group.size());
    for (const auto& r : group) returns.push_back(r.ret);
    const auto advantages = group_advantages(returns, cfg.adv_epsilon);

    // Per-rollout tapes in parallel; gradients reduced in index order.
    std::vector<std::vector<Array>> grads(group.size());
    std::vector<double> kls(group.size(), 0.0), ratios(group.size(), 1.0);
    {
      std::vector<std::thread> pool;
      std::size_t next = 0;
      std::mutex mu;
      auto worker = [&](std::size_t i) {
        Tape tape;
        PolicyRefs refs = register_policy(tape, theta);
        auto term = rollout_objective_term_t(tape, refs, group[i], task.plan,
                                             advantages[i], effective_beta,
                                             bc_ref, flags);
        tape.backward(term.value);
        grads[i] = collect_param_grads(tape, theta);
        kls[i] = term.kl;
        ratios[i] = term.ratio;
      };
      const unsigned workers =
          std::min<unsigned>(n_threads, static_cast<unsigned>(group.size()));
      for (unsigned w = 0; w < workers; ++w)
        pool.emplace_back([&]() {
          for (;;) {
            std::size_t i;
            {
              std::lock_guard<std::mutex> lock(mu);
              if (next >= grads.size()) return;
              i = next++;
            }
            worker(i);
          }
        });
      for (auto& th : pool) th.join();
    }
    std::vector<Array> total;
    for (std::size_t i = 0; i < grads.size(); ++i)
      accumulate_grads(total, grads[i], 1.0 / static_cast<double>(cfg.group));

    IterationStats stats;
    stats.iteration = iter;
    for (std::size_t i = 0; i < group.size(); ++i) {
      stats.mean_return += returns[i];
      stats.success_rate += group[i].success ? 1.0 : 0.0;
      stats.mean_kl += kls[i];
      stats.mean_ratio += ratios[i];
    }
    const double g = static_cast<double>(cfg.group);
    stats.mean_return /= g;
    stats.success_rate /= g;
    stats.mean_kl /= g;
    stats.mean_ratio /= g;
    stats.buffer_sizes = result.buffers.sizes();

    const std::string bad = find_nonfinite_grad(theta, total);
    if (!bad.empty()) {
      stats.skipped = true;
      std::fprintf(stderr,
                   "[train] iteration %d skipped: non-finite gradient in %s\n",
                   iter, bad.c_str());
    } else {
      adam.step(theta, total, cfg.grad_clip, /*maximize=*/true);
    }

    stats.wall_ms = std::chrono::duration<double, std::milli>(
                        std::chrono::steady_clock::now() - t0)
                        .count();
    result.history.push_back(stats);
    per_iteration(stats);
  }
  result.params = std::move(theta);
  return result;
}

}  // namespace nsgrid
