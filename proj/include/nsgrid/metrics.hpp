#pragma once

// CSV output with deterministic shortest-round-trip float formatting, plus
// the evaluation protocol shared by the CLI and the acceptance suite.

#include <charconv>
#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

#include "nsgrid/config.hpp"
#include "nsgrid/grpo.hpp"

namespace nsgrid {

inline std::string fmt_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline const char* kMetricsHeader =
    "iteration,mean_return,success_rate,mean_kl,mean_ratio,buffer_sizes\n";
inline const char* kTimingHeader = "iteration,wall_ms\n";

inline void write_metrics_row(std::ostream& os, const IterationStats& s) {
  os << s.iteration << ',' << fmt_double(s.mean_return) << ','
     << fmt_double(s.success_rate) << ',' << fmt_double(s.mean_kl) << ','
     << fmt_double(s.mean_ratio) << ',';
  for (std::size_t i = 0; i < s.buffer_sizes.size(); ++i)
    os << (i ? ";" : "") << s.buffer_sizes[i];
  os << '\n';
}

// Wall time lives in its own file so metrics bytes stay reproducible.
inline void write_timing_row(std::ostream& os, const IterationStats& s) {
  os << s.iteration << ',' << fmt_double(s.wall_ms) << '\n';
}

// ---------------------------------------------------------------------------
// evaluation protocol: E episodes per task and seed, argmax decoding,
// mean-action execution; layouts re-seeded per episode, perturbed mode adds
// distractor objects.
// ---------------------------------------------------------------------------

struct EvalOutcome {
  std::vector<std::string> task_names;
  // success rate per task per seed: [task][seed]
  std::vector<std::vector<double>> rates;
  double mean = 0.0;  // over tasks and seeds

  double task_mean(std::size_t t) const {
    double m = 0.0;
    for (double r : rates[t]) m += r;
    return m / static_cast<double>(rates[t].size());
  }
  double task_std(std::size_t t) const {
    const double m = task_mean(t);
    double v = 0.0;
    for (double r : rates[t]) v += (r - m) * (r - m);
    return std::sqrt(v / static_cast<double>(rates[t].size()));
  }
};

inline EvalOutcome evaluate_policy(const PolicyParams& params,
                                   const Featurizer& featurizer,
                                   const Config& cfg, AblationFlags flags,
                                   bool perturbed,
                                   std::ostream* attention_csv = nullptr) {
  EvalOutcome out;
  out.task_names = cfg.tasks;
  out.rates.assign(cfg.tasks.size(),
                   std::vector<double>(cfg.eval.seeds.size(), 0.0));
  int episode_index = 0;
  for (std::size_t ti = 0; ti < cfg.tasks.size(); ++ti) {
    for (std::size_t si = 0; si < cfg.eval.seeds.size(); ++si) {
      int wins = 0;
      for (int e = 0; e < cfg.eval.episodes_per_task; ++e) {
        Task task = make_task(
            cfg.tasks[ti],
            Rng::derive(cfg.eval.seeds[si], ti, static_cast<std::uint64_t>(e)),
            perturbed ? cfg.eval.perturb_distractors : 0);
        ManipGrid env(cfg.env);
        const auto res = run_eval_episode(env, task, params, featurizer, flags,
                                          attention_csv, episode_index++);
        // Chunk accounting: exactly ceil(T / H) solver invocations.
        const int expected = (res.env_steps + params.solver.horizon - 1) /
                             params.solver.horizon;
        if (res.decisions != expected)
          throw std::logic_error("evaluate_policy: decision count mismatch");
        wins += res.success ? 1 : 0;
      }
      out.rates[ti][si] = static_cast<double>(wins) /
                          static_cast<double>(cfg.eval.episodes_per_task);
    }
  }
  double total = 0.0;
  for (std::size_t ti = 0; ti < cfg.tasks.size(); ++ti)
    total += out.task_mean(ti);
  out.mean = total / static_cast<double>(cfg.tasks.size());
  return out;
}

inline void write_eval_csv(std::ostream& os, const EvalOutcome& out) {
  os << "task,success_rate_mean,success_rate_std\n";
  for (std::size_t t = 0; t < out.task_names.size(); ++t)
    os << '"' << out.task_names[t] << "\"," << fmt_double(out.task_mean(t))
       << ',' << fmt_double(out.task_std(t)) << '\n';
  os << "\"ALL\"," << fmt_double(out.mean) << ",\n";
}

}  // namespace nsgrid
