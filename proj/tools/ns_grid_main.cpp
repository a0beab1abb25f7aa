// ns-grid: operator surface for the grid manipulation pipeline.
//
//   ns-grid gen-demos --config cfg.json
//   ns-grid pretrain  --config cfg.json
//   ns-grid train     --config cfg.json [ablation flags]
//   ns-grid eval      --config cfg.json --checkpoint path [--perturbed]
//
// Outputs land in <run_dir>/<config-hash>-<timestamp>/; later stages reuse
// the newest directory matching the config hash.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "nsgrid/bc.hpp"
#include "nsgrid/checkpoint.hpp"
#include "nsgrid/config.hpp"
#include "nsgrid/demo.hpp"
#include "nsgrid/grpo.hpp"
#include "nsgrid/metrics.hpp"

namespace fs = std::filesystem;
using namespace nsgrid;

namespace {

std::string timestamp_utc() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y%m%d-%H%M%S", &tm);
  return buf;
}

fs::path find_run_dir(const Config& cfg, const std::string& hash) {
  if (!fs::exists(cfg.run_dir)) return {};
  std::vector<fs::path> hits;
  for (const auto& entry : fs::directory_iterator(cfg.run_dir))
    if (entry.is_directory() &&
        entry.path().filename().string().rfind(hash + "-", 0) == 0)
      hits.push_back(entry.path());
  if (hits.empty()) return {};
  std::sort(hits.begin(), hits.end());
  return hits.back();
}

fs::path create_run_dir(const Config& cfg, const std::string& hash) {
  fs::path dir = fs::path(cfg.run_dir) / (hash + "-" + timestamp_utc());
  for (int suffix = 1; fs::exists(dir); ++suffix)
    dir = fs::path(cfg.run_dir) /
          (hash + "-" + timestamp_utc() + "-" + std::to_string(suffix));
  fs::create_directories(dir);
  std::ofstream out(dir / "config.json", std::ios::binary);
  out << config_to_json(cfg).dump(2) << '\n';
  return dir;
}

fs::path require_run_dir(const Config& cfg, const std::string& hash,
                         const char* needed_by, const char* prior_command) {
  const fs::path dir = find_run_dir(cfg, hash);
  if (dir.empty()) {
    std::fprintf(stderr,
                 "error: %s needs artifacts for config hash %s; run "
                 "`ns-grid %s --config <file>` first\n",
                 needed_by, hash.c_str(), prior_command);
    std::exit(2);
  }
  return dir;
}

std::string ablation_tag(const AblationFlags& f) {
  std::string tag;
  if (f.no_plan_constraint) tag += "+no-plan-constraint";
  if (f.no_sparsifier) tag += "+no-sparsifier";
  if (f.no_seg_reward) tag += "+no-seg-reward";
  if (f.no_prog_reward) tag += "+no-prog-reward";
  if (f.no_kl) tag += "+no-kl";
  return tag.empty() ? "full" : tag.substr(1);
}

std::vector<Task> config_tasks(const Config& cfg) {
  std::vector<Task> tasks;
  for (const auto& t : cfg.tasks) tasks.push_back(make_task(t, 0));
  return tasks;
}

int cmd_gen_demos(const Config& cfg) {
  const std::string hash = config_hash(cfg);
  const fs::path dir = create_run_dir(cfg, hash);
  const auto tasks = config_tasks(cfg);
  const auto demos = generate_demos(tasks, cfg.demos_per_task, cfg.demo_seed,
                                    cfg.env);
  fs::create_directories(dir / "demos");
  for (std::size_t i = 0; i < demos.size(); ++i) {
    char name[64];
    std::snprintf(name, sizeof(name), "demo_%03zu.jsonl", i);
    write_demo_file(demos[i], (dir / "demos" / name).string());
  }
  std::printf("wrote %zu demonstration files under %s\n", demos.size(),
              (dir / "demos").string().c_str());
  return 0;
}

std::vector<Demo> load_demos(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir / "demos"))
    if (entry.path().extension() == ".jsonl") files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  std::vector<Demo> demos;
  for (const auto& f : files) demos.push_back(read_demo_file(f.string()));
  return demos;
}

int cmd_pretrain(const Config& cfg) {
  const std::string hash = config_hash(cfg);
  const fs::path dir = require_run_dir(cfg, hash, "pretrain", "gen-demos");
  if (!fs::exists(dir / "demos")) {
    std::fprintf(stderr,
                 "error: %s holds no demos; run `ns-grid gen-demos` first\n",
                 dir.string().c_str());
    return 2;
  }
  const auto demos = load_demos(dir);
  Featurizer featurizer(cfg.featurizer);
  PolicyParams params = init_policy(cfg.model, featurizer);

  const auto crep = pretrain_classifier(params.classifier, demos, featurizer,
                                        cfg.bc);
  std::printf("classifier: window loss %.4f, validation accuracy %.3f\n",
              crep.final_loss, crep.best_validation_accuracy);
  const auto srep = pretrain_solver(params, demos, featurizer, cfg.bc);
  std::printf("solver: chunk-mean mse %.6f\n", srep.final_loss);

  Checkpoint ckpt;
  ckpt.kind = "stage1";
  ckpt.config_hash = hash;
  ckpt.featurizer = cfg.featurizer;
  ckpt.arch = cfg.model;
  ckpt.params = params;
  ckpt.bc_ref = params;  // pi_BC freezes here
  write_checkpoint(ckpt, (dir / "stage1.ckpt.json").string());
  std::printf("wrote %s\n", (dir / "stage1.ckpt.json").string().c_str());
  return 0;
}

int cmd_train(const Config& cfg, const AblationFlags& flags) {
  const std::string hash = config_hash(cfg);
  const fs::path dir = require_run_dir(cfg, hash, "train", "pretrain");
  const fs::path stage1 = dir / "stage1.ckpt.json";
  if (!fs::exists(stage1)) {
    std::fprintf(stderr,
                 "error: %s missing; run `ns-grid pretrain --config <file>` "
                 "first\n",
                 stage1.string().c_str());
    return 2;
  }
  Checkpoint start = read_checkpoint(stage1.string());
  Featurizer featurizer(start.featurizer);
  const auto tasks = config_tasks(cfg);
  const std::string tag = ablation_tag(flags);

  std::ofstream metrics(dir / ("metrics-" + tag + ".csv"), std::ios::binary);
  std::ofstream timing(dir / ("timing-" + tag + ".csv"), std::ios::binary);
  metrics << kMetricsHeader;
  timing << kTimingHeader;

  auto result = train_grpo(cfg.rl, start.params, start.bc_ref, featurizer,
                           tasks, cfg.env, flags,
                           [&](const IterationStats& s) {
                             write_metrics_row(metrics, s);
                             write_timing_row(timing, s);
                           });

  Checkpoint ckpt;
  ckpt.kind = "rl";
  ckpt.config_hash = hash;
  ckpt.featurizer = start.featurizer;
  ckpt.arch = start.arch;
  ckpt.ablation = flags;
  ckpt.params = result.params;
  ckpt.bc_ref = start.bc_ref;
  ckpt.bank = result.bank;
  const fs::path out = dir / ("rl-" + tag + ".ckpt.json");
  write_checkpoint(ckpt, out.string());
  std::printf("wrote %s and metrics-%s.csv (%d iterations)\n",
              out.string().c_str(), tag.c_str(), cfg.rl.iterations);
  return 0;
}

int cmd_eval(const Config& cfg, const std::string& checkpoint_path,
             bool perturbed) {
  Checkpoint ckpt = read_checkpoint(checkpoint_path);
  Featurizer featurizer(ckpt.featurizer);

  std::ofstream attention;
  if (cfg.eval.dump_attention) {
    const fs::path apath =
        fs::path(checkpoint_path).parent_path() / "attention.csv";
    attention.open(apath, std::ios::binary);
    attention << "episode,decision,scores,selected,weights\n";
  }
  const auto outcome =
      evaluate_policy(ckpt.params, featurizer, cfg, ckpt.ablation, perturbed,
                      cfg.eval.dump_attention ? &attention : nullptr);

  const fs::path base = fs::path(checkpoint_path).parent_path();
  std::string name = "eval-" + fs::path(checkpoint_path).stem().string();
  if (perturbed) name += "-perturbed";
  const fs::path out = base / (name + ".csv");
  std::ofstream os(out, std::ios::binary);
  write_eval_csv(os, outcome);
  std::printf("mean success rate %.4f over %zu tasks x %zu seeds -> %s\n",
              outcome.mean, cfg.tasks.size(), cfg.eval.seeds.size(),
              out.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ns-grid: plan-constrained hierarchical policy on ManipGrid"};
  app.require_subcommand(1);

  std::string config_path;
  std::string checkpoint_path;
  bool perturbed = false;
  AblationFlags flags;

  auto add_config = [&config_path](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "config file (JSON)")
        ->required();
  };

  auto* gen = app.add_subcommand("gen-demos", "generate expert demonstrations");
  add_config(gen);
  auto* pre = app.add_subcommand("pretrain", "Stage-I supervised pretraining");
  add_config(pre);
  auto* trn = app.add_subcommand("train", "online GRPO optimization");
  add_config(trn);
  trn->add_flag("--no-plan-constraint", flags.no_plan_constraint,
                "decode primitives without the monotone plan mask");
  trn->add_flag("--no-sparsifier", flags.no_sparsifier,
                "replace Top-K fusion with mean-pooled value tokens");
  trn->add_flag("--no-seg-reward", flags.no_seg_reward,
                "drop the segment milestone reward");
  trn->add_flag("--no-prog-reward", flags.no_prog_reward,
                "drop the potential-based progress reward");
  trn->add_flag("--no-kl", flags.no_kl, "drop the KL anchor (beta = 0)");
  auto* evl = app.add_subcommand("eval", "deterministic policy evaluation");
  add_config(evl);
  evl->add_option("--checkpoint", checkpoint_path, "checkpoint to evaluate")
      ->required();
  evl->add_flag("--perturbed", perturbed,
                "re-seed layouts and add distractor objects");

  CLI11_PARSE(app, argc, argv);

  try {
    const Config cfg = load_config(config_path);
    if (gen->parsed()) return cmd_gen_demos(cfg);
    if (pre->parsed()) return cmd_pretrain(cfg);
    if (trn->parsed()) return cmd_train(cfg, flags);
    if (evl->parsed()) return cmd_eval(cfg, checkpoint_path, perturbed);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
