#pragma once

// One structured config file drives every stage. Unknown keys anywhere are
// rejected; the FNV-1a hash of the fully-populated canonical form is stamped
// into every artifact a run produces.

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "nsgrid/bc.hpp"
#include "nsgrid/checkpoint.hpp"
#include "nsgrid/env.hpp"
#include "nsgrid/grpo.hpp"
#include "nsgrid/perceive.hpp"

namespace nsgrid {

struct EvalConfig {
  int episodes_per_task = 20;
  std::vector<std::uint64_t> seeds = {101, 202, 303};
  int perturb_distractors = 2;
  bool dump_attention = false;
};

struct Config {
  Config() { featurizer.d_psi = 48; }  // desk default pairs with model.d_z

  EnvParams env;
  PerceiveParams featurizer;
  ModelArch model;
  BcConfig bc;
  int demos_per_task = 1;
  std::uint64_t demo_seed = 5;
  RLConfig rl;
  EvalConfig eval;
  std::vector<std::string> tasks = {
      "put the alphabet soup in the basket",
      "place the white mug on the left plate",
      "place the chocolate pudding right of the plate",
      "open the microwave and put the yellow-white mug in the microwave",
      "turn on the stove and place the moka pot on the stove",
      "place the white mug on the left plate and "
      "place the yellow and white mug on the right plate",
  };
  std::string run_dir = "runs";
};

namespace config_detail {

inline void check_keys(const nlohmann::ordered_json& j,
                       const std::vector<std::string>& allowed,
                       const std::string& where) {
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const auto& k : allowed) ok = ok || k == key;
    if (!ok)
      throw std::runtime_error("config: unknown key \"" + key + "\" in " +
                               where);
  }
}

template <typename T>
void get_if(const nlohmann::ordered_json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace config_detail

inline Config config_from_json(const nlohmann::ordered_json& j) {
  using config_detail::check_keys;
  using config_detail::get_if;
  Config c;
  check_keys(j, {"env", "featurizer", "model", "bc", "rl", "eval", "tasks",
                 "run_dir"},
             "top level");
  if (j.contains("env")) {
    const auto& e = j.at("env");
    check_keys(e, {"width", "min_objects"}, "env");
    get_if(e, "width", c.env.width);
    get_if(e, "min_objects", c.env.min_objects);
  }
  if (j.contains("featurizer")) {
    const auto& f = j.at("featurizer");
    check_keys(f,
               {"d_psi", "d_latent", "content_scale", "proprio_scale",
                "seed", "instr_hash_seed"},
               "featurizer");
    get_if(f, "d_psi", c.featurizer.d_psi);
    get_if(f, "d_latent", c.featurizer.d_latent);
    get_if(f, "content_scale", c.featurizer.content_scale);
    get_if(f, "proprio_scale", c.featurizer.proprio_scale);
    get_if(f, "seed", c.featurizer.seed);
    get_if(f, "instr_hash_seed", c.featurizer.instr_hash_seed);
  }
  c.featurizer.grid_width = c.env.width;
  if (j.contains("model")) {
    const auto& m = j.at("model");
    check_keys(m,
               {"classifier_hidden", "d_z", "e_op", "e_obj", "K", "tau",
                "query_gain", "d_model", "layers", "heads", "horizon",
                "init_log_std", "param_seed"},
               "model");
    get_if(m, "classifier_hidden", c.model.classifier_hidden);
    get_if(m, "d_z", c.model.d_z);
    get_if(m, "e_op", c.model.e_op);
    get_if(m, "e_obj", c.model.e_obj);
    get_if(m, "K", c.model.K);
    get_if(m, "tau", c.model.tau);
    get_if(m, "query_gain", c.model.query_gain);
    get_if(m, "d_model", c.model.d_model);
    get_if(m, "layers", c.model.layers);
    get_if(m, "heads", c.model.heads);
    get_if(m, "horizon", c.model.horizon);
    get_if(m, "init_log_std", c.model.init_log_std);
    get_if(m, "param_seed", c.model.param_seed);
  }
  if (j.contains("bc")) {
    const auto& b = j.at("bc");
    check_keys(b,
               {"classifier_epochs", "solver_epochs", "batch", "lr",
                "solver_lr", "solver_weight_decay", "grad_clip", "window",
                "validation_fraction",
                "seed", "demos_per_task", "demo_seed"},
               "bc");
    get_if(b, "classifier_epochs", c.bc.classifier_epochs);
    get_if(b, "solver_epochs", c.bc.solver_epochs);
    get_if(b, "batch", c.bc.batch);
    get_if(b, "lr", c.bc.lr);
    get_if(b, "solver_lr", c.bc.solver_lr);
    get_if(b, "solver_weight_decay", c.bc.solver_weight_decay);
    get_if(b, "grad_clip", c.bc.grad_clip);
    get_if(b, "window", c.bc.window);
    get_if(b, "validation_fraction", c.bc.validation_fraction);
    get_if(b, "seed", c.bc.seed);
    get_if(b, "demos_per_task", c.demos_per_task);
    get_if(b, "demo_seed", c.demo_seed);
  }
  if (j.contains("rl")) {
    const auto& r = j.at("rl");
    check_keys(r,
               {"group", "gamma", "beta", "lr", "grad_clip", "lambda_seg",
                "lambda_prog", "adv_epsilon", "refresh_period", "prototypes",
                "buffer_cap", "iterations", "seed", "threads"},
               "rl");
    get_if(r, "group", c.rl.group);
    get_if(r, "gamma", c.rl.gamma);
    get_if(r, "beta", c.rl.beta);
    get_if(r, "lr", c.rl.lr);
    get_if(r, "grad_clip", c.rl.grad_clip);
    get_if(r, "lambda_seg", c.rl.lambda_seg);
    get_if(r, "lambda_prog", c.rl.lambda_prog);
    get_if(r, "adv_epsilon", c.rl.adv_epsilon);
    get_if(r, "refresh_period", c.rl.refresh_period);
    get_if(r, "prototypes", c.rl.prototype_count);
    get_if(r, "buffer_cap", c.rl.buffer_cap);
    get_if(r, "iterations", c.rl.iterations);
    get_if(r, "seed", c.rl.seed);
    get_if(r, "threads", c.rl.threads);
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    check_keys(e,
               {"episodes_per_task", "seeds", "perturb_distractors",
                "dump_attention"},
               "eval");
    get_if(e, "episodes_per_task", c.eval.episodes_per_task);
    get_if(e, "seeds", c.eval.seeds);
    get_if(e, "perturb_distractors", c.eval.perturb_distractors);
    get_if(e, "dump_attention", c.eval.dump_attention);
  }
  if (j.contains("tasks")) c.tasks = j.at("tasks").get<std::vector<std::string>>();
  if (j.contains("run_dir")) c.run_dir = j.at("run_dir").get<std::string>();

  c.rl.validate();
  for (const auto& t : c.tasks) parse_instruction(t);  // grammar-valid
  return c;
}

inline nlohmann::ordered_json config_to_json(const Config& c) {
  nlohmann::ordered_json j;
  j["env"] = {{"width", c.env.width}, {"min_objects", c.env.min_objects}};
  j["featurizer"] = {{"d_psi", c.featurizer.d_psi},
                     {"d_latent", c.featurizer.d_latent},
                     {"content_scale", c.featurizer.content_scale},
                     {"proprio_scale", c.featurizer.proprio_scale},
                     {"seed", c.featurizer.seed},
                     {"instr_hash_seed", c.featurizer.instr_hash_seed}};
  j["model"] = {{"classifier_hidden", c.model.classifier_hidden},
                {"d_z", c.model.d_z},
                {"e_op", c.model.e_op},
                {"e_obj", c.model.e_obj},
                {"K", c.model.K},
                {"tau", c.model.tau},
                {"query_gain", c.model.query_gain},
                {"d_model", c.model.d_model},
                {"layers", c.model.layers},
                {"heads", c.model.heads},
                {"horizon", c.model.horizon},
                {"init_log_std", c.model.init_log_std},
                {"param_seed", c.model.param_seed}};
  j["bc"] = {{"classifier_epochs", c.bc.classifier_epochs},
             {"solver_epochs", c.bc.solver_epochs},
             {"batch", c.bc.batch},
             {"lr", c.bc.lr},
             {"solver_lr", c.bc.solver_lr},
             {"solver_weight_decay", c.bc.solver_weight_decay},
             {"grad_clip", c.bc.grad_clip},
             {"window", c.bc.window},
             {"validation_fraction", c.bc.validation_fraction},
             {"seed", c.bc.seed},
             {"demos_per_task", c.demos_per_task},
             {"demo_seed", c.demo_seed}};
  j["rl"] = {{"group", c.rl.group},
             {"gamma", c.rl.gamma},
             {"beta", c.rl.beta},
             {"lr", c.rl.lr},
             {"grad_clip", c.rl.grad_clip},
             {"lambda_seg", c.rl.lambda_seg},
             {"lambda_prog", c.rl.lambda_prog},
             {"adv_epsilon", c.rl.adv_epsilon},
             {"refresh_period", c.rl.refresh_period},
             {"prototypes", c.rl.prototype_count},
             {"buffer_cap", c.rl.buffer_cap},
             {"iterations", c.rl.iterations},
             {"seed", c.rl.seed},
             {"threads", c.rl.threads}};
  j["eval"] = {{"episodes_per_task", c.eval.episodes_per_task},
               {"seeds", c.eval.seeds},
               {"perturb_distractors", c.eval.perturb_distractors},
               {"dump_attention", c.eval.dump_attention}};
  j["tasks"] = c.tasks;
  j["run_dir"] = c.run_dir;
  return j;
}

// Hash of the canonical, fully-populated form. Thread count is excluded: it
// must not change any output byte.
inline std::string config_hash(const Config& c) {
  auto j = config_to_json(c);
  j["rl"].erase("threads");
  const std::string s = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(h));
  return std::string(buf);
}

inline Config load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read config file " + path);
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("config: malformed JSON: ") +
                             e.what());
  }
  return config_from_json(j);
}

}  // namespace nsgrid
