#pragma once

// Versioned JSON checkpoints: parameter arrays by name, the featurizer and
// architecture settings needed to rebuild the policy, ablation flags, the
// prototype bank, and the producing config's hash. Doubles round-trip
// exactly through the JSON layer.

#include <fstream>
#include <map>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "nsgrid/perceive.hpp"
#include "nsgrid/pipeline.hpp"
#include "nsgrid/reward.hpp"

namespace nsgrid {

inline constexpr int kCheckpointVersion = 1;

struct ModelArch {
  int classifier_hidden = 64;
  int d_z = 48;  // matches d_psi by default: enables the structured init
  int e_op = 16;
  int e_obj = 16;
  int K = 8;
  double tau = 0.1;
  double query_gain = 3.0;
  int d_model = 64;
  int layers = 2;
  int heads = 4;
  int horizon = 4;
  double init_log_std = -1.2;
  std::uint64_t param_seed = 3;
};

inline PolicyParams init_policy(const ModelArch& a, const Featurizer& f) {
  Rng rng(a.param_seed);
  PolicyParams p;
  p.classifier = ClassifierParams::init(f.d_psi(), a.classifier_hidden, rng);
  p.sparsifier =
      a.d_z == f.d_psi()
          ? init_sparsifier_structured(f, a.K, a.tau, a.query_gain, rng)
          : SparsifierParams::init(f.d_psi(), a.d_z, a.e_op, a.e_obj, a.K,
                                   a.tau, rng);
  p.solver = SolverParams::init(2 * a.d_z + kProprioDim, a.d_model, a.layers,
                                a.heads, a.horizon, kActionDim,
                                a.init_log_std, rng);
  return p;
}

struct Checkpoint {
  std::string kind;  // "stage1" or "rl"
  std::string config_hash;
  PerceiveParams featurizer;
  ModelArch arch;
  AblationFlags ablation;
  PolicyParams params;
  PolicyParams bc_ref;  // frozen pi_BC (equals params for stage1)
  PrototypeBank bank{kMaxPlanLength};
};

namespace ckpt_json {

inline nlohmann::ordered_json array_to_json(const Array& a) {
  nlohmann::ordered_json j;
  j["shape"] = a.shape;
  j["data"] = a.data;
  return j;
}

inline Array array_from_json(const nlohmann::ordered_json& j) {
  return Array(j.at("shape").get<std::vector<std::size_t>>(),
               j.at("data").get<std::vector<double>>());
}

template <typename P>
nlohmann::ordered_json params_to_json(const P& params) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  params.visit([&j](const std::string& name, const Array& a) {
    j[name] = array_to_json(a);
  });
  return j;
}

template <typename P>
void params_from_json(P& params, const nlohmann::ordered_json& j) {
  std::size_t seen = 0;
  params.visit([&](const std::string& name, Array& a) {
    if (!j.contains(name))
      throw std::runtime_error("checkpoint: missing parameter " + name);
    Array loaded = array_from_json(j.at(name));
    if (loaded.shape != a.shape)
      throw std::runtime_error("checkpoint: shape mismatch for " + name);
    a = std::move(loaded);
    ++seen;
  });
  if (seen != j.size())
    throw std::runtime_error("checkpoint: unexpected extra parameters");
}

}  // namespace ckpt_json

inline std::string checkpoint_to_json(const Checkpoint& c) {
  nlohmann::ordered_json j;
  j["version"] = kCheckpointVersion;
  j["kind"] = c.kind;
  j["config_hash"] = c.config_hash;
  j["featurizer"] = {{"d_psi", c.featurizer.d_psi},
                     {"d_latent", c.featurizer.d_latent},
                     {"grid_width", c.featurizer.grid_width},
                     {"content_scale", c.featurizer.content_scale},
                     {"proprio_scale", c.featurizer.proprio_scale},
                     {"seed", c.featurizer.seed},
                     {"instr_hash_seed", c.featurizer.instr_hash_seed}};
  j["arch"] = {{"classifier_hidden", c.arch.classifier_hidden},
               {"d_z", c.arch.d_z},
               {"e_op", c.arch.e_op},
               {"e_obj", c.arch.e_obj},
               {"K", c.arch.K},
               {"tau", c.arch.tau},
               {"query_gain", c.arch.query_gain},
               {"d_model", c.arch.d_model},
               {"layers", c.arch.layers},
               {"heads", c.arch.heads},
               {"horizon", c.arch.horizon},
               {"init_log_std", c.arch.init_log_std},
               {"param_seed", c.arch.param_seed}};
  j["ablation"] = {{"no_plan_constraint", c.ablation.no_plan_constraint},
                   {"no_sparsifier", c.ablation.no_sparsifier},
                   {"no_seg_reward", c.ablation.no_seg_reward},
                   {"no_prog_reward", c.ablation.no_prog_reward},
                   {"no_kl", c.ablation.no_kl}};
  j["params"] = ckpt_json::params_to_json(c.params);
  j["bc_ref"] = ckpt_json::params_to_json(c.bc_ref);
  nlohmann::ordered_json protos = nlohmann::ordered_json::array();
  for (const auto& per_sigma : c.bank.prototypes) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& mu : per_sigma) arr.push_back(ckpt_json::array_to_json(mu));
    protos.push_back(std::move(arr));
  }
  j["prototypes"] = std::move(protos);
  return j.dump();
}

inline Checkpoint checkpoint_from_json(const std::string& text) {
  const auto j = nlohmann::ordered_json::parse(text);
  if (j.at("version").get<int>() != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version");
  Checkpoint c;
  c.kind = j.at("kind").get<std::string>();
  c.config_hash = j.at("config_hash").get<std::string>();
  const auto& f = j.at("featurizer");
  c.featurizer.d_psi = f.at("d_psi").get<int>();
  c.featurizer.d_latent = f.at("d_latent").get<int>();
  c.featurizer.grid_width = f.at("grid_width").get<int>();
  c.featurizer.content_scale = f.at("content_scale").get<double>();
  c.featurizer.proprio_scale = f.at("proprio_scale").get<double>();
  c.featurizer.seed = f.at("seed").get<std::uint64_t>();
  c.featurizer.instr_hash_seed = f.at("instr_hash_seed").get<std::uint64_t>();
  const auto& a = j.at("arch");
  c.arch.classifier_hidden = a.at("classifier_hidden").get<int>();
  c.arch.d_z = a.at("d_z").get<int>();
  c.arch.e_op = a.at("e_op").get<int>();
  c.arch.e_obj = a.at("e_obj").get<int>();
  c.arch.K = a.at("K").get<int>();
  c.arch.tau = a.at("tau").get<double>();
  c.arch.query_gain = a.at("query_gain").get<double>();
  c.arch.d_model = a.at("d_model").get<int>();
  c.arch.layers = a.at("layers").get<int>();
  c.arch.heads = a.at("heads").get<int>();
  c.arch.horizon = a.at("horizon").get<int>();
  c.arch.init_log_std = a.at("init_log_std").get<double>();
  c.arch.param_seed = a.at("param_seed").get<std::uint64_t>();
  const auto& ab = j.at("ablation");
  c.ablation.no_plan_constraint = ab.at("no_plan_constraint").get<bool>();
  c.ablation.no_sparsifier = ab.at("no_sparsifier").get<bool>();
  c.ablation.no_seg_reward = ab.at("no_seg_reward").get<bool>();
  c.ablation.no_prog_reward = ab.at("no_prog_reward").get<bool>();
  c.ablation.no_kl = ab.at("no_kl").get<bool>();

  c.params = init_policy(c.arch, Featurizer(c.featurizer));
  c.bc_ref = init_policy(c.arch, Featurizer(c.featurizer));
  ckpt_json::params_from_json(c.params, j.at("params"));
  ckpt_json::params_from_json(c.bc_ref, j.at("bc_ref"));
  c.params.sparsifier.K = c.arch.K;
  c.params.sparsifier.tau = c.arch.tau;
  c.bc_ref.sparsifier.K = c.arch.K;
  c.bc_ref.sparsifier.tau = c.arch.tau;

  c.bank = PrototypeBank(kMaxPlanLength);
  const auto& protos = j.at("prototypes");
  for (std::size_t s = 0; s < protos.size() && s < c.bank.prototypes.size();
       ++s)
    for (const auto& mu : protos[s])
      c.bank.prototypes[s].push_back(ckpt_json::array_from_json(mu));
  return c;
}

inline void write_checkpoint(const Checkpoint& c, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path);
  out << checkpoint_to_json(c) << '\n';
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint " + path);
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  return checkpoint_from_json(text);
}

}  // namespace nsgrid
