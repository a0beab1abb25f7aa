// Stage I: demo generation determinism and annotations, classifier
// pretraining gates, solver warm start, and the frozen reference.

#include "catch_amalgamated.hpp"

#include "nsgrid/bc.hpp"
#include "nsgrid/checkpoint.hpp"
#include "nsgrid/metrics.hpp"

using namespace nsgrid;

namespace {

std::vector<Task> small_tasks() {
  return {make_task("put the alphabet soup in the basket", 0),
          make_task("place the white mug on the left plate", 0),
          make_task("open the microwave", 0)};
}

Config small_config() {
  Config cfg;
  cfg.tasks = {"put the alphabet soup in the basket",
               "place the white mug on the left plate",
               "open the microwave"};
  cfg.bc.classifier_epochs = 60;
  cfg.bc.solver_epochs = 40;
  cfg.eval.episodes_per_task = 4;
  cfg.eval.seeds = {11, 22};
  return cfg;
}

}  // namespace

TEST_CASE("demo generation is deterministic with monotone annotations") {
  const auto tasks = small_tasks();
  const auto demos1 = generate_demos(tasks, 1, 5);
  const auto demos2 = generate_demos(tasks, 1, 5);
  REQUIRE(demos1.size() == tasks.size());  // one per task
  for (std::size_t i = 0; i < demos1.size(); ++i)
    CHECK(demo_to_jsonl(demos1[i]) == demo_to_jsonl(demos2[i]));

  for (std::size_t i = 0; i < demos1.size(); ++i) {
    int prev = 1, distinct = 1;
    for (const auto& s : demos1[i].steps) {
      CHECK(s.true_primitive_index >= prev);
      distinct += s.true_primitive_index > prev ? 1 : 0;
      prev = s.true_primitive_index;
    }
    CHECK(distinct == tasks[i].plan.length());  // exactly M segments
  }
}

TEST_CASE("classifier pretraining beats the uniform baseline and 0.95 accuracy") {
  const Config cfg = small_config();
  Featurizer featurizer(cfg.featurizer);
  const auto tasks = small_tasks();
  const auto demos = generate_demos(tasks, 1, cfg.demo_seed);
  PolicyParams params = init_policy(cfg.model, featurizer);

  // Uniform-classifier window loss as the baseline.
  std::vector<Array> frames_psi;
  std::vector<int> labels;
  Array alpha;
  {
    std::vector<WindowFrame> wf_all;
    for (const auto& demo : demos) {
      const auto ann = featurize_demo(demo, featurizer);
      for (const auto& f : window_frames(ann.trace, demo.task.plan,
                                         cfg.bc.window)) {
        frames_psi.push_back(ann.psi_bar[f.step]);
        labels.push_back(f.label);
        wf_all.push_back(f);
      }
    }
    alpha = class_weights(wf_all);
  }
  ClassifierParams uniform;
  uniform.w1 = Array::zeros(params.classifier.w1.shape);
  uniform.b1 = Array::zeros(params.classifier.b1.shape);
  uniform.w2 = Array::zeros(params.classifier.w2.shape);
  uniform.b2 = Array::zeros(params.classifier.b2.shape);
  const double uniform_loss = window_loss(uniform, frames_psi, labels, alpha);

  const auto report =
      pretrain_classifier(params.classifier, demos, featurizer, cfg.bc);
  const double trained_loss =
      window_loss(params.classifier, frames_psi, labels, alpha);
  CHECK(trained_loss < uniform_loss);

  // Window-frame accuracy on held-out expert rollouts (fresh seeds).
  std::size_t hits = 0, total = 0;
  for (const auto& base : tasks) {
    Task heldout = base;
    heldout.seed = Rng::derive(977, total);
    const Demo demo = run_expert_episode(heldout);
    const auto ann = featurize_demo(demo, featurizer);
    for (const auto& f :
         window_frames(ann.trace, demo.task.plan, cfg.bc.window)) {
      const Array dist = primitive_dist(params.classifier, ann.psi_bar[f.step]);
      std::size_t best = 0;
      for (std::size_t u = 1; u < dist.numel(); ++u)
        if (dist[u] > dist[best]) best = u;
      hits += static_cast<int>(best) == f.label ? 1 : 0;
      ++total;
    }
  }
  CHECK(static_cast<double>(hits) / static_cast<double>(total) >= 0.95);
  CHECK(report.best_validation_accuracy > 0.5);
}

TEST_CASE("solver warm start beats the random policy and the mean baseline") {
  const Config cfg = small_config();
  Featurizer featurizer(cfg.featurizer);
  const auto tasks = small_tasks();
  const auto demos = generate_demos(tasks, 1, cfg.demo_seed);

  PolicyParams params = init_policy(cfg.model, featurizer);
  const PolicyParams random_policy = params;  // untouched copy

  pretrain_classifier(params.classifier, demos, featurizer, cfg.bc);
  pretrain_solver(params, demos, featurizer, cfg.bc);
  const PolicyParams pi_bc = params;  // frozen deep copy

  // Held-out chunk-mean MSE below the predict-the-mean baseline (the demo
  // action variance).
  std::vector<Demo> heldout;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    Task t = tasks[i];
    t.seed = Rng::derive(31337, i);
    heldout.push_back(run_expert_episode(t));
  }
  double mean_action[4] = {0, 0, 0, 0};
  std::size_t n = 0;
  for (const auto& d : heldout)
    for (const auto& s : d.steps) {
      const auto a = s.action.to_array();
      for (int j = 0; j < 4; ++j) mean_action[j] += a[static_cast<std::size_t>(j)];
      ++n;
    }
  for (auto& v : mean_action) v /= static_cast<double>(n);
  double variance = 0.0;
  for (const auto& d : heldout)
    for (const auto& s : d.steps) {
      const auto a = s.action.to_array();
      for (int j = 0; j < 4; ++j) {
        const double diff = a[static_cast<std::size_t>(j)] - mean_action[j];
        variance += diff * diff;
      }
    }
  variance /= static_cast<double>(n * 4);
  const double heldout_mse = bc_loss(params, heldout, featurizer);
  CHECK(heldout_mse < variance);

  // BC success rate strictly above the random policy's on training tasks.
  const auto eval_bc = evaluate_policy(params, featurizer, cfg, {}, false);
  const auto eval_rand =
      evaluate_policy(random_policy, featurizer, cfg, {}, false);
  CHECK(eval_bc.mean > eval_rand.mean);

  // pi_BC is a deep copy: mutating the live parameters leaves it intact.
  std::vector<std::vector<double>> snapshot;
  pi_bc.visit(
      [&](const std::string&, const Array& a) { snapshot.push_back(a.data); });
  params.solver.head_w.data[0] += 1.0;
  params.classifier.w1.data[0] -= 1.0;
  std::size_t idx = 0;
  bool intact = true;
  pi_bc.visit([&](const std::string&, const Array& a) {
    intact = intact && a.data == snapshot[idx++];
  });
  CHECK(intact);
}

TEST_CASE("missing stage-one checkpoint refuses to start") {
  CHECK_THROWS_AS(read_checkpoint("/nonexistent/stage1.ckpt.json"),
                  std::runtime_error);
}
