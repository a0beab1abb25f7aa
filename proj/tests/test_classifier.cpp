// Classifier: distribution contracts, masked inference with the advancement
// tie-break, window supervision, and class weights.

#include "catch_amalgamated.hpp"

#include "nsgrid/classifier.hpp"

using namespace nsgrid;

namespace {

Plan toy_plan(std::initializer_list<PrimitiveOp> ops) {
  Plan p;
  for (auto op : ops) {
    Primitive prim{op, "book", ""};
    if (op_needs_support(op)) prim.support = "plate";
    p.primitives.push_back(prim);
  }
  return p;
}

Array dist_with(std::initializer_list<std::pair<PrimitiveOp, double>> mass) {
  Array d = Array::full({kNumPrimitiveOps}, 0.0);
  double assigned = 0.0;
  for (auto [op, p] : mass) {
    d[static_cast<std::size_t>(op)] = p;
    assigned += p;
  }
  // Spread the remainder over untouched entries.
  int untouched = 0;
  for (double v : d.data) untouched += v == 0.0 ? 1 : 0;
  for (auto& v : d.data)
    if (v == 0.0) v = (1.0 - assigned) / untouched;
  return d;
}

}  // namespace

TEST_CASE("zero weights give the uniform distribution") {
  ClassifierParams p;
  p.w1 = Array::zeros({32, 16});
  p.b1 = Array::zeros({16});
  p.w2 = Array::zeros({16, kNumPrimitiveOps});
  p.b2 = Array::zeros({kNumPrimitiveOps});
  const Array d = primitive_dist(p, Array::zeros({32}));
  for (double v : d.data)
    CHECK(v == Catch::Approx(1.0 / kNumPrimitiveOps).margin(1e-15));
}

TEST_CASE("logit shifts do not change the distribution") {
  Rng rng(5);
  ClassifierParams p = ClassifierParams::init(16, 8, rng);
  Array psi({16});
  for (auto& v : psi.data) v = rng.uniform(-1, 1);
  const Array d1 = primitive_dist(p, psi);
  ClassifierParams shifted = p;
  for (auto& v : shifted.b2.data) v += 3.75;
  const Array d2 = primitive_dist(shifted, psi);
  double sum = 0.0;
  for (std::size_t i = 0; i < d1.numel(); ++i) {
    CHECK(d1[i] == Catch::Approx(d2[i]).margin(1e-12));
    CHECK(d1[i] >= 0.0);
    sum += d1[i];
  }
  CHECK(std::abs(sum - 1.0) <= 1e-12);
}

TEST_CASE("masked index policy renormalizes over the admissible set") {
  const Plan plan = toy_plan({PrimitiveOp::kPick, PrimitiveOp::kPlaceOn,
                              PrimitiveOp::kPlaceIn, PrimitiveOp::kOpen,
                              PrimitiveOp::kClose});
  // Boundary: K = {M} -> point mass.
  Array uniform = Array::full({kNumPrimitiveOps}, 1.0 / kNumPrimitiveOps);
  const auto pm = masked_index_policy(uniform, plan, 5);
  REQUIRE(pm.size() == 1);
  CHECK(pm[0] == Catch::Approx(1.0));

  // Uniform over two -> (0.5, 0.5).
  const auto half = masked_index_policy(uniform, plan, 2);
  REQUIRE(half.size() == 2);
  CHECK(half[0] == Catch::Approx(0.5));
  CHECK(half[1] == Catch::Approx(0.5));

  // Hand renormalization: p(u2)=0.1, p(u3)=0.3 -> (0.25, 0.75).
  const Array d = dist_with({{PrimitiveOp::kPlaceOn, 0.1},
                             {PrimitiveOp::kPlaceIn, 0.3}});
  const auto probs = masked_index_policy(d, plan, 2);
  CHECK(probs[0] == Catch::Approx(0.25));
  CHECK(probs[1] == Catch::Approx(0.75));

  // Exactly zero mass outside K: only indices 2 and 3 can be chosen, and the
  // two probabilities exhaust the distribution.
  CHECK(probs[0] + probs[1] == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("constrained inference prefers advancement on ties") {
  const Plan plan = toy_plan({PrimitiveOp::kPick, PrimitiveOp::kPlaceOn,
                              PrimitiveOp::kPlaceIn, PrimitiveOp::kOpen,
                              PrimitiveOp::kClose});
  const Array d = dist_with({{PrimitiveOp::kPlaceOn, 0.1},
                             {PrimitiveOp::kPlaceIn, 0.3}});
  CHECK(constrained_inference(d, plan, 2).m_hat == 3);

  // Repeated primitive: identical masked probabilities -> larger index.
  const Plan repeated = toy_plan(
      {PrimitiveOp::kPick, PrimitiveOp::kPlaceOn, PrimitiveOp::kPlaceOn});
  Array any = Array::full({kNumPrimitiveOps}, 1.0 / kNumPrimitiveOps);
  const auto choice = constrained_inference(any, repeated, 2);
  CHECK(choice.m_hat == 3);

  // K = {M}.
  CHECK(constrained_inference(any, plan, 5).m_hat == 5);

  // Deterministic segmentation: same stream twice, same trace.
  Rng rng(17);
  std::vector<int> t1, t2;
  for (auto* trace : {&t1, &t2}) {
    Rng local(99);
    int m = 1;
    for (int i = 0; i < 40; ++i) {
      Array dist({kNumPrimitiveOps});
      double s = 0.0;
      for (auto& v : dist.data) {
        v = local.uniform(0.01, 1.0);
        s += v;
      }
      for (auto& v : dist.data) v /= s;
      m = constrained_inference(dist, plan, m).m_hat;
      trace->push_back(m);
    }
  }
  CHECK(t1 == t2);
}

TEST_CASE("window frames clip to segment starts") {
  // trace: segment A = steps 0..1, segment B = steps 2..6
  const std::vector<int> trace = {1, 1, 2, 2, 2, 2, 2};
  const Plan plan = toy_plan({PrimitiveOp::kPick, PrimitiveOp::kPlaceOn});
  const auto frames = window_frames(trace, plan, 3);
  // Segment A is short: frames clipped to {0,1}; segment B: {3,4,5,6}.
  std::vector<std::size_t> steps;
  for (const auto& f : frames) steps.push_back(f.step);
  CHECK(steps == std::vector<std::size_t>{0, 1, 3, 4, 5, 6});

  // w = 0 supervises exactly one frame per segment.
  const auto tight = window_frames(trace, plan, 0);
  REQUIRE(tight.size() == 2);
  CHECK(tight[0].step == 1);
  CHECK(tight[1].step == 6);
  CHECK_THROWS_AS(window_frames(trace, plan, -1), std::invalid_argument);
}

TEST_CASE("class weights compensate inverse frequency, mean one") {
  // Balanced: alpha = 1 everywhere observed.
  std::vector<WindowFrame> balanced;
  for (int i = 0; i < 5; ++i) {
    balanced.push_back({0, 0});
    balanced.push_back({0, 1});
  }
  const Array a1 = class_weights(balanced);
  CHECK(a1[0] == Catch::Approx(1.0));
  CHECK(a1[1] == Catch::Approx(1.0));

  // Frequencies (10, 30) -> alpha (1.5, 0.5).
  std::vector<WindowFrame> skew;
  for (int i = 0; i < 10; ++i) skew.push_back({0, 0});
  for (int i = 0; i < 30; ++i) skew.push_back({0, 1});
  const Array a2 = class_weights(skew);
  CHECK(a2[0] == Catch::Approx(1.5));
  CHECK(a2[1] == Catch::Approx(0.5));
  // Unseen classes default to the maximum observed weight.
  CHECK(a2[2] == Catch::Approx(1.5));

  // Single class -> alpha = 1.
  std::vector<WindowFrame> solo(4, WindowFrame{0, 3});
  CHECK(class_weights(solo)[3] == Catch::Approx(1.0));

  CHECK_THROWS_AS(class_weights({}), std::invalid_argument);
}

TEST_CASE("window loss limits") {
  Rng rng(23);
  const Array alpha = Array::full({kNumPrimitiveOps}, 1.0);

  // Uniform classifier, one frame: loss = log |U|.
  ClassifierParams zero;
  zero.w1 = Array::zeros({8, 4});
  zero.b1 = Array::zeros({4});
  zero.w2 = Array::zeros({4, kNumPrimitiveOps});
  zero.b2 = Array::zeros({kNumPrimitiveOps});
  const double lu =
      window_loss(zero, {Array::zeros({8})}, {2}, alpha);
  CHECK(lu == Catch::Approx(std::log(static_cast<double>(kNumPrimitiveOps))));

  // Confident classifier: loss approaches zero.
  ClassifierParams sharp = zero;
  sharp.b2[2] = 50.0;
  CHECK(window_loss(sharp, {Array::zeros({8})}, {2}, alpha) ==
        Catch::Approx(0.0).margin(1e-12));

  CHECK_THROWS_AS(window_loss(zero, {}, {}, alpha), std::invalid_argument);
}

TEST_CASE("window loss gradient matches finite differences") {
  Rng rng(31);
  const int d = 6, h = 5, n = 7;
  std::vector<int> labels;
  Array psi({static_cast<std::size_t>(n), static_cast<std::size_t>(d)});
  for (auto& v : psi.data) v = rng.uniform(-1, 1);
  for (int i = 0; i < n; ++i)
    labels.push_back(static_cast<int>(rng.uniform_index(kNumPrimitiveOps)));
  Array alpha({kNumPrimitiveOps});
  for (auto& v : alpha.data) v = rng.uniform(0.5, 1.5);
  ClassifierParams p = ClassifierParams::init(d, h, rng);

  const double err = grad_check(
      [&](Tape& tape, const std::vector<Value>& x) {
        ClassifierRefs refs{x[0], x[1], x[2], x[3]};
        return window_loss_t(refs, tape.constant(psi), labels, alpha);
      },
      {p.w1, p.b1, p.w2, p.b2}, 1e-5);
  CHECK(err <= 1e-4);
}
