// Numerics substrate: gradient oracles (central finite differences) for
// every exported differentiable op, stop-gradient semantics, and the softmax
// and layer-norm contracts.

#include "catch_amalgamated.hpp"

#include <cmath>

#include "nsgrid/rng.hpp"
#include "nsgrid/tape.hpp"

using namespace nsgrid;

namespace {

Array rand_array(std::vector<std::size_t> shape, Rng& rng, double lo = -2.0,
                 double hi = 2.0) {
  Array a(std::move(shape));
  for (auto& v : a.data) v = rng.uniform(lo, hi);
  return a;
}

using Fn = std::function<Value(Tape&, const std::vector<Value>&)>;

// Runs grad_check on `trials` random input draws and reports the worst error.
double worst_grad_error(const Fn& f,
                        const std::function<std::vector<Array>(Rng&)>& draw,
                        int trials = 100, std::uint64_t seed = 99) {
  Rng rng(seed);
  double worst = 0.0;
  for (int i = 0; i < trials; ++i)
    worst = std::max(worst, grad_check(f, draw(rng), 1e-5));
  return worst;
}

}  // namespace

TEST_CASE("elementwise op gradients match central differences") {
  auto draw2 = [](Rng& rng) {
    return std::vector<Array>{rand_array({3, 4}, rng), rand_array({3, 4}, rng)};
  };
  auto drawpos = [](Rng& rng) {
    return std::vector<Array>{rand_array({3, 4}, rng, 0.2, 2.0)};
  };
  auto draw1 = [](Rng& rng) {
    return std::vector<Array>{rand_array({3, 4}, rng)};
  };

  CHECK(worst_grad_error([](Tape&, const std::vector<Value>& x) {
          return sum_all(add(x[0], x[1]));
        }, draw2) < 1e-4);
  CHECK(worst_grad_error([](Tape&, const std::vector<Value>& x) {
          return sum_all(sub(x[0], x[1]));
        }, draw2) < 1e-4);
  CHECK(worst_grad_error([](Tape&, const std::vector<Value>& x) {
          return sum_all(mul(x[0], x[1]));
        }, draw2) < 1e-4);
  CHECK(worst_grad_error([](Tape&, const std::vector<Value>& x) {
          return sum_all(div(x[0], add_scalar(mul(x[1], x[1]), 0.5)));
        }, draw2) < 1e-4);
  CHECK(worst_grad_error([](Tape&, const std::vector<Value>& x) {
          return sum_all(exp_v(mul_scalar(x[0], 0.5)));
        }, draw1) < 1e-4);
  CHECK(worst_grad_error([](Tape&, const std::vector<Value>& x) {
          return sum_all(log_v(x[0]));
        }, drawpos) < 1e-4);
  CHECK(worst_grad_error([](Tape&, const std::vector<Value>& x) {
          return sum_all(tanh_v(x[0]));
        }, draw1) < 1e-4);
  CHECK(worst_grad_error([](Tape&, const std::vector<Value>& x) {
          return sum_all(sigmoid_v(x[0]));
        }, draw1) < 1e-4);
  CHECK(worst_grad_error([](Tape&, const std::vector<Value>& x) {
          return sum_all(square(x[0]));
        }, draw1) < 1e-4);
  CHECK(worst_grad_error([](Tape&, const std::vector<Value>& x) {
          return sum_all(gelu(x[0]));
        }, draw1) < 1e-4);
  // Clamp: keep inputs clear of the kinks.
  CHECK(worst_grad_error([](Tape&, const std::vector<Value>& x) {
          return sum_all(clamp_v(x[0], -5.0, 5.0));
        }, draw1) < 1e-4);
}

TEST_CASE("linear algebra and shape op gradients") {
  auto draw_mm = [](Rng& rng) {
    return std::vector<Array>{rand_array({3, 4}, rng), rand_array({4, 2}, rng)};
  };
  CHECK(worst_grad_error([](Tape&, const std::vector<Value>& x) {
          return sum_all(square(matmul(x[0], x[1])));
        }, draw_mm) < 1e-4);
  CHECK(worst_grad_error([](Tape&, const std::vector<Value>& x) {
          return sum_all(square(transpose(x[0])));
        }, [](Rng& rng) { return std::vector<Array>{rand_array({3, 4}, rng)}; }) < 1e-4);

  auto draw_rv = [](Rng& rng) {
    return std::vector<Array>{rand_array({3, 4}, rng), rand_array({4}, rng)};
  };
  CHECK(worst_grad_error([](Tape&, const std::vector<Value>& x) {
          return sum_all(square(add_rowvec(x[0], x[1])));
        }, draw_rv) < 1e-4);
  CHECK(worst_grad_error([](Tape&, const std::vector<Value>& x) {
          return sum_all(square(scale_cols(x[0], x[1])));
        }, draw_rv) < 1e-4);

  auto draw2 = [](Rng& rng) {
    return std::vector<Array>{rand_array({3, 2}, rng), rand_array({3, 4}, rng)};
  };
  CHECK(worst_grad_error([](Tape&, const std::vector<Value>& x) {
          return sum_all(square(concat_cols(x[0], x[1])));
        }, draw2) < 1e-4);
  CHECK(worst_grad_error([](Tape&, const std::vector<Value>& x) {
          return sum_all(square(concat_rows(transpose(x[0]), transpose(x[1]))));
        }, draw2) < 1e-4);
  CHECK(worst_grad_error([](Tape&, const std::vector<Value>& x) {
          return sum_all(square(slice_cols(x[0], 1, 3)));
        }, [](Rng& rng) { return std::vector<Array>{rand_array({3, 4}, rng)}; }) < 1e-4);
  CHECK(worst_grad_error([](Tape&, const std::vector<Value>& x) {
          return sum_all(square(slice_rows(x[0], 1, 3)));
        }, [](Rng& rng) { return std::vector<Array>{rand_array({4, 2}, rng)}; }) < 1e-4);
  CHECK(worst_grad_error([](Tape&, const std::vector<Value>& x) {
          return sum_all(square(gather_rows(x[0], {2, 0, 2})));
        }, [](Rng& rng) { return std::vector<Array>{rand_array({3, 4}, rng)}; }) < 1e-4);
  CHECK(worst_grad_error([](Tape&, const std::vector<Value>& x) {
          return sum_all(square(gather(x[0], {0, 5, 5, 2})));
        }, [](Rng& rng) { return std::vector<Array>{rand_array({2, 4}, rng)}; }) < 1e-4);
  CHECK(worst_grad_error([](Tape&, const std::vector<Value>& x) {
          return mul(pick(x[0], 3), pick(x[0], 1));
        }, [](Rng& rng) { return std::vector<Array>{rand_array({2, 3}, rng)}; }) < 1e-4);
}

TEST_CASE("reduction and normalization gradients") {
  auto draw = [](Rng& rng) {
    return std::vector<Array>{rand_array({3, 5}, rng)};
  };
  CHECK(worst_grad_error([](Tape&, const std::vector<Value>& x) {
          return mean_all(square(x[0]));
        }, draw) < 1e-4);
  CHECK(worst_grad_error([](Tape&, const std::vector<Value>& x) {
          return sum_all(square(softmax(x[0], 1)));
        }, draw) < 1e-4);
  CHECK(worst_grad_error([](Tape&, const std::vector<Value>& x) {
          return sum_all(square(softmax(x[0], 0)));
        }, draw) < 1e-4);
  CHECK(worst_grad_error([](Tape&, const std::vector<Value>& x) {
          return sum_all(square(log_softmax(x[0], 1)));
        }, draw) < 1e-4);
  CHECK(worst_grad_error([](Tape&, const std::vector<Value>& x) {
          return sum_all(square(layer_norm(x[0])));
        }, draw) < 1e-4);
  auto draw_s = [](Rng& rng) {
    return std::vector<Array>{rand_array({3, 4}, rng),
                              rand_array({1}, rng, 0.5, 2.0)};
  };
  CHECK(worst_grad_error([](Tape&, const std::vector<Value>& x) {
          return sum_all(square(scale_by(x[0], x[1])));
        }, draw_s) < 1e-4);
  CHECK(worst_grad_error([](Tape&, const std::vector<Value>& x) {
          return sum_all(square(div_by(x[0], x[1])));
        }, draw_s) < 1e-4);
}

TEST_CASE("masked attention gradient and exact causality") {
  auto draw = [](Rng& rng) {
    return std::vector<Array>{rand_array({4, 3}, rng), rand_array({4, 3}, rng),
                              rand_array({4, 3}, rng)};
  };
  Array mask({4, 4});
  const double ninf = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = i + 1; j < 4; ++j) mask.at(i, j) = ninf;
  CHECK(worst_grad_error(
            [mask](Tape& t, const std::vector<Value>& x) {
              return sum_all(square(masked_attention(
                  x[0], x[1], x[2], t.constant(mask), 1.0 / std::sqrt(3.0))));
            },
            draw, 50) < 1e-4);

  // Mutating a masked-out (future) key/value row cannot change earlier rows.
  Rng rng(7);
  Array q = rand_array({4, 3}, rng), k = rand_array({4, 3}, rng),
        v = rand_array({4, 3}, rng);
  Tape t1;
  Array out1 = t1.val(masked_attention(t1.leaf(q), t1.leaf(k), t1.leaf(v),
                                       t1.constant(mask), 1.0));
  Array k2 = k, v2 = v;
  for (std::size_t j = 0; j < 3; ++j) {
    k2.at(3, j) += 100.0;
    v2.at(3, j) -= 50.0;
  }
  Tape t2;
  Array out2 = t2.val(masked_attention(t2.leaf(q), t2.leaf(k2), t2.leaf(v2),
                                       t2.constant(mask), 1.0));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      CHECK(out1.at(i, j) == out2.at(i, j));  // bitwise
}

TEST_CASE("stop_gradient is a forward identity that blocks backward") {
  Tape tape;
  Value x = tape.leaf(Array::scalar(3.0));
  Value sg = stop_gradient(x);
  CHECK(tape.val(sg).value() == 3.0);

  Value y = mul(x, sg);  // d/dx [x * sg(x)] = sg(x) = 3
  tape.backward(y);
  CHECK(tape.grad(x).value() == Catch::Approx(3.0));

  Tape tape2;
  Value x2 = tape2.leaf(Array::scalar(1.5));
  Value y2 = stop_gradient(x2);
  tape2.backward(y2);
  CHECK(tape2.grad(x2).value() == 0.0);

  // Bitwise forward identity on a random array.
  Rng rng(3);
  Array a = rand_array({5, 7}, rng);
  Tape tape3;
  Value v = tape3.leaf(a);
  const Array& through = tape3.val(stop_gradient(v));
  for (std::size_t i = 0; i < a.numel(); ++i)
    CHECK(through.data[i] == a.data[i]);
}

TEST_CASE("softmax contracts") {
  Tape tape;
  const Array& two = tape.val(softmax(tape.leaf(Array::vec({0.0, 0.0}))));
  CHECK(two[0] == Catch::Approx(0.5).margin(1e-15));
  CHECK(two[1] == Catch::Approx(0.5).margin(1e-15));

  const Array& three =
      tape.val(softmax(tape.leaf(Array::vec({1.0, 1.0, 1.0}))));
  for (std::size_t i = 0; i < 3; ++i)
    CHECK(three[i] == Catch::Approx(1.0 / 3.0).margin(1e-15));

  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    Array logits = rand_array({4, 6}, rng, -30.0, 30.0);
    Tape t;
    const Array& p = t.val(softmax(t.leaf(logits), 1));
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 6; ++c) {
        CHECK(p.at(r, c) >= 0.0);
        s += p.at(r, c);
      }
      CHECK(std::abs(s - 1.0) <= 1e-12);
    }
    // Shift invariance.
    Array shifted = logits;
    for (std::size_t c = 0; c < 6; ++c)
      for (std::size_t r = 0; r < 4; ++r) shifted.at(r, c) += 17.25;
    Tape t2;
    const Array& p2 = t2.val(softmax(t2.leaf(shifted), 1));
    for (std::size_t i = 0; i < p.numel(); ++i)
      CHECK(p.data[i] == Catch::Approx(p2.data[i]).margin(1e-12));
  }
}

TEST_CASE("layer norm of a constant row is zero") {
  Tape tape;
  const Array& out =
      tape.val(layer_norm(tape.leaf(Array::full({1, 8}, 3.25))));
  for (double v : out.data) CHECK(v == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("grad_check oracle on a quadratic is near-exact") {
  const double err = grad_check(
      [](Tape&, const std::vector<Value>& x) { return sum_all(square(x[0])); },
      {Array::scalar(2.0)}, 1e-5);
  CHECK(err <= 1e-8);
}

TEST_CASE("backward visits each node once and leaves unreached nodes zero") {
  Tape tape;
  Value a = tape.leaf(Array::scalar(2.0));
  Value b = add(a, a);        // reached twice as a parent
  Value orphan = square(a);   // never reaches the root
  Value y = mul(b, b);        // y = (2a)^2 = 4a^2, dy/da = 8a = 16
  tape.backward(y);
  CHECK(tape.grad(a).value() == Catch::Approx(16.0));
  CHECK(tape.grad(orphan).value() == 0.0);
}

TEST_CASE("shape mismatch reports both shapes") {
  Tape tape;
  Value a = tape.leaf(Array::zeros({2, 3}));
  Value b = tape.leaf(Array::zeros({3, 2}));
  try {
    (void)add(a, b);
    FAIL("expected shape mismatch");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("(2,3)") != std::string::npos);
    CHECK(msg.find("(3,2)") != std::string::npos);
  }
}

TEST_CASE("non-finite objective is reported with the offending coordinate") {
  CHECK_THROWS_AS(
      grad_check(
          [](Tape&, const std::vector<Value>& x) {
            return sum_all(log_v(x[0]));  // negative inputs go non-finite
          },
          {Array::vec({0.5, 1e-6})}, 1e-5),
      std::runtime_error);
}
