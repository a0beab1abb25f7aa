// Reward machinery: boundaries, the prototype potential, shaped-reward
// arithmetic, segment parsing, buffer rules, and the k-means refresh.

#include "catch_amalgamated.hpp"

#include "nsgrid/reward.hpp"

using namespace nsgrid;

namespace {

Array vec16(std::initializer_list<double> head) {
  Array v({16});
  std::size_t i = 0;
  for (double x : head) v[i++] = x;
  return v;
}

}  // namespace

TEST_CASE("boundary indicator") {
  CHECK(boundary(2, 2) == 0);
  CHECK(boundary(3, 2) == 1);
  // A monotone trace of length T has at most M-1 boundaries.
  const std::vector<int> trace = {1, 1, 2, 2, 3, 3, 3};
  int count = 0;
  for (std::size_t t = 1; t < trace.size(); ++t)
    count += boundary(trace[t], trace[t - 1]);
  CHECK(count <= 2);
}

TEST_CASE("potential is the negated nearest-prototype distance") {
  PrototypeBank bank;
  CHECK(potential(vec16({1, 2}), 1, bank) == 0.0);  // empty bank

  bank.prototypes[0].push_back(vec16({}));  // origin
  CHECK(potential(vec16({3, 4}), 1, bank) == Catch::Approx(-5.0));
  CHECK(potential(vec16({}), 1, bank) == 0.0);  // at the prototype

  bank.prototypes[0].push_back(vec16({3, 4}));  // second, nearer one
  CHECK(potential(vec16({3, 3}), 1, bank) == Catch::Approx(-1.0));

  // Absorbing terminal forces zero.
  CHECK(potential(vec16({9, 9}), 1, bank, /*absorbing=*/true) == 0.0);

  // Phi <= 0 always.
  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    Array l({16});
    for (auto& v : l.data) v = rng.uniform(-1, 1);
    CHECK(potential(l, 1, bank) <= 0.0);
  }
}

TEST_CASE("shaped reward arithmetic") {
  CHECK(shaped_reward(1.0, 1, -2.0, -1.0, 0.99, 0.0, 0.0) == 1.0);
  CHECK(shaped_reward(0.0, 0, -3.0, -3.0, 1.0, 0.0, 1.0) == 0.0);  // telescoped
  CHECK(shaped_reward(0.0, 1, -2.0, -1.0, 0.99, 0.5, 1.0) ==
        Catch::Approx(1.51));
}

TEST_CASE("segment parsing tiles the trace") {
  const auto segs = parse_segments({1, 1, 2, 2, 2});
  REQUIRE(segs.size() == 2);
  CHECK(segs[0].sigma == 1);
  CHECK(segs[0].start == 0);
  CHECK(segs[0].end == 1);
  CHECK(segs[1].sigma == 2);
  CHECK(segs[1].end == 4);

  CHECK(parse_segments({3, 3, 3}).size() == 1);

  // Partition property on random monotone traces.
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<int> trace = {1};
    for (int t = 0; t < 20; ++t)
      trace.push_back(std::min(6, trace.back() +
                                      (rng.uniform01() < 0.3 ? 1 : 0)));
    const auto parts = parse_segments(trace);
    std::size_t total = 0;
    for (const auto& s : parts) total += s.end - s.start + 1;
    CHECK(total == trace.size());
  }

  CHECK_THROWS_AS(parse_segments({2, 1}), std::logic_error);
  CHECK_THROWS_AS(parse_segments({1, 3}), std::logic_error);
  CHECK_NOTHROW(parse_segments({2, 1}, {}, /*require_monotone=*/false));
}

TEST_CASE("segment summaries average the within-segment latents") {
  std::vector<Array> latents = {vec16({2}), vec16({4}), vec16({9})};
  const auto segs = parse_segments({1, 1, 2}, latents);
  REQUIRE(segs.size() == 2);
  CHECK(segs[0].summary[0] == Catch::Approx(3.0));
  CHECK(segs[1].summary[0] == Catch::Approx(9.0));
}

TEST_CASE("buffer rule: reward-at-end plus boundary or success") {
  SegmentBufferBank bank(4);
  std::vector<Array> latents(5, vec16({1}));

  // Failed episode, no task reward anywhere: nothing inserted.
  auto segs = parse_segments({1, 1, 2, 2, 2}, latents);
  update_buffers(bank, segs, {0, 0, 0, 0, 0}, /*episode_success=*/false);
  CHECK(bank.at(1).empty());
  CHECK(bank.at(2).empty());

  // Subgoals fire at both segment ends; success makes the final one count.
  segs = parse_segments({1, 1, 2, 2, 2}, latents);
  update_buffers(bank, segs, {0, 1, 0, 0, 1}, /*episode_success=*/true);
  CHECK(bank.at(1).size() == 1);
  CHECK(bank.at(2).size() == 1);
  CHECK(segs[0].success);
  CHECK(segs[1].success);

  // Final segment of a timeout episode does not qualify.
  segs = parse_segments({1, 1, 2, 2, 2}, latents);
  update_buffers(bank, segs, {0, 1, 0, 0, 1}, /*episode_success=*/false);
  CHECK(bank.at(1).size() == 2);
  CHECK(bank.at(2).size() == 1);

  // FIFO eviction at capacity.
  for (int i = 0; i < 10; ++i) bank.insert(1, vec16({double(i)}));
  CHECK(bank.at(1).size() == 4);
  CHECK(bank.at(1).back()[0] == 9.0);
}

TEST_CASE("prototype refresh") {
  SegmentBufferBank buffers(64);
  PrototypeBank previous;

  // All buffers empty: bank unchanged (still empty).
  PrototypeBank b0 = refresh_prototypes(buffers, 3, 7, previous);
  for (int s = 1; s <= 6; ++s) CHECK(b0.empty_for(s));

  // C identical vectors -> coincident centers at that vector.
  for (int i = 0; i < 5; ++i) buffers.insert(1, vec16({2, 2}));
  const PrototypeBank b1 = refresh_prototypes(buffers, 3, 7, previous);
  REQUIRE(b1.at(1).size() == 3);
  for (const auto& mu : b1.at(1)) {
    CHECK(mu[0] == Catch::Approx(2.0));
    CHECK(mu[1] == Catch::Approx(2.0));
  }

  // Two well-separated clusters, C = 2 -> centers at the cluster means.
  SegmentBufferBank buffers2(64);
  for (int i = 0; i < 8; ++i)
    buffers2.insert(2, vec16({10.0 + 0.1 * i}));
  for (int i = 0; i < 8; ++i)
    buffers2.insert(2, vec16({-10.0 - 0.1 * i}));
  PrototypeBank b2 = refresh_prototypes(buffers2, 2, 7, previous);
  REQUIRE(b2.at(2).size() == 2);
  std::vector<double> centers = {b2.at(2)[0][0], b2.at(2)[1][0]};
  std::sort(centers.begin(), centers.end());
  CHECK(centers[0] == Catch::Approx(-10.35));
  CHECK(centers[1] == Catch::Approx(10.35));

  // Deterministic under a fixed seed.
  PrototypeBank b3 = refresh_prototypes(buffers2, 2, 7, previous);
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t j = 0; j < 16; ++j)
      CHECK(b2.at(2)[c][j] == b3.at(2)[c][j]);

  // Buffers smaller than C fall back to the raw summaries.
  SegmentBufferBank small(64);
  small.insert(3, vec16({5}));
  small.insert(3, vec16({6}));
  const PrototypeBank b4 = refresh_prototypes(small, 3, 7, previous);
  CHECK(b4.at(3).size() == 2);

  // Empty buffer for one sigma keeps that sigma's previous prototypes.
  const PrototypeBank b5 = refresh_prototypes(small, 3, 7, b2);
  CHECK(b5.at(3).size() == 2);
  CHECK(b5.at(2).size() == 2);  // carried over from previous
}

TEST_CASE("buffers only grow or rotate") {
  SegmentBufferBank bank(3);
  std::size_t last = 0;
  for (int i = 0; i < 10; ++i) {
    bank.insert(1, vec16({double(i)}));
    const std::size_t now = bank.at(1).size();
    CHECK(now >= std::min<std::size_t>(last, 3));
    CHECK(now <= 3);
    last = now;
  }
}
