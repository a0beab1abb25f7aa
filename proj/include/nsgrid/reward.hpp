#pragma once

// Primitive-segmented reward machinery: boundary detection, the milestone
// term, a segment-conditioned potential over prototype banks distilled from
// successful segments, shaped-reward combination, segment parsing, FIFO
// buffers and the periodic k-means prototype refresh.

#include <algorithm>
#include <cmath>
#include <deque>
#include <stdexcept>
#include <vector>

#include "nsgrid/array.hpp"
#include "nsgrid/plan.hpp"
#include "nsgrid/rng.hpp"

namespace nsgrid {

inline int boundary(int m, int m_prev) { return m != m_prev ? 1 : 0; }

// Per segment index sigma (1..M_max): FIFO of segment-summary latents.
class SegmentBufferBank {
 public:
  explicit SegmentBufferBank(int cap = 64, int n_segments = kMaxPlanLength)
      : cap_(cap), buffers_(static_cast<std::size_t>(n_segments)) {}

  void insert(int sigma, Array summary) {
    auto& buf = buffers_.at(static_cast<std::size_t>(sigma - 1));
    buf.push_back(std::move(summary));
    if (buf.size() > static_cast<std::size_t>(cap_)) buf.pop_front();
  }

  const std::deque<Array>& at(int sigma) const {
    return buffers_.at(static_cast<std::size_t>(sigma - 1));
  }
  int capacity() const { return cap_; }
  int segments() const { return static_cast<int>(buffers_.size()); }
  std::vector<std::size_t> sizes() const {
    std::vector<std::size_t> out;
    out.reserve(buffers_.size());
    for (const auto& b : buffers_) out.push_back(b.size());
    return out;
  }

 private:
  int cap_;
  std::vector<std::deque<Array>> buffers_;
};

// Immutable within one policy update ("treated as constants").
struct PrototypeBank {
  std::vector<std::vector<Array>> prototypes;  // per sigma, C or fewer centers

  explicit PrototypeBank(int n_segments = kMaxPlanLength)
      : prototypes(static_cast<std::size_t>(n_segments)) {}

  bool empty_for(int sigma) const {
    return prototypes.at(static_cast<std::size_t>(sigma - 1)).empty();
  }
  const std::vector<Array>& at(int sigma) const {
    return prototypes.at(static_cast<std::size_t>(sigma - 1));
  }
};

// Phi = -min_c ||latent - mu_{sigma,c}||_2; zero for an empty bank and at
// absorbing terminals.
inline double potential(const Array& latent, int sigma,
                        const PrototypeBank& bank, bool absorbing = false) {
  if (absorbing || bank.empty_for(sigma)) return 0.0;
  double best = std::numeric_limits<double>::infinity();
  for (const auto& mu : bank.at(sigma)) {
    require_same_shape(latent, mu, "potential");
    double sq = 0.0;
    for (std::size_t i = 0; i < latent.numel(); ++i) {
      const double d = latent[i] - mu[i];
      sq += d * d;
    }
    best = std::min(best, sq);
  }
  return -std::sqrt(best);
}

// r = r_task + lambda_seg * b + lambda_prog * (gamma * Phi_next - Phi).
inline double shaped_reward(double r_task, int b, double phi, double phi_next,
                            double gamma, double lambda_seg,
                            double lambda_prog) {
  return r_task + lambda_seg * static_cast<double>(b) +
         lambda_prog * (gamma * phi_next - phi);
}

// ---------------------------------------------------------------------------
// segments
// ---------------------------------------------------------------------------

struct Segment {
  int sigma = 1;
  std::size_t start = 0, end = 0;  // inclusive decision indices
  Array summary;                   // mean of within-segment latents
  bool success = false;            // task reward fired at the end step
};

// Maximal constant-index runs of a pointer trace. Latents, when given, must
// align with the trace; summaries are their within-segment means. A
// non-monotone trace is rejected unless the caller disabled the plan
// constraint.
inline std::vector<Segment> parse_segments(
    const std::vector<int>& trace, const std::vector<Array>& latents = {},
    bool require_monotone = true) {
  std::vector<Segment> out;
  if (trace.empty()) return out;
  if (!latents.empty() && latents.size() != trace.size())
    throw std::invalid_argument("parse_segments: latents misaligned");
  if (require_monotone)
    for (std::size_t t = 1; t < trace.size(); ++t)
      if (trace[t] < trace[t - 1] || trace[t] - trace[t - 1] > 1)
        throw std::logic_error(
            "parse_segments: non-monotone pointer trace (pointer bug)");

  std::size_t start = 0;
  for (std::size_t t = 0; t < trace.size(); ++t) {
    const bool last = t + 1 == trace.size();
    if (!last && trace[t + 1] == trace[t]) continue;
    Segment seg;
    seg.sigma = trace[t];
    seg.start = start;
    seg.end = t;
    if (!latents.empty()) {
      seg.summary = Array(latents[start].shape);
      for (std::size_t i = start; i <= t; ++i)
        for (std::size_t j = 0; j < seg.summary.numel(); ++j)
          seg.summary[j] += latents[i][j];
      const double n = static_cast<double>(t - start + 1);
      for (auto& v : seg.summary.data) v /= n;
    }
    out.push_back(std::move(seg));
    start = t + 1;
  }
  return out;
}

// Buffer rule: a segment is inserted when the task reward at its end step is
// positive and its end is marked by a boundary; the final segment has no
// trailing boundary and qualifies only in a successful episode.
inline void update_buffers(SegmentBufferBank& bank, std::vector<Segment>& segs,
                           const std::vector<double>& r_task_per_decision,
                           bool episode_success) {
  for (std::size_t k = 0; k < segs.size(); ++k) {
    auto& seg = segs[k];
    const bool final_segment = k + 1 == segs.size();
    const bool reward_at_end = r_task_per_decision.at(seg.end) > 0.0;
    seg.success = reward_at_end && (!final_segment || episode_success);
    if (seg.success && seg.summary.numel() > 0)
      bank.insert(seg.sigma, seg.summary);
  }
}

// ---------------------------------------------------------------------------
// prototype refresh (seeded k-means)
// ---------------------------------------------------------------------------

namespace detail {

inline double sq_dist(const Array& a, const Array& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

// k-means++ style seeding then 50 Lloyd iterations; wholly deterministic
// under the given seed.
inline std::vector<Array> kmeans(const std::vector<Array>& points, int k,
                                 std::uint64_t seed, int iters = 50) {
  Rng rng(seed);
  std::vector<Array> centers;
  centers.push_back(points[rng.uniform_index(points.size())]);
  while (centers.size() < static_cast<std::size_t>(k)) {
    std::vector<double> d2(points.size());
    double total = 0.0;
    for (std::size_t i = 0; i < points.size(); ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& c : centers) best = std::min(best, sq_dist(points[i], c));
      d2[i] = best;
      total += best;
    }
    std::size_t pickidx = 0;
    if (total > 0.0) {
      const double r = rng.uniform01() * total;
      double acc = 0.0;
      for (std::size_t i = 0; i < points.size(); ++i) {
        acc += d2[i];
        if (acc >= r) {
          pickidx = i;
          break;
        }
      }
    } else {
      pickidx = rng.uniform_index(points.size());
    }
    centers.push_back(points[pickidx]);
  }

  std::vector<int> assign(points.size(), 0);
  for (int it = 0; it < iters; ++it) {
    bool moved = false;
    for (std::size_t i = 0; i < points.size(); ++i) {
      int best = 0;
      double bd = sq_dist(points[i], centers[0]);
      for (std::size_t c = 1; c < centers.size(); ++c) {
        const double d = sq_dist(points[i], centers[c]);
        if (d < bd) {
          bd = d;
          best = static_cast<int>(c);
        }
      }
      if (assign[i] != best) {
        assign[i] = best;
        moved = true;
      }
    }
    std::vector<Array> next(centers.size(), Array(points[0].shape));
    std::vector<std::size_t> count(centers.size(), 0);
    for (std::size_t i = 0; i < points.size(); ++i) {
      auto& c = next[static_cast<std::size_t>(assign[i])];
      for (std::size_t j = 0; j < c.numel(); ++j) c[j] += points[i][j];
      ++count[static_cast<std::size_t>(assign[i])];
    }
    for (std::size_t c = 0; c < next.size(); ++c) {
      if (count[c] == 0) {
        next[c] = centers[c];  // keep an empty cluster's center in place
        continue;
      }
      for (auto& v : next[c].data) v /= static_cast<double>(count[c]);
    }
    centers = std::move(next);
    if (!moved && it > 0) break;
  }
  return centers;
}

}  // namespace detail

// C centers per segment from its buffer; buffers smaller than C contribute
// their raw summaries; empty buffers leave the previous prototypes in place.
inline PrototypeBank refresh_prototypes(const SegmentBufferBank& buffers,
                                        int C, std::uint64_t seed,
                                        const PrototypeBank& previous) {
  PrototypeBank bank(buffers.segments());
  for (int sigma = 1; sigma <= buffers.segments(); ++sigma) {
    const auto& buf = buffers.at(sigma);
    auto& out = bank.prototypes[static_cast<std::size_t>(sigma - 1)];
    if (buf.empty()) {
      if (!previous.empty_for(sigma)) out = previous.at(sigma);
      continue;
    }
    std::vector<Array> points(buf.begin(), buf.end());
    if (points.size() <= static_cast<std::size_t>(C)) {
      out = std::move(points);
      continue;
    }
    out = detail::kmeans(points, C,
                         Rng::derive(seed, static_cast<std::uint64_t>(sigma)));
  }
  return bank;
}

}  // namespace nsgrid
