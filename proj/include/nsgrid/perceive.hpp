#pragma once

// Frozen perception: a deterministic featurizer standing in for the VLM
// token encoder, mean-pool + layer-norm summarization, and the shaping
// encoder behind the progress potential. Weights are drawn once from a
// seeded generator at construction and never trained.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "nsgrid/array.hpp"
#include "nsgrid/catalog.hpp"
#include "nsgrid/env.hpp"
#include "nsgrid/rng.hpp"

namespace nsgrid {

struct PerceiveParams {
  int d_psi = 32;     // token width; the trailing d_psi/4 dims carry the
                      // instruction code so the rest is scene-only
  int d_latent = 16;  // shaping latent width
  int grid_width = 8;
  // Slice gains folded into the frozen projection. Content and proprio are
  // boosted so they survive mean pooling over all W^2 + 1 tokens.
  double content_scale = 16.0;
  double proprio_scale = 8.0;
  std::uint64_t seed = 17;
  std::uint64_t instr_hash_seed = 0xcbf29ce484222325ULL;  // FNV-1a basis
};

// N x d_psi token grid: one token per cell plus a trailing proprio token.
struct TokenGrid {
  Array tokens;  // (W*W + 1) x d_psi
  std::size_t count() const { return tokens.rows(); }
};

class Featurizer {
 public:
  explicit Featurizer(PerceiveParams p = {}) : p_(p) {
    if (p_.d_psi % 4 != 0 || p_.d_psi < 8)
      throw std::invalid_argument("d_psi must be a multiple of 4, >= 8");
    d_instr_ = p_.d_psi / 4;
    d_scene_ = p_.d_psi - d_instr_;
    raw_scene_ = num_cell_codes() + kPosCode + kProprioDim;
    Rng rng(p_.seed);
    scene_proj_ = Array::gaussian(
        {static_cast<std::size_t>(raw_scene_),
         static_cast<std::size_t>(d_scene_)},
        rng, 1.0 / std::sqrt(static_cast<double>(raw_scene_)));
    for (int r = 0; r < raw_scene_; ++r) {
      const double gain = r < num_cell_codes() ? p_.content_scale
                          : r >= num_cell_codes() + kPosCode
                              ? p_.proprio_scale
                              : 1.0;
      if (gain != 1.0)
        for (int j = 0; j < d_scene_; ++j)
          scene_proj_.at(static_cast<std::size_t>(r),
                         static_cast<std::size_t>(j)) *= gain;
    }
    instr_proj_ = Array::gaussian(
        {static_cast<std::size_t>(kInstrBuckets),
         static_cast<std::size_t>(d_instr_)},
        rng, 1.0 / std::sqrt(static_cast<double>(kInstrBuckets)));
    Rng srng(Rng::derive(p_.seed, 1));
    const std::size_t shaping_in =
        static_cast<std::size_t>(p_.grid_width) * p_.grid_width + kProprioDim;
    shaping_w_ = Array::gaussian(
        {shaping_in, static_cast<std::size_t>(p_.d_latent)}, srng,
        1.0 / std::sqrt(static_cast<double>(shaping_in)));
    shaping_b_ = Array::gaussian({static_cast<std::size_t>(p_.d_latent)}, srng,
                                 0.1);
  }

  const PerceiveParams& params() const { return p_; }
  int d_psi() const { return p_.d_psi; }
  int d_latent() const { return p_.d_latent; }

  // Token layout: cell tokens hold [proj(one-hot code, position code, zeros);
  // proj(instruction bag)], the final token the proprio vector in the scene
  // slice. Changing the instruction touches only the trailing slice;
  // changing one cell touches only that cell's token.
  TokenGrid encode_tokens(const Observation& obs,
                          const std::string& instruction) const {
    const int W = obs.width;
    const std::size_t n_tokens = static_cast<std::size_t>(W) * W + 1;
    const Array instr_code = instruction_code(instruction);

    TokenGrid grid;
    grid.tokens = Array({n_tokens, static_cast<std::size_t>(p_.d_psi)});
    std::vector<double> raw(static_cast<std::size_t>(raw_scene_));
    for (std::size_t tok = 0; tok < n_tokens; ++tok) {
      std::fill(raw.begin(), raw.end(), 0.0);
      if (tok + 1 < n_tokens) {
        const int x = static_cast<int>(tok) % W;
        const int y = static_cast<int>(tok) / W;
        raw[static_cast<std::size_t>(obs.cells[tok])] = 1.0;
        write_pos_code(&raw[num_cell_codes()],
                       static_cast<double>(x) / (W - 1),
                       static_cast<double>(y) / (W - 1));
      } else {
        // Proprio token: content code under the gripper, the gripper's own
        // position code, and S_t.
        const int gx = static_cast<int>(
            std::lround(obs.proprio[0] * (W - 1)));
        const int gy = static_cast<int>(
            std::lround(obs.proprio[1] * (W - 1)));
        raw[static_cast<std::size_t>(
            obs.cells[static_cast<std::size_t>(gy) * W + gx])] = 1.0;
        write_pos_code(&raw[num_cell_codes()], obs.proprio[0], obs.proprio[1]);
        for (int i = 0; i < kProprioDim; ++i)
          raw[static_cast<std::size_t>(num_cell_codes() + kPosCode + i)] =
              obs.proprio[static_cast<std::size_t>(i)];
      }
      for (int j = 0; j < d_scene_; ++j) {
        double acc = 0.0;
        for (int i = 0; i < raw_scene_; ++i)
          acc += raw[static_cast<std::size_t>(i)] *
                 scene_proj_.at(static_cast<std::size_t>(i),
                                static_cast<std::size_t>(j));
        grid.tokens.at(tok, static_cast<std::size_t>(j)) = acc;
      }
      for (int j = 0; j < d_instr_; ++j) {
        double acc = 0.0;
        for (int i = 0; i < kInstrBuckets; ++i)
          acc += instr_code[static_cast<std::size_t>(i)] *
                 instr_proj_.at(static_cast<std::size_t>(i),
                                static_cast<std::size_t>(j));
        grid.tokens.at(tok, static_cast<std::size_t>(d_scene_ + j)) = acc;
      }
    }
    return grid;
  }

  // Mean over tokens, then layer normalization (no affine).
  Array pool(const TokenGrid& grid) const {
    const std::size_t n = grid.tokens.rows(), d = grid.tokens.cols();
    Array out({d});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) out[j] += grid.tokens.at(i, j);
    for (std::size_t j = 0; j < d; ++j) out[j] /= static_cast<double>(n);
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += out[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (out[j] - mean) * (out[j] - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + 1e-5);
    for (std::size_t j = 0; j < d; ++j) out[j] = (out[j] - mean) * inv;
    return out;
  }

  // Shaping latent: tanh of a fixed affine map of (cell codes, proprio).
  Array shaping_encode(const Observation& obs) const {
    const std::size_t n_in = obs.cells.size() + kProprioDim;
    if (shaping_w_.rows() != n_in)
      throw std::invalid_argument("shaping encoder built for another grid");
    const double scale = 1.0 / static_cast<double>(num_cell_codes() - 1);
    Array out({static_cast<std::size_t>(p_.d_latent)});
    for (int j = 0; j < p_.d_latent; ++j) {
      double acc = shaping_b_[static_cast<std::size_t>(j)];
      for (std::size_t i = 0; i < obs.cells.size(); ++i)
        acc += obs.cells[i] * scale * shaping_w_.at(i, static_cast<std::size_t>(j));
      for (int i = 0; i < kProprioDim; ++i)
        acc += obs.proprio[static_cast<std::size_t>(i)] *
               shaping_w_.at(obs.cells.size() + static_cast<std::size_t>(i),
                             static_cast<std::size_t>(j));
      out[static_cast<std::size_t>(j)] = std::tanh(acc);
    }
    return out;
  }

  // Token-space direction of one cell content code (scene slice of what a
  // cell holding that code contributes); instruction slice zero. Embedding
  // tables are seeded from these so relevance starts out content-matched.
  Array content_direction(int code) const { return raw_direction(code); }

  // Token-space directions of the S_t slots (the proprio token's trailing
  // raw features); the key projection starts orthogonal to these.
  std::vector<Array> proprio_directions() const {
    std::vector<Array> dirs;
    for (int i = 0; i < kProprioDim; ++i)
      dirs.push_back(raw_direction(num_cell_codes() + kPosCode + i));
    return dirs;
  }

  // Token-space directions of the position-code slots.
  std::vector<Array> position_directions() const {
    std::vector<Array> dirs;
    for (int i = 0; i < kPosCode; ++i)
      dirs.push_back(raw_direction(num_cell_codes() + i));
    return dirs;
  }

  // Token-space directions of every content code.
  std::vector<Array> content_directions() const {
    std::vector<Array> dirs;
    for (int code = 0; code < num_cell_codes(); ++code)
      dirs.push_back(raw_direction(code));
    return dirs;
  }

  // Hashed bag of words over the instruction tokens, fixed bucket count.
  Array instruction_code(const std::string& instruction) const {
    Array code({kInstrBuckets});
    std::vector<std::string> words;
    std::string cur;
    for (char c : instruction) {
      if (std::isspace(static_cast<unsigned char>(c))) {
        if (!cur.empty()) words.push_back(cur), cur.clear();
      } else {
        cur.push_back(std::tolower(static_cast<unsigned char>(c)));
      }
    }
    if (!cur.empty()) words.push_back(cur);
    if (words.empty()) return code;
    const double unit = 1.0 / std::sqrt(static_cast<double>(words.size()));
    for (const auto& w : words) {
      const std::uint64_t h = fnv1a(w, p_.instr_hash_seed);
      const std::size_t bucket = h % kInstrBuckets;
      code[bucket] += ((h >> 32) & 1) ? unit : -unit;
    }
    return code;
  }

  static std::uint64_t fnv1a(const std::string& s, std::uint64_t seed) {
    std::uint64_t h = seed;
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    return h;
  }

 private:
  Array raw_direction(int raw_index) const {
    Array dir({static_cast<std::size_t>(p_.d_psi)});
    for (int j = 0; j < d_scene_; ++j)
      dir[static_cast<std::size_t>(j)] =
          scene_proj_.at(static_cast<std::size_t>(raw_index),
                         static_cast<std::size_t>(j));
    return dir;
  }

  static constexpr int kPosCode = 8;
  static constexpr int kInstrBuckets = 8;

  // Low-frequency channel monotone over [0,1] plus one higher octave.
  static void write_pos_code(double* out, double x, double y) {
    constexpr double pi = 3.14159265358979323846;
    out[0] = std::sin(0.5 * pi * x);
    out[1] = std::cos(0.5 * pi * x);
    out[2] = std::sin(0.5 * pi * y);
    out[3] = std::cos(0.5 * pi * y);
    out[4] = std::sin(2.0 * pi * x);
    out[5] = std::cos(2.0 * pi * x);
    out[6] = std::sin(2.0 * pi * y);
    out[7] = std::cos(2.0 * pi * y);
  }

  PerceiveParams p_;
  int d_instr_ = 0, d_scene_ = 0, raw_scene_ = 0;
  Array scene_proj_;   // raw_scene x d_scene
  Array instr_proj_;   // buckets x d_instr
  Array shaping_w_;    // (W*W + proprio) x d_latent
  Array shaping_b_;
};

}  // namespace nsgrid
