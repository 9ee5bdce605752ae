#pragma once

#include <random>
#include <vector>

#include "ipat/influence.hpp"

namespace ipat::test {

// Token ids used by the toy fixtures: 1 = [CLS], 2 = [SEP], 3 = [MASK].
inline constexpr int kCls = 1, kSep = 2, kMask = 3;
inline const std::vector<int> kSpecials = {kCls, kSep, kMask};

inline ModelConfig toy_config(int layers, int heads, int hidden, int positions, std::uint64_t seed) {
  ModelConfig c;
  c.layers = layers;
  c.heads = heads;
  c.hidden = hidden;
  c.max_len = positions;
  c.vocab = 12;
  c.ffn_width = 2 * hidden;
  c.seed = seed;
  return c;
}

/// Random sentence of length n with the mask at `mask`; other tokens are
/// drawn from the non-special range.
inline std::vector<int> random_tokens(int n, int mask, std::mt19937_64& rng) {
  std::vector<int> t;
  for (int j = 0; j < n; ++j) t.push_back(j == mask ? kMask : 4 + static_cast<int>(rng() % 8));
  return t;
}

inline TraceInput toy_input(const ToyTransformer& model, const std::vector<int>& tokens, int mask) {
  return make_trace_input(model, tokens, Qoi::contrast(mask, 4, 5), kMask, kSpecials);
}

inline DoIConfig doi(int n) {
  DoIConfig d;
  d.n_samples = n;
  return d;
}

}  // namespace ipat::test
