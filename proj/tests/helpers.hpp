#pragma once

#include <random>
#include <vector>

#include "ipat/tape.hpp"
#include "ipat/tensor.hpp"

namespace ipat::test {

inline Tensor random_tensor(std::vector<std::size_t> shape, std::mt19937_64& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, scale);
  for (double& v : t.data()) v = dist(rng);
  return t;
}

/// Dense Jacobian d(upper)/d(lower) assembled from basis-cotangent vjps.
inline Tensor jacobian_by_vjp(const Tape& tape, VarId upper, VarId lower) {
  const std::size_t out = tape.value(upper).size();
  const std::size_t in = tape.value(lower).size();
  Tensor jac({out, in});
  for (std::size_t r = 0; r < out; ++r) {
    Tensor cot(tape.value(upper).shape());
    cot[r] = 1.0;
    const Tensor g = tape.vjp(upper, lower, cot);
    for (std::size_t c = 0; c < in; ++c) jac.at(r, c) = g[c];
  }
  return jac;
}

}  // namespace ipat::test
