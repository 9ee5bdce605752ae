#include <doctest.h>

#include "fixtures.hpp"
#include "helpers.hpp"
#include "ipat/oracle.hpp"

using namespace ipat;
using namespace ipat::test;

namespace {

Tensor matmul(const Tensor& a, const Tensor& b) {
  const std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
  Tensor out({n, m});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t t = 0; t < k; ++t) {
      for (std::size_t j = 0; j < m; ++j) out.at(i, j) += a.at(i, t) * b.at(t, j);
    }
  }
  return out;
}

// Random pattern: one node per layer (and head/skip per hop at attention level).
Pattern random_pattern(const GraphView& view, int source, std::mt19937_64& rng) {
  const int L = view.layers(), N = view.positions(), A = view.heads();
  Pattern p;
  p.nodes = {NodeId::input(source)};
  int prev = source;
  for (int l = 1; l <= L; ++l) {
    const int j = l == L ? view.mask_position() : static_cast<int>(rng() % static_cast<std::uint64_t>(N));
    if (view.granularity() == Granularity::attention) {
      const int k = static_cast<int>(rng() % static_cast<std::uint64_t>(A + 1));
      p.nodes.push_back(k == A && j == prev ? NodeId::skip(l, j) : NodeId::attention_head(l, j, k % A));
    }
    p.nodes.push_back(NodeId::embedding(l, j));
    prev = j;
  }
  p.nodes.push_back(NodeId::qoi());
  return p;
}

}  // namespace

TEST_CASE("edge partials from vjps agree with finite differences") {
  ToyTransformer model(toy_config(2, 2, 4, 3, 21));
  std::mt19937_64 rng(22);
  const TraceInput in = toy_input(model, random_tokens(3, 1, rng), 1);
  for (Granularity g : {Granularity::embedding, Granularity::attention}) {
    const auto vjp = edge_partials(model, in, 0.3, g, PartialMethod::vjp);
    const auto fd = edge_partials(model, in, 0.3, g, PartialMethod::finite_difference);
    const GraphView view = build_view(model.config(), 3, 1, g);
    CHECK(vjp.size() == view.edge_count());
    REQUIRE(fd.size() == vjp.size());
    for (const auto& [edge, jac] : vjp) {
      const Tensor& other = fd.at(edge);
      double scale = 0.0, err = 0.0;
      for (std::size_t c = 0; c < jac.size(); ++c) {
        scale = std::max(scale, std::abs(jac[c]));
        err = std::max(err, std::abs(jac[c] - other[c]));
      }
      CHECK(err <= 1e-4 * std::max(1.0, scale));
    }
  }
}

TEST_CASE("attention edges compose into embedding edges") {
  ToyTransformer model(toy_config(2, 2, 4, 3, 23));
  std::mt19937_64 rng(24);
  const TraceInput in = toy_input(model, random_tokens(3, 2, rng), 2);
  const auto emb = edge_partials(model, in, 0.6, Granularity::embedding);
  const auto att = edge_partials(model, in, 0.6, Granularity::attention);
  for (const auto& [edge, direct] : emb) {
    const auto& [tail, head] = edge;
    if (head.kind != NodeKind::layer_embedding) continue;
    std::vector<NodeId> middle;
    for (int k = 0; k < 2; ++k) middle.push_back(NodeId::attention_head(head.layer, head.position, k));
    if (tail.position == head.position) middle.push_back(NodeId::skip(head.layer, head.position));
    Tensor total(direct.shape());
    for (const NodeId& mid : middle) {
      const auto up = att.find({mid, head});
      const auto down = att.find({tail, mid});
      REQUIRE(up != att.end());
      REQUIRE(down != att.end());
      axpy(1.0, matmul(up->second, down->second).data(), total.data());
    }
    CHECK(relative_error(total.data(), direct.data()) <= 1e-10);
  }
}

TEST_CASE("path enumeration reproduces the cut-based influence") {
  ToyTransformer model(toy_config(2, 2, 4, 3, 25));
  std::mt19937_64 rng(26);
  const TraceInput in = toy_input(model, random_tokens(3, 0, rng), 0);
  const DoIConfig d = doi(4);
  const InfluenceContext ctx(model, in, d);
  const PathOracle oracle(model, in, d, Granularity::embedding);

  for (int s : in.traced) {
    Pattern whole;
    whole.nodes = {NodeId::input(s), NodeId::qoi()};
    CHECK(oracle.paths(whole).size() == 3);
    CHECK(relative_error(oracle.influence(whole), pattern_influence(ctx, whole)) <= 1e-8);
  }
  for (int trial = 0; trial < 100; ++trial) {
    const int s = in.traced[static_cast<std::size_t>(trial) % in.traced.size()];
    const Pattern p = random_pattern(oracle.view(), s, rng);
    CHECK(oracle.paths(p).size() == count_abstracted(oracle.view(), p));
    CHECK(relative_error(oracle.influence(p), pattern_influence(ctx, p)) <= 1e-8);
  }
}

TEST_CASE("uncut pattern through a three-layer graph") {
  ToyTransformer model(toy_config(3, 1, 4, 3, 33));
  std::mt19937_64 rng(34);
  const TraceInput in = toy_input(model, random_tokens(3, 1, rng), 1);
  const DoIConfig d = doi(3);
  const InfluenceContext ctx(model, in, d);
  const PathOracle oracle(model, in, d, Granularity::embedding);
  for (int s : in.traced) {
    Pattern whole;
    whole.nodes = {NodeId::input(s), NodeId::qoi()};
    CHECK(oracle.paths(whole).size() == 9);
    CHECK(relative_error(oracle.influence(whole), pattern_influence(ctx, whole)) <= 1e-8);
  }
}

TEST_CASE("attention-level path enumeration reproduces the cut-based influence") {
  ToyTransformer model(toy_config(2, 2, 4, 3, 27));
  std::mt19937_64 rng(28);
  const TraceInput in = toy_input(model, random_tokens(3, 2, rng), 2);
  const DoIConfig d = doi(3);
  const InfluenceContext ctx(model, in, d);
  const PathOracle oracle(model, in, d, Granularity::attention);
  for (int trial = 0; trial < 20; ++trial) {
    const int s = in.traced[static_cast<std::size_t>(trial) % in.traced.size()];
    const Pattern p = random_pattern(oracle.view(), s, rng);
    CHECK(oracle.paths(p).size() == 1);
    CHECK(relative_error(oracle.influence(p), pattern_influence(ctx, p)) <= 1e-8);
  }
  Pattern mixed;
  mixed.nodes = {NodeId::input(in.traced.front()), NodeId::embedding(1, 1), NodeId::qoi()};
  CHECK(oracle.paths(mixed).size() == count_abstracted(oracle.view(), mixed));
  CHECK(relative_error(oracle.influence(mixed), pattern_influence(ctx, mixed)) <= 1e-8);
}

TEST_CASE("a one-layer model has a single embedding-level candidate") {
  ToyTransformer model(toy_config(1, 2, 4, 4, 29));
  std::mt19937_64 rng(30);
  const TraceInput in = toy_input(model, random_tokens(4, 3, rng), 3);
  const InfluenceContext ctx(model, in, doi(3));
  for (int s : in.traced) {
    CHECK(exhaustive_candidate_count(ctx, s, Granularity::embedding) == 1);
    const Pattern p = exhaustive_best_pattern(ctx, s, 1.0, Granularity::embedding);
    CHECK(p.nodes == std::vector<NodeId>{NodeId::input(s), NodeId::embedding(1, 3), NodeId::qoi()});
    // Heads plus the skip only when the word sits at the mask.
    CHECK(exhaustive_candidate_count(ctx, s, Granularity::attention) == (s == 3 ? 3u : 2u));
  }
}

TEST_CASE("exhaustive search bound") {
  ToyTransformer model(toy_config(3, 2, 4, 4, 31));
  std::mt19937_64 rng(32);
  const InfluenceContext ctx(model, toy_input(model, random_tokens(4, 0, rng), 0), doi(2));
  CHECK(exhaustive_candidate_count(ctx, 1, Granularity::embedding) == 16);
  CHECK_THROWS_AS(exhaustive_best_pattern(ctx, 1, 1.0, Granularity::embedding, nullptr, 10), Error);
}
