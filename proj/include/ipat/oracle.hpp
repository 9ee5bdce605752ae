#pragma once

#include <map>
#include <utility>

#include "ipat/gpr.hpp"

namespace ipat {

using Edge = std::pair<NodeId, NodeId>;  // (tail, head)
/// Per-edge Jacobians d(head)/d(tail), shape [|head|, |tail|].
using EdgePartials = std::map<Edge, Tensor>;

enum class PartialMethod { vjp, finite_difference };

/// Partial derivative of every edge of the view at one DoI sample. Because a
/// node's direct inputs never depend on each other, the tape's total
/// derivative between adjacent nodes is the edge partial; the finite
/// difference method recomputes it from the layer function instead.
EdgePartials edge_partials(const ToyTransformer& model, const TraceInput& input, double alpha,
                           Granularity granularity, PartialMethod method = PartialMethod::vjp,
                           double fd_step = 1e-4);

/// Brute-force pattern influence: sums edge-Jacobian products over every
/// explicit path in gamma(pattern), sample by sample, with the same alphas
/// and scalarization as the influence module.
class PathOracle {
 public:
  PathOracle(const ToyTransformer& model, TraceInput input, const DoIConfig& doi, Granularity granularity,
             std::vector<int> moving = {});

  const GraphView& view() const { return view_; }
  /// Every concrete path abstracted by the pattern, each a node list.
  std::vector<std::vector<NodeId>> paths(const Pattern& pattern) const;
  /// Mean over samples of the summed path products at the source input.
  Tensor gradient(const Pattern& pattern) const;
  double influence(const Pattern& pattern) const;

  static constexpr std::size_t kMaxPaths = 100000;

 private:
  TraceInput input_;
  std::vector<int> moving_;
  GraphView view_;
  std::vector<EdgePartials> partials_;  // one map per sample
};

double enumerate_path_influence(const ToyTransformer& model, const TraceInput& input, const Pattern& pattern,
                                const DoIConfig& doi, Granularity granularity);

/// Argmax of sigma * I over every one-node-per-guiding-set pattern for the
/// word at `position`. At attention granularity an embedding-level
/// `skeleton` restricts the search to head/skip assignments along it.
/// Enumeration order is lexicographic by layer, so ties keep the lowest
/// indices.
Pattern exhaustive_best_pattern(const InfluenceContext& ctx, int position, double sigma, Granularity granularity,
                                const Pattern* skeleton = nullptr, std::size_t max_candidates = 100000);

/// Number of candidate patterns exhaustive_best_pattern would score.
std::size_t exhaustive_candidate_count(const InfluenceContext& ctx, int position, Granularity granularity,
                                       const Pattern* skeleton = nullptr);

}  // namespace ipat
