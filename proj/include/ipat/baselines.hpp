#pragma once

#include <cstdint>

#include "ipat/gpr.hpp"

namespace ipat {

/// Attention probabilities of every layer, indexed (layer, head, key i,
/// query j): at(l, a, i, j) is the weight query j puts on key i, so each
/// (l, a, ., j) column sums to 1 over the non-padding keys.
class AttentionTensorStack {
 public:
  AttentionTensorStack() = default;
  AttentionTensorStack(int layers, int heads, int positions);

  int layers() const { return layers_; }
  int heads() const { return heads_; }
  int positions() const { return positions_; }

  double at(int layer, int head, int key, int query) const { return m_[index(layer, head, key, query)]; }
  void set(int layer, int head, int key, int query, double value) { m_[index(layer, head, key, query)] = value; }
  /// Head-averaged weight.
  double mean(int layer, int key, int query) const;
  /// 0.5 I + 0.5 mean, the rollout variant that models the skip connection.
  double rollout(int layer, int key, int query) const;

  /// Largest deviation of a column sum from 1, over non-padding queries.
  double column_sum_error(std::span<const char> padding = {}) const;

 private:
  std::size_t index(int layer, int head, int key, int query) const;

  int layers_ = 0, heads_ = 0, positions_ = 0;
  std::vector<double> m_;
};

/// Attention probabilities of the unperturbed input (alpha = 1).
AttentionTensorStack capture_attention(const ToyTransformer& model, const TraceInput& input);

/// One uniformly drawn node per guiding set, with the same layer structure as
/// GPR output at the view's granularity: [x_s, h^1, ..., h^L_m, qoi], plus
/// one head or skip per hop at attention granularity.
Pattern pattern_random(const GraphView& view, int source, std::uint64_t seed, std::span<const char> padding = {});

/// Embedding-level pattern maximizing the product of attention weights along
/// s -> j_1 -> ... -> j_{L-1} -> m, by max-product dynamic programming.
/// Ties go to the lowest position, layer by layer from the bottom.
Pattern pattern_attention_dp(const AttentionTensorStack& stack, int source, int mask_position, bool use_rollout,
                             std::span<const char> padding = {});

/// Conductance of every non-padding layer-`layer` embedding for the word at
/// `position`: the coordinate sum of (x - x_b) * E[dq/dh dh/dx]. Indexed by
/// position; padding entries are 0.
std::vector<double> conductance_scores(const InfluenceContext& ctx, int position, int layer);
/// Internal influence of every layer-`layer` embedding: coordinate sum of
/// E[dq/dh]. Does not depend on the word.
std::vector<double> internal_influence_scores(const InfluenceContext& ctx, int layer);

/// table[i][j]: conductance of h^layer_j for the word at position i, for every
/// word at once (one backward sweep per layer node and sample). Rows of
/// non-moving words are 0.
using ConductanceTable = std::vector<std::vector<double>>;
ConductanceTable conductance_table(const InfluenceContext& ctx, int layer);
/// Tables for layers 1..L-1, indexed by layer (entry 0 is empty).
std::vector<ConductanceTable> conductance_tables(const InfluenceContext& ctx);

/// Per-layer argmax of sigma * conductance (ties to the lowest position).
Pattern pattern_conductance(const InfluenceContext& ctx, int position, double sigma);
/// Same, reading precomputed conductance_tables().
Pattern pattern_conductance(const InfluenceContext& ctx, int position, double sigma,
                            std::span<const ConductanceTable> tables);
/// Per-layer argmax of sigma * internal influence.
Pattern pattern_internal_influence(const InfluenceContext& ctx, int position, double sigma);

/// Retained-node list of an attention-level pattern with every skip node
/// swapped for the `heads` head nodes at its layer and position.
std::vector<NodeId> pattern_replace_skip(const Pattern& pattern, int heads);

}  // namespace ipat
