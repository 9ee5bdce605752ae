#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <string>

#include <json.hpp>

#include "ipat/baselines.hpp"
#include "ipat/corpus.hpp"

namespace ipat {

/// Union of the nodes kept during an ablated forward pass.
class RetainedSet {
 public:
  RetainedSet(Granularity granularity, int layers, int heads, int positions);

  Granularity granularity() const { return granularity_; }
  void add(std::span<const NodeId> nodes);
  void add(const Pattern& pattern) { add(pattern.nodes); }
  bool contains(const NodeId& node) const;
  const std::set<NodeId>& nodes() const { return nodes_; }

  /// Embedding granularity zeroes every layer embedding not in the set;
  /// attention granularity zeroes heads and skips not in the set inside the
  /// layer and keeps the embeddings they feed.
  Ablation to_ablation() const;

  int layers() const { return layers_; }
  int heads() const { return heads_; }
  int positions() const { return positions_; }

 private:
  Granularity granularity_;
  int layers_, heads_, positions_;
  std::set<NodeId> nodes_;
};

/// Logits [N, V] of the forward pass with non-retained nodes zeroed.
Tensor ablate_forward(const ToyTransformer& model, std::span<const int> tokens, const RetainedSet& retained);

/// Fraction of instances whose QoI is positive after ablation (ties count
/// half). `retained(i)` builds instance i's set.
double ablated_accuracy(const ToyTransformer& model, std::span<const Instance> instances,
                        const std::function<RetainedSet(std::size_t)>& retained);

struct Concentration {
  std::optional<double> positive;
  std::optional<double> negative;
};
/// Pattern influence of Pi+ (Pi-) over the summed positive (negative) word
/// attributions, pooled across the collections. A zero denominator leaves
/// the value absent.
Concentration concentration(std::span<const PatternCollection> collections);

/// Sum of abstracted paths over sum of all source-to-qoi paths.
BigRational path_share(const GraphView& view, const PatternCollection& collection);
/// Pooled over several same-view collections.
BigRational path_share(const GraphView& view, std::span<const PatternCollection> collections);

struct Alignment {
  std::size_t aligned = 0;
  std::size_t total = 0;
  /// One 0/1 indicator per head node, in pattern order.
  std::vector<double> indicators;
  std::optional<double> rate() const;
};
/// For every head a^{l,k}_j in the attention-level patterns, reached from
/// position i, whether k = argmax_a M_l[a, i, j] (lowest head on ties).
Alignment alignment(std::span<const PatternCollection> collections, std::span<const AttentionTensorStack> stacks);

struct Interval {
  double low = 0.0;
  double high = 0.0;
};
/// Percentile bootstrap interval for the mean of `values`.
Interval bootstrap_mean_interval(std::span<const double> values, int resamples, double level, std::uint64_t seed);

/// Binary entropy (bits) of node membership, averaged over `universe`.
double pattern_entropy(std::span<const std::vector<NodeId>> patterns, std::span<const NodeId> universe);
/// Same, over every node of the view. Throws Error for a pattern node outside
/// the view (for example a pattern from a sentence of different length).
double pattern_entropy(std::span<const Pattern> patterns, const GraphView& view);

/// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> a, std::span<const double> b);

inline constexpr int kSchemaVersion = 1;

struct MetricsReport {
  std::string method;
  Granularity granularity = Granularity::embedding;
  double ablated_accuracy = 0.0;
  double original_accuracy = 0.0;
  std::optional<double> concentration_pos;
  std::optional<double> concentration_neg;
  BigRational path_share = 0;
  std::optional<double> alignment_rate;
  double pattern_entropy = 0.0;
  int n_instances = 0;
};

/// Stable-key JSON object (schema documented in docs/formats.md).
nlohmann::json to_json(const MetricsReport& report);

}  // namespace ipat
