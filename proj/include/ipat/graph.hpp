#pragma once

#include <boost/multiprecision/cpp_int.hpp>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ipat/transformer.hpp"

namespace ipat {

using BigInt = boost::multiprecision::cpp_int;
using BigRational = boost::multiprecision::cpp_rational;

enum class Granularity { embedding, attention };

std::string_view to_string(Granularity g);
Granularity parse_granularity(std::string_view name);

/// Explicit DAG over the nodes of a traced model.
///
/// Embedding granularity: x_i -> h^1_j -> ... -> h^L_j for every i, j, plus
/// h^L_m -> qoi. Attention granularity replaces each layer's dense block with
/// h^{l-1}_i -> a^{l,k}_j -> h^l_j for every i, j, k and the position-wise
/// skip h^{l-1}_j -> s^l_j -> h^l_j. Node indices are a topological order.
class GraphView {
 public:
  GraphView(int layers, int heads, int positions, int mask_position, Granularity granularity);

  Granularity granularity() const { return granularity_; }
  int layers() const { return layers_; }
  int heads() const { return heads_; }
  int positions() const { return positions_; }
  int mask_position() const { return mask_position_; }

  const std::vector<NodeId>& nodes() const { return nodes_; }
  bool contains(const NodeId& node) const { return index_.contains(node); }
  std::size_t index(const NodeId& node) const;
  const std::vector<std::size_t>& successors(std::size_t index) const { return succ_[index]; }
  std::size_t edge_count() const { return edges_; }
  bool has_edge(const NodeId& from, const NodeId& to) const;
  NodeId sink() const { return NodeId::qoi(); }

 private:
  std::size_t add(NodeId node);
  void connect(const NodeId& from, const NodeId& to);

  Granularity granularity_;
  int layers_;
  int heads_;
  int positions_;
  int mask_position_;
  std::vector<NodeId> nodes_;
  std::unordered_map<NodeId, std::size_t> index_;
  std::vector<std::vector<std::size_t>> succ_;
  std::size_t edges_ = 0;
};

GraphView build_view(const ModelConfig& config, int positions, int mask_position, Granularity granularity);

/// Number of directed paths from `from` to `to` (0 when disconnected).
BigInt count_paths(const GraphView& view, const NodeId& from, const NodeId& to);

enum class Sign { positive, negative };

/// Ordered node sequence abstracting every graph path that visits the nodes
/// in order. First node is an input, last node is the qoi.
struct Pattern {
  std::vector<NodeId> nodes;
  double influence = 0.0;
  /// Distributional attribution of the source word (its sign drives the
  /// refinement objective).
  double attribution = 0.0;
  int word = 0;
  Sign sign = Sign::positive;
};

/// One pattern per traced word of a sentence.
struct PatternCollection {
  Granularity granularity = Granularity::embedding;
  std::vector<Pattern> patterns;

  std::vector<Pattern> positive() const;
  std::vector<Pattern> negative() const;
};

/// Throws Error unless the pattern starts at an input, ends at the qoi, and
/// every consecutive pair is connected in the view.
void validate_pattern(const GraphView& view, const Pattern& pattern);

/// |gamma(pattern)|: product of path counts between consecutive nodes.
BigInt count_abstracted(const GraphView& view, const Pattern& pattern);

/// Layer-l embedding nodes h^l_j for every non-padding position j.
std::vector<NodeId> embedding_guiding_set(int layer, int positions, std::span<const char> padding = {});

/// Nodes that can sit between `lower` (layer l-1) and `upper` (layer l):
/// heads a^{l,0..A-1} at upper's position, then the skip s^l when the two
/// positions match.
std::vector<NodeId> attention_guiding_set(const NodeId& lower, const NodeId& upper, int heads);

/// The embedding-granularity nodes of a pattern (heads and skips dropped).
std::vector<NodeId> embedding_skeleton(std::span<const NodeId> nodes);

struct DotOptions {
  std::vector<std::string> words;  // optional token strings for input labels
  std::string title;
};

/// Graphviz rendering: embedding nodes on a layer grid, one edge per pattern
/// step. Head traversals are solid and labelled with the 1-based head index,
/// skip traversals are dashed; green edges belong to positive words, red to
/// negative ones.
std::string to_dot(const GraphView& view, const std::vector<Pattern>& patterns, const DotOptions& options = {});

}  // namespace ipat
