#include "ipat/graph.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <sstream>

namespace ipat {

std::string_view to_string(Granularity g) { return g == Granularity::embedding ? "embedding" : "attention"; }

Granularity parse_granularity(std::string_view name) {
  if (name == "embedding" || name == "e") return Granularity::embedding;
  if (name == "attention" || name == "a") return Granularity::attention;
  throw Error("unknown granularity '" + std::string(name) + "'");
}

GraphView::GraphView(int layers, int heads, int positions, int mask_position, Granularity granularity)
    : granularity_(granularity),
      layers_(layers),
      heads_(heads),
      positions_(positions),
      mask_position_(mask_position) {
  if (layers < 1 || heads < 1 || positions < 1) throw Error("graph view: counts must be >= 1");
  if (mask_position < 0 || mask_position >= positions) throw Error("graph view: mask position out of range");

  for (int j = 0; j < positions; ++j) add(NodeId::input(j));
  for (int l = 1; l <= layers; ++l) {
    if (granularity == Granularity::attention) {
      for (int j = 0; j < positions; ++j) {
        for (int k = 0; k < heads; ++k) add(NodeId::attention_head(l, j, k));
        add(NodeId::skip(l, j));
      }
    }
    for (int j = 0; j < positions; ++j) add(NodeId::embedding(l, j));
  }
  add(NodeId::qoi());

  for (int l = 1; l <= layers; ++l) {
    for (int i = 0; i < positions; ++i) {
      const NodeId from = NodeId::embedding(l - 1, i);
      if (granularity == Granularity::embedding) {
        for (int j = 0; j < positions; ++j) connect(from, NodeId::embedding(l, j));
      } else {
        for (int j = 0; j < positions; ++j) {
          for (int k = 0; k < heads; ++k) connect(from, NodeId::attention_head(l, j, k));
        }
        connect(from, NodeId::skip(l, i));
      }
    }
    if (granularity == Granularity::attention) {
      for (int j = 0; j < positions; ++j) {
        for (int k = 0; k < heads; ++k) connect(NodeId::attention_head(l, j, k), NodeId::embedding(l, j));
        connect(NodeId::skip(l, j), NodeId::embedding(l, j));
      }
    }
  }
  connect(NodeId::embedding(layers, mask_position), NodeId::qoi());
}

std::size_t GraphView::add(NodeId node) {
  const std::size_t idx = nodes_.size();
  nodes_.push_back(node);
  index_.emplace(node, idx);
  succ_.emplace_back();
  return idx;
}

void GraphView::connect(const NodeId& from, const NodeId& to) {
  succ_[index(from)].push_back(index(to));
  ++edges_;
}

std::size_t GraphView::index(const NodeId& node) const {
  auto it = index_.find(node);
  if (it == index_.end()) throw Error("node " + node.key() + " is not in the graph view");
  return it->second;
}

bool GraphView::has_edge(const NodeId& from, const NodeId& to) const {
  if (!contains(from) || !contains(to)) return false;
  const auto& s = succ_[index(from)];
  return std::find(s.begin(), s.end(), index(to)) != s.end();
}

GraphView build_view(const ModelConfig& config, int positions, int mask_position, Granularity granularity) {
  if (positions > config.max_len) throw Error("graph view: positions exceed max_len");
  return GraphView(config.layers, config.heads, positions, mask_position, granularity);
}

BigInt count_paths(const GraphView& view, const NodeId& from, const NodeId& to) {
  const std::size_t s = view.index(from);
  const std::size_t t = view.index(to);
  if (s > t) return 0;
  if (s == t) return 1;
  std::vector<BigInt> ways(t - s + 1);
  ways[0] = 1;
  for (std::size_t u = s; u < t; ++u) {
    const BigInt& w = ways[u - s];
    if (w == 0) continue;
    for (std::size_t v : view.successors(u)) {
      if (v <= t) ways[v - s] += w;
    }
  }
  return ways[t - s];
}

std::vector<Pattern> PatternCollection::positive() const {
  std::vector<Pattern> out;
  for (const Pattern& p : patterns) {
    if (p.sign == Sign::positive) out.push_back(p);
  }
  return out;
}

std::vector<Pattern> PatternCollection::negative() const {
  std::vector<Pattern> out;
  for (const Pattern& p : patterns) {
    if (p.sign == Sign::negative) out.push_back(p);
  }
  return out;
}

void validate_pattern(const GraphView& view, const Pattern& pattern) {
  const auto& n = pattern.nodes;
  if (n.size() < 2) throw Error("pattern needs at least a source and a target");
  if (n.front().kind != NodeKind::input) throw Error("pattern must start at an input node");
  if (n.back().kind != NodeKind::qoi) throw Error("pattern must end at the qoi node");
  for (std::size_t i = 0; i + 1 < n.size(); ++i) {
    if (!view.contains(n[i]) || !view.contains(n[i + 1])) {
      throw Error("pattern node not present in the " + std::string(to_string(view.granularity())) + " view");
    }
    if (count_paths(view, n[i], n[i + 1]) == 0) {
      throw Error("pattern step " + n[i].key() + " -> " + n[i + 1].key() + " is not connected");
    }
  }
}

BigInt count_abstracted(const GraphView& view, const Pattern& pattern) {
  validate_pattern(view, pattern);
  BigInt total = 1;
  for (std::size_t i = 0; i + 1 < pattern.nodes.size(); ++i) {
    total *= count_paths(view, pattern.nodes[i], pattern.nodes[i + 1]);
  }
  return total;
}

std::vector<NodeId> embedding_guiding_set(int layer, int positions, std::span<const char> padding) {
  std::vector<NodeId> out;
  for (int j = 0; j < positions; ++j) {
    if (!padding.empty() && padding[static_cast<std::size_t>(j)]) continue;
    out.push_back(NodeId::embedding(layer, j));
  }
  return out;
}

std::vector<NodeId> attention_guiding_set(const NodeId& lower, const NodeId& upper, int heads) {
  if (!lower.is_embedding() || !upper.is_embedding() || upper.layer != lower.layer + 1) {
    throw Error("attention guiding set needs consecutive layer embeddings, got " + lower.key() + " and " +
                upper.key());
  }
  std::vector<NodeId> out;
  for (int k = 0; k < heads; ++k) out.push_back(NodeId::attention_head(upper.layer, upper.position, k));
  if (lower.position == upper.position) out.push_back(NodeId::skip(upper.layer, upper.position));
  return out;
}

std::vector<NodeId> embedding_skeleton(std::span<const NodeId> nodes) {
  std::vector<NodeId> out;
  for (const NodeId& n : nodes) {
    if (n.kind != NodeKind::head && n.kind != NodeKind::skip) out.push_back(n);
  }
  return out;
}

namespace {

std::string dot_id(const NodeId& n) {
  if (n.kind == NodeKind::qoi) return "qoi";
  return "n" + std::to_string(n.layer) + "_" + std::to_string(n.position);
}

struct DotEdge {
  std::string from, to, label, style, color;
  bool operator<(const DotEdge& o) const {
    return std::tie(from, to, label, style, color) < std::tie(o.from, o.to, o.label, o.style, o.color);
  }
};

}  // namespace

std::string to_dot(const GraphView& view, const std::vector<Pattern>& patterns, const DotOptions& options) {
  std::ostringstream out;
  out << "digraph patterns {\n  rankdir=LR;\n  node [fontname=\"Helvetica\", fontsize=10];\n";
  if (!options.title.empty()) out << "  label=\"" << options.title << "\";\n";
  for (int l = 0; l <= view.layers(); ++l) {
    out << "  { rank=same;";
    for (int j = 0; j < view.positions(); ++j) out << ' ' << dot_id(NodeId::embedding(l, j)) << ';';
    out << " }\n";
    for (int j = 0; j < view.positions(); ++j) {
      const NodeId n = NodeId::embedding(l, j);
      std::string label = l == 0 && static_cast<std::size_t>(j) < options.words.size()
                              ? options.words[static_cast<std::size_t>(j)]
                              : "h" + std::to_string(l) + "_" + std::to_string(j);
      out << "  " << dot_id(n) << " [shape=" << (l == 0 ? "box" : "circle") << ", label=\"" << label << "\"];\n";
    }
  }
  out << "  qoi [shape=doublecircle, label=\"QoI\"];\n";

  std::set<DotEdge> edges;
  for (const Pattern& p : patterns) {
    const std::string color = p.sign == Sign::positive ? "green" : "red";
    const NodeId* prev = nullptr;
    const NodeId* via = nullptr;
    for (const NodeId& n : p.nodes) {
      if (n.kind == NodeKind::head || n.kind == NodeKind::skip) {
        via = &n;
        continue;
      }
      if (prev != nullptr) {
        DotEdge e{dot_id(*prev), dot_id(n), "", "solid", color};
        if (via != nullptr && via->kind == NodeKind::head) e.label = std::to_string(via->head + 1);
        if (via != nullptr && via->kind == NodeKind::skip) e.style = "dashed";
        edges.insert(e);
      }
      prev = &n;
      via = nullptr;
    }
  }
  for (const DotEdge& e : edges) {
    out << "  " << e.from << " -> " << e.to << " [color=" << e.color << ", style=" << e.style;
    if (!e.label.empty()) out << ", label=\"" << e.label << "\"";
    out << "];\n";
  }
  out << "}\n";
  return out.str();
}

}  // namespace ipat
