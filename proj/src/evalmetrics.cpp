#include "ipat/evalmetrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <tbb/parallel_for.h>

namespace ipat {

namespace {

double binary_entropy(double p) {
  if (p <= 0.0 || p >= 1.0) return 0.0;
  return -p * std::log2(p) - (1.0 - p) * std::log2(1.0 - p);
}

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = rank;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

RetainedSet::RetainedSet(Granularity granularity, int layers, int heads, int positions)
    : granularity_(granularity), layers_(layers), heads_(heads), positions_(positions) {}

void RetainedSet::add(std::span<const NodeId> nodes) {
  for (const NodeId& n : nodes) {
    const bool attention_node = n.kind == NodeKind::head || n.kind == NodeKind::skip;
    if (attention_node && granularity_ == Granularity::embedding) {
      throw Error("head or skip node " + n.key() + " in an embedding-granularity retained set");
    }
    if (n.layer > layers_ || n.position >= positions_ || (n.kind == NodeKind::head && n.head >= heads_)) {
      throw Error("node " + n.key() + " outside the retained set's graph");
    }
    nodes_.insert(n);
  }
}

bool RetainedSet::contains(const NodeId& node) const { return nodes_.count(node) > 0; }

Ablation RetainedSet::to_ablation() const {
  const auto L = static_cast<std::size_t>(layers_), N = static_cast<std::size_t>(positions_);
  Ablation a;
  if (granularity_ == Granularity::embedding) {
    a.keep_embedding.assign(L + 1, std::vector<char>(N, 0));
    for (const NodeId& n : nodes_) {
      if (n.kind == NodeKind::layer_embedding && n.layer >= 1) {
        a.keep_embedding[static_cast<std::size_t>(n.layer)][static_cast<std::size_t>(n.position)] = 1;
      }
    }
    return a;
  }
  a.keep_head.assign(L + 1, std::vector<std::vector<char>>(N, std::vector<char>(static_cast<std::size_t>(heads_), 0)));
  a.keep_skip.assign(L + 1, std::vector<char>(N, 0));
  for (const NodeId& n : nodes_) {
    const auto l = static_cast<std::size_t>(n.layer), j = static_cast<std::size_t>(n.position);
    if (n.kind == NodeKind::head) a.keep_head[l][j][static_cast<std::size_t>(n.head)] = 1;
    if (n.kind == NodeKind::skip) a.keep_skip[l][j] = 1;
  }
  return a;
}

Tensor ablate_forward(const ToyTransformer& model, std::span<const int> tokens, const RetainedSet& retained) {
  const ModelConfig& c = model.config();
  if (retained.layers() != c.layers || retained.heads() != c.heads ||
      retained.positions() != static_cast<int>(tokens.size())) {
    throw Error("retained set was built for a different graph");
  }
  const Ablation ablation = retained.to_ablation();
  ForwardOptions opt;
  opt.ablation = &ablation;
  return model.forward(tokens, opt).logits;
}

double ablated_accuracy(const ToyTransformer& model, std::span<const Instance> instances,
                        const std::function<RetainedSet(std::size_t)>& retained) {
  if (instances.empty()) throw Error("ablated_accuracy needs at least one instance");
  std::vector<double> scores(instances.size());
  tbb::parallel_for(std::size_t{0}, instances.size(), [&](std::size_t i) {
    const Instance& inst = instances[i];
    const Tensor logits = ablate_forward(model, inst.tokens, retained(i));
    scores[i] = instance_score(qoi_score(logits.row(static_cast<std::size_t>(inst.mask_position)), inst.qoi()));
  });
  double total = 0.0;
  for (double s : scores) total += s;
  return total / static_cast<double>(instances.size());
}

Concentration concentration(std::span<const PatternCollection> collections) {
  double pos_num = 0.0, pos_den = 0.0, neg_num = 0.0, neg_den = 0.0;
  for (const PatternCollection& c : collections) {
    for (const Pattern& p : c.patterns) {
      if (p.sign == Sign::positive) {
        pos_num += p.influence;
        if (p.attribution > 0.0) pos_den += p.attribution;
      } else {
        neg_num -= p.influence;
        neg_den -= p.attribution;
      }
    }
  }
  Concentration out;
  if (pos_den != 0.0) out.positive = pos_num / pos_den;
  if (neg_den != 0.0) out.negative = neg_num / neg_den;
  return out;
}

BigRational path_share(const GraphView& view, std::span<const PatternCollection> collections) {
  BigInt abstracted = 0, total = 0;
  for (const PatternCollection& c : collections) {
    for (const Pattern& p : c.patterns) {
      abstracted += count_abstracted(view, p);
      total += count_paths(view, p.nodes.front(), NodeId::qoi());
    }
  }
  if (total == 0) throw Error("path_share of an empty collection");
  return BigRational(abstracted, total);
}

BigRational path_share(const GraphView& view, const PatternCollection& collection) {
  return path_share(view, std::span<const PatternCollection>(&collection, 1));
}

std::optional<double> Alignment::rate() const {
  if (total == 0) return std::nullopt;
  return static_cast<double>(aligned) / static_cast<double>(total);
}

Alignment alignment(std::span<const PatternCollection> collections, std::span<const AttentionTensorStack> stacks) {
  if (collections.size() != stacks.size()) throw Error("alignment needs one attention stack per collection");
  Alignment out;
  for (std::size_t c = 0; c < collections.size(); ++c) {
    if (collections[c].granularity != Granularity::attention) throw Error("alignment needs attention-level patterns");
    const AttentionTensorStack& stack = stacks[c];
    for (const Pattern& p : collections[c].patterns) {
      for (std::size_t t = 1; t + 1 < p.nodes.size(); ++t) {
        const NodeId& n = p.nodes[t];
        if (n.kind != NodeKind::head) continue;
        const int i = p.nodes[t - 1].position, j = n.position;
        int best = 0;
        for (int a = 1; a < stack.heads(); ++a) {
          if (stack.at(n.layer, a, i, j) > stack.at(n.layer, best, i, j)) best = a;
        }
        const bool hit = best == n.head;
        out.aligned += hit ? 1 : 0;
        ++out.total;
        out.indicators.push_back(hit ? 1.0 : 0.0);
      }
    }
  }
  return out;
}

Interval bootstrap_mean_interval(std::span<const double> values, int resamples, double level, std::uint64_t seed) {
  if (values.empty() || resamples < 1 || !(level > 0.0 && level < 1.0)) throw Error("invalid bootstrap request");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, values.size() - 1);
  std::vector<double> means;
  means.reserve(static_cast<std::size_t>(resamples));
  for (int r = 0; r < resamples; ++r) {
    double s = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) s += values[pick(rng)];
    means.push_back(s / static_cast<double>(values.size()));
  }
  std::sort(means.begin(), means.end());
  const double tail = 0.5 * (1.0 - level);
  auto quantile = [&](double q) {
    const auto idx = static_cast<std::size_t>(std::floor(q * static_cast<double>(means.size() - 1)));
    return means[std::min(idx, means.size() - 1)];
  };
  return {quantile(tail), quantile(1.0 - tail)};
}

double pattern_entropy(std::span<const std::vector<NodeId>> patterns, std::span<const NodeId> universe) {
  if (patterns.empty()) throw Error("pattern_entropy needs at least one pattern");
  if (universe.empty()) throw Error("pattern_entropy needs a non-empty node set");
  std::map<NodeId, int> counts;
  for (const NodeId& n : universe) counts[n] = 0;
  for (const auto& p : patterns) {
    const std::set<NodeId> unique(p.begin(), p.end());
    for (const NodeId& n : unique) {
      const auto it = counts.find(n);
      if (it == counts.end()) throw Error("pattern node " + n.key() + " is not in the graph");
      ++it->second;
    }
  }
  const double K = static_cast<double>(patterns.size());
  double total = 0.0;
  for (const auto& [node, count] : counts) total += binary_entropy(count / K);
  return total / static_cast<double>(counts.size());
}

double pattern_entropy(std::span<const Pattern> patterns, const GraphView& view) {
  std::vector<std::vector<NodeId>> sets;
  for (const Pattern& p : patterns) sets.push_back(p.nodes);
  return pattern_entropy(sets, view.nodes());
}

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw Error("spearman needs two equal-length series of size >= 2");
  const auto ra = average_ranks(a), rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n, mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    cov += (ra[i] - ma) * (rb[i] - mb);
    va += (ra[i] - ma) * (ra[i] - ma);
    vb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (va == 0.0 || vb == 0.0) throw Error("spearman is undefined for a constant series");
  return cov / std::sqrt(va * vb);
}

nlohmann::json to_json(const MetricsReport& r) {
  auto optional = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  nlohmann::json j;
  j["schema_version"] = kSchemaVersion;
  j["method"] = r.method;
  j["granularity"] = to_string(r.granularity);
  j["n_instances"] = r.n_instances;
  j["original_accuracy"] = r.original_accuracy;
  j["ablated_accuracy"] = r.ablated_accuracy;
  j["concentration_pos"] = optional(r.concentration_pos);
  j["concentration_neg"] = optional(r.concentration_neg);
  j["path_share"] = {{"numerator", numerator(r.path_share).str()},
                     {"denominator", denominator(r.path_share).str()},
                     {"value", static_cast<double>(r.path_share)}};
  j["alignment_rate"] = optional(r.alignment_rate);
  j["pattern_entropy"] = r.pattern_entropy;
  return j;
}

}  // namespace ipat
