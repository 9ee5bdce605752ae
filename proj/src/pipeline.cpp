#include "ipat/pipeline.hpp"

#include <cmath>
#include <map>

#include <tbb/parallel_for.h>

namespace ipat {

namespace {

constexpr std::array<std::pair<Method, std::string_view>, 5> kMethodNames{{
    {Method::gpr, "gpr"},
    {Method::random, "rand"},
    {Method::attention, "attn"},
    {Method::conductance, "cond"},
    {Method::internal_influence, "inf"},
}};

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

Pattern extract(const InfluenceContext& ctx, const WordAttribution& w, std::size_t index, const TraceOptions& o,
                const AttentionTensorStack& stack, std::span<const ConductanceTable> tables, const GraphView& view) {
  const TraceInput& in = ctx.input();
  Pattern p;
  switch (o.method) {
    case Method::gpr:
      p = gpr_embedding(ctx, w.position, w.sigma());
      if (o.granularity == Granularity::attention) p = gpr_attention(ctx, p, w.sigma());
      break;
    case Method::random:
      p = pattern_random(view, w.position, word_seed(o.seed, index, w.position), in.padding);
      p.influence = pattern_influence(ctx, p);
      break;
    case Method::attention:
      p = pattern_attention_dp(stack, w.position, in.qoi.position, o.use_rollout, in.padding);
      p.influence = pattern_influence(ctx, p);
      break;
    case Method::conductance:
      p = pattern_conductance(ctx, w.position, w.sigma(), tables);
      break;
    case Method::internal_influence:
      p = pattern_internal_influence(ctx, w.position, w.sigma());
      break;
  }
  p.word = w.position;
  p.attribution = w.attribution;
  p.sign = w.sign();
  return p;
}

}  // namespace

std::string to_string(Method m) {
  for (const auto& [method, name] : kMethodNames) {
    if (method == m) return std::string(name);
  }
  throw Error("unknown method");
}

Method parse_method(std::string_view s) {
  for (const auto& [method, name] : kMethodNames) {
    if (name == s) return method;
  }
  throw Error("unknown method '" + std::string(s) + "' (expected gpr, rand, attn, cond or inf)");
}

bool supports(Method m, Granularity g) {
  return g == Granularity::embedding || m == Method::gpr || m == Method::random;
}

TraceInput instance_input(const ToyTransformer& model, const Instance& instance) {
  const Vocab v;
  const auto specials = v.specials();
  return make_trace_input(model, instance.tokens, instance.qoi(), Vocab::kMask, specials);
}

std::uint64_t word_seed(std::uint64_t seed, std::size_t instance, int position) {
  return splitmix(splitmix(seed ^ splitmix(instance)) + static_cast<std::uint64_t>(position));
}

PatternCollection trace_instance(const ToyTransformer& model, const Instance& instance, std::size_t index,
                                 const TraceOptions& options) {
  if (!supports(options.method, options.granularity)) {
    throw Error("method " + to_string(options.method) + " only produces embedding-level patterns");
  }
  const TraceInput input = instance_input(model, instance);
  const GraphView view = build_view(model.config(), input.positions(), input.qoi.position, options.granularity);
  AttentionTensorStack stack;
  if (options.method == Method::attention) stack = capture_attention(model, input);

  auto tables = [&](const InfluenceContext& ctx) {
    return options.method == Method::conductance ? conductance_tables(ctx) : std::vector<ConductanceTable>{};
  };

  PatternCollection out;
  out.granularity = options.granularity;
  if (!options.doi.per_word) {
    const InfluenceContext ctx(model, input, options.doi, options.precision);
    const auto t = tables(ctx);
    for (const WordAttribution& w : distributional_influence(ctx).words) {
      out.patterns.push_back(extract(ctx, w, index, options, stack, t, view));
    }
  } else {
    for (int pos : input.traced) {
      const InfluenceContext ctx(model, input, options.doi, options.precision, {pos});
      const WordAttribution w = distributional_influence(ctx).words.front();
      out.patterns.push_back(extract(ctx, w, index, options, stack, tables(ctx), view));
    }
  }
  return out;
}

std::vector<PatternCollection> trace_corpus(const ToyTransformer& model, std::span<const Instance> instances,
                                            const TraceOptions& options) {
  std::vector<PatternCollection> out(instances.size());
  tbb::parallel_for(std::size_t{0}, instances.size(),
                    [&](std::size_t i) { out[i] = trace_instance(model, instances[i], i, options); });
  return out;
}

RetainedSet positive_retained(const ModelConfig& config, const Instance& instance, const PatternCollection& c) {
  RetainedSet set(c.granularity, config.layers, config.heads, static_cast<int>(instance.tokens.size()));
  for (const Pattern& p : c.positive()) set.add(p);
  return set;
}

RetainedSet replace_skip_retained(const ModelConfig& config, const Instance& instance, const PatternCollection& c) {
  if (c.granularity != Granularity::attention) throw Error("repl_skip needs attention-level patterns");
  RetainedSet set(c.granularity, config.layers, config.heads, static_cast<int>(instance.tokens.size()));
  for (const Pattern& p : c.positive()) set.add(pattern_replace_skip(p, config.heads));
  return set;
}

std::vector<PositionProfile> position_profiles(const ModelConfig& config, std::span<const Instance> instances,
                                               std::span<const PatternCollection> collections) {
  if (instances.size() != collections.size()) throw Error("one pattern collection per instance is required");
  // Entropy compares patterns over one graph, so profiles are built per
  // sentence length and position, then merged by position.
  struct Bucket {
    std::vector<Pattern> patterns;
    double abs_attribution = 0.0;
  };
  std::map<std::pair<std::size_t, int>, Bucket> buckets;
  std::map<std::size_t, int> masks;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const std::size_t n = instances[i].tokens.size();
    masks.emplace(n, instances[i].mask_position);
    for (const Pattern& p : collections[i].patterns) {
      Bucket& b = buckets[{n, p.word}];
      b.patterns.push_back(p);
      b.abs_attribution += std::abs(p.attribution);
    }
  }
  std::map<int, PositionProfile> merged;
  for (const auto& [key, b] : buckets) {
    const auto [n, position] = key;
    const Granularity g = collections.empty() ? Granularity::embedding : collections.front().granularity;
    const GraphView view = build_view(config, static_cast<int>(n), masks.at(n), g);
    PositionProfile& prof = merged[position];
    const double k = static_cast<double>(b.patterns.size());
    prof.position = position;
    prof.entropy += pattern_entropy(b.patterns, view) * k;
    prof.mean_abs_attribution += b.abs_attribution;
    prof.count += static_cast<int>(b.patterns.size());
  }
  std::vector<PositionProfile> out;
  for (auto& [position, prof] : merged) {
    prof.entropy /= prof.count;
    prof.mean_abs_attribution /= prof.count;
    out.push_back(prof);
  }
  return out;
}

ReportRow evaluate_method(const ToyTransformer& model, std::span<const Instance> instances,
                          std::span<const PatternCollection> collections, const std::string& method) {
  if (instances.empty()) throw Error("no instances to report on");
  if (instances.size() != collections.size()) throw Error("one pattern collection per instance is required");
  const ModelConfig& config = model.config();
  const Granularity g = collections.front().granularity;
  for (const PatternCollection& c : collections) {
    if (c.granularity != g) throw Error("pattern collections mix granularities");
  }

  ReportRow row;
  MetricsReport& m = row.metrics;
  m.method = method;
  m.granularity = g;
  m.n_instances = static_cast<int>(instances.size());
  m.original_accuracy = evaluate(model, instances).accuracy;
  m.ablated_accuracy = ablated_accuracy(model, instances, [&](std::size_t i) {
    return positive_retained(config, instances[i], collections[i]);
  });
  const Concentration conc = concentration(collections);
  m.concentration_pos = conc.positive;
  m.concentration_neg = conc.negative;

  BigInt abstracted = 0, total = 0;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const GraphView view =
        build_view(config, static_cast<int>(instances[i].tokens.size()), instances[i].mask_position, g);
    for (const Pattern& p : collections[i].patterns) {
      abstracted += count_abstracted(view, p);
      total += count_paths(view, p.nodes.front(), NodeId::qoi());
    }
  }
  m.path_share = total == 0 ? BigRational(0) : BigRational(abstracted, total);

  row.profiles = position_profiles(config, instances, collections);
  double entropy = 0.0;
  int count = 0;
  for (const PositionProfile& p : row.profiles) {
    entropy += p.entropy * p.count;
    count += p.count;
  }
  m.pattern_entropy = count > 0 ? entropy / count : 0.0;

  if (g == Granularity::attention) {
    std::vector<AttentionTensorStack> stacks(instances.size());
    tbb::parallel_for(std::size_t{0}, instances.size(), [&](std::size_t i) {
      stacks[i] = capture_attention(model, instance_input(model, instances[i]));
    });
    row.alignment = alignment(collections, stacks);
    m.alignment_rate = row.alignment.rate();

    std::size_t skips = 0, intra = 0;
    for (const PatternCollection& c : collections) {
      for (const Pattern& p : c.positive()) {
        for (const NodeId& n : p.nodes) {
          if (n.kind == NodeKind::skip) ++skips;
          if (n.kind == NodeKind::skip || n.kind == NodeKind::head) ++intra;
        }
      }
    }
    if (intra > 0) row.skip_share = static_cast<double>(skips) / static_cast<double>(intra);
  }
  return row;
}

double replace_skip_accuracy(const ToyTransformer& model, std::span<const Instance> instances,
                             std::span<const PatternCollection> collections) {
  if (instances.size() != collections.size()) throw Error("one pattern collection per instance is required");
  return ablated_accuracy(model, instances, [&](std::size_t i) {
    return replace_skip_retained(model.config(), instances[i], collections[i]);
  });
}

RandomAblation random_ablation(const ToyTransformer& model, std::span<const Instance> instances,
                               std::span<const PatternCollection> collections, int seeds, std::uint64_t seed) {
  if (seeds < 1) throw Error("random_ablation needs at least one seed");
  if (instances.size() != collections.size()) throw Error("one pattern collection per instance is required");
  const ModelConfig& config = model.config();
  RandomAblation out;
  for (int r = 0; r < seeds; ++r) {
    const std::uint64_t run_seed = splitmix(seed + static_cast<std::uint64_t>(r));
    out.accuracies.push_back(ablated_accuracy(model, instances, [&](std::size_t i) {
      const Instance& inst = instances[i];
      const PatternCollection& c = collections[i];
      const int n = static_cast<int>(inst.tokens.size());
      const GraphView view = build_view(config, n, inst.mask_position, c.granularity);
      RetainedSet set(c.granularity, config.layers, config.heads, n);
      for (const Pattern& p : c.positive()) set.add(pattern_random(view, p.word, word_seed(run_seed, i, p.word)));
      return set;
    }));
  }
  for (double a : out.accuracies) out.mean += a;
  out.mean /= static_cast<double>(seeds);
  for (double a : out.accuracies) out.stddev += (a - out.mean) * (a - out.mean);
  out.stddev = seeds > 1 ? std::sqrt(out.stddev / static_cast<double>(seeds - 1)) : 0.0;
  return out;
}

}  // namespace ipat
