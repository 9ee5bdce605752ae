#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ipat/evalmetrics.hpp"

namespace ipat {

/// Pattern extractors: GPR and the four comparison baselines.
enum class Method { gpr, random, attention, conductance, internal_influence };
/// "gpr", "rand", "attn", "cond", "inf".
std::string to_string(Method m);
Method parse_method(std::string_view s);
/// attn, cond and inf exist at embedding granularity only.
bool supports(Method m, Granularity g);

struct TraceOptions {
  Method method = Method::gpr;
  Granularity granularity = Granularity::embedding;
  DoIConfig doi;
  std::uint64_t seed = 0;
  Precision precision = Precision::float64;
  /// Rollout (0.5 I + 0.5 M) instead of plain averaged attention for attn.
  bool use_rollout = true;
};

/// Influence input for an instance: [MASK] baseline, special tokens untraced.
TraceInput instance_input(const ToyTransformer& model, const Instance& instance);

/// Seed for the random baseline of one (instance, word) pair.
std::uint64_t word_seed(std::uint64_t seed, std::size_t instance, int position);

/// One pattern per traced word, each tagged with the word's attribution and
/// sign and with its own pattern influence.
PatternCollection trace_instance(const ToyTransformer& model, const Instance& instance, std::size_t index,
                                 const TraceOptions& options);
/// trace_instance over a corpus, in instance order.
std::vector<PatternCollection> trace_corpus(const ToyTransformer& model, std::span<const Instance> instances,
                                            const TraceOptions& options);

/// Nodes of the positive-word patterns of one instance.
RetainedSet positive_retained(const ModelConfig& config, const Instance& instance, const PatternCollection& c);
/// Same, with each skip node replaced by the heads at its layer and position.
RetainedSet replace_skip_retained(const ModelConfig& config, const Instance& instance, const PatternCollection& c);

/// Per source position: entropy of its patterns across instances and mean
/// |attribution|. Positions never traced are left out.
struct PositionProfile {
  int position = 0;
  double entropy = 0.0;
  double mean_abs_attribution = 0.0;
  int count = 0;
};
std::vector<PositionProfile> position_profiles(const ModelConfig& config, std::span<const Instance> instances,
                                               std::span<const PatternCollection> collections);

struct ReportRow {
  MetricsReport metrics;
  std::vector<PositionProfile> profiles;
  /// Alignment indicators (attention granularity only).
  Alignment alignment;
  /// Fraction of skip nodes among the head/skip nodes of Pi+ (attention only).
  std::optional<double> skip_share;
};

/// Every metric for one traced method. All collections must come from the
/// listed instances, in order.
ReportRow evaluate_method(const ToyTransformer& model, std::span<const Instance> instances,
                          std::span<const PatternCollection> collections, const std::string& method);
/// Ablated accuracy of the repl_skip counterfactual.
double replace_skip_accuracy(const ToyTransformer& model, std::span<const Instance> instances,
                             std::span<const PatternCollection> collections);

struct RandomAblation {
  std::vector<double> accuracies;  // one per seed
  double mean = 0.0;
  double stddev = 0.0;
};
/// Ablated accuracy of random patterns drawn for the positive words of each
/// collection (same words, same granularity), repeated over `seeds` seeds.
RandomAblation random_ablation(const ToyTransformer& model, std::span<const Instance> instances,
                               std::span<const PatternCollection> collections, int seeds, std::uint64_t seed);

}  // namespace ipat
