#pragma once

#include <span>
#include <unordered_map>
#include <vector>

#include "ipat/graph.hpp"
#include "ipat/transformer.hpp"

namespace ipat {

/// Distribution of interest: the straight line from the baseline-substituted
/// input to the real input, sampled at n points.
struct DoIConfig {
  int n_samples = 50;
  /// alpha_k = k / (n - 1) instead of the midpoint rule (k + 0.5) / n.
  bool include_endpoints = false;
  /// Interpolate one word at a time instead of all traced words jointly.
  bool per_word = false;

  std::vector<double> alphas() const;
};

/// Everything needed to trace one sentence.
struct TraceInput {
  std::vector<Tensor> embeddings;  // token embeddings x_j, positional part excluded
  std::vector<char> padding;       // empty or one flag per position
  std::vector<int> traced;         // positions that get a pattern (non-special tokens)
  Tensor baseline;                 // x_b, the [MASK] embedding
  Qoi qoi;

  int positions() const { return static_cast<int>(embeddings.size()); }
};

/// Builds a TraceInput from token ids. Every position whose token is not in
/// `special_tokens` (and is not padding) is traced.
TraceInput make_trace_input(const ToyTransformer& model, std::span<const int> tokens, const Qoi& qoi,
                            int baseline_token, std::span<const int> special_tokens);

/// One taped forward per DoI sample, shared by every influence query on the
/// sentence. All sample tapes have the same op layout, so node lookups are
/// resolved once.
class InfluenceContext {
 public:
  /// `moving` lists the positions that interpolate toward the baseline; empty
  /// means all traced positions.
  InfluenceContext(const Traceable& model, TraceInput input, const DoIConfig& doi,
                   Precision precision = Precision::float64, std::vector<int> moving = {});

  const Traceable& model() const { return *model_; }
  const TraceInput& input() const { return input_; }
  const std::vector<int>& moving() const { return moving_; }
  std::size_t samples() const { return tapes_.size(); }
  const std::vector<double>& alphas() const { return alphas_; }
  const Tape& tape(std::size_t k) const { return tapes_[k]; }
  /// Tape variable of a node (identical across samples). Throws Error when the
  /// node was not recorded.
  VarId var(const NodeId& node) const;
  /// x_i - x_b for a moving position, zeros otherwise.
  const Tensor& difference(int position) const { return diff_[static_cast<std::size_t>(position)]; }
  /// True when every moving position already equals the baseline.
  bool degenerate() const { return degenerate_; }

 private:
  const Traceable* model_;
  TraceInput input_;
  std::vector<int> moving_;
  std::vector<double> alphas_;
  std::vector<Tape> tapes_;
  std::vector<Tensor> diff_;
  std::unordered_map<NodeId, VarId> vars_;
  bool degenerate_ = false;
};

struct WordAttribution {
  int position = 0;
  Tensor raw_gradient;  // E_z dq/dz_i
  double attribution = 0.0;

  Sign sign() const { return attribution >= 0.0 ? Sign::positive : Sign::negative; }
  /// Objective multiplier: +1 for non-negative attribution, -1 otherwise.
  double sigma() const { return attribution >= 0.0 ? 1.0 : -1.0; }
};

struct AttributionResult {
  std::vector<WordAttribution> words;  // one per moving position, in position order
  bool degenerate = false;
};

AttributionResult distributional_influence(const InfluenceContext& ctx);
AttributionResult distributional_influence(const Traceable& model, const TraceInput& input, const DoIConfig& doi);

/// Mean over samples of the cotangent chain qoi -> ... -> first node, cutting at
/// every listed node (before the input difference).
Tensor pattern_gradient(const InfluenceContext& ctx, std::span<const NodeId> nodes);

enum class InfluenceMode { scaled, raw };

/// Pattern influence. Scaled mode dots the expected chain gradient with
/// (x_i - x_b); raw mode returns the coordinate sum of the expectation.
double pattern_influence(const InfluenceContext& ctx, const Pattern& pattern,
                         InfluenceMode mode = InfluenceMode::scaled);
double pattern_influence(const Traceable& model, const TraceInput& input, const Pattern& pattern,
                         const DoIConfig& doi, InfluenceMode mode = InfluenceMode::scaled);

/// Total Jacobian d(upper)/d(lower) on one tape, built from basis-cotangent
/// vjps. Shape [|upper|, |lower|].
Tensor segment_jacobian_dense(const Tape& tape, VarId upper, VarId lower);
/// Same, on a fresh tape of the input interpolated at `alpha`.
Tensor segment_jacobian_dense(const Traceable& model, const TraceInput& input, const NodeId& upper,
                              const NodeId& lower, double alpha);

/// Inputs interpolated at alpha toward the baseline over `moving`.
std::vector<Tensor> interpolated_inputs(const TraceInput& input, std::span<const int> moving, double alpha);

}  // namespace ipat
