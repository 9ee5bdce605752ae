#pragma once

#include "ipat/influence.hpp"

namespace ipat {

/// Greedy embedding-level refinement for the word at `position`.
///
/// Starts from [x_i, h^L_m, qoi] and, for l = 1..L-1, inserts the layer-l
/// embedding that maximizes sigma * I(x | prefix + e, all paths e -> qoi).
/// Ties go to the lowest position. The returned pattern records the
/// influence of the final step.
Pattern gpr_embedding(const InfluenceContext& ctx, int position, double sigma);

/// Head/skip refinement of an embedding-level pattern, bottom-up. Each step
/// scores a candidate inside the pattern refined so far (lower layers already
/// fixed, upper layers still at embedding level). Ties go to the lowest head,
/// the skip comes last.
Pattern gpr_attention(const InfluenceContext& ctx, const Pattern& embedding_pattern, double sigma);

/// Throws Error unless `nodes` is [x_i, h^1, ..., h^L_m, qoi] for the context's
/// model and mask position.
void check_embedding_pattern(const InfluenceContext& ctx, std::span<const NodeId> nodes);

/// One refined pattern per traced word, tagged with the word's attribution.
PatternCollection trace_sentence(const Traceable& model, const TraceInput& input, const DoIConfig& doi,
                                 Granularity granularity, Precision precision = Precision::float64);

}  // namespace ipat
