#include "ipat/influence.hpp"

#include <tbb/parallel_for.h>

#include <algorithm>

namespace ipat {

std::vector<double> DoIConfig::alphas() const {
  if (n_samples < 1) throw Error("DoI needs at least one sample");
  std::vector<double> out(static_cast<std::size_t>(n_samples));
  const double n = n_samples;
  for (int k = 0; k < n_samples; ++k) {
    if (include_endpoints) {
      out[static_cast<std::size_t>(k)] = n_samples == 1 ? 1.0 : k / (n - 1.0);
    } else {
      out[static_cast<std::size_t>(k)] = (k + 0.5) / n;
    }
  }
  return out;
}

TraceInput make_trace_input(const ToyTransformer& model, std::span<const int> tokens, const Qoi& qoi,
                            int baseline_token, std::span<const int> special_tokens) {
  TraceInput in;
  in.embeddings = model.embed(tokens);
  in.baseline = model.token_embedding(baseline_token);
  in.qoi = qoi;
  bool any_pad = false;
  for (std::size_t j = 0; j < tokens.size(); ++j) {
    const bool pad = tokens[j] == kPadToken;
    any_pad = any_pad || pad;
    in.padding.push_back(pad ? 1 : 0);
    const bool special = std::find(special_tokens.begin(), special_tokens.end(), tokens[j]) != special_tokens.end();
    if (!pad && !special) in.traced.push_back(static_cast<int>(j));
  }
  if (!any_pad) in.padding.clear();
  return in;
}

std::vector<Tensor> interpolated_inputs(const TraceInput& input, std::span<const int> moving, double alpha) {
  return interpolate_input(input.embeddings, input.baseline, moving, alpha);
}

InfluenceContext::InfluenceContext(const Traceable& model, TraceInput input, const DoIConfig& doi,
                                   Precision precision, std::vector<int> moving)
    : model_(&model), input_(std::move(input)), moving_(std::move(moving)), alphas_(doi.alphas()) {
  if (moving_.empty()) moving_ = input_.traced;
  const std::size_t N = input_.embeddings.size();
  diff_.assign(N, Tensor::zeros_like(input_.baseline));
  degenerate_ = true;
  for (int pos : moving_) {
    if (pos < 0 || static_cast<std::size_t>(pos) >= N) throw Error("traced position out of range");
    Tensor& d = diff_[static_cast<std::size_t>(pos)];
    const Tensor& x = input_.embeddings[static_cast<std::size_t>(pos)];
    for (std::size_t c = 0; c < d.size(); ++c) d[c] = x[c] - input_.baseline[c];
    if (max_abs(d.data()) != 0.0) degenerate_ = false;
  }

  tapes_.resize(alphas_.size());
  tbb::parallel_for(std::size_t{0}, alphas_.size(), [&](std::size_t k) {
    tapes_[k] = model.trace(interpolated_inputs(input_, moving_, alphas_[k]), input_.padding, input_.qoi, precision);
  });

  for (const auto& [name, id] : tapes_.front().markers()) {
    if (name.empty() || std::string_view("xhasyq").find(name.front()) == std::string_view::npos) continue;
    vars_.emplace(NodeId::parse(name), id);
  }
}

VarId InfluenceContext::var(const NodeId& node) const {
  auto it = vars_.find(node);
  if (it == vars_.end()) throw Error("node " + node.key() + " is not on the tape");
  return it->second;
}

AttributionResult distributional_influence(const InfluenceContext& ctx) {
  const auto& moving = ctx.moving();
  std::vector<VarId> lowers;
  for (int pos : moving) lowers.push_back(ctx.var(NodeId::input(pos)));
  const VarId q = ctx.var(NodeId::qoi());

  std::vector<std::vector<Tensor>> per_sample(ctx.samples());
  tbb::parallel_for(std::size_t{0}, ctx.samples(), [&](std::size_t k) {
    per_sample[k] = ctx.tape(k).vjp_many(q, lowers, Tensor::vector({1.0}));
  });

  AttributionResult result;
  result.degenerate = ctx.degenerate();
  const double inv = 1.0 / static_cast<double>(ctx.samples());
  for (std::size_t w = 0; w < moving.size(); ++w) {
    WordAttribution a;
    a.position = moving[w];
    a.raw_gradient = Tensor::zeros_like(ctx.input().baseline);
    for (std::size_t k = 0; k < ctx.samples(); ++k) axpy(1.0, per_sample[k][w].data(), a.raw_gradient.data());
    for (double& v : a.raw_gradient.data()) v *= inv;
    a.attribution = ctx.degenerate() ? 0.0 : dot(ctx.difference(a.position).data(), a.raw_gradient.data());
    result.words.push_back(std::move(a));
  }
  return result;
}

AttributionResult distributional_influence(const Traceable& model, const TraceInput& input, const DoIConfig& doi) {
  if (!doi.per_word) return distributional_influence(InfluenceContext(model, input, doi));
  AttributionResult result;
  result.degenerate = true;
  for (int pos : input.traced) {
    auto one = distributional_influence(InfluenceContext(model, input, doi, Precision::float64, {pos}));
    result.degenerate = result.degenerate && one.degenerate;
    result.words.push_back(std::move(one.words.front()));
  }
  return result;
}

Tensor pattern_gradient(const InfluenceContext& ctx, std::span<const NodeId> nodes) {
  if (nodes.size() < 2) throw Error("pattern needs at least a source and a target");
  if (nodes.back().kind != NodeKind::qoi) throw Error("pattern must end at the qoi node");
  std::vector<VarId> vars;
  for (const NodeId& n : nodes) vars.push_back(ctx.var(n));

  std::vector<Tensor> per_sample(ctx.samples());
  tbb::parallel_for(std::size_t{0}, ctx.samples(), [&](std::size_t k) {
    const Tape& tape = ctx.tape(k);
    Tensor cot = Tensor::vector({1.0});
    for (std::size_t i = vars.size() - 1; i > 0; --i) cot = tape.vjp(vars[i], vars[i - 1], cot);
    per_sample[k] = std::move(cot);
  });

  Tensor mean = Tensor::zeros_like(per_sample.front());
  for (const Tensor& g : per_sample) axpy(1.0, g.data(), mean.data());
  for (double& v : mean.data()) v /= static_cast<double>(ctx.samples());
  return mean;
}

double pattern_influence(const InfluenceContext& ctx, const Pattern& pattern, InfluenceMode mode) {
  if (pattern.nodes.empty() || pattern.nodes.front().kind != NodeKind::input) {
    throw Error("pattern must start at an input node");
  }
  const Tensor g = pattern_gradient(ctx, pattern.nodes);
  if (mode == InfluenceMode::raw) {
    double s = 0.0;
    for (double v : g.data()) s += v;
    return s;
  }
  return dot(ctx.difference(pattern.nodes.front().position).data(), g.data());
}

double pattern_influence(const Traceable& model, const TraceInput& input, const Pattern& pattern,
                         const DoIConfig& doi, InfluenceMode mode) {
  std::vector<int> moving;
  if (doi.per_word) moving = {pattern.nodes.front().position};
  return pattern_influence(InfluenceContext(model, input, doi, Precision::float64, moving), pattern, mode);
}

Tensor segment_jacobian_dense(const Tape& tape, VarId upper, VarId lower) {
  const Tensor& up = tape.value(upper);
  const std::size_t rows = up.size();
  const std::size_t cols = tape.value(lower).size();
  Tensor jac({rows, cols});
  for (std::size_t r = 0; r < rows; ++r) {
    Tensor cot(up.shape());
    cot[r] = 1.0;
    const Tensor g = tape.vjp(upper, lower, cot);
    std::copy(g.data().begin(), g.data().end(), jac.row(r).begin());
  }
  return jac;
}

Tensor segment_jacobian_dense(const Traceable& model, const TraceInput& input, const NodeId& upper,
                              const NodeId& lower, double alpha) {
  const Tape tape = model.trace(interpolated_inputs(input, input.traced, alpha), input.padding, input.qoi);
  return segment_jacobian_dense(tape, tape.marker(upper.key()), tape.marker(lower.key()));
}

}  // namespace ipat
