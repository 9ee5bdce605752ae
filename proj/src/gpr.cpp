#include "ipat/gpr.hpp"

#include <tbb/parallel_for.h>

namespace ipat {

namespace {

// Per-candidate mean over samples of the chain gradient at the source input.
using SampleFn = std::function<std::vector<Tensor>(const Tape&, std::size_t)>;

std::vector<Tensor> mean_over_samples(const InfluenceContext& ctx, std::size_t count, const SampleFn& fn) {
  std::vector<std::vector<Tensor>> per_sample(ctx.samples());
  tbb::parallel_for(std::size_t{0}, ctx.samples(), [&](std::size_t k) { per_sample[k] = fn(ctx.tape(k), k); });
  std::vector<Tensor> mean(count, Tensor::zeros_like(ctx.input().baseline));
  for (const auto& sample : per_sample) {
    for (std::size_t c = 0; c < count; ++c) axpy(1.0, sample[c].data(), mean[c].data());
  }
  for (Tensor& m : mean) {
    for (double& v : m.data()) v /= static_cast<double>(ctx.samples());
  }
  return mean;
}

// Pushes `cot` down a chain of variables: vars[0] is where cot lives.
Tensor descend(const Tape& tape, std::span<const VarId> vars, Tensor cot) {
  for (std::size_t i = 0; i + 1 < vars.size(); ++i) cot = tape.vjp(vars[i], vars[i + 1], cot);
  return cot;
}

// Index of the best score under sigma; strict comparison keeps the first.
std::size_t argmax(const std::vector<double>& influence, double sigma) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < influence.size(); ++c) {
    if (sigma * influence[c] > sigma * influence[best]) best = c;
  }
  return best;
}

}  // namespace

Pattern gpr_embedding(const InfluenceContext& ctx, int position, double sigma) {
  const int L = ctx.model().layers();
  const int N = ctx.input().positions();
  const int m = ctx.input().qoi.position;
  const VarId q = ctx.var(NodeId::qoi());
  const Tensor& diff = ctx.difference(position);

  std::vector<NodeId> prefix = {NodeId::input(position)};
  std::vector<VarId> prefix_vars = {ctx.var(prefix.front())};
  double influence = 0.0;

  for (int l = 1; l <= L - 1; ++l) {
    const auto cands = embedding_guiding_set(l, N, ctx.input().padding);
    std::vector<VarId> cand_vars;
    for (const NodeId& c : cands) cand_vars.push_back(ctx.var(c));
    const auto grads = mean_over_samples(ctx, cands.size(), [&](const Tape& tape, std::size_t) {
      auto upper = tape.vjp_many(q, cand_vars, Tensor::vector({1.0}));
      std::vector<Tensor> out;
      std::vector<VarId> chain(prefix_vars.rbegin(), prefix_vars.rend());
      chain.insert(chain.begin(), VarId{});
      for (std::size_t c = 0; c < cands.size(); ++c) {
        chain.front() = cand_vars[c];
        out.push_back(descend(tape, chain, std::move(upper[c])));
      }
      return out;
    });
    std::vector<double> scores;
    for (const Tensor& g : grads) scores.push_back(dot(diff.data(), g.data()));
    const std::size_t best = argmax(scores, sigma);
    prefix.push_back(cands[best]);
    prefix_vars.push_back(cand_vars[best]);
    influence = scores[best];
  }

  Pattern p;
  p.nodes = prefix;
  p.nodes.push_back(NodeId::embedding(L, m));
  p.nodes.push_back(NodeId::qoi());
  p.word = position;
  p.influence = L == 1 ? pattern_influence(ctx, p) : influence;
  return p;
}

void check_embedding_pattern(const InfluenceContext& ctx, std::span<const NodeId> nodes) {
  const int L = ctx.model().layers();
  if (nodes.size() != static_cast<std::size_t>(L) + 2) throw Error("malformed embedding pattern: wrong length");
  if (nodes.front().kind != NodeKind::input) throw Error("malformed embedding pattern: must start at an input");
  if (nodes.back().kind != NodeKind::qoi) throw Error("malformed embedding pattern: must end at the qoi");
  for (int l = 1; l <= L; ++l) {
    const NodeId& n = nodes[static_cast<std::size_t>(l)];
    if (n.kind != NodeKind::layer_embedding || n.layer != l) {
      throw Error("malformed embedding pattern: expected a layer-" + std::to_string(l) + " embedding, got " + n.key());
    }
  }
  if (nodes[static_cast<std::size_t>(L)].position != ctx.input().qoi.position) {
    throw Error("malformed embedding pattern: last layer must sit at the mask position");
  }
}

Pattern gpr_attention(const InfluenceContext& ctx, const Pattern& embedding_pattern, double sigma) {
  check_embedding_pattern(ctx, embedding_pattern.nodes);
  const int L = ctx.model().layers();
  const int A = ctx.model().heads();
  const auto& e = embedding_pattern.nodes;  // e[0] = x_i, e[1..L], e[L+1] = qoi
  std::vector<VarId> ev;
  for (const NodeId& n : e) ev.push_back(ctx.var(n));
  const Tensor& diff = ctx.difference(e.front().position);

  // Cotangent at e[t] through the unrefined upper skeleton, per sample.
  std::vector<std::vector<Tensor>> upper(ctx.samples());
  tbb::parallel_for(std::size_t{0}, ctx.samples(), [&](std::size_t k) {
    const Tape& tape = ctx.tape(k);
    auto& u = upper[k];
    u.resize(static_cast<std::size_t>(L) + 1);
    u[static_cast<std::size_t>(L)] = tape.vjp(ev[static_cast<std::size_t>(L) + 1], ev[static_cast<std::size_t>(L)],
                                              Tensor::vector({1.0}));
    for (int t = L - 1; t >= 1; --t) {
      u[static_cast<std::size_t>(t)] = tape.vjp(ev[static_cast<std::size_t>(t) + 1], ev[static_cast<std::size_t>(t)],
                                                u[static_cast<std::size_t>(t) + 1]);
    }
  });

  std::vector<NodeId> chosen;
  std::vector<VarId> chosen_vars;
  double influence = 0.0;
  for (int t = 1; t <= L; ++t) {
    const auto ti = static_cast<std::size_t>(t);
    const auto cands = attention_guiding_set(e[ti - 1], e[ti], A);
    std::vector<VarId> cand_vars;
    for (const NodeId& c : cands) cand_vars.push_back(ctx.var(c));

    // Refined prefix below e[t-1]: e[t-1], c_{t-1}, e[t-2], ..., c_1, e[0].
    std::vector<VarId> below = {ev[ti - 1]};
    for (std::size_t s = ti - 1; s >= 1; --s) {
      below.push_back(chosen_vars[s - 1]);
      below.push_back(ev[s - 1]);
    }

    const auto grads = mean_over_samples(ctx, cands.size(), [&](const Tape& tape, std::size_t sample) {
      auto u = tape.vjp_many(ev[ti], cand_vars, upper[sample][ti]);
      std::vector<Tensor> out;
      for (std::size_t c = 0; c < cands.size(); ++c) {
        Tensor v = tape.vjp(cand_vars[c], ev[ti - 1], u[c]);
        out.push_back(descend(tape, below, std::move(v)));
      }
      return out;
    });
    std::vector<double> scores;
    for (const Tensor& g : grads) scores.push_back(dot(diff.data(), g.data()));
    const std::size_t best = argmax(scores, sigma);
    chosen.push_back(cands[best]);
    chosen_vars.push_back(cand_vars[best]);
    influence = scores[best];
  }

  Pattern p = embedding_pattern;
  p.nodes.clear();
  p.nodes.push_back(e.front());
  for (int t = 1; t <= L; ++t) {
    p.nodes.push_back(chosen[static_cast<std::size_t>(t) - 1]);
    p.nodes.push_back(e[static_cast<std::size_t>(t)]);
  }
  p.nodes.push_back(NodeId::qoi());
  p.influence = influence;
  return p;
}

PatternCollection trace_sentence(const Traceable& model, const TraceInput& input, const DoIConfig& doi,
                                 Granularity granularity, Precision precision) {
  PatternCollection out;
  out.granularity = granularity;
  auto trace_word = [&](const InfluenceContext& ctx, const WordAttribution& w) {
    Pattern p = gpr_embedding(ctx, w.position, w.sigma());
    if (granularity == Granularity::attention) p = gpr_attention(ctx, p, w.sigma());
    p.attribution = w.attribution;
    p.sign = w.sign();
    out.patterns.push_back(std::move(p));
  };
  if (!doi.per_word) {
    const InfluenceContext ctx(model, input, doi, precision);
    for (const WordAttribution& w : distributional_influence(ctx).words) trace_word(ctx, w);
  } else {
    for (int pos : input.traced) {
      const InfluenceContext ctx(model, input, doi, precision, {pos});
      trace_word(ctx, distributional_influence(ctx).words.front());
    }
  }
  return out;
}

}  // namespace ipat
