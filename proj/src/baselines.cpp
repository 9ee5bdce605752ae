#include "ipat/baselines.hpp"

#include <random>

#include <tbb/parallel_for.h>

namespace ipat {

namespace {

bool is_pad(std::span<const char> padding, int j) {
  return !padding.empty() && padding[static_cast<std::size_t>(j)] != 0;
}

std::vector<int> real_positions(int n, std::span<const char> padding) {
  std::vector<int> out;
  for (int j = 0; j < n; ++j) {
    if (!is_pad(padding, j)) out.push_back(j);
  }
  return out;
}

std::size_t argmax(std::span<const double> scores, std::span<const int> allowed, double sigma) {
  std::size_t best = static_cast<std::size_t>(allowed.front());
  for (int j : allowed) {
    if (sigma * scores[static_cast<std::size_t>(j)] > sigma * scores[best]) best = static_cast<std::size_t>(j);
  }
  return best;
}

Pattern layer_argmax_pattern(const InfluenceContext& ctx, int position, double sigma,
                             const std::function<std::vector<double>(int)>& scores) {
  const int L = ctx.model().layers();
  const auto allowed = real_positions(ctx.input().positions(), ctx.input().padding);
  Pattern p;
  p.word = position;
  p.nodes = {NodeId::input(position)};
  for (int l = 1; l <= L - 1; ++l) {
    const auto s = scores(l);
    p.nodes.push_back(NodeId::embedding(l, static_cast<int>(argmax(s, allowed, sigma))));
  }
  p.nodes.push_back(NodeId::embedding(L, ctx.input().qoi.position));
  p.nodes.push_back(NodeId::qoi());
  p.influence = pattern_influence(ctx, p);
  return p;
}

// Mean over samples of dq/dh for every layer-`layer` embedding.
std::vector<Tensor> mean_upper_gradients(const InfluenceContext& ctx, int layer) {
  const int N = ctx.input().positions();
  std::vector<VarId> vars;
  for (int j = 0; j < N; ++j) vars.push_back(ctx.var(NodeId::embedding(layer, j)));
  const VarId q = ctx.var(NodeId::qoi());
  std::vector<std::vector<Tensor>> per_sample(ctx.samples());
  tbb::parallel_for(std::size_t{0}, ctx.samples(), [&](std::size_t k) {
    per_sample[k] = ctx.tape(k).vjp_many(q, vars, Tensor::vector({1.0}));
  });
  std::vector<Tensor> mean(static_cast<std::size_t>(N), Tensor({static_cast<std::size_t>(ctx.model().width())}));
  for (const auto& s : per_sample) {
    for (std::size_t j = 0; j < s.size(); ++j) axpy(1.0, s[j].data(), mean[j].data());
  }
  for (Tensor& m : mean) {
    for (double& v : m.data()) v /= static_cast<double>(ctx.samples());
  }
  return mean;
}

}  // namespace

AttentionTensorStack::AttentionTensorStack(int layers, int heads, int positions)
    : layers_(layers), heads_(heads), positions_(positions),
      m_(static_cast<std::size_t>(layers) * static_cast<std::size_t>(heads) * static_cast<std::size_t>(positions) *
             static_cast<std::size_t>(positions),
         0.0) {
  if (layers < 1 || heads < 1 || positions < 1) throw Error("attention stack dimensions must be positive");
}

std::size_t AttentionTensorStack::index(int layer, int head, int key, int query) const {
  if (layer < 1 || layer > layers_ || head < 0 || head >= heads_ || key < 0 || key >= positions_ || query < 0 ||
      query >= positions_) {
    throw Error("attention stack index out of range");
  }
  const auto n = static_cast<std::size_t>(positions_);
  return ((static_cast<std::size_t>(layer - 1) * static_cast<std::size_t>(heads_) + static_cast<std::size_t>(head)) * n +
          static_cast<std::size_t>(key)) *
             n +
         static_cast<std::size_t>(query);
}

double AttentionTensorStack::mean(int layer, int key, int query) const {
  double s = 0.0;
  for (int a = 0; a < heads_; ++a) s += at(layer, a, key, query);
  return s / static_cast<double>(heads_);
}

double AttentionTensorStack::rollout(int layer, int key, int query) const {
  return 0.5 * (key == query ? 1.0 : 0.0) + 0.5 * mean(layer, key, query);
}

double AttentionTensorStack::column_sum_error(std::span<const char> padding) const {
  double worst = 0.0;
  for (int l = 1; l <= layers_; ++l) {
    for (int a = 0; a < heads_; ++a) {
      for (int j = 0; j < positions_; ++j) {
        if (is_pad(padding, j)) continue;
        double s = 0.0;
        for (int i = 0; i < positions_; ++i) s += at(l, a, i, j);
        worst = std::max(worst, std::abs(s - 1.0));
      }
    }
  }
  return worst;
}

AttentionTensorStack capture_attention(const ToyTransformer& model, const TraceInput& input) {
  const int L = model.layers(), A = model.heads(), N = input.positions();
  const ForwardResult fwd = model.forward_embeddings(input.embeddings, input.padding);
  const auto keys = real_positions(N, input.padding);
  AttentionTensorStack stack(L, A, N);
  for (int l = 1; l <= L; ++l) {
    for (int j = 0; j < N; ++j) {
      for (int a = 0; a < A; ++a) {
        const std::string name = "p/" + std::to_string(l) + "/" + std::to_string(j) + "/" + std::to_string(a);
        const Tensor& probs = fwd.tape.value(name);
        for (std::size_t i = 0; i < keys.size(); ++i) stack.set(l, a, keys[i], j, probs[i]);
      }
    }
  }
  return stack;
}

Pattern pattern_random(const GraphView& view, int source, std::uint64_t seed, std::span<const char> padding) {
  const int L = view.layers(), N = view.positions();
  std::mt19937_64 rng(seed);
  auto pick = [&](std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); };

  std::vector<NodeId> skeleton = {NodeId::input(source)};
  for (int l = 1; l <= L - 1; ++l) {
    const auto cands = embedding_guiding_set(l, N, padding);
    skeleton.push_back(cands[pick(cands.size())]);
  }
  skeleton.push_back(NodeId::embedding(L, view.mask_position()));
  skeleton.push_back(NodeId::qoi());

  Pattern p;
  p.word = source;
  if (view.granularity() == Granularity::embedding) {
    p.nodes = std::move(skeleton);
    return p;
  }
  p.nodes = {skeleton.front()};
  for (int t = 1; t <= L; ++t) {
    const auto cands =
        attention_guiding_set(skeleton[static_cast<std::size_t>(t) - 1], skeleton[static_cast<std::size_t>(t)], view.heads());
    p.nodes.push_back(cands[pick(cands.size())]);
    p.nodes.push_back(skeleton[static_cast<std::size_t>(t)]);
  }
  p.nodes.push_back(NodeId::qoi());
  return p;
}

Pattern pattern_attention_dp(const AttentionTensorStack& stack, int source, int mask_position, bool use_rollout,
                             std::span<const char> padding) {
  const int L = stack.layers(), N = stack.positions();
  auto w = [&](int l, int i, int j) { return use_rollout ? stack.rollout(l, i, j) : stack.mean(l, i, j); };
  const auto allowed = real_positions(N, padding);

  // best[l][j]: largest product from h^l_j up to h^L_m.
  std::vector<std::vector<double>> best(static_cast<std::size_t>(L) + 1, std::vector<double>(static_cast<std::size_t>(N), 0.0));
  best[static_cast<std::size_t>(L)][static_cast<std::size_t>(mask_position)] = 1.0;
  for (int l = L - 1; l >= 1; --l) {
    for (int j : allowed) {
      double b = 0.0;
      for (int next : allowed) b = std::max(b, w(l + 1, j, next) * best[static_cast<std::size_t>(l) + 1][static_cast<std::size_t>(next)]);
      best[static_cast<std::size_t>(l)][static_cast<std::size_t>(j)] = b;
    }
  }

  Pattern p;
  p.word = source;
  p.nodes = {NodeId::input(source)};
  int prev = source;
  for (int l = 1; l <= L - 1; ++l) {
    int choice = allowed.front();
    double score = -1.0;
    for (int j : allowed) {
      const double s = w(l, prev, j) * best[static_cast<std::size_t>(l)][static_cast<std::size_t>(j)];
      if (s > score) {
        score = s;
        choice = j;
      }
    }
    p.nodes.push_back(NodeId::embedding(l, choice));
    prev = choice;
  }
  p.nodes.push_back(NodeId::embedding(L, mask_position));
  p.nodes.push_back(NodeId::qoi());
  return p;
}

std::vector<double> conductance_scores(const InfluenceContext& ctx, int position, int layer) {
  const int N = ctx.input().positions();
  std::vector<double> out(static_cast<std::size_t>(N), 0.0);
  for (int j : real_positions(N, ctx.input().padding)) {
    Pattern p;
    p.nodes = {NodeId::input(position), NodeId::embedding(layer, j), NodeId::qoi()};
    out[static_cast<std::size_t>(j)] = pattern_influence(ctx, p);
  }
  return out;
}

std::vector<double> internal_influence_scores(const InfluenceContext& ctx, int layer) {
  const auto grads = mean_upper_gradients(ctx, layer);
  std::vector<double> out;
  for (std::size_t j = 0; j < grads.size(); ++j) {
    double s = 0.0;
    if (!is_pad(ctx.input().padding, static_cast<int>(j))) {
      for (double v : grads[j].data()) s += v;
    }
    out.push_back(s);
  }
  return out;
}

ConductanceTable conductance_table(const InfluenceContext& ctx, int layer) {
  const int N = ctx.input().positions();
  const auto positions = real_positions(N, ctx.input().padding);
  std::vector<VarId> uppers, inputs;
  for (int j : positions) uppers.push_back(ctx.var(NodeId::embedding(layer, j)));
  for (int i = 0; i < N; ++i) inputs.push_back(ctx.var(NodeId::input(i)));
  const VarId q = ctx.var(NodeId::qoi());
  const auto width = static_cast<std::size_t>(ctx.model().width());

  // grads[k][j][i]: dq/dh^l_j pulled back to x_i on sample k.
  std::vector<std::vector<std::vector<Tensor>>> grads(ctx.samples());
  tbb::parallel_for(std::size_t{0}, ctx.samples(), [&](std::size_t k) {
    const Tape& tape = ctx.tape(k);
    const auto top = tape.vjp_many(q, uppers, Tensor::vector({1.0}));
    for (std::size_t t = 0; t < uppers.size(); ++t) grads[k].push_back(tape.vjp_many(uppers[t], inputs, top[t]));
  });

  ConductanceTable out(static_cast<std::size_t>(N), std::vector<double>(static_cast<std::size_t>(N), 0.0));
  for (std::size_t t = 0; t < positions.size(); ++t) {
    for (int i = 0; i < N; ++i) {
      Tensor mean({width});
      for (std::size_t k = 0; k < ctx.samples(); ++k) axpy(1.0, grads[k][t][static_cast<std::size_t>(i)].data(), mean.data());
      for (double& v : mean.data()) v /= static_cast<double>(ctx.samples());
      out[static_cast<std::size_t>(i)][static_cast<std::size_t>(positions[t])] = dot(ctx.difference(i).data(), mean.data());
    }
  }
  return out;
}

std::vector<ConductanceTable> conductance_tables(const InfluenceContext& ctx) {
  std::vector<ConductanceTable> out(static_cast<std::size_t>(ctx.model().layers()));
  for (int l = 1; l < ctx.model().layers(); ++l) out[static_cast<std::size_t>(l)] = conductance_table(ctx, l);
  return out;
}

Pattern pattern_conductance(const InfluenceContext& ctx, int position, double sigma) {
  return layer_argmax_pattern(ctx, position, sigma, [&](int l) { return conductance_scores(ctx, position, l); });
}

Pattern pattern_conductance(const InfluenceContext& ctx, int position, double sigma,
                            std::span<const ConductanceTable> tables) {
  if (tables.size() != static_cast<std::size_t>(ctx.model().layers())) throw Error("one conductance table per layer expected");
  return layer_argmax_pattern(ctx, position, sigma,
                              [&](int l) { return tables[static_cast<std::size_t>(l)][static_cast<std::size_t>(position)]; });
}

Pattern pattern_internal_influence(const InfluenceContext& ctx, int position, double sigma) {
  return layer_argmax_pattern(ctx, position, sigma, [&](int l) { return internal_influence_scores(ctx, l); });
}

std::vector<NodeId> pattern_replace_skip(const Pattern& pattern, int heads) {
  const bool attention = std::any_of(pattern.nodes.begin(), pattern.nodes.end(), [](const NodeId& n) {
    return n.kind == NodeKind::head || n.kind == NodeKind::skip;
  });
  if (!attention) throw Error("pattern_replace_skip needs an attention-granularity pattern");
  std::vector<NodeId> out;
  for (const NodeId& n : pattern.nodes) {
    if (n.kind != NodeKind::skip) {
      out.push_back(n);
      continue;
    }
    for (int k = 0; k < heads; ++k) out.push_back(NodeId::attention_head(n.layer, n.position, k));
  }
  return out;
}

}  // namespace ipat
