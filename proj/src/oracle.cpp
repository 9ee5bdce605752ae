#include "ipat/oracle.hpp"

#include <tbb/parallel_for.h>

#include <algorithm>

namespace ipat {

namespace {

constexpr std::size_t kMaxPartialBytes = std::size_t{2} << 30;

// Rows [r0, r0 + rows) of a Jacobian as their own matrix.
Tensor block(const Tensor& jac, std::size_t r0, std::size_t rows) {
  Tensor out({rows, jac.cols()});
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy(jac.row(r0 + r).begin(), jac.row(r0 + r).end(), out.row(r).begin());
  }
  return out;
}

Tensor flatten(const std::vector<Tensor>& parts) {
  std::vector<double> all;
  for (const Tensor& p : parts) all.insert(all.end(), p.data().begin(), p.data().end());
  const std::size_t n = all.size();
  return Tensor({n}, std::move(all));
}

void add_fd_partials(const ToyTransformer& model, const TraceInput& input, const Tape& tape,
                     Granularity granularity, double step, EdgePartials& out) {
  const int L = model.layers(), A = model.heads(), N = input.positions();
  const std::size_t H = static_cast<std::size_t>(model.width());
  auto value = [&](const NodeId& n) { return tape.value(n.key()); };

  for (int l = 1; l <= L; ++l) {
    std::vector<Tensor> prev;
    for (int p = 0; p < N; ++p) prev.push_back(value(NodeId::embedding(l - 1, p)));
    for (int i = 0; i < N; ++i) {
      const NodeId tail = NodeId::embedding(l - 1, i);
      auto f = [&](const Tensor& z) {
        auto in = prev;
        in[static_cast<std::size_t>(i)] = z;
        const auto v = model.apply_layer(l, in, input.padding);
        if (granularity == Granularity::embedding) return flatten(v.output);
        std::vector<Tensor> parts;
        for (int j = 0; j < N; ++j) {
          for (int k = 0; k < A; ++k) parts.push_back(v.heads[static_cast<std::size_t>(j)][static_cast<std::size_t>(k)]);
        }
        parts.push_back(v.skips[static_cast<std::size_t>(i)]);
        return flatten(parts);
      };
      const Tensor jac = finite_difference_jacobian(f, prev[static_cast<std::size_t>(i)], step);
      std::size_t r0 = 0;
      for (int j = 0; j < N; ++j) {
        if (granularity == Granularity::embedding) {
          out[{tail, NodeId::embedding(l, j)}] = block(jac, r0, H);
          r0 += H;
          continue;
        }
        for (int k = 0; k < A; ++k) {
          const NodeId head = NodeId::attention_head(l, j, k);
          const std::size_t w = value(head).size();
          out[{tail, head}] = block(jac, r0, w);
          r0 += w;
        }
      }
      if (granularity == Granularity::attention) out[{tail, NodeId::skip(l, i)}] = block(jac, r0, H);
    }
    if (granularity == Granularity::embedding) continue;

    for (int j = 0; j < N; ++j) {
      std::vector<Tensor> heads;
      for (int k = 0; k < A; ++k) heads.push_back(value(NodeId::attention_head(l, j, k)));
      const Tensor skip = value(NodeId::skip(l, j));
      const NodeId top = NodeId::embedding(l, j);
      for (int k = 0; k < A; ++k) {
        auto f = [&](const Tensor& z) {
          auto hs = heads;
          hs[static_cast<std::size_t>(k)] = z;
          return model.combine_heads(l, hs, skip);
        };
        out[{NodeId::attention_head(l, j, k), top}] =
            finite_difference_jacobian(f, heads[static_cast<std::size_t>(k)], step);
      }
      out[{NodeId::skip(l, j), top}] =
          finite_difference_jacobian([&](const Tensor& z) { return model.combine_heads(l, heads, z); }, skip, step);
    }
  }

  const NodeId top = NodeId::embedding(L, input.qoi.position);
  out[{top, NodeId::qoi()}] = finite_difference_jacobian(
      [&](const Tensor& z) { return Tensor::vector({qoi_score(model.output_logits(z).data(), input.qoi)}); },
      value(top), step);
}

// All paths from `from` to `to` in the view, by depth-first search.
void collect_paths(const GraphView& view, std::size_t at, std::size_t to, std::vector<std::size_t>& stack,
                   std::vector<std::vector<std::size_t>>& out, std::size_t limit) {
  stack.push_back(at);
  if (at == to) {
    out.push_back(stack);
    if (out.size() > limit) throw Error("path enumeration bound exceeded");
  } else {
    for (std::size_t next : view.successors(at)) {
      if (next <= to) collect_paths(view, next, to, stack, out, limit);
    }
  }
  stack.pop_back();
}

}  // namespace

EdgePartials edge_partials(const ToyTransformer& model, const TraceInput& input, double alpha,
                           Granularity granularity, PartialMethod method, double fd_step) {
  const GraphView view(model.layers(), model.heads(), input.positions(), input.qoi.position, granularity);
  const std::size_t H = static_cast<std::size_t>(model.width());
  if (view.edge_count() * H * H * sizeof(double) > kMaxPartialBytes) {
    throw Error("configuration too large for the edge-partial oracle");
  }
  const Tape tape = model.trace(interpolated_inputs(input, input.traced, alpha), input.padding, input.qoi);
  EdgePartials out;
  if (method == PartialMethod::finite_difference) {
    add_fd_partials(model, input, tape, granularity, fd_step, out);
    return out;
  }
  const auto& nodes = view.nodes();
  for (std::size_t u = 0; u < nodes.size(); ++u) {
    for (std::size_t v : view.successors(u)) {
      out[{nodes[u], nodes[v]}] =
          segment_jacobian_dense(tape, tape.marker(nodes[v].key()), tape.marker(nodes[u].key()));
    }
  }
  return out;
}

PathOracle::PathOracle(const ToyTransformer& model, TraceInput input, const DoIConfig& doi, Granularity granularity,
                       std::vector<int> moving)
    : input_(std::move(input)),
      moving_(std::move(moving)),
      view_(model.layers(), model.heads(), input_.positions(), input_.qoi.position, granularity) {
  if (moving_.empty()) moving_ = input_.traced;
  const auto alphas = doi.alphas();
  partials_.resize(alphas.size());
  TraceInput moved = input_;
  moved.traced = moving_;
  tbb::parallel_for(std::size_t{0}, alphas.size(),
                    [&](std::size_t k) { partials_[k] = edge_partials(model, moved, alphas[k], granularity); });
}

std::vector<std::vector<NodeId>> PathOracle::paths(const Pattern& pattern) const {
  validate_pattern(view_, pattern);
  if (count_abstracted(view_, pattern) > kMaxPaths) throw Error("pattern abstracts too many paths to enumerate");
  std::vector<std::vector<std::size_t>> full = {{view_.index(pattern.nodes.front())}};
  for (std::size_t s = 0; s + 1 < pattern.nodes.size(); ++s) {
    std::vector<std::vector<std::size_t>> segment;
    std::vector<std::size_t> stack;
    collect_paths(view_, view_.index(pattern.nodes[s]), view_.index(pattern.nodes[s + 1]), stack, segment, kMaxPaths);
    std::vector<std::vector<std::size_t>> next;
    for (const auto& prefix : full) {
      for (const auto& seg : segment) {
        auto p = prefix;
        p.insert(p.end(), seg.begin() + 1, seg.end());
        next.push_back(std::move(p));
      }
    }
    full = std::move(next);
  }
  std::vector<std::vector<NodeId>> out;
  for (const auto& p : full) {
    std::vector<NodeId> nodes;
    for (std::size_t idx : p) nodes.push_back(view_.nodes()[idx]);
    out.push_back(std::move(nodes));
  }
  return out;
}

Tensor PathOracle::gradient(const Pattern& pattern) const {
  const auto all = paths(pattern);
  std::vector<Tensor> per_sample(partials_.size());
  tbb::parallel_for(std::size_t{0}, partials_.size(), [&](std::size_t k) {
    const EdgePartials& edges = partials_[k];
    Tensor total;
    for (const auto& path : all) {
      // Row-vector product from the qoi end down to the source.
      std::vector<double> cot = {1.0};
      for (std::size_t e = path.size() - 1; e > 0; --e) {
        const Tensor& jac = edges.at({path[e - 1], path[e]});
        std::vector<double> next(jac.cols(), 0.0);
        for (std::size_t r = 0; r < jac.rows(); ++r) axpy(cot[r], jac.row(r), next);
        cot = std::move(next);
      }
      if (total.empty()) total = Tensor({cot.size()});
      axpy(1.0, cot, total.data());
    }
    per_sample[k] = std::move(total);
  });
  Tensor mean = Tensor::zeros_like(per_sample.front());
  for (const Tensor& g : per_sample) axpy(1.0, g.data(), mean.data());
  for (double& v : mean.data()) v /= static_cast<double>(per_sample.size());
  return mean;
}

double PathOracle::influence(const Pattern& pattern) const {
  const int src = pattern.nodes.front().position;
  const Tensor g = gradient(pattern);
  if (std::find(moving_.begin(), moving_.end(), src) == moving_.end()) return 0.0;
  const Tensor& x = input_.embeddings[static_cast<std::size_t>(src)];
  double s = 0.0;
  for (std::size_t c = 0; c < g.size(); ++c) s += (x[c] - input_.baseline[c]) * g[c];
  return s;
}

double enumerate_path_influence(const ToyTransformer& model, const TraceInput& input, const Pattern& pattern,
                                const DoIConfig& doi, Granularity granularity) {
  std::vector<int> moving;
  if (doi.per_word) moving = {pattern.nodes.front().position};
  return PathOracle(model, input, doi, granularity, moving).influence(pattern);
}

namespace {

// Calls fn on every candidate node list, in lexicographic order.
void for_each_candidate(const InfluenceContext& ctx, int position, Granularity granularity, const Pattern* skeleton,
                        const std::function<void(const std::vector<NodeId>&)>& fn) {
  const int L = ctx.model().layers(), A = ctx.model().heads(), N = ctx.input().positions();
  const int m = ctx.input().qoi.position;

  auto expand_attention = [&](const std::vector<NodeId>& e) {
    std::vector<NodeId> nodes = {e.front()};
    std::function<void(int)> rec = [&](int t) {
      if (t > L) {
        nodes.push_back(NodeId::qoi());
        fn(nodes);
        nodes.pop_back();
        return;
      }
      for (const NodeId& c :
           attention_guiding_set(e[static_cast<std::size_t>(t) - 1], e[static_cast<std::size_t>(t)], A)) {
        nodes.push_back(c);
        nodes.push_back(e[static_cast<std::size_t>(t)]);
        rec(t + 1);
        nodes.pop_back();
        nodes.pop_back();
      }
    };
    rec(1);
  };

  if (granularity == Granularity::attention && skeleton != nullptr) {
    check_embedding_pattern(ctx, skeleton->nodes);
    if (skeleton->nodes.front().position != position) throw Error("skeleton belongs to a different word");
    expand_attention(skeleton->nodes);
    return;
  }
  std::vector<NodeId> e = {NodeId::input(position)};
  std::function<void(int)> rec = [&](int l) {
    if (l == L) {
      e.push_back(NodeId::embedding(L, m));
      e.push_back(NodeId::qoi());
      if (granularity == Granularity::embedding) {
        fn(e);
      } else {
        expand_attention(e);
      }
      e.pop_back();
      e.pop_back();
      return;
    }
    for (const NodeId& c : embedding_guiding_set(l, N, ctx.input().padding)) {
      e.push_back(c);
      rec(l + 1);
      e.pop_back();
    }
  };
  rec(1);
}

}  // namespace

std::size_t exhaustive_candidate_count(const InfluenceContext& ctx, int position, Granularity granularity,
                                       const Pattern* skeleton) {
  std::size_t n = 0;
  for_each_candidate(ctx, position, granularity, skeleton, [&](const std::vector<NodeId>&) { ++n; });
  return n;
}

Pattern exhaustive_best_pattern(const InfluenceContext& ctx, int position, double sigma, Granularity granularity,
                                const Pattern* skeleton, std::size_t max_candidates) {
  if (exhaustive_candidate_count(ctx, position, granularity, skeleton) > max_candidates) {
    throw Error("exhaustive search bound exceeded");
  }
  Pattern best;
  bool have = false;
  for_each_candidate(ctx, position, granularity, skeleton, [&](const std::vector<NodeId>& nodes) {
    Pattern p;
    p.nodes = nodes;
    p.word = position;
    p.influence = pattern_influence(ctx, p);
    if (!have || sigma * p.influence > sigma * best.influence) {
      best = std::move(p);
      have = true;
    }
  });
  return best;
}

}  // namespace ipat
