#include "ipat/transformer.hpp"

#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

namespace ipat {

namespace {

constexpr char kCheckpointMagic[8] = {'I', 'P', 'A', 'T', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

template <typename T>
void write_pod(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw Error("checkpoint truncated");
  return value;
}

int parse_int(std::string_view s) {
  int v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw Error("bad node key component '" + std::string(s) + "'");
  return v;
}

}  // namespace

void validate(const ModelConfig& c) {
  if (c.layers < 1 || c.heads < 1 || c.hidden < 1 || c.max_len < 1 || c.vocab < 1 || c.ffn_width < 1) {
    throw Error("model config: all counts must be >= 1");
  }
  if (c.hidden % c.heads != 0) throw Error("model config: hidden width must be divisible by head count");
}

std::string NodeId::key() const {
  switch (kind) {
    case NodeKind::input: return "x/" + std::to_string(position);
    case NodeKind::layer_embedding: return "h/" + std::to_string(layer) + "/" + std::to_string(position);
    case NodeKind::head:
      return "a/" + std::to_string(layer) + "/" + std::to_string(position) + "/" + std::to_string(head);
    case NodeKind::skip: return "s/" + std::to_string(layer) + "/" + std::to_string(position);
    case NodeKind::logits: return "y/" + std::to_string(position);
    case NodeKind::qoi: return "qoi";
  }
  return "?";
}

NodeId NodeId::parse(std::string_view key) {
  if (key == "qoi") return qoi();
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  while (true) {
    const std::size_t slash = key.find('/', start);
    parts.push_back(key.substr(start, slash == std::string_view::npos ? std::string_view::npos : slash - start));
    if (slash == std::string_view::npos) break;
    start = slash + 1;
  }
  const std::string_view tag = parts[0];
  if (tag == "x" && parts.size() == 2) return input(parse_int(parts[1]));
  if (tag == "h" && parts.size() == 3) return embedding(parse_int(parts[1]), parse_int(parts[2]));
  if (tag == "a" && parts.size() == 4) {
    return attention_head(parse_int(parts[1]), parse_int(parts[2]), parse_int(parts[3]));
  }
  if (tag == "s" && parts.size() == 3) return skip(parse_int(parts[1]), parse_int(parts[2]));
  if (tag == "y" && parts.size() == 2) return logits(parse_int(parts[1]));
  throw Error("bad node key '" + std::string(key) + "'");
}

double qoi_score(std::span<const double> logits, const Qoi& qoi) {
  double acc = 0.0;
  for (const auto& [token, coef] : qoi.terms) acc += coef * logits[static_cast<std::size_t>(token)];
  return acc;
}

double qoi_score(std::span<const double> logits, int correct, int wrong) {
  return logits[static_cast<std::size_t>(correct)] - logits[static_cast<std::size_t>(wrong)];
}

ToyTransformer::ToyTransformer(ModelConfig config, Init init) : config_(config) {
  validate(config_);
  initialize(init);
}

void ToyTransformer::initialize(Init init) {
  const auto H = static_cast<std::size_t>(config_.hidden);
  const auto V = static_cast<std::size_t>(config_.vocab);
  const auto F = static_cast<std::size_t>(config_.ffn_width);
  const auto N = static_cast<std::size_t>(config_.max_len);

  token_emb_ = Tensor({V, H});
  pos_emb_ = Tensor({N, H});
  layers_.assign(static_cast<std::size_t>(config_.layers), Layer{});
  for (Layer& l : layers_) {
    for (LayerParam m : {wq, wk, wv, wo}) l[m] = Tensor({H, H});
    for (LayerParam v : {bq, bk, bv, bo, ln1_g, ln1_b, b2, ln2_g, ln2_b}) l[v] = Tensor({H});
    l[w1] = Tensor({F, H});
    l[b1] = Tensor({F});
    l[w2] = Tensor({H, F});
  }
  out_w_ = Tensor({V, H});
  out_b_ = Tensor({V});
  if (init == Init::zeros) return;

  std::mt19937_64 rng(config_.seed);
  auto fill = [&rng](Tensor& t, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (double& v : t.data()) v = dist(rng);
  };
  const double inv_h = 1.0 / std::sqrt(static_cast<double>(H));
  const double inv_f = 1.0 / std::sqrt(static_cast<double>(F));
  fill(token_emb_, 1.0);
  fill(pos_emb_, 1.0);
  for (Layer& l : layers_) {
    fill(l[wq], inv_h);
    fill(l[wk], inv_h);
    fill(l[wv], inv_h);
    fill(l[wo], inv_h);
    fill(l[w1], inv_h);
    fill(l[w2], inv_f);
    for (double& g : l[ln1_g].data()) g = 1.0;
    for (double& g : l[ln2_g].data()) g = 1.0;
  }
  fill(out_w_, inv_h);
}

std::vector<Tensor*> ToyTransformer::parameters() {
  std::vector<Tensor*> out = {&token_emb_, &pos_emb_};
  for (Layer& l : layers_) {
    for (Tensor& t : l) out.push_back(&t);
  }
  out.push_back(&out_w_);
  out.push_back(&out_b_);
  return out;
}

std::vector<const Tensor*> ToyTransformer::parameters() const {
  auto mutable_params = const_cast<ToyTransformer*>(this)->parameters();
  return {mutable_params.begin(), mutable_params.end()};
}

std::vector<std::string> ToyTransformer::parameter_names() const {
  std::vector<std::string> names = {"token_embedding", "position_embedding"};
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const std::string p = "layer" + std::to_string(i + 1) + ".";
    for (const char* n : {"wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1_gain", "ln1_shift", "w1", "b1", "w2",
                          "b2", "ln2_gain", "ln2_shift"}) {
      names.push_back(p + n);
    }
  }
  names.push_back("output_weight");
  names.push_back("output_bias");
  return names;
}

// Gradient slots follow parameters(): token and position embeddings, then
// kLayerParams per layer, then the output projection.
ParamRef ToyTransformer::layer_ref(std::size_t layer, LayerParam which) const {
  return ParamRef{&layers_[layer][which], static_cast<int>(2 + layer * kLayerParams + which)};
}

void ToyTransformer::check_tokens(std::span<const int> tokens) const {
  if (tokens.size() > static_cast<std::size_t>(config_.max_len)) {
    throw Error("sequence of length " + std::to_string(tokens.size()) + " exceeds max_len " +
                std::to_string(config_.max_len));
  }
  for (int t : tokens) {
    if (t < 0 || t >= config_.vocab) throw Error("unknown token id " + std::to_string(t));
  }
}

Tensor ToyTransformer::token_embedding(int token) const {
  if (token < 0 || token >= config_.vocab) throw Error("unknown token id " + std::to_string(token));
  return token_emb_.row_copy(static_cast<std::size_t>(token));
}

std::vector<Tensor> ToyTransformer::embed(std::span<const int> tokens) const {
  check_tokens(tokens);
  std::vector<Tensor> out;
  out.reserve(tokens.size());
  for (int t : tokens) out.push_back(token_emb_.row_copy(static_cast<std::size_t>(t)));
  return out;
}

VarId ToyTransformer::combine(Tape& tape, std::size_t li, std::span<const VarId> heads, VarId s) const {
  auto P = [&](LayerParam which) { return layer_ref(li, which); };
  const VarId cat = tape.concat(heads);
  const VarId attn = tape.linear(cat, P(wo), P(bo));
  const VarId u = tape.layer_norm(tape.add(s, attn), P(ln1_g), P(ln1_b));
  const VarId f = tape.linear(tape.gelu(tape.linear(u, P(w1), P(b1))), P(w2), P(b2));
  return tape.layer_norm(tape.add(u, f), P(ln2_g), P(ln2_b));
}

std::vector<VarId> ToyTransformer::encode(Tape& tape, std::vector<VarId> h, std::span<const char> padding,
                                          const Ablation* ablation, int first_layer, int last_layer) const {
  const int N = static_cast<int>(h.size());
  const int A = config_.heads;
  const auto dh = static_cast<std::size_t>(config_.head_width());
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  const bool ablate_embedding = ablation != nullptr && !ablation->keep_embedding.empty();
  const bool ablate_heads = ablation != nullptr && !ablation->keep_head.empty();
  const bool ablate_skips = ablation != nullptr && !ablation->keep_skip.empty();

  std::vector<int> keys;
  for (int i = 0; i < N; ++i) {
    if (padding.empty() || !padding[static_cast<std::size_t>(i)]) keys.push_back(i);
  }
  if (keys.empty()) throw Error("sequence has no non-padding position");

  for (int l = first_layer; l <= last_layer; ++l) {
    const auto li = static_cast<std::size_t>(l - 1);
    auto P = [&](LayerParam which) { return layer_ref(li, which); };
    std::vector<VarId> resid(static_cast<std::size_t>(N));
    for (int j = 0; j < N; ++j) {
      const VarId in = h[static_cast<std::size_t>(j)];
      resid[static_cast<std::size_t>(j)] = l == 1 ? tape.add_param_row(in, ParamRef{&pos_emb_, 1}, static_cast<std::size_t>(j)) : in;
    }

    // Per-head key/value projections of every (non-padding) source position.
    std::vector<std::vector<VarId>> head_keys(static_cast<std::size_t>(A)), head_values(static_cast<std::size_t>(A));
    for (int k = 0; k < A; ++k) {
      const std::size_t row0 = static_cast<std::size_t>(k) * dh;
      for (int i : keys) {
        const VarId r = resid[static_cast<std::size_t>(i)];
        head_keys[static_cast<std::size_t>(k)].push_back(tape.linear(r, P(wk), P(bk), row0, dh));
        head_values[static_cast<std::size_t>(k)].push_back(tape.linear(r, P(wv), P(bv), row0, dh));
      }
    }

    std::vector<VarId> next(static_cast<std::size_t>(N));
    for (int j = 0; j < N; ++j) {
      const VarId r = resid[static_cast<std::size_t>(j)];
      std::vector<VarId> head_out(static_cast<std::size_t>(A));
      for (int k = 0; k < A; ++k) {
        const std::size_t row0 = static_cast<std::size_t>(k) * dh;
        const VarId q = tape.linear(r, P(wq), P(bq), row0, dh);
        const VarId scores = tape.scaled_dots(q, head_keys[static_cast<std::size_t>(k)], inv_sqrt_dh);
        const VarId probs = tape.softmax(scores);
        tape.mark("p/" + std::to_string(l) + "/" + std::to_string(j) + "/" + std::to_string(k), probs);
        VarId a = tape.weighted_sum(probs, head_values[static_cast<std::size_t>(k)]);
        tape.mark(NodeId::attention_head(l, j, k).key(), a);
        if (ablate_heads && !ablation->keep_head[static_cast<std::size_t>(l)][static_cast<std::size_t>(j)][static_cast<std::size_t>(k)]) {
          a = tape.zero(a);
        }
        head_out[static_cast<std::size_t>(k)] = a;
      }
      VarId s = tape.copy(r);
      tape.mark(NodeId::skip(l, j).key(), s);
      if (ablate_skips && !ablation->keep_skip[static_cast<std::size_t>(l)][static_cast<std::size_t>(j)]) s = tape.zero(s);

      VarId out = combine(tape, li, head_out, s);
      tape.mark(NodeId::embedding(l, j).key(), out);
      if (ablate_embedding && !ablation->keep_embedding[static_cast<std::size_t>(l)][static_cast<std::size_t>(j)]) {
        out = tape.zero(out);
      }
      next[static_cast<std::size_t>(j)] = out;
    }
    h = std::move(next);
  }
  return h;
}

namespace {

ForwardResult finish(const ToyTransformer& model, Tape tape, const std::vector<VarId>& top, const Tensor& out_w,
                     ParamRef w, ParamRef b, const ForwardOptions& options) {
  const std::size_t N = top.size();
  const std::size_t V = out_w.rows();
  Tensor logits({N, V});
  std::vector<VarId> logit_ids(N);
  for (std::size_t j = 0; j < N; ++j) {
    logit_ids[j] = tape.linear(top[j], w, b);
    tape.mark(NodeId::logits(static_cast<int>(j)).key(), logit_ids[j]);
    const Tensor& y = tape.value(logit_ids[j]);
    std::copy(y.data().begin(), y.data().end(), logits.row(j).begin());
  }
  ForwardResult result{std::move(tape), std::move(logits), std::nullopt};
  if (options.qoi) {
    const Qoi& q = *options.qoi;
    if (q.position < 0 || static_cast<std::size_t>(q.position) >= N) throw Error("qoi position outside the sequence");
    std::vector<std::pair<std::size_t, double>> terms;
    for (const auto& [token, coef] : q.terms) {
      if (token < 0 || token >= model.config().vocab) throw Error("qoi token id out of range");
      terms.emplace_back(static_cast<std::size_t>(token), coef);
    }
    const VarId qid = result.tape.linear_combo(logit_ids[static_cast<std::size_t>(q.position)], std::move(terms));
    result.tape.mark(NodeId::qoi().key(), qid);
    result.qoi = result.tape.value(qid)[0];
  }
  return result;
}

}  // namespace

ForwardResult ToyTransformer::forward(std::span<const int> tokens, const ForwardOptions& options) const {
  check_tokens(tokens);
  Tape tape(options.precision);
  std::vector<VarId> inputs;
  std::vector<char> padding;
  for (std::size_t j = 0; j < tokens.size(); ++j) {
    const VarId x = tape.embedding(ParamRef{&token_emb_, 0}, static_cast<std::size_t>(tokens[j]));
    tape.mark(NodeId::input(static_cast<int>(j)).key(), x);
    inputs.push_back(x);
    padding.push_back(tokens[j] == kPadToken ? 1 : 0);
  }
  auto top = encode(tape, std::move(inputs), padding, options.ablation, 1, config_.layers);
  return finish(*this, std::move(tape), top, output_weight(), output_ref(), ParamRef{&out_b_, output_slot() + 1}, options);
}

ForwardResult ToyTransformer::forward_embeddings(std::span<const Tensor> inputs, std::span<const char> padding,
                                                 const ForwardOptions& options) const {
  if (inputs.size() > static_cast<std::size_t>(config_.max_len)) {
    throw Error("sequence of length " + std::to_string(inputs.size()) + " exceeds max_len " +
                std::to_string(config_.max_len));
  }
  if (!padding.empty() && padding.size() != inputs.size()) throw Error("padding flags do not match the sequence");
  Tape tape(options.precision);
  std::vector<VarId> ids;
  for (std::size_t j = 0; j < inputs.size(); ++j) {
    if (inputs[j].size() != static_cast<std::size_t>(config_.hidden)) throw ShapeError("input embedding width mismatch");
    const VarId x = tape.leaf(inputs[j]);
    tape.mark(NodeId::input(static_cast<int>(j)).key(), x);
    ids.push_back(x);
  }
  auto top = encode(tape, std::move(ids), padding, options.ablation, 1, config_.layers);
  return finish(*this, std::move(tape), top, output_weight(), output_ref(), ParamRef{&out_b_, output_slot() + 1}, options);
}

Tape ToyTransformer::trace(std::span<const Tensor> inputs, std::span<const char> padding, const Qoi& qoi,
                           Precision precision) const {
  ForwardOptions options;
  options.qoi = qoi;
  options.precision = precision;
  return std::move(forward_embeddings(inputs, padding, options).tape);
}

ToyTransformer::LayerValues ToyTransformer::apply_layer(int layer, std::span<const Tensor> previous,
                                                     std::span<const char> padding) const {
  if (layer < 1 || layer > config_.layers) throw Error("layer index out of range");
  Tape tape;
  std::vector<VarId> ids;
  for (const Tensor& t : previous) ids.push_back(tape.leaf(t));
  const auto out = encode(tape, ids, padding, nullptr, layer, layer);
  LayerValues values;
  for (std::size_t j = 0; j < previous.size(); ++j) {
    const int pos = static_cast<int>(j);
    values.output.push_back(tape.value(out[j]));
    values.skips.push_back(tape.value(NodeId::skip(layer, pos).key()));
    values.heads.emplace_back();
    for (int k = 0; k < config_.heads; ++k) {
      values.heads.back().push_back(tape.value(NodeId::attention_head(layer, pos, k).key()));
    }
  }
  return values;
}

Tensor ToyTransformer::combine_heads(int layer, std::span<const Tensor> heads, const Tensor& skip) const {
  if (layer < 1 || layer > config_.layers) throw Error("layer index out of range");
  Tape tape;
  std::vector<VarId> ids;
  for (const Tensor& h : heads) ids.push_back(tape.leaf(h));
  const VarId s = tape.leaf(skip);
  return tape.value(combine(tape, static_cast<std::size_t>(layer - 1), ids, s));
}

Tensor ToyTransformer::output_logits(const Tensor& top) const {
  Tape tape;
  return tape.value(tape.linear(tape.leaf(top), output_ref(), ParamRef{&out_b_, output_slot() + 1}));
}

void ToyTransformer::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  write_pod<std::uint32_t>(out, kCheckpointVersion);
  for (int v : {config_.layers, config_.heads, config_.hidden, config_.max_len, config_.vocab, config_.ffn_width}) {
    write_pod<std::int32_t>(out, v);
  }
  write_pod<std::uint64_t>(out, config_.seed);
  write_pod<std::uint8_t>(out, config_.tied_output ? 1 : 0);
  const auto params = parameters();
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const Tensor* t : params) {
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(t->rank()));
    for (std::size_t d : t->shape()) write_pod<std::uint64_t>(out, d);
    out.write(reinterpret_cast<const char*>(t->data().data()), static_cast<std::streamsize>(t->size() * sizeof(double)));
  }
  if (!out) throw Error("failed writing checkpoint '" + path.string() + "'");
}

ToyTransformer ToyTransformer::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint '" + path.string() + "'");
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) throw Error("not a checkpoint file");
  const auto version = read_pod<std::uint32_t>(in);
  if (version != kCheckpointVersion) throw Error("unsupported checkpoint version " + std::to_string(version));
  ModelConfig c;
  c.layers = read_pod<std::int32_t>(in);
  c.heads = read_pod<std::int32_t>(in);
  c.hidden = read_pod<std::int32_t>(in);
  c.max_len = read_pod<std::int32_t>(in);
  c.vocab = read_pod<std::int32_t>(in);
  c.ffn_width = read_pod<std::int32_t>(in);
  c.seed = read_pod<std::uint64_t>(in);
  c.tied_output = read_pod<std::uint8_t>(in) != 0;
  ToyTransformer model(c, Init::zeros);
  auto params = model.parameters();
  const auto count = read_pod<std::uint32_t>(in);
  if (count != params.size()) throw Error("checkpoint parameter count mismatch");
  for (Tensor* t : params) {
    const auto rank = read_pod<std::uint32_t>(in);
    std::vector<std::size_t> shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(static_cast<std::size_t>(read_pod<std::uint64_t>(in)));
    if (shape != t->shape()) throw Error("checkpoint tensor shape mismatch");
    in.read(reinterpret_cast<char*>(t->data().data()), static_cast<std::streamsize>(t->size() * sizeof(double)));
    if (!in) throw Error("checkpoint truncated");
    if (!t->all_finite()) throw Error("checkpoint contains non-finite parameters");
  }
  return model;
}

bool ToyTransformer::operator==(const ToyTransformer& other) const {
  if (!(config_ == other.config_)) return false;
  const auto a = parameters();
  const auto b = other.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!(*a[i] == *b[i])) return false;
  }
  return true;
}

std::vector<Tensor> interpolate_input(std::span<const Tensor> embeddings, const Tensor& baseline,
                                      std::span<const int> positions, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error("interpolation alpha must lie in [0, 1]");
  std::vector<Tensor> out(embeddings.begin(), embeddings.end());
  for (int pos : positions) {
    if (pos < 0 || static_cast<std::size_t>(pos) >= out.size()) throw Error("interpolation position out of range");
    Tensor& x = out[static_cast<std::size_t>(pos)];
    if (x.size() != baseline.size()) throw ShapeError("baseline width mismatch");
    for (std::size_t c = 0; c < x.size(); ++c) x[c] = (1.0 - alpha) * baseline[c] + alpha * x[c];
  }
  return out;
}

std::vector<std::vector<Tensor>> attention_probabilities(const Tape& tape, int layers, int heads, int positions,
                                                         std::span<const char> padding) {
  std::vector<std::vector<Tensor>> stack(static_cast<std::size_t>(layers));
  const auto N = static_cast<std::size_t>(positions);
  for (int l = 1; l <= layers; ++l) {
    for (int k = 0; k < heads; ++k) {
      Tensor m({N, N});
      for (int j = 0; j < positions; ++j) {
        const Tensor& p =
            tape.value("p/" + std::to_string(l) + "/" + std::to_string(j) + "/" + std::to_string(k));
        // Padding keys are absent from p; they keep zero weight.
        std::size_t src = 0;
        for (std::size_t i = 0; i < N && src < p.size(); ++i) {
          if (!padding.empty() && padding[i]) continue;
          m.at(i, static_cast<std::size_t>(j)) = p[src++];
        }
      }
      stack[static_cast<std::size_t>(l - 1)].push_back(std::move(m));
    }
  }
  return stack;
}

}  // namespace ipat
