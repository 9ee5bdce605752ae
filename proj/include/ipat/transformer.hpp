#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ipat/tape.hpp"
#include "ipat/tensor.hpp"

namespace ipat {

/// Token id 0 is reserved for padding by every vocabulary in this project.
inline constexpr int kPadToken = 0;

struct ModelConfig {
  int layers = 3;
  int heads = 4;
  int hidden = 32;
  int max_len = 12;
  int vocab = 40;
  int ffn_width = 64;
  std::uint64_t seed = 0;
  bool tied_output = false;

  int head_width() const { return hidden / heads; }
  bool operator==(const ModelConfig&) const = default;
};

/// Throws Error unless every count is >= 1 and hidden % heads == 0.
void validate(const ModelConfig& config);

enum class NodeKind : std::uint8_t { input, layer_embedding, head, skip, logits, qoi };

/// A node of the traced graph. Positions and heads are 0-based; `layer` is 0
/// for inputs, 1..L for layer embeddings, heads and skips.
struct NodeId {
  NodeKind kind = NodeKind::qoi;
  int layer = 0;
  int position = 0;
  int head = 0;

  static NodeId input(int position) { return {NodeKind::input, 0, position, 0}; }
  static NodeId embedding(int layer, int position) {
    return layer == 0 ? input(position) : NodeId{NodeKind::layer_embedding, layer, position, 0};
  }
  static NodeId attention_head(int layer, int position, int head) { return {NodeKind::head, layer, position, head}; }
  static NodeId skip(int layer, int position) { return {NodeKind::skip, layer, position, 0}; }
  static NodeId logits(int position) { return {NodeKind::logits, 0, position, 0}; }
  static NodeId qoi() { return {}; }

  bool is_embedding() const { return kind == NodeKind::input || kind == NodeKind::layer_embedding; }
  /// Tape marker name, e.g. "h/2/5", "a/1/3/0", "s/1/3", "x/4", "qoi".
  std::string key() const;
  static NodeId parse(std::string_view key);

  auto operator<=>(const NodeId&) const = default;
};

/// Linear quantity of interest over the logits at one position:
/// q(y) = sum_t coef_t * y[token_t].
struct Qoi {
  int position = 0;
  std::vector<std::pair<int, double>> terms;

  /// y_correct - y_wrong at the mask position.
  static Qoi contrast(int position, int correct, int wrong) { return {position, {{correct, 1.0}, {wrong, -1.0}}}; }
};

/// Evaluates q on a logits vector.
double qoi_score(std::span<const double> logits, const Qoi& qoi);
/// y_correct - y_wrong.
double qoi_score(std::span<const double> logits, int correct, int wrong);

/// Which activations survive an ablated forward pass. Empty vectors mean
/// "keep everything" at that granularity.
struct Ablation {
  /// keep_embedding[l][j] for l in 1..L (index 0 unused: inputs are always kept).
  std::vector<std::vector<char>> keep_embedding;
  /// keep_head[l][j][k], keep_skip[l][j] for l in 1..L.
  std::vector<std::vector<std::vector<char>>> keep_head;
  std::vector<std::vector<char>> keep_skip;
};

/// Anything that can be traced by the influence machinery: given one input
/// vector per position, it records a tape that carries at least the markers
/// "x/j", "h/l/j" (l = 1..layers) and "qoi". Attention-level tracing also
/// requires "a/l/j/k" and "s/l/j".
class Traceable {
 public:
  virtual ~Traceable() = default;
  virtual Tape trace(std::span<const Tensor> inputs, std::span<const char> padding, const Qoi& qoi,
                     Precision precision = Precision::float64) const = 0;
  virtual int layers() const = 0;
  virtual int heads() const = 0;
  virtual int width() const = 0;
};

struct ForwardOptions {
  std::optional<Qoi> qoi;
  const Ablation* ablation = nullptr;
  Precision precision = Precision::float64;
};

struct ForwardResult {
  Tape tape;
  Tensor logits;  // [N, V]
  std::optional<double> qoi;
};

/// Post-norm BERT-style masked LM:
///   r_j   = h^{l-1}_j (+ position embedding at layer 1)
///   a^k_j = softmax_i(q^k_j . k^k_i / sqrt(dh)) v^k_i
///   u_j   = LN(s_j + W_O concat_k a^k_j + b_O),  s_j = copy(r_j)
///   h^l_j = LN(u_j + W_2 gelu(W_1 u_j + b_1) + b_2)
///   y_j   = W_out h^L_j + b_out
class ToyTransformer : public Traceable {
 public:
  enum class Init { random, zeros };

  explicit ToyTransformer(ModelConfig config, Init init = Init::random);

  const ModelConfig& config() const { return config_; }

  /// Forward pass from token ids. Token embeddings are recorded with
  /// embedding lookups so the tape supports parameter gradients.
  ForwardResult forward(std::span<const int> tokens, const ForwardOptions& options = {}) const;
  /// Forward pass from explicit input embeddings (one H-vector per position).
  /// `padding` may be empty (no padding) or hold one flag per position.
  ForwardResult forward_embeddings(std::span<const Tensor> inputs, std::span<const char> padding,
                                   const ForwardOptions& options = {}) const;

  Tape trace(std::span<const Tensor> inputs, std::span<const char> padding, const Qoi& qoi,
             Precision precision = Precision::float64) const override;
  int layers() const override { return config_.layers; }
  int heads() const override { return config_.heads; }
  int width() const override { return config_.hidden; }

  /// Token embedding rows for `tokens` (no positional part).
  std::vector<Tensor> embed(std::span<const int> tokens) const;
  Tensor token_embedding(int token) const;

  /// All parameters in a fixed order; gradient slots use the same order.
  std::vector<Tensor*> parameters();
  std::vector<const Tensor*> parameters() const;
  std::vector<std::string> parameter_names() const;

  struct LayerValues {
    std::vector<Tensor> output;               // h^l_j
    std::vector<std::vector<Tensor>> heads;   // heads[j][k] = a^{l,k}_j
    std::vector<Tensor> skips;                // s^l_j
  };
  /// Layer `layer` (1-based) applied to explicit layer-(l-1) embeddings. At
  /// layer 1 `previous` are token embeddings and the position embedding is
  /// added inside.
  LayerValues apply_layer(int layer, std::span<const Tensor> previous, std::span<const char> padding = {}) const;
  /// h^l_j from its head outputs and skip value.
  Tensor combine_heads(int layer, std::span<const Tensor> heads, const Tensor& skip) const;
  /// Output projection of one top-layer embedding.
  Tensor output_logits(const Tensor& top) const;

  /// Binary checkpoint; layout documented in docs/formats.md.
  void save(const std::filesystem::path& path) const;
  static ToyTransformer load(const std::filesystem::path& path);

  bool operator==(const ToyTransformer& other) const;

 private:
  enum LayerParam : std::size_t { wq, bq, wk, bk, wv, bv, wo, bo, ln1_g, ln1_b, w1, b1, w2, b2, ln2_g, ln2_b, kLayerParams };
  using Layer = std::array<Tensor, kLayerParams>;

  std::vector<VarId> encode(Tape& tape, std::vector<VarId> inputs, std::span<const char> padding,
                            const Ablation* ablation, int first_layer, int last_layer) const;
  VarId combine(Tape& tape, std::size_t layer, std::span<const VarId> heads, VarId skip) const;
  ParamRef layer_ref(std::size_t layer, LayerParam which) const;
  int output_slot() const { return 2 + config_.layers * static_cast<int>(kLayerParams); }
  const Tensor& output_weight() const { return config_.tied_output ? token_emb_ : out_w_; }
  ParamRef output_ref() const {
    return config_.tied_output ? ParamRef{&token_emb_, 0} : ParamRef{&out_w_, output_slot()};
  }
  void check_tokens(std::span<const int> tokens) const;
  void initialize(Init init);

  ModelConfig config_;
  Tensor token_emb_;  // [V, H]
  Tensor pos_emb_;    // [N_max, H]
  std::vector<Layer> layers_;
  Tensor out_w_;  // [V, H] (unused when tied)
  Tensor out_b_;  // [V]
};

/// Straight-line interpolation x_b + alpha (x_i - x_b) applied to the listed
/// positions; all other positions are returned unchanged.
std::vector<Tensor> interpolate_input(std::span<const Tensor> embeddings, const Tensor& baseline,
                                      std::span<const int> positions, double alpha);

/// Per-layer attention probabilities captured from a tape produced by
/// ToyTransformer: result[l-1][k] is an N x N matrix M with M[i][j] the weight
/// query position j puts on key position i (columns sum to one).
std::vector<std::vector<Tensor>> attention_probabilities(const Tape& tape, int layers, int heads, int positions,
                                                         std::span<const char> padding = {});

}  // namespace ipat

template <>
struct std::hash<ipat::NodeId> {
  std::size_t operator()(const ipat::NodeId& n) const noexcept {
    return (static_cast<std::size_t>(n.kind) << 48) ^ (static_cast<std::size_t>(n.layer) << 32) ^
           (static_cast<std::size_t>(n.position) << 16) ^ static_cast<std::size_t>(n.head);
  }
};
