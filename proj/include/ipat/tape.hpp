#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ipat/tensor.hpp"

namespace ipat {

using VarId = std::int32_t;

enum class Precision { float64, float32 };

/// Reads IPAT_PRECISION ("float64" or "float32"); float64 when unset.
Precision default_precision();
Precision parse_precision(std::string_view name);

/// A model parameter referenced by an op. `slot` indexes the gradient buffer
/// passed to Tape::backward; -1 means "constant, never differentiated".
struct ParamRef {
  const Tensor* tensor = nullptr;
  int slot = -1;
};

enum class OpKind : std::uint8_t {
  leaf,
  add,
  add_param_row,
  copy,
  scale,
  mul,
  linear,
  concat,
  scaled_dots,
  softmax,
  weighted_sum,
  layer_norm,
  gelu,
  tanh,
  embedding,
  zero,
  linear_combo,
};

std::string_view op_name(OpKind kind);

/// Records a forward evaluation on per-node vectors so that reverse-mode
/// products can be replayed between any two recorded variables.
///
/// Every op produces exactly one variable and variables are numbered in
/// creation order, so VarId doubles as a topological index. Named markers
/// ("cut points") are attached with mark(). After recording is finished the
/// tape is only read; vjp() and vjp_many() keep all scratch state local and
/// may be called concurrently on the same tape.
class Tape {
 public:
  explicit Tape(Precision precision = Precision::float64) : precision_(precision) {}

  // Recording.
  VarId leaf(Tensor value);
  VarId add(VarId a, VarId b);
  /// a + table[row]
  VarId add_param_row(VarId a, ParamRef table, std::size_t row);
  VarId copy(VarId a);
  VarId scale(VarId a, double factor);
  VarId mul(VarId a, VarId b);
  /// y = W[row0 : row0+rows] x + b[row0 : row0+rows]; rows == 0 means all rows.
  VarId linear(VarId x, ParamRef weight, ParamRef bias, std::size_t row0 = 0, std::size_t rows = 0);
  VarId concat(std::span<const VarId> parts);
  /// y_i = factor * <q, k_i>
  VarId scaled_dots(VarId q, std::span<const VarId> keys, double factor);
  VarId softmax(VarId scores);
  /// y = sum_i p_i v_i
  VarId weighted_sum(VarId probs, std::span<const VarId> values);
  VarId layer_norm(VarId x, ParamRef gain, ParamRef shift, double eps = 1e-5);
  /// tanh approximation of GELU
  VarId gelu(VarId x);
  VarId tanh(VarId x);
  VarId embedding(ParamRef table, std::size_t row);
  /// Output of the same shape filled with zeros; blocks all gradient.
  VarId zero(VarId x);
  /// Scalar sum_t coef_t * y[index_t].
  VarId linear_combo(VarId y, std::vector<std::pair<std::size_t, double>> terms);

  void mark(std::string name, VarId id);
  bool has_marker(std::string_view name) const;
  VarId marker(std::string_view name) const;
  const std::vector<std::pair<std::string, VarId>>& markers() const { return marker_order_; }

  const Tensor& value(VarId id) const;
  const Tensor& value(std::string_view name) const { return value(marker(name)); }
  std::size_t size() const { return values_.size(); }
  OpKind kind(VarId id) const { return ops_[static_cast<std::size_t>(id)].kind; }
  Precision precision() const { return precision_; }

  /// cotangent^T * d(upper)/d(lower), summed over every recorded path between
  /// the two variables. Other markers on the way are not cut.
  Tensor vjp(VarId upper, VarId lower, const Tensor& cotangent) const;
  Tensor vjp(std::string_view upper, std::string_view lower, const Tensor& cotangent) const;
  /// Same as vjp() for several lower variables at once, sharing one sweep.
  std::vector<Tensor> vjp_many(VarId upper, std::span<const VarId> lowers, const Tensor& cotangent) const;

  /// Full reverse sweep from `root`, accumulating parameter gradients into
  /// `param_grads[slot]` (which must already have the parameter shapes).
  void backward(VarId root, const Tensor& seed, std::span<Tensor> param_grads) const;

 private:
  struct Op {
    OpKind kind = OpKind::leaf;
    std::vector<VarId> in;
    ParamRef w;
    ParamRef b;
    std::size_t row0 = 0;
    std::size_t rows = 0;
    double scalar = 0.0;
    std::vector<std::pair<std::size_t, double>> terms;
    std::vector<double> saved;
  };

  VarId push(Op op, Tensor value);
  void check(VarId id) const;
  void backprop(const Op& op, VarId out, std::span<const double> g, VarId lowest, const std::vector<char>* reach,
                std::vector<std::vector<double>>& adj, std::span<Tensor> param_grads) const;

  Precision precision_;
  std::vector<Op> ops_;
  std::vector<Tensor> values_;
  std::unordered_map<std::string, VarId> markers_;
  std::vector<std::pair<std::string, VarId>> marker_order_;
};

using TapedFunction = std::function<VarId(Tape&, VarId)>;

/// Runs `model` on a fresh tape whose single leaf is `input` (marked "input");
/// the returned variable is marked "output".
std::pair<Tensor, Tape> forward_taped(const TapedFunction& model, const Tensor& input,
                                      Precision precision = Precision::float64);

/// Central differences: column c of the result is (f(x + h e_c) - f(x - h e_c)) / 2h.
/// Result shape is [f(x).size(), x.size()].
Tensor finite_difference_jacobian(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double step);

}  // namespace ipat
