#include "ipat/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>

namespace ipat {

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

std::span<const double> param_row(const ParamRef& p, std::size_t row, std::size_t width) {
  return p.tensor->data().subspan(row * width, width);
}

void accumulate(std::vector<double>& slot, std::span<const double> g, double factor = 1.0) {
  if (slot.empty()) slot.assign(g.size(), 0.0);
  for (std::size_t i = 0; i < g.size(); ++i) slot[i] += factor * g[i];
}

std::vector<double>& ensure(std::vector<double>& slot, std::size_t n) {
  if (slot.empty()) slot.assign(n, 0.0);
  return slot;
}

}  // namespace

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::add: return "add";
    case OpKind::add_param_row: return "add_param_row";
    case OpKind::copy: return "copy";
    case OpKind::scale: return "scale";
    case OpKind::mul: return "mul";
    case OpKind::linear: return "linear";
    case OpKind::concat: return "concat";
    case OpKind::scaled_dots: return "scaled_dots";
    case OpKind::softmax: return "softmax";
    case OpKind::weighted_sum: return "weighted_sum";
    case OpKind::layer_norm: return "layer_norm";
    case OpKind::gelu: return "gelu";
    case OpKind::tanh: return "tanh";
    case OpKind::embedding: return "embedding";
    case OpKind::zero: return "zero";
    case OpKind::linear_combo: return "linear_combo";
  }
  return "?";
}

Precision parse_precision(std::string_view name) {
  if (name == "float64" || name == "f64" || name == "double") return Precision::float64;
  if (name == "float32" || name == "f32" || name == "float") return Precision::float32;
  throw Error("unknown precision '" + std::string(name) + "' (expected float64 or float32)");
}

Precision default_precision() {
  const char* env = std::getenv("IPAT_PRECISION");
  if (env == nullptr || *env == '\0') return Precision::float64;
  return parse_precision(env);
}

VarId Tape::push(Op op, Tensor value) {
  if (precision_ == Precision::float32) {
    for (double& v : value.data()) v = static_cast<double>(static_cast<float>(v));
  }
  if (!value.all_finite()) {
    std::string where = marker_order_.empty() ? std::string("<start>") : marker_order_.back().first;
    throw NumericsError("non-finite value produced by " + std::string(op_name(op.kind)) + " after node '" +
                        where + "'");
  }
  ops_.push_back(std::move(op));
  values_.push_back(std::move(value));
  return static_cast<VarId>(values_.size() - 1);
}

void Tape::check(VarId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= values_.size()) {
    throw Error("variable id " + std::to_string(id) + " is not on the tape");
  }
}

const Tensor& Tape::value(VarId id) const {
  check(id);
  return values_[static_cast<std::size_t>(id)];
}

VarId Tape::leaf(Tensor value) { return push(Op{}, std::move(value)); }

VarId Tape::add(VarId a, VarId b) {
  const Tensor& x = value(a);
  const Tensor& y = value(b);
  if (x.size() != y.size()) throw ShapeError("add: size mismatch");
  Tensor out = x;
  axpy(1.0, y.data(), out.data());
  Op op;
  op.kind = OpKind::add;
  op.in = {a, b};
  return push(std::move(op), std::move(out));
}

VarId Tape::add_param_row(VarId a, ParamRef table, std::size_t row) {
  Tensor out = value(a);
  const std::size_t width = out.size();
  if (table.tensor->cols() != width) throw ShapeError("add_param_row: width mismatch");
  axpy(1.0, param_row(table, row, width), out.data());
  Op op;
  op.kind = OpKind::add_param_row;
  op.in = {a};
  op.w = table;
  op.row0 = row;
  return push(std::move(op), std::move(out));
}

VarId Tape::copy(VarId a) {
  Tensor out = value(a);
  Op op;
  op.kind = OpKind::copy;
  op.in = {a};
  return push(std::move(op), std::move(out));
}

VarId Tape::scale(VarId a, double factor) {
  Tensor out = value(a);
  for (double& v : out.data()) v *= factor;
  Op op;
  op.kind = OpKind::scale;
  op.in = {a};
  op.scalar = factor;
  return push(std::move(op), std::move(out));
}

VarId Tape::mul(VarId a, VarId b) {
  const Tensor& x = value(a);
  const Tensor& y = value(b);
  if (x.size() != y.size()) throw ShapeError("mul: size mismatch");
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= y[i];
  Op op;
  op.kind = OpKind::mul;
  op.in = {a, b};
  return push(std::move(op), std::move(out));
}

VarId Tape::linear(VarId x, ParamRef weight, ParamRef bias, std::size_t row0, std::size_t rows) {
  const Tensor& in = value(x);
  const Tensor& w = *weight.tensor;
  if (w.rank() != 2 || w.cols() != in.size()) {
    throw ShapeError("linear: weight " + shape_string(w.shape()) + " incompatible with input of size " +
                     std::to_string(in.size()));
  }
  if (rows == 0) rows = w.rows() - row0;
  if (row0 + rows > w.rows()) throw ShapeError("linear: row window out of range");
  Tensor out({rows});
  for (std::size_t r = 0; r < rows; ++r) {
    out[r] = dot(w.row(row0 + r), in.data());
    if (bias.tensor != nullptr) out[r] += (*bias.tensor)[row0 + r];
  }
  Op op;
  op.kind = OpKind::linear;
  op.in = {x};
  op.w = weight;
  op.b = bias;
  op.row0 = row0;
  op.rows = rows;
  return push(std::move(op), std::move(out));
}

VarId Tape::concat(std::span<const VarId> parts) {
  std::vector<double> data;
  for (VarId p : parts) {
    const Tensor& t = value(p);
    data.insert(data.end(), t.data().begin(), t.data().end());
  }
  Op op;
  op.kind = OpKind::concat;
  op.in.assign(parts.begin(), parts.end());
  return push(std::move(op), Tensor::vector(std::move(data)));
}

VarId Tape::scaled_dots(VarId q, std::span<const VarId> keys, double factor) {
  const Tensor& qv = value(q);
  Tensor out({keys.size()});
  for (std::size_t i = 0; i < keys.size(); ++i) {
    const Tensor& k = value(keys[i]);
    if (k.size() != qv.size()) throw ShapeError("scaled_dots: key size mismatch");
    out[i] = factor * dot(qv.data(), k.data());
  }
  Op op;
  op.kind = OpKind::scaled_dots;
  op.in.reserve(keys.size() + 1);
  op.in.push_back(q);
  op.in.insert(op.in.end(), keys.begin(), keys.end());
  op.scalar = factor;
  return push(std::move(op), std::move(out));
}

VarId Tape::softmax(VarId scores) {
  Tensor out = value(scores);
  double m = -INFINITY;
  for (double v : out.data()) m = std::max(m, v);
  double total = 0.0;
  for (double& v : out.data()) {
    v = std::exp(v - m);
    total += v;
  }
  for (double& v : out.data()) v /= total;
  Op op;
  op.kind = OpKind::softmax;
  op.in = {scores};
  return push(std::move(op), std::move(out));
}

VarId Tape::weighted_sum(VarId probs, std::span<const VarId> values) {
  const Tensor& p = value(probs);
  if (p.size() != values.size()) throw ShapeError("weighted_sum: weight count mismatch");
  if (values.empty()) throw ShapeError("weighted_sum: no values");
  Tensor out({value(values[0]).size()});
  for (std::size_t i = 0; i < values.size(); ++i) {
    const Tensor& v = value(values[i]);
    if (v.size() != out.size()) throw ShapeError("weighted_sum: value size mismatch");
    axpy(p[i], v.data(), out.data());
  }
  Op op;
  op.kind = OpKind::weighted_sum;
  op.in.reserve(values.size() + 1);
  op.in.push_back(probs);
  op.in.insert(op.in.end(), values.begin(), values.end());
  return push(std::move(op), std::move(out));
}

VarId Tape::layer_norm(VarId x, ParamRef gain, ParamRef shift, double eps) {
  const Tensor& in = value(x);
  const std::size_t n = in.size();
  double mean = 0.0;
  for (double v : in.data()) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double v : in.data()) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n);
  const double rstd = 1.0 / std::sqrt(var + eps);
  Tensor out({n});
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = (in[i] - mean) * rstd * (*gain.tensor)[i] + (*shift.tensor)[i];
  }
  Op op;
  op.kind = OpKind::layer_norm;
  op.in = {x};
  op.w = gain;
  op.b = shift;
  op.scalar = eps;
  op.saved = {mean, rstd};
  return push(std::move(op), std::move(out));
}

VarId Tape::gelu(VarId x) {
  Tensor out = value(x);
  for (double& v : out.data()) v = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
  Op op;
  op.kind = OpKind::gelu;
  op.in = {x};
  return push(std::move(op), std::move(out));
}

VarId Tape::tanh(VarId x) {
  Tensor out = value(x);
  for (double& v : out.data()) v = std::tanh(v);
  Op op;
  op.kind = OpKind::tanh;
  op.in = {x};
  return push(std::move(op), std::move(out));
}

VarId Tape::embedding(ParamRef table, std::size_t row) {
  if (row >= table.tensor->rows()) throw Error("embedding: row " + std::to_string(row) + " out of range");
  Tensor out = table.tensor->row_copy(row);
  Op op;
  op.kind = OpKind::embedding;
  op.w = table;
  op.row0 = row;
  return push(std::move(op), std::move(out));
}

VarId Tape::zero(VarId x) {
  Tensor out = Tensor::zeros_like(value(x));
  Op op;
  op.kind = OpKind::zero;
  op.in = {x};
  return push(std::move(op), std::move(out));
}

VarId Tape::linear_combo(VarId y, std::vector<std::pair<std::size_t, double>> terms) {
  const Tensor& in = value(y);
  double acc = 0.0;
  for (const auto& [index, coef] : terms) {
    if (index >= in.size()) throw Error("linear_combo: index out of range");
    acc += coef * in[index];
  }
  Op op;
  op.kind = OpKind::linear_combo;
  op.in = {y};
  op.terms = std::move(terms);
  return push(std::move(op), Tensor::vector({acc}));
}

void Tape::mark(std::string name, VarId id) {
  check(id);
  if (!values_[static_cast<std::size_t>(id)].all_finite()) {
    throw NumericsError("non-finite activation at node '" + name + "'");
  }
  auto [it, inserted] = markers_.emplace(name, id);
  if (!inserted) throw Error("marker '" + name + "' registered twice");
  marker_order_.emplace_back(std::move(name), id);
}

bool Tape::has_marker(std::string_view name) const { return markers_.contains(std::string(name)); }

VarId Tape::marker(std::string_view name) const {
  auto it = markers_.find(std::string(name));
  if (it == markers_.end()) throw Error("unknown node '" + std::string(name) + "'");
  return it->second;
}

Tensor Tape::vjp(std::string_view upper, std::string_view lower, const Tensor& cotangent) const {
  return vjp(marker(upper), marker(lower), cotangent);
}

Tensor Tape::vjp(VarId upper, VarId lower, const Tensor& cotangent) const {
  const VarId lowers[] = {lower};
  return std::move(vjp_many(upper, lowers, cotangent).front());
}

std::vector<Tensor> Tape::vjp_many(VarId upper, std::span<const VarId> lowers, const Tensor& cotangent) const {
  check(upper);
  if (cotangent.size() != values_[static_cast<std::size_t>(upper)].size()) {
    throw ShapeError("vjp: cotangent of size " + std::to_string(cotangent.size()) +
                     " does not match activation of size " +
                     std::to_string(values_[static_cast<std::size_t>(upper)].size()));
  }
  VarId lowest = upper;
  for (VarId l : lowers) {
    check(l);
    if (l >= upper) throw Error("vjp: lower node is not upstream of upper node");
    lowest = std::min(lowest, l);
  }

  // Forward reachability from the lower set restricts the sweep to ops that
  // lie on some path between the markers.
  const std::size_t span = static_cast<std::size_t>(upper - lowest) + 1;
  std::vector<char> reach(span, 0);
  for (VarId l : lowers) reach[static_cast<std::size_t>(l - lowest)] = 1;
  for (VarId id = lowest + 1; id <= upper; ++id) {
    char& r = reach[static_cast<std::size_t>(id - lowest)];
    if (r) continue;
    for (VarId in : ops_[static_cast<std::size_t>(id)].in) {
      if (in >= lowest && reach[static_cast<std::size_t>(in - lowest)]) {
        r = 1;
        break;
      }
    }
  }

  std::vector<std::vector<double>> adj(span);
  std::vector<Tensor> result;
  result.reserve(lowers.size());
  if (reach[span - 1]) {
    adj[span - 1].assign(cotangent.data().begin(), cotangent.data().end());
    for (VarId id = upper; id > lowest; --id) {
      const std::size_t slot = static_cast<std::size_t>(id - lowest);
      if (adj[slot].empty() || !reach[slot]) continue;
      backprop(ops_[static_cast<std::size_t>(id)], id, adj[slot], lowest, &reach, adj, {});
    }
  }
  for (VarId l : lowers) {
    const Tensor& shape_ref = values_[static_cast<std::size_t>(l)];
    std::vector<double>& a = adj[static_cast<std::size_t>(l - lowest)];
    if (a.empty()) {
      result.push_back(Tensor::zeros_like(shape_ref));
    } else {
      result.emplace_back(shape_ref.shape(), a);
    }
  }
  return result;
}

void Tape::backward(VarId root, const Tensor& seed, std::span<Tensor> param_grads) const {
  check(root);
  const std::size_t n = static_cast<std::size_t>(root) + 1;
  std::vector<std::vector<double>> adj(n);
  adj[n - 1].assign(seed.data().begin(), seed.data().end());
  for (VarId id = root; id >= 0; --id) {
    const std::size_t slot = static_cast<std::size_t>(id);
    if (adj[slot].empty()) continue;
    backprop(ops_[slot], id, adj[slot], 0, nullptr, adj, param_grads);
  }
}

void Tape::backprop(const Op& op, VarId out, std::span<const double> g, VarId lowest,
                    const std::vector<char>* reach, std::vector<std::vector<double>>& adj,
                    std::span<Tensor> param_grads) const {
  auto wants = [&](VarId in) {
    if (in < lowest) return false;
    return reach == nullptr || (*reach)[static_cast<std::size_t>(in - lowest)] != 0;
  };
  auto slot_of = [&](VarId in) -> std::vector<double>& { return adj[static_cast<std::size_t>(in - lowest)]; };
  auto grad_of = [&](const ParamRef& p) -> Tensor* {
    if (p.tensor == nullptr || p.slot < 0 || param_grads.empty()) return nullptr;
    return &param_grads[static_cast<std::size_t>(p.slot)];
  };
  const Tensor& y = values_[static_cast<std::size_t>(out)];

  switch (op.kind) {
    case OpKind::leaf:
    case OpKind::zero:
      break;
    case OpKind::add:
      for (VarId in : op.in) {
        if (wants(in)) accumulate(slot_of(in), g);
      }
      break;
    case OpKind::copy:
      if (wants(op.in[0])) accumulate(slot_of(op.in[0]), g);
      break;
    case OpKind::add_param_row:
      if (wants(op.in[0])) accumulate(slot_of(op.in[0]), g);
      if (Tensor* pg = grad_of(op.w)) axpy(1.0, g, pg->row(op.row0));
      break;
    case OpKind::embedding:
      if (Tensor* pg = grad_of(op.w)) axpy(1.0, g, pg->row(op.row0));
      break;
    case OpKind::scale:
      if (wants(op.in[0])) accumulate(slot_of(op.in[0]), g, op.scalar);
      break;
    case OpKind::mul: {
      const Tensor& a = values_[static_cast<std::size_t>(op.in[0])];
      const Tensor& b = values_[static_cast<std::size_t>(op.in[1])];
      if (wants(op.in[0])) {
        auto& s = ensure(slot_of(op.in[0]), g.size());
        for (std::size_t i = 0; i < g.size(); ++i) s[i] += g[i] * b[i];
      }
      if (wants(op.in[1])) {
        auto& s = ensure(slot_of(op.in[1]), g.size());
        for (std::size_t i = 0; i < g.size(); ++i) s[i] += g[i] * a[i];
      }
      break;
    }
    case OpKind::linear: {
      const Tensor& w = *op.w.tensor;
      const Tensor& x = values_[static_cast<std::size_t>(op.in[0])];
      if (wants(op.in[0])) {
        auto& s = ensure(slot_of(op.in[0]), x.size());
        for (std::size_t r = 0; r < op.rows; ++r) axpy(g[r], w.row(op.row0 + r), s);
      }
      if (Tensor* pw = grad_of(op.w)) {
        for (std::size_t r = 0; r < op.rows; ++r) axpy(g[r], x.data(), pw->row(op.row0 + r));
      }
      if (Tensor* pb = grad_of(op.b)) {
        for (std::size_t r = 0; r < op.rows; ++r) (*pb)[op.row0 + r] += g[r];
      }
      break;
    }
    case OpKind::concat: {
      std::size_t offset = 0;
      for (VarId in : op.in) {
        const std::size_t n = values_[static_cast<std::size_t>(in)].size();
        if (wants(in)) accumulate(slot_of(in), g.subspan(offset, n));
        offset += n;
      }
      break;
    }
    case OpKind::scaled_dots: {
      const VarId qid = op.in[0];
      const Tensor& q = values_[static_cast<std::size_t>(qid)];
      const bool want_q = wants(qid);
      for (std::size_t i = 0; i + 1 < op.in.size(); ++i) {
        const VarId kid = op.in[i + 1];
        const Tensor& k = values_[static_cast<std::size_t>(kid)];
        const double gi = g[i] * op.scalar;
        if (gi == 0.0) continue;
        if (want_q) axpy(gi, k.data(), ensure(slot_of(qid), q.size()));
        if (wants(kid)) axpy(gi, q.data(), ensure(slot_of(kid), k.size()));
      }
      break;
    }
    case OpKind::softmax: {
      if (!wants(op.in[0])) break;
      const double pg = dot(y.data(), g);
      auto& s = ensure(slot_of(op.in[0]), y.size());
      for (std::size_t i = 0; i < y.size(); ++i) s[i] += y[i] * (g[i] - pg);
      break;
    }
    case OpKind::weighted_sum: {
      const VarId pid = op.in[0];
      const Tensor& p = values_[static_cast<std::size_t>(pid)];
      const bool want_p = wants(pid);
      for (std::size_t i = 0; i + 1 < op.in.size(); ++i) {
        const VarId vid = op.in[i + 1];
        const Tensor& v = values_[static_cast<std::size_t>(vid)];
        if (want_p) ensure(slot_of(pid), p.size())[i] += dot(g, v.data());
        if (wants(vid)) axpy(p[i], g, ensure(slot_of(vid), v.size()));
      }
      break;
    }
    case OpKind::layer_norm: {
      const Tensor& x = values_[static_cast<std::size_t>(op.in[0])];
      const Tensor& gain = *op.w.tensor;
      const double mean = op.saved[0];
      const double rstd = op.saved[1];
      const std::size_t n = x.size();
      Tensor* pg = grad_of(op.w);
      Tensor* pb = grad_of(op.b);
      double mean_gh = 0.0;
      double mean_ghx = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double xhat = (x[i] - mean) * rstd;
        const double gh = g[i] * gain[i];
        mean_gh += gh;
        mean_ghx += gh * xhat;
        if (pg) (*pg)[i] += g[i] * xhat;
        if (pb) (*pb)[i] += g[i];
      }
      mean_gh /= static_cast<double>(n);
      mean_ghx /= static_cast<double>(n);
      if (wants(op.in[0])) {
        auto& s = ensure(slot_of(op.in[0]), n);
        for (std::size_t i = 0; i < n; ++i) {
          const double xhat = (x[i] - mean) * rstd;
          s[i] += rstd * (g[i] * gain[i] - mean_gh - xhat * mean_ghx);
        }
      }
      break;
    }
    case OpKind::gelu: {
      if (!wants(op.in[0])) break;
      const Tensor& x = values_[static_cast<std::size_t>(op.in[0])];
      auto& s = ensure(slot_of(op.in[0]), x.size());
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double v = x[i];
        const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
        const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
        s[i] += g[i] * d;
      }
      break;
    }
    case OpKind::tanh: {
      if (!wants(op.in[0])) break;
      auto& s = ensure(slot_of(op.in[0]), y.size());
      for (std::size_t i = 0; i < y.size(); ++i) s[i] += g[i] * (1.0 - y[i] * y[i]);
      break;
    }
    case OpKind::linear_combo: {
      if (!wants(op.in[0])) break;
      auto& s = ensure(slot_of(op.in[0]), values_[static_cast<std::size_t>(op.in[0])].size());
      for (const auto& [index, coef] : op.terms) s[index] += coef * g[0];
      break;
    }
  }
}

std::pair<Tensor, Tape> forward_taped(const TapedFunction& model, const Tensor& input, Precision precision) {
  if (!input.all_finite()) throw NumericsError("forward_taped: non-finite input");
  Tape tape(precision);
  const VarId x = tape.leaf(input);
  tape.mark("input", x);
  const VarId y = model(tape, x);
  tape.mark("output", y);
  Tensor out = tape.value(y);
  return {std::move(out), std::move(tape)};
}

Tensor finite_difference_jacobian(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double step) {
  if (!(step > 0.0)) throw Error("finite_difference_jacobian: step must be positive");
  const Tensor y0 = f(x);
  Tensor jac({y0.size(), x.size()});
  Tensor probe = x;
  for (std::size_t c = 0; c < x.size(); ++c) {
    probe[c] = x[c] + step;
    const Tensor plus = f(probe);
    probe[c] = x[c] - step;
    const Tensor minus = f(probe);
    probe[c] = x[c];
    if (!plus.all_finite() || !minus.all_finite()) throw NumericsError("finite_difference_jacobian: non-finite f");
    for (std::size_t r = 0; r < y0.size(); ++r) jac.at(r, c) = (plus[r] - minus[r]) / (2.0 * step);
  }
  return jac;
}

}  // namespace ipat
