#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace dupmn {

using Shape = std::vector<std::size_t>;

class DimensionError : public std::runtime_error {
 public:
  explicit DimensionError(const std::string& what) : std::runtime_error(what) {}
};

class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (const std::size_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Whether newly built ops record the graph. Thread-local: each computation
/// graph is confined to one thread.
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  NoGradGuard() : prev_(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

enum class Op : std::uint8_t {
  kLeaf,
  kAdd,
  kMul,
  kScale,
  kSMul,
  kPick,
  kMatMul,
  kMatVec,
  kTMatVec,
  kDot,
  kSum,
  kTanh,
  kSigmoid,
  kSoftmax,
  kCrossEntropy,
  kRow,
  kSlice,
  kStack,
  kStackCols,
  kLstmCell,
  kAttnScore,
};

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until the backward pass touches it
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::vector<double> saved;  // op cache (softmax probabilities for kCrossEntropy)
  Op op = Op::kLeaf;
  std::size_t aux = 0;     // class label / picked index / row index
  double factor = 1.0;     // kScale multiplier
  bool requires_grad = false;

  std::size_t size() const { return data.size(); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

/// Dense row-major tensor of doubles with optional gradient tracking.
/// Values are immutable once built except through the explicit training
/// mutators; gradient buffers are the only other mutable state.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return from_data(std::move(shape), {}, requires_grad, 0.0);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    return from_data(std::move(shape), {}, requires_grad, value);
  }

  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (numel(shape) != data.size()) {
      throw DimensionError("tensor: shape " + shape_str(shape) + " does not match " +
                           std::to_string(data.size()) + " values");
    }
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return from({1}, {value}, requires_grad);
  }

  static Tensor identity(std::size_t n) {
    std::vector<double> data(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) data[i * n + i] = 1.0;
    return from({n, n}, std::move(data));
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node()->shape; }
  std::size_t ndim() const { return node()->shape.size(); }
  std::size_t size() const { return node()->data.size(); }
  std::size_t rows() const { return node()->shape.at(0); }
  std::size_t cols() const { return node()->shape.at(1); }

  const std::vector<double>& values() const { return node()->data; }
  double at(std::size_t i) const { return node()->data.at(i); }
  double at(std::size_t i, std::size_t j) const {
    return node()->data.at(i * cols() + j);
  }

  double value() const {
    if (size() != 1) {
      throw DimensionError("value(): tensor is not scalar, shape " + shape_str(shape()));
    }
    return node()->data[0];
  }

  bool requires_grad() const { return node()->requires_grad; }

  bool has_grad() const { return !node()->grad.empty(); }
  const std::vector<double>& grad() const {
    if (node()->grad.empty()) throw NumericError("grad(): no gradient has been computed");
    return node()->grad;
  }

  /// Training mutators. Parameter updates happen through these; everything
  /// else treats tensor values as immutable.
  std::vector<double>& mutable_values() { return node()->data; }
  std::vector<double>& mutable_grad() {
    node()->ensure_grad();
    return node()->grad;
  }
  void zero_grad() {
    if (!node()->grad.empty()) node()->grad.assign(node()->data.size(), 0.0);
  }

  /// Leaf copy of the current values; grad history is not carried over.
  Tensor detached_copy() const {
    return from(shape(), values(), requires_grad());
  }

  std::shared_ptr<TensorNode> node_ptr() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad,
                          double fill) {
    auto node = std::make_shared<TensorNode>();
    node->data.assign(numel(shape), fill);
    if (!data.empty()) node->data = std::move(data);
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  TensorNode* node() const {
    if (!node_) throw NumericError("use of an undefined tensor");
    return node_.get();
  }

  std::shared_ptr<TensorNode> node_;

  friend Tensor make_op(Shape shape, std::vector<double> data, Op op,
                        std::initializer_list<Tensor> parents, std::size_t aux,
                        double factor, std::vector<double> saved);
  friend Tensor make_op_vec(Shape shape, std::vector<double> data, Op op,
                            const std::vector<Tensor>& parents, std::vector<double> saved);
};

inline Tensor make_op(Shape shape, std::vector<double> data, Op op,
                      std::initializer_list<Tensor> parents, std::size_t aux = 0,
                      double factor = 1.0, std::vector<double> saved = {}) {
  bool track = grad_mode();
  if (track) {
    track = false;
    for (const Tensor& p : parents) {
      if (p.requires_grad()) {
        track = true;
        break;
      }
    }
  }
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  if (track) {
    node->op = op;
    node->aux = aux;
    node->factor = factor;
    node->saved = std::move(saved);
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (const Tensor& p : parents) node->parents.push_back(p.node_ptr());
  }
  struct Access : Tensor {
    explicit Access(std::shared_ptr<TensorNode> n) : Tensor(std::move(n)) {}
  };
  return Access(std::move(node));
}

inline Tensor make_op_vec(Shape shape, std::vector<double> data, Op op,
                          const std::vector<Tensor>& parents, std::vector<double> saved = {}) {
  bool track = grad_mode();
  if (track) {
    track = false;
    for (const Tensor& p : parents) {
      if (p.requires_grad()) {
        track = true;
        break;
      }
    }
  }
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  if (track) {
    node->op = op;
    node->requires_grad = true;
    node->saved = std::move(saved);
    node->parents.reserve(parents.size());
    for (const Tensor& p : parents) node->parents.push_back(p.node_ptr());
  }
  struct Access : Tensor {
    explicit Access(std::shared_ptr<TensorNode> n) : Tensor(std::move(n)) {}
  };
  return Access(std::move(node));
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": shapes disagree, " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  const auto& x = a.values();
  const auto& y = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return make_op(a.shape(), std::move(out), Op::kAdd, {a, b});
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  const auto& x = a.values();
  const auto& y = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return make_op(a.shape(), std::move(out), Op::kMul, {a, b});
}

inline Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.size());
  const auto& x = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = factor * x[i];
  return make_op(a.shape(), std::move(out), Op::kScale, {a}, 0, factor);
}

/// Product of a scalar tensor and an arbitrary tensor; both sides get grads.
inline Tensor smul(const Tensor& s, const Tensor& x) {
  if (s.size() != 1) {
    throw DimensionError("smul: first operand must be scalar, got " + shape_str(s.shape()));
  }
  const double f = s.values()[0];
  std::vector<double> out(x.size());
  const auto& v = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f * v[i];
  return make_op(x.shape(), std::move(out), Op::kSMul, {s, x});
}

inline Tensor pick(const Tensor& v, std::size_t index) {
  if (v.ndim() != 1) throw DimensionError("pick: expected a vector, got " + shape_str(v.shape()));
  if (index >= v.size()) {
    throw std::out_of_range("pick: index " + std::to_string(index) + " out of range " +
                            std::to_string(v.size()));
  }
  return make_op({1}, {v.at(index)}, Op::kPick, {v}, index);
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows()) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  const std::size_t r = a.rows(), s = a.cols(), t = b.cols();
  std::vector<double> out(r * t, 0.0);
  const auto& x = a.values();
  const auto& y = b.values();
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t k = 0; k < s; ++k) {
      const double xik = x[i * s + k];
      for (std::size_t j = 0; j < t; ++j) out[i * t + j] += xik * y[k * t + j];
    }
  }
  return make_op({r, t}, std::move(out), Op::kMatMul, {a, b});
}

inline Tensor matvec(const Tensor& a, const Tensor& x) {
  if (a.ndim() != 2 || x.ndim() != 1 || a.cols() != x.size()) {
    throw DimensionError("matvec: incompatible shapes " + shape_str(a.shape()) + " vs " +
                         shape_str(x.shape()));
  }
  const std::size_t r = a.rows(), s = a.cols();
  std::vector<double> out(r, 0.0);
  const auto& m = a.values();
  const auto& v = x.values();
  for (std::size_t i = 0; i < r; ++i) {
    double acc = 0.0;
    const double* rowp = m.data() + i * s;
    for (std::size_t j = 0; j < s; ++j) acc += rowp[j] * v[j];
    out[i] = acc;
  }
  return make_op({r}, std::move(out), Op::kMatVec, {a, x});
}

/// y = Aᵀx without materializing the transpose.
inline Tensor tmatvec(const Tensor& a, const Tensor& x) {
  if (a.ndim() != 2 || x.ndim() != 1 || a.rows() != x.size()) {
    throw DimensionError("tmatvec: incompatible shapes " + shape_str(a.shape()) + " vs " +
                         shape_str(x.shape()));
  }
  const std::size_t r = a.rows(), s = a.cols();
  std::vector<double> out(s, 0.0);
  const auto& m = a.values();
  const auto& v = x.values();
  for (std::size_t i = 0; i < r; ++i) {
    const double vi = v[i];
    const double* rowp = m.data() + i * s;
    for (std::size_t j = 0; j < s; ++j) out[j] += rowp[j] * vi;
  }
  return make_op({s}, std::move(out), Op::kTMatVec, {a, x});
}

inline Tensor dot(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 1 || b.ndim() != 1) {
    throw DimensionError("dot: expected vectors, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  check_same_shape(a, b, "dot");
  double acc = 0.0;
  const auto& x = a.values();
  const auto& y = b.values();
  for (std::size_t i = 0; i < x.size(); ++i) acc += x[i] * y[i];
  return make_op({1}, {acc}, Op::kDot, {a, b});
}

inline Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (const double v : a.values()) acc += v;
  return make_op({1}, {acc}, Op::kSum, {a});
}

inline Tensor tanh(const Tensor& a) {
  std::vector<double> out(a.size());
  const auto& x = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(x[i]);
  return make_op(a.shape(), std::move(out), Op::kTanh, {a});
}

inline Tensor sigmoid(const Tensor& a) {
  std::vector<double> out(a.size());
  const auto& x = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-x[i]));
  return make_op(a.shape(), std::move(out), Op::kSigmoid, {a});
}

/// Max-subtracted softmax over a vector.
inline Tensor softmax(const Tensor& a) {
  if (a.ndim() != 1 || a.size() == 0) {
    throw DimensionError("softmax: expected a nonempty vector, got " + shape_str(a.shape()));
  }
  const auto& x = a.values();
  double max = x[0];
  for (const double v : x) {
    if (!std::isfinite(v)) throw NumericError("softmax: non-finite input");
    if (v > max) max = v;
  }
  std::vector<double> out(x.size());
  double denom = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = std::exp(x[i] - max);
    denom += out[i];
  }
  for (double& v : out) v /= denom;
  return make_op(a.shape(), std::move(out), Op::kSoftmax, {a});
}

/// −log softmax(logits)[label], computed as logsumexp(logits) − logits[label].
inline Tensor cross_entropy(const Tensor& logits, std::size_t label) {
  if (logits.ndim() != 1 || logits.size() == 0) {
    throw DimensionError("cross_entropy: expected a nonempty logit vector, got " +
                         shape_str(logits.shape()));
  }
  if (label >= logits.size()) {
    throw std::out_of_range("cross_entropy: label " + std::to_string(label) +
                            " out of range for " + std::to_string(logits.size()) + " classes");
  }
  const auto& x = logits.values();
  double max = x[0];
  for (const double v : x) {
    if (v > max) max = v;
  }
  std::vector<double> probs(x.size());
  double denom = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probs[i] = std::exp(x[i] - max);
    denom += probs[i];
  }
  for (double& p : probs) p /= denom;
  const double loss = std::log(denom) + max - x[label];
  return make_op({1}, {loss}, Op::kCrossEntropy, {logits}, label, 1.0, std::move(probs));
}

inline Tensor slice(const Tensor& v, std::size_t offset, std::size_t length) {
  if (v.ndim() != 1 || offset + length > v.size()) {
    throw DimensionError("slice: [" + std::to_string(offset) + ", " +
                         std::to_string(offset + length) + ") out of range for " +
                         shape_str(v.shape()));
  }
  const auto& x = v.values();
  std::vector<double> out(x.begin() + offset, x.begin() + offset + length);
  return make_op({length}, std::move(out), Op::kSlice, {v}, offset);
}

inline Tensor row(const Tensor& table, std::size_t r) {
  if (table.ndim() != 2) {
    throw DimensionError("row: expected a matrix, got " + shape_str(table.shape()));
  }
  if (r >= table.rows()) {
    throw std::out_of_range("row: index " + std::to_string(r) + " out of range " +
                            std::to_string(table.rows()));
  }
  const std::size_t c = table.cols();
  const auto& m = table.values();
  std::vector<double> out(m.begin() + r * c, m.begin() + (r + 1) * c);
  return make_op({c}, std::move(out), Op::kRow, {table}, r);
}

/// Stacks scalar tensors into a vector.
inline Tensor stack(const std::vector<Tensor>& scalars) {
  if (scalars.empty()) throw DimensionError("stack: no inputs");
  std::vector<double> out(scalars.size());
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    if (scalars[i].size() != 1) {
      throw DimensionError("stack: input " + std::to_string(i) + " is not scalar");
    }
    out[i] = scalars[i].values()[0];
  }
  return make_op_vec({scalars.size()}, std::move(out), Op::kStack, scalars);
}

/// Stacks equal-length vectors as the columns of a matrix.
inline Tensor stack_cols(const std::vector<Tensor>& vecs) {
  if (vecs.empty()) throw DimensionError("stack_cols: no inputs");
  const std::size_t n = vecs[0].size();
  const std::size_t k = vecs.size();
  std::vector<double> out(n * k);
  for (std::size_t j = 0; j < k; ++j) {
    if (vecs[j].ndim() != 1 || vecs[j].size() != n) {
      throw DimensionError("stack_cols: input " + std::to_string(j) + " has shape " +
                           shape_str(vecs[j].shape()) + ", expected [" + std::to_string(n) + "]");
    }
    const auto& v = vecs[j].values();
    for (std::size_t i = 0; i < n; ++i) out[i * k + j] = v[i];
  }
  return make_op_vec({n, k}, std::move(out), Op::kStackCols, vecs);
}

/// Additive attention score, fused: contextᵀ · tanh(proj·state + query).
inline Tensor attn_score(const Tensor& context, const Tensor& proj, const Tensor& state,
                         const Tensor& query) {
  if (proj.ndim() != 2 || proj.rows() != context.size() || proj.cols() != state.size() ||
      query.size() != context.size()) {
    throw DimensionError("attn_score: context " + shape_str(context.shape()) + ", proj " +
                         shape_str(proj.shape()) + ", state " + shape_str(state.shape()) +
                         ", query " + shape_str(query.shape()));
  }
  const std::size_t rows = proj.rows(), cols = proj.cols();
  const auto& c = context.values();
  const auto& w = proj.values();
  const auto& h = state.values();
  const auto& q = query.values();
  std::vector<double> activated(rows);
  double score = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    double pre = q[r];
    const double* wrow = w.data() + r * cols;
    for (std::size_t j = 0; j < cols; ++j) pre += wrow[j] * h[j];
    activated[r] = std::tanh(pre);
    score += c[r] * activated[r];
  }
  return make_op_vec({1}, {score}, Op::kAttnScore, {context, proj, state, query},
                     std::move(activated));
}

/// Index of the largest value; ties resolve to the lowest index.
inline std::size_t argmax(const Tensor& t) {
  const auto& v = t.values();
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

namespace detail {

inline void backward_step(TensorNode* n) {
  if (n->op == Op::kLeaf || n->parents.empty()) return;
  const std::vector<double>& g = n->grad;
  auto p = [&](std::size_t i) -> TensorNode* { return n->parents[i].get(); };
  switch (n->op) {
    case Op::kAdd: {
      for (int side = 0; side < 2; ++side) {
        TensorNode* t = p(side);
        t->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) t->grad[i] += g[i];
      }
      break;
    }
    case Op::kMul: {
      TensorNode* a = p(0);
      TensorNode* b = p(1);
      a->ensure_grad();
      b->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        a->grad[i] += b->data[i] * g[i];
        b->grad[i] += a->data[i] * g[i];
      }
      break;
    }
    case Op::kScale: {
      TensorNode* a = p(0);
      a->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) a->grad[i] += n->factor * g[i];
      break;
    }
    case Op::kSMul: {
      TensorNode* s = p(0);
      TensorNode* x = p(1);
      s->ensure_grad();
      x->ensure_grad();
      const double f = s->data[0];
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) {
        acc += x->data[i] * g[i];
        x->grad[i] += f * g[i];
      }
      s->grad[0] += acc;
      break;
    }
    case Op::kPick: {
      TensorNode* v = p(0);
      v->ensure_grad();
      v->grad[n->aux] += g[0];
      break;
    }
    case Op::kMatMul: {
      TensorNode* a = p(0);
      TensorNode* b = p(1);
      a->ensure_grad();
      b->ensure_grad();
      const std::size_t r = a->shape[0], s = a->shape[1], t = b->shape[1];
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t k = 0; k < s; ++k) {
          double acc = 0.0;
          for (std::size_t j = 0; j < t; ++j) acc += g[i * t + j] * b->data[k * t + j];
          a->grad[i * s + k] += acc;
        }
      }
      for (std::size_t k = 0; k < s; ++k) {
        for (std::size_t j = 0; j < t; ++j) {
          double acc = 0.0;
          for (std::size_t i = 0; i < r; ++i) acc += a->data[i * s + k] * g[i * t + j];
          b->grad[k * t + j] += acc;
        }
      }
      break;
    }
    case Op::kMatVec: {
      TensorNode* a = p(0);
      TensorNode* x = p(1);
      a->ensure_grad();
      x->ensure_grad();
      const std::size_t r = a->shape[0], s = a->shape[1];
      for (std::size_t i = 0; i < r; ++i) {
        const double gi = g[i];
        double* arow = a->grad.data() + i * s;
        const double* mrow = a->data.data() + i * s;
        for (std::size_t j = 0; j < s; ++j) {
          arow[j] += gi * x->data[j];
          x->grad[j] += mrow[j] * gi;
        }
      }
      break;
    }
    case Op::kTMatVec: {
      TensorNode* a = p(0);
      TensorNode* x = p(1);
      a->ensure_grad();
      x->ensure_grad();
      const std::size_t r = a->shape[0], s = a->shape[1];
      for (std::size_t i = 0; i < r; ++i) {
        const double xi = x->data[i];
        double acc = 0.0;
        double* arow = a->grad.data() + i * s;
        const double* mrow = a->data.data() + i * s;
        for (std::size_t j = 0; j < s; ++j) {
          arow[j] += xi * g[j];
          acc += mrow[j] * g[j];
        }
        x->grad[i] += acc;
      }
      break;
    }
    case Op::kDot: {
      TensorNode* a = p(0);
      TensorNode* b = p(1);
      a->ensure_grad();
      b->ensure_grad();
      const double g0 = g[0];
      for (std::size_t i = 0; i < a->data.size(); ++i) {
        a->grad[i] += g0 * b->data[i];
        b->grad[i] += g0 * a->data[i];
      }
      break;
    }
    case Op::kSum: {
      TensorNode* a = p(0);
      a->ensure_grad();
      const double g0 = g[0];
      for (double& v : a->grad) v += g0;
      break;
    }
    case Op::kTanh: {
      TensorNode* a = p(0);
      a->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double y = n->data[i];
        a->grad[i] += (1.0 - y * y) * g[i];
      }
      break;
    }
    case Op::kSigmoid: {
      TensorNode* a = p(0);
      a->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double y = n->data[i];
        a->grad[i] += y * (1.0 - y) * g[i];
      }
      break;
    }
    case Op::kSoftmax: {
      TensorNode* a = p(0);
      a->ensure_grad();
      double inner = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) inner += n->data[i] * g[i];
      for (std::size_t i = 0; i < g.size(); ++i) {
        a->grad[i] += n->data[i] * (g[i] - inner);
      }
      break;
    }
    case Op::kCrossEntropy: {
      TensorNode* logits = p(0);
      logits->ensure_grad();
      const double g0 = g[0];
      for (std::size_t i = 0; i < logits->data.size(); ++i) {
        const double onehot = (i == n->aux) ? 1.0 : 0.0;
        logits->grad[i] += (n->saved[i] - onehot) * g0;
      }
      break;
    }
    case Op::kRow: {
      TensorNode* table = p(0);
      table->ensure_grad();
      const std::size_t c = table->shape[1];
      double* trow = table->grad.data() + n->aux * c;
      for (std::size_t j = 0; j < c; ++j) trow[j] += g[j];
      break;
    }
    case Op::kSlice: {
      TensorNode* v = p(0);
      v->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) v->grad[n->aux + i] += g[i];
      break;
    }
    case Op::kLstmCell: {
      const std::size_t hid = n->data.size() / 2;
      TensorNode* x = p(0);
      TensorNode* h_prev = p(1);
      TensorNode* c_prev = p(2);
      const std::size_t in = x->data.size();
      for (std::size_t i = 0; i < n->parents.size(); ++i) p(i)->ensure_grad();
      const double* gate_i = n->saved.data();
      const double* gate_f = n->saved.data() + hid;
      const double* gate_g = n->saved.data() + 2 * hid;
      const double* gate_o = n->saved.data() + 3 * hid;
      // pre-activation grads per gate, in saved order
      std::vector<double> dpre(4 * hid);
      for (std::size_t r = 0; r < hid; ++r) {
        const double c_new = n->data[hid + r];
        const double tc = std::tanh(c_new);
        const double dh = g[r];
        const double dc = g[hid + r] + dh * gate_o[r] * (1.0 - tc * tc);
        dpre[r] = dc * gate_g[r] * gate_i[r] * (1.0 - gate_i[r]);
        dpre[hid + r] = dc * c_prev->data[r] * gate_f[r] * (1.0 - gate_f[r]);
        dpre[2 * hid + r] = dc * gate_i[r] * (1.0 - gate_g[r] * gate_g[r]);
        dpre[3 * hid + r] = dh * tc * gate_o[r] * (1.0 - gate_o[r]);
        c_prev->grad[r] += dc * gate_f[r];
      }
      for (int gate = 0; gate < 4; ++gate) {
        TensorNode* w_in = p(3 + gate * 3);
        TensorNode* w_rec = p(4 + gate * 3);
        TensorNode* b = p(5 + gate * 3);
        const double* d = dpre.data() + gate * hid;
        for (std::size_t r = 0; r < hid; ++r) {
          const double dr = d[r];
          b->grad[r] += dr;
          double* wi_row = w_in->grad.data() + r * in;
          const double* wi_data = w_in->data.data() + r * in;
          for (std::size_t j = 0; j < in; ++j) {
            wi_row[j] += dr * x->data[j];
            x->grad[j] += wi_data[j] * dr;
          }
          double* wr_row = w_rec->grad.data() + r * hid;
          const double* wr_data = w_rec->data.data() + r * hid;
          for (std::size_t j = 0; j < hid; ++j) {
            wr_row[j] += dr * h_prev->data[j];
            h_prev->grad[j] += wr_data[j] * dr;
          }
        }
      }
      break;
    }
    case Op::kAttnScore: {
      TensorNode* context = p(0);
      TensorNode* proj = p(1);
      TensorNode* state = p(2);
      TensorNode* query = p(3);
      context->ensure_grad();
      proj->ensure_grad();
      state->ensure_grad();
      query->ensure_grad();
      const std::size_t rows = proj->shape[0], cols = proj->shape[1];
      const double gs = g[0];
      for (std::size_t r = 0; r < rows; ++r) {
        const double t = n->saved[r];
        context->grad[r] += gs * t;
        const double dpre = gs * context->data[r] * (1.0 - t * t);
        query->grad[r] += dpre;
        double* wrow = proj->grad.data() + r * cols;
        const double* wdata = proj->data.data() + r * cols;
        for (std::size_t j = 0; j < cols; ++j) {
          wrow[j] += dpre * state->data[j];
          state->grad[j] += wdata[j] * dpre;
        }
      }
      break;
    }
    case Op::kStack: {
      for (std::size_t i = 0; i < n->parents.size(); ++i) {
        TensorNode* s = p(i);
        s->ensure_grad();
        s->grad[0] += g[i];
      }
      break;
    }
    case Op::kStackCols: {
      const std::size_t k = n->parents.size();
      const std::size_t rows = n->shape[0];
      for (std::size_t j = 0; j < k; ++j) {
        TensorNode* v = p(j);
        v->ensure_grad();
        for (std::size_t i = 0; i < rows; ++i) v->grad[i] += g[i * k + j];
      }
      break;
    }
    case Op::kLeaf:
      break;
  }
}

}  // namespace detail

/// Reverse-mode sweep from a scalar loss. Gradients accumulate, so shared
/// tensors (memory banks, embedding tables) collect contributions from every
/// use; callers zero parameter grads after each optimizer step.
inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw DimensionError("backward: loss must be a scalar");
  }
  TensorNode* root = loss.node_ptr().get();
  if (!root->requires_grad) return;

  // Post-order DFS: inputs land before consumers, the loss lands last.
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> seen;
  std::vector<std::pair<TensorNode*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next_child] = stack.back();
    if (next_child < node->parents.size()) {
      TensorNode* child = node->parents[next_child].get();
      ++next_child;
      if (child->requires_grad && seen.insert(child).second) {
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::backward_step(*it);
  }
}

/// Standard LSTM cell parameters; gate order is input, forget, candidate,
/// output. Input weights are hidden×input, recurrent weights hidden×hidden.
struct LstmParams {
  Tensor w_in_input, w_rec_input, bias_input;
  Tensor w_in_forget, w_rec_forget, bias_forget;
  Tensor w_in_cell, w_rec_cell, bias_cell;
  Tensor w_in_output, w_rec_output, bias_output;

  std::size_t input_dim() const { return w_in_input.cols(); }
  std::size_t hidden_dim() const { return w_in_input.rows(); }

  std::vector<Tensor*> tensors() {
    return {&w_in_input, &w_rec_input, &bias_input,  &w_in_forget, &w_rec_forget, &bias_forget,
            &w_in_cell,  &w_rec_cell,  &bias_cell,   &w_in_output, &w_rec_output, &bias_output};
  }
};

struct LstmState {
  Tensor h;
  Tensor c;
};

/// Fused LSTM step: one graph node holding [h; c] with the gate activations
/// cached for the analytic backward pass. Token loops dominate training time,
/// so the recurrence is not built from elementwise ops.
inline LstmState lstm_cell(const Tensor& x, const Tensor& h_prev, const Tensor& c_prev,
                           const LstmParams& params) {
  if (x.ndim() != 1 || x.size() != params.input_dim()) {
    throw DimensionError("lstm_cell: input shape " + shape_str(x.shape()) + " vs expected [" +
                         std::to_string(params.input_dim()) + "]");
  }
  if (h_prev.size() != params.hidden_dim() || c_prev.size() != params.hidden_dim()) {
    throw DimensionError("lstm_cell: state size " + std::to_string(h_prev.size()) + "/" +
                         std::to_string(c_prev.size()) + " vs hidden " +
                         std::to_string(params.hidden_dim()));
  }
  const std::size_t in = params.input_dim();
  const std::size_t hid = params.hidden_dim();
  const auto& xv = x.values();
  const auto& hv = h_prev.values();
  const auto& cv = c_prev.values();

  // Gate order in `saved`: input, forget, candidate, output.
  std::vector<double> gates(4 * hid);
  const Tensor* w_in[4] = {&params.w_in_input, &params.w_in_forget, &params.w_in_cell,
                           &params.w_in_output};
  const Tensor* w_rec[4] = {&params.w_rec_input, &params.w_rec_forget, &params.w_rec_cell,
                            &params.w_rec_output};
  const Tensor* bias[4] = {&params.bias_input, &params.bias_forget, &params.bias_cell,
                           &params.bias_output};
  for (int g = 0; g < 4; ++g) {
    const auto& wi = w_in[g]->values();
    const auto& wr = w_rec[g]->values();
    const auto& b = bias[g]->values();
    double* out = gates.data() + g * hid;
    for (std::size_t r = 0; r < hid; ++r) {
      double pre = b[r];
      const double* wirow = wi.data() + r * in;
      for (std::size_t j = 0; j < in; ++j) pre += wirow[j] * xv[j];
      const double* wrrow = wr.data() + r * hid;
      for (std::size_t j = 0; j < hid; ++j) pre += wrrow[j] * hv[j];
      out[r] = (g == 2) ? std::tanh(pre) : 1.0 / (1.0 + std::exp(-pre));
    }
  }

  std::vector<double> state(2 * hid);
  for (std::size_t r = 0; r < hid; ++r) {
    const double c_new = gates[hid + r] * cv[r] + gates[r] * gates[2 * hid + r];
    state[hid + r] = c_new;
    state[r] = gates[3 * hid + r] * std::tanh(c_new);
  }

  const Tensor fused = make_op_vec(
      {2 * hid}, std::move(state), Op::kLstmCell,
      {x, h_prev, c_prev, params.w_in_input, params.w_rec_input, params.bias_input,
       params.w_in_forget, params.w_rec_forget, params.bias_forget, params.w_in_cell,
       params.w_rec_cell, params.bias_cell, params.w_in_output, params.w_rec_output,
       params.bias_output},
      std::move(gates));
  return {slice(fused, 0, hid), slice(fused, hid, hid)};
}

}  // namespace dupmn
