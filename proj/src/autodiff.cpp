#include "mtlab/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <optional>
#include <sstream>

#include "mtlab/error.hpp"

namespace mtlab::ad {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

void require_rank(const Tensor& a, std::size_t rank, const char* op) {
  if (a.shape().size() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + to_string(a.shape()));
  }
}

Graph& same_graph(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.valid() || !b.valid()) throw GraphError(std::string(op) + ": invalid tensor handle");
  if (&a.graph() != &b.graph()) throw GraphError(std::string(op) + ": operands belong to different graphs");
  return a.graph();
}

Graph& graph_of(const Tensor& a, const char* op) {
  if (!a.valid()) throw GraphError(std::string(op) + ": invalid tensor handle");
  return a.graph();
}

template <class F>
Tensor elementwise_binary(OpKind kind, Tensor a, Tensor b, const char* op, F f) {
  Graph& g = same_graph(a, b, op);
  require_same_shape(a, b, op);
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i], bv[i]);
  const Tensor in[] = {a, b};
  return g.record(kind, in, a.shape(), std::move(out));
}

std::pair<std::size_t, std::size_t> dims2(const Tensor& t) { return {t.shape()[0], t.shape()[1]}; }

}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

Graph& Tensor::graph() const {
  if (!graph_) throw GraphError("tensor handle is not bound to a graph");
  return *graph_;
}
const Shape& Tensor::shape() const { return graph().node(id_).shape; }
std::size_t Tensor::numel() const { return graph().node(id_).values.size(); }
std::span<const double> Tensor::values() const { return graph().node(id_).values; }
bool Tensor::requires_grad() const { return graph().node(id_).requires_grad; }
OpKind Tensor::kind() const { return graph().node(id_).kind; }

double Tensor::item() const {
  const auto& n = graph().node(id_);
  if (n.values.size() != 1) throw DimensionError("item() on non-scalar tensor " + to_string(n.shape));
  return n.values[0];
}

// ---------------------------------------------------------------------------
// Graph

Tensor Graph::leaf(Shape shape, std::vector<double> values, bool requires_grad) {
  if (mtlab::ad::numel(shape) != values.size()) {
    throw DimensionError("leaf: shape " + to_string(shape) + " does not match " + std::to_string(values.size()) +
                         " values");
  }
  Node n;
  n.kind = OpKind::leaf;
  n.requires_grad = requires_grad;
  n.shape = std::move(shape);
  n.values = std::move(values);
  nodes_.push_back(std::move(n));
  return Tensor(this, nodes_.size() - 1);
}

Tensor Graph::constant(Shape shape, std::vector<double> values) {
  if (mtlab::ad::numel(shape) != values.size()) {
    throw DimensionError("constant: shape " + to_string(shape) + " does not match " + std::to_string(values.size()) +
                         " values");
  }
  Node n;
  n.kind = OpKind::constant;
  n.shape = std::move(shape);
  n.values = std::move(values);
  nodes_.push_back(std::move(n));
  return Tensor(this, nodes_.size() - 1);
}

void Graph::check_owns(const Tensor& t, const char* op) const {
  if (!t.valid() || &t.graph() != this) throw GraphError(std::string(op) + ": tensor belongs to a different graph");
}

Tensor Graph::record(OpKind kind, std::span<const Tensor> inputs, Shape shape, std::vector<double> values,
                     double attr, bool trans_a, bool trans_b, std::shared_ptr<const std::vector<int>> labels) {
  Node n;
  n.shape = std::move(shape);
  n.values = std::move(values);
  bool tracked = false;
  if (recording_) {
    for (const auto& t : inputs) tracked = tracked || nodes_[t.id()].requires_grad;
  }
  if (tracked) {
    n.kind = kind;
    n.arity = static_cast<std::uint8_t>(inputs.size());
    for (std::size_t i = 0; i < inputs.size(); ++i) n.inputs[i] = inputs[i].id();
    n.requires_grad = true;
    n.attr = attr;
    n.trans_a = trans_a;
    n.trans_b = trans_b;
    n.labels = std::move(labels);
  }
  nodes_.push_back(std::move(n));
  return Tensor(this, nodes_.size() - 1);
}

// ---------------------------------------------------------------------------
// Operations

Tensor add(Tensor a, Tensor b) {
  return elementwise_binary(OpKind::add, a, b, "add", [](double x, double y) { return x + y; });
}

Tensor sub(Tensor a, Tensor b) {
  return elementwise_binary(OpKind::sub, a, b, "sub", [](double x, double y) { return x - y; });
}

Tensor mul(Tensor a, Tensor b) {
  return elementwise_binary(OpKind::mul, a, b, "mul", [](double x, double y) { return x * y; });
}

Tensor scale(Tensor a, double c) {
  Graph& g = graph_of(a, "scale");
  auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * av[i];
  const Tensor in[] = {a};
  return g.record(OpKind::scale, in, a.shape(), std::move(out), c);
}

Tensor add_scalar(Tensor a, double c) {
  Graph& g = graph_of(a, "add_scalar");
  auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + c;
  const Tensor in[] = {a};
  return g.record(OpKind::add_scalar, in, a.shape(), std::move(out), c);
}

Tensor matmul(Tensor a, Tensor b, bool transpose_a, bool transpose_b) {
  Graph& g = same_graph(a, b, "matmul");
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const auto [ar, ac] = dims2(a);
  const auto [br, bc] = dims2(b);
  const std::size_t rows = transpose_a ? ac : ar;
  const std::size_t inner_a = transpose_a ? ar : ac;
  const std::size_t inner_b = transpose_b ? bc : br;
  const std::size_t cols = transpose_b ? br : bc;
  if (inner_a != inner_b) {
    throw DimensionError("matmul: inner extents differ (" + std::to_string(inner_a) + " vs " + std::to_string(inner_b) +
                         ")");
  }
  std::vector<double> out(rows * cols);
  ConstMap A(a.values().data(), static_cast<Eigen::Index>(ar), static_cast<Eigen::Index>(ac));
  ConstMap B(b.values().data(), static_cast<Eigen::Index>(br), static_cast<Eigen::Index>(bc));
  MutMap C(out.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  if (inner_a == 0) {
    C.setZero();
  } else if (!transpose_a && !transpose_b) {
    C.noalias() = A * B;
  } else if (transpose_a && !transpose_b) {
    C.noalias() = A.transpose() * B;
  } else if (!transpose_a && transpose_b) {
    C.noalias() = A * B.transpose();
  } else {
    C.noalias() = A.transpose() * B.transpose();
  }
  const Tensor in[] = {a, b};
  return g.record(OpKind::matmul, in, {rows, cols}, std::move(out), 0.0, transpose_a, transpose_b);
}

Tensor relu(Tensor a) {
  Graph& g = graph_of(a, "relu");
  auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
  const Tensor in[] = {a};
  return g.record(OpKind::relu, in, a.shape(), std::move(out));
}

Tensor rsqrt(Tensor a) {
  Graph& g = graph_of(a, "rsqrt");
  auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / std::sqrt(av[i]);
  const Tensor in[] = {a};
  return g.record(OpKind::rsqrt, in, a.shape(), std::move(out));
}

Tensor sum(Tensor a) {
  Graph& g = graph_of(a, "sum");
  double s = 0.0;
  for (double v : a.values()) s += v;
  const Tensor in[] = {a};
  return g.record(OpKind::sum_all, in, {}, {s});
}

Tensor mean(Tensor a) {
  const std::size_t n = a.numel();
  if (n == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Tensor sum_rows(Tensor a) {
  Graph& g = graph_of(a, "sum_rows");
  require_rank(a, 2, "sum_rows");
  const auto [rows, cols] = dims2(a);
  auto av = a.values();
  std::vector<double> out(cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = av.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) out[c] += row[c];
  }
  const Tensor in[] = {a};
  return g.record(OpKind::sum_rows, in, {cols}, std::move(out));
}

Tensor sum_cols(Tensor a) {
  Graph& g = graph_of(a, "sum_cols");
  require_rank(a, 2, "sum_cols");
  const auto [rows, cols] = dims2(a);
  auto av = a.values();
  std::vector<double> out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += av[r * cols + c];
    out[r] = s;
  }
  const Tensor in[] = {a};
  return g.record(OpKind::sum_cols, in, {rows}, std::move(out));
}

Tensor broadcast_rows(Tensor a, std::size_t rows) {
  Graph& g = graph_of(a, "broadcast_rows");
  require_rank(a, 1, "broadcast_rows");
  const std::size_t cols = a.shape()[0];
  auto av = a.values();
  std::vector<double> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) std::copy(av.begin(), av.end(), out.begin() + static_cast<std::ptrdiff_t>(r * cols));
  const Tensor in[] = {a};
  return g.record(OpKind::broadcast_rows, in, {rows, cols}, std::move(out));
}

Tensor broadcast_cols(Tensor a, std::size_t cols) {
  Graph& g = graph_of(a, "broadcast_cols");
  require_rank(a, 1, "broadcast_cols");
  const std::size_t rows = a.shape()[0];
  auto av = a.values();
  std::vector<double> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = av[r];
  const Tensor in[] = {a};
  return g.record(OpKind::broadcast_cols, in, {rows, cols}, std::move(out));
}

Tensor broadcast_scalar(Tensor a, const Shape& shape) {
  Graph& g = graph_of(a, "broadcast_scalar");
  const double v = a.item();
  const Tensor in[] = {a};
  return g.record(OpKind::broadcast_scalar, in, shape, std::vector<double>(numel(shape), v));
}

Tensor softmax(Tensor logits) {
  Graph& g = graph_of(logits, "softmax");
  require_rank(logits, 2, "softmax");
  const auto [rows, cols] = dims2(logits);
  auto lv = logits.values();
  std::vector<double> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = lv.data() + r * cols;
    double* y = out.data() + r * cols;
    const double mx = *std::max_element(x, x + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += (y[c] = std::exp(x[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) y[c] /= z;
  }
  const Tensor in[] = {logits};
  return g.record(OpKind::softmax, in, logits.shape(), std::move(out));
}

Tensor cross_entropy(Tensor logits, std::span<const int> labels) {
  Graph& g = graph_of(logits, "cross_entropy");
  require_rank(logits, 2, "cross_entropy");
  const auto [rows, cols] = dims2(logits);
  if (labels.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(rows) +
                         " rows");
  }
  if (rows == 0) throw DimensionError("cross_entropy: empty batch");
  auto lv = logits.values();
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const int y = labels[r];
    if (y < 0 || static_cast<std::size_t>(y) >= cols) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(y) + " outside [0," + std::to_string(cols) + ")");
    }
    const double* x = lv.data() + r * cols;
    const std::size_t arg = static_cast<std::size_t>(std::max_element(x, x + cols) - x);
    const double mx = x[arg];
    // The arg-max term contributes exactly 1; log1p keeps tiny losses exact.
    double rest = 0.0;
    for (std::size_t c = 0; c < cols; ++c)
      if (c != arg) rest += std::exp(x[c] - mx);
    total += (mx - x[y]) + std::log1p(rest);
  }
  auto stored = std::make_shared<const std::vector<int>>(labels.begin(), labels.end());
  const Tensor in[] = {logits};
  return g.record(OpKind::cross_entropy, in, {}, {total / static_cast<double>(rows)}, 0.0, false, false,
                  std::move(stored));
}

Tensor mse(Tensor pred, Tensor target) {
  same_graph(pred, target, "mse");
  require_same_shape(pred, target, "mse");
  if (pred.numel() == 0) throw DimensionError("mse: empty batch");
  Tensor d = sub(pred, target);
  return scale(sum(mul(d, d)), 1.0 / static_cast<double>(pred.numel()));
}

Tensor detach(Tensor a) {
  Graph& g = graph_of(a, "detach");
  return g.constant(a.shape(), std::vector<double>(a.values().begin(), a.values().end()));
}

// ---------------------------------------------------------------------------
// Backward

namespace {

// Emits d(loss)/d(input) contributions of node `id` given the upstream
// gradient `gout`. Every rule is written with graph operations so that the
// emitted gradients are themselves differentiable when the graph records.
template <class Emit>
void local_gradients(Graph& g, std::size_t id, Tensor gout, Emit emit) {
  const Graph::Node& n = g.node(id);
  const Tensor out = g.handle(id);
  const Tensor a = g.handle(n.inputs[0]);
  const Tensor b = n.arity > 1 ? g.handle(n.inputs[1]) : Tensor{};
  switch (n.kind) {
    case OpKind::add:
      emit(0, gout);
      emit(1, gout);
      break;
    case OpKind::sub:
      emit(0, gout);
      emit(1, scale(gout, -1.0));
      break;
    case OpKind::mul:
      emit(0, mul(gout, b));
      emit(1, mul(gout, a));
      break;
    case OpKind::scale:
      emit(0, scale(gout, n.attr));
      break;
    case OpKind::add_scalar:
      emit(0, gout);
      break;
    case OpKind::matmul: {
      // C = op(A) op(B): dop(A) = G op(B)^T, dop(B) = op(A)^T G.
      const bool ta = n.trans_a;
      const bool tb = n.trans_b;
      emit(0, ta ? matmul(b, gout, tb, true) : matmul(gout, b, false, !tb));
      emit(1, tb ? matmul(gout, a, true, ta) : matmul(a, gout, !ta, false));
      break;
    }
    case OpKind::relu: {
      auto av = a.values();
      std::vector<double> step(av.size());
      for (std::size_t i = 0; i < step.size(); ++i) step[i] = av[i] > 0.0 ? 1.0 : 0.0;
      emit(0, mul(gout, g.constant(a.shape(), std::move(step))));
      break;
    }
    case OpKind::rsqrt:
      // d/dx x^{-1/2} = -1/2 y^3 with y the output.
      emit(0, mul(gout, scale(mul(out, mul(out, out)), -0.5)));
      break;
    case OpKind::sum_all:
      emit(0, broadcast_scalar(gout, a.shape()));
      break;
    case OpKind::sum_rows:
      emit(0, broadcast_rows(gout, a.shape()[0]));
      break;
    case OpKind::sum_cols:
      emit(0, broadcast_cols(gout, a.shape()[1]));
      break;
    case OpKind::broadcast_rows:
      emit(0, sum_rows(gout));
      break;
    case OpKind::broadcast_cols:
      emit(0, sum_cols(gout));
      break;
    case OpKind::broadcast_scalar:
      emit(0, sum(gout));
      break;
    case OpKind::softmax: {
      const std::size_t cols = a.shape()[1];
      emit(0, mul(out, sub(gout, broadcast_cols(sum_cols(mul(gout, out)), cols))));
      break;
    }
    case OpKind::cross_entropy: {
      const std::size_t rows = a.shape()[0];
      const std::size_t cols = a.shape()[1];
      std::vector<double> onehot(rows * cols, 0.0);
      for (std::size_t r = 0; r < rows; ++r) onehot[r * cols + static_cast<std::size_t>((*n.labels)[r])] = 1.0;
      const Tensor residual = scale(sub(softmax(a), g.constant(a.shape(), std::move(onehot))), 1.0 / rows);
      emit(0, mul(broadcast_scalar(gout, a.shape()), residual));
      break;
    }
    case OpKind::leaf:
    case OpKind::constant:
      break;
  }
}

// Restores the recording flag on scope exit.
class RecordingScope {
 public:
  RecordingScope(bool& flag, bool value) : flag_(flag), saved_(flag) { flag_ = value; }
  ~RecordingScope() { flag_ = saved_; }
  RecordingScope(const RecordingScope&) = delete;
  RecordingScope& operator=(const RecordingScope&) = delete;

 private:
  bool& flag_;
  bool saved_;
};

}  // namespace

std::vector<Tensor> backward(Tensor loss, std::span<const Tensor> wrt, bool create_graph) {
  Graph& g = graph_of(loss, "backward");
  if (loss.numel() != 1) throw DimensionError("backward: loss must be scalar, got " + to_string(loss.shape()));
  if (wrt.empty()) return {};

  const std::size_t top = loss.id();
  std::size_t lo = top;
  for (const auto& w : wrt) {
    g.check_owns(w, "backward");
    if (w.id() > top) {
      throw GraphError("backward: wrt node " + std::to_string(w.id()) + " was created after the loss node " +
                       std::to_string(top) + " and is unreachable");
    }
    lo = std::min(lo, w.id());
  }

  // needed[i]: node lo+i is a wrt target or depends on one through recorded inputs.
  const std::size_t span_len = top - lo + 1;
  std::vector<char> needed(span_len, 0);
  for (const auto& w : wrt) needed[w.id() - lo] = 1;
  for (std::size_t i = lo; i <= top; ++i) {
    const auto& n = g.node(i);
    for (std::size_t k = 0; k < n.arity; ++k) {
      const std::size_t in = n.inputs[k];
      if (in >= lo && needed[in - lo]) needed[i - lo] = 1;
    }
  }

  std::vector<Tensor> result;
  result.reserve(wrt.size());
  if (!needed[top - lo]) {
    for (const auto& w : wrt) result.push_back(g.zeros(w.shape()));
    return result;
  }

  RecordingScope scope(g.recording_, create_graph && g.recording_);
  if (create_graph) ++g.create_graph_depth_;

  std::vector<std::optional<Tensor>> grads(span_len);
  grads[top - lo] = g.scalar(1.0);
  for (std::size_t i = top + 1; i-- > lo;) {
    auto& gi = grads[i - lo];
    if (!gi || !needed[i - lo]) continue;
    const auto& n = g.node(i);
    if (n.arity == 0) continue;
    const std::array<std::size_t, 2> inputs = n.inputs;
    local_gradients(g, i, *gi, [&](int slot, Tensor contrib) {
      const std::size_t in = inputs[static_cast<std::size_t>(slot)];
      if (in < lo || !needed[in - lo]) return;
      auto& acc = grads[in - lo];
      acc = acc ? add(*acc, contrib) : contrib;
    });
    // Intermediate gradients are no longer needed once propagated.
    if (i != top) {
      bool is_target = false;
      for (const auto& w : wrt) is_target = is_target || w.id() == i;
      if (!is_target) gi.reset();
    }
  }

  for (const auto& w : wrt) {
    const auto& gw = grads[w.id() - lo];
    if (!gw) {
      result.push_back(g.zeros(w.shape()));
    } else if (create_graph) {
      result.push_back(*gw);
    } else {
      result.push_back(detach(*gw));
    }
  }
  return result;
}

std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                                     std::span<const double> x, double h) {
  if (!(h > 0.0)) throw ConfigError("finite_diff_grad: step must be positive");
  std::vector<double> point(x.begin(), x.end());
  std::vector<double> grad(point.size());
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double saved = point[i];
    point[i] = saved + h;
    const double fp = f(point);
    point[i] = saved - h;
    const double fm = f(point);
    point[i] = saved;
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

}  // namespace mtlab::ad
