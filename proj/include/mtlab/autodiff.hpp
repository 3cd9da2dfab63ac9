#pragma once

// Reverse-mode automatic differentiation over dense row-major f64 tensors.
//
// A Graph is an append-only tape. Every operation appends one node; node ids
// are therefore a topological order. backward() walks the tape in reverse and
// expresses each local gradient rule with the same differentiable operations,
// so with create_graph=true the returned gradients are ordinary graph nodes
// and can be differentiated again (needed for second-order meta-gradients).

#include <array>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mtlab::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

enum class OpKind : std::uint8_t {
  leaf,
  constant,
  add,
  sub,
  mul,
  scale,
  add_scalar,
  matmul,
  relu,
  rsqrt,
  sum_all,
  sum_rows,
  sum_cols,
  broadcast_rows,
  broadcast_cols,
  broadcast_scalar,
  softmax,
  cross_entropy,
};

class Graph;

// Lightweight handle to a node of one Graph. Copying a Tensor copies the
// handle, not the data.
class Tensor {
 public:
  Tensor() = default;

  bool valid() const { return graph_ != nullptr; }
  Graph& graph() const;
  std::size_t id() const { return id_; }

  const Shape& shape() const;
  std::size_t numel() const;
  std::span<const double> values() const;
  double item() const;
  bool requires_grad() const;
  OpKind kind() const;

 private:
  friend class Graph;
  Tensor(Graph* g, std::size_t id) : graph_(g), id_(id) {}

  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

class Graph {
 public:
  struct Node {
    OpKind kind = OpKind::constant;
    std::array<std::size_t, 2> inputs{};
    std::uint8_t arity = 0;
    bool requires_grad = false;
    bool trans_a = false;
    bool trans_b = false;
    double attr = 0.0;
    Shape shape;
    std::vector<double> values;
    std::shared_ptr<const std::vector<int>> labels;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Differentiable input (parameter, mask, ...).
  Tensor leaf(Shape shape, std::vector<double> values, bool requires_grad = true);
  Tensor constant(Shape shape, std::vector<double> values);
  Tensor scalar(double v) { return constant({}, {v}); }
  Tensor zeros(const Shape& shape) { return constant(shape, std::vector<double>(mtlab::ad::numel(shape), 0.0)); }

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t id) const { return nodes_.at(id); }
  Tensor handle(std::size_t id) {
    (void)nodes_.at(id);
    return Tensor(this, id);
  }

  // Number of backward passes run with create_graph enabled on this tape.
  int create_graph_depth() const { return create_graph_depth_; }
  // False while a non-recording backward pass is building gradient values.
  bool recording() const { return recording_; }

  // Appends an op node. Inputs are recorded only when the graph is recording
  // and at least one input requires grad; otherwise the node is a constant.
  Tensor record(OpKind kind, std::span<const Tensor> inputs, Shape shape, std::vector<double> values,
                double attr = 0.0, bool trans_a = false, bool trans_b = false,
                std::shared_ptr<const std::vector<int>> labels = nullptr);

  void check_owns(const Tensor& t, const char* op) const;

 private:
  friend std::vector<Tensor> backward(Tensor loss, std::span<const Tensor> wrt, bool create_graph);

  std::deque<Node> nodes_;
  int create_graph_depth_ = 0;
  bool recording_ = true;
};

// Element-wise arithmetic; operands must have identical shapes.
Tensor add(Tensor a, Tensor b);
Tensor sub(Tensor a, Tensor b);
Tensor mul(Tensor a, Tensor b);
inline Tensor hadamard(Tensor a, Tensor b) { return mul(a, b); }
Tensor scale(Tensor a, double c);
Tensor add_scalar(Tensor a, double c);

// op(a) x op(b) for rank-2 operands, op = transpose when the flag is set.
Tensor matmul(Tensor a, Tensor b, bool transpose_a = false, bool transpose_b = false);

// max(0, x); the subgradient at 0 is 0.
Tensor relu(Tensor a);
Tensor rsqrt(Tensor a);

Tensor sum(Tensor a);
Tensor mean(Tensor a);
// [B, D] -> [D]
Tensor sum_rows(Tensor a);
// [B, N] -> [B]
Tensor sum_cols(Tensor a);
// [D] -> [rows, D]
Tensor broadcast_rows(Tensor a, std::size_t rows);
// [B] -> [B, cols]
Tensor broadcast_cols(Tensor a, std::size_t cols);
// [] -> shape
Tensor broadcast_scalar(Tensor a, const Shape& shape);

// Row-wise softmax of [B, N] logits.
Tensor softmax(Tensor logits);
// Mean over the batch of -log softmax(logits)[label], max-subtracted.
Tensor cross_entropy(Tensor logits, std::span<const int> labels);
// Mean of squared residuals.
Tensor mse(Tensor pred, Tensor target);

// Copy of the values with no history.
Tensor detach(Tensor a);

// Gradients of the scalar `loss` with respect to each tensor in `wrt`.
//
// With create_graph the results are differentiable nodes of the same graph.
// A wrt tensor the loss does not depend on gets an exact zero gradient. A wrt
// tensor created after the loss (so it cannot be an ancestor) or belonging to
// another graph is an error.
std::vector<Tensor> backward(Tensor loss, std::span<const Tensor> wrt, bool create_graph = false);

// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate.
std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                                     std::span<const double> x, double h);

}  // namespace mtlab::ad
