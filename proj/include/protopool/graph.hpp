#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "protopool/tensor.hpp"

namespace protopool::ad {

class Graph;

/// Handle to a node in a Graph. Cheap to copy; valid while the Graph lives.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t numel() const { return value().numel(); }
  /// Scalar value of a one-element node.
  double item() const;
};

enum class OpKind {
  leaf,
  add,
  sub,
  mul,
  div,
  log,
  exp,
  relu,
  abs,
  sqrt,
  matmul,
  transpose,
  reshape,
  reduce_max,
  reduce_mean,
  reduce_sum,
  sum_all,
  softmax,
  log_softmax,
  sq_dist_map,
  sq_dist_matrix,
  slice_rows,
  pick,
  normalize_rows,
};

/// Define-by-run reverse-mode tape. Nodes are appended in creation order, so
/// inputs always precede outputs and the reverse of creation order is a valid
/// topological order for the backward sweep.
///
/// A Graph is not thread-safe; use one Graph per thread.
class Graph {
 public:
  /// Receives the graph, the id of the node being differentiated, and its
  /// upstream gradient; accumulates into the node's inputs.
  using BackwardFn =
      std::function<void(Graph&, std::size_t self, std::span<const double> out_grad)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf without gradient.
  Var constant(Tensor value);
  /// Leaf that receives a gradient, readable through grad() after backward().
  Var variable(Tensor value);
  /// Leaf bound to an external tensor; backward() accumulates into `source.grad`.
  /// The source must outlive the backward pass. Its data is copied at bind time.
  Var parameter(Tensor& source);

  /// Internal: appends an op result. `backward` may be empty for constants.
  Var record(OpKind kind, std::vector<std::size_t> inputs, Tensor value, BackwardFn backward);

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  OpKind kind(Var v) const { return nodes_.at(v.id).kind; }
  /// Gradient of the last backward() root w.r.t. `v`; zeros if unreached.
  std::vector<double> grad(Var v) const;

  /// Reverse sweep from a one-element root; seeds d(root)/d(root) = 1.
  void backward(Var root);

  /// Adds `delta` into the gradient buffer of node `id` (used by op backward fns).
  void accumulate(std::size_t id, std::span<const double> delta);
  /// Mutable gradient buffer for node `id`, allocated as zeros on first use.
  std::vector<double>& grad_buffer(std::size_t id);
  bool needs_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    OpKind kind = OpKind::leaf;
    std::vector<std::size_t> inputs;
    Tensor value;
    std::vector<double> grad;
    BackwardFn backward;
    Tensor* sink = nullptr;
    bool requires_grad = false;
  };

  Var leaf(Tensor value, bool requires_grad, Tensor* sink);

  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Operations. Binary elementwise ops require equal shapes, or one operand with
// a single element (scalar broadcast). Anything else is a ShapeError.

enum class Elementwise { add, sub, mul, log, relu };

Var elementwise(Elementwise op, Var a, std::optional<Var> b = std::nullopt);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var log(Var a);
Var exp(Var a);
Var relu(Var a);
Var abs(Var a);
Var sqrt(Var a);

/// a + c and a * c for a constant scalar c.
Var add_scalar(Var a, double c);
Var scale(Var a, double c);

Var matmul(Var a, Var b);
Var transpose(Var a);
Var reshape(Var a, Shape shape);

enum class Reduce { max, mean, sum };

/// Removes `axis`. Max routes the gradient to the first maximal element of
/// each slice (lowest flat index wins ties).
Var reduce(Reduce op, Var t, std::size_t axis);
Var sum(Var t);
Var mean(Var t);

/// Max-subtracted softmax along `axis`.
Var softmax(Var t, std::size_t axis);
Var log_softmax(Var t, std::size_t axis);

/// out[i] = sum_d (Z[i,d] - p[d])^2 for Z of shape HW x D and p of length D.
Var sq_dist_map(Var z, Var p);
/// out[i,m] = sum_d (Z[i,d] - P[m,d])^2 for Z: N x D, P: M x D.
Var sq_dist_matrix(Var z, Var p);

/// Rows [begin, begin + count) of a matrix.
Var slice_rows(Var t, std::size_t begin, std::size_t count);
/// out[b] = t[b, index[b]] for a B x C matrix.
Var pick(Var t, std::span<const std::size_t> index);
/// Each row divided by its L2 norm. Throws DomainError on a zero row.
Var normalize_rows(Var t);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }

}  // namespace protopool::ad
