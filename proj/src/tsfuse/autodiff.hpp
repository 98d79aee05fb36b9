#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tsfuse/tensor.hpp"

namespace tsfuse {

enum class OpKind : std::uint8_t {
  kLeaf,
  kMatMul,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kRelu,
  kSigmoid,
  kLayerNorm,
  kConcat,
  kSlice,
  kSum,
  kMean,
  kSquare,
  kMovingAverage,
  kTranspose,
  kReshape,
};

const char* op_name(OpKind op);

// Handle to a node of a Graph. Only meaningful for the graph that created it.
struct Var {
  std::uint32_t id = UINT32_MAX;
  bool valid() const { return id != UINT32_MAX; }
};

// Deferred reverse-mode tape. Building a node infers its shape (shape errors are
// raised there, naming the op); values are computed by forward() and gradients
// by backward(). Leaves may be re-assigned between passes, so a graph built
// once can be re-evaluated, which is how finite-difference checks work.
//
// Binary elementwise ops broadcast numpy-style (right-aligned, size-1 axes
// stretch). ReLU's subgradient at 0 is 0.
class Graph {
 public:
  explicit Graph(bool check_finite = false) : check_finite_(check_finite) {}

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }
  void set_value(Var leaf, Tensor value);

  // a: [M,K] or [B,M,K]; b: [K,N] or [B,K,N].
  Var matmul(Var a, Var b);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  // Entries whose |denominator| < min_abs produce 0 with zero gradient.
  Var div(Var a, Var b, double min_abs = 0.0);
  Var relu(Var a);
  Var sigmoid(Var a);
  // Normalizes over the last axis, then applies gamma/beta (both [n]).
  Var layernorm(Var x, Var gamma, Var beta, double eps = 1e-5);
  Var concat(std::span<const Var> parts);
  Var concat(Var a, Var b) {
    const Var parts[] = {a, b};
    return concat(parts);
  }
  Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end);
  Var sum(Var a);
  Var sum(Var a, std::size_t axis);
  Var mean(Var a);
  Var mean(Var a, std::size_t axis);
  Var square(Var a);
  // Centered moving average along the time axis (axis 0 of rank 2, axis 1 of
  // rank 3) with replicate padding of (kernel - 1) / 2 at both ends.
  Var moving_average(Var a, std::size_t kernel);
  // Swaps the last two axes.
  Var transpose(Var a);
  Var reshape(Var a, Shape shape);
  Var broadcast_add(Var a, Var b) { return add(a, b); }

  const Tensor& forward(Var root);
  void backward(Var root);

  const Shape& shape(Var v) const;
  const Tensor& value(Var v) const;
  const Tensor& grad(Var v) const;
  bool evaluated(Var v) const;
  OpKind op(Var v) const;

  // Floating-point operations of one forward pass over the ancestors of root.
  std::uint64_t flop_count(Var root) const;
  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    OpKind op = OpKind::kLeaf;
    std::vector<std::uint32_t> inputs;
    Shape shape;
    Tensor value;
    Tensor grad;
    std::vector<double> cache;  // op-specific forward intermediates
    bool has_value = false;
    bool requires_grad = false;
    std::size_t axis = 0;
    std::size_t begin = 0;
    std::size_t end = 0;
    double scalar = 0.0;
    std::uint64_t flops = 0;
  };

  Var push(Node node);
  const Node& node(Var v) const;
  Node& node(Var v);
  std::vector<bool> ancestors(Var root) const;
  void evaluate(Node& n);
  void propagate(Node& n);
  Var binary(OpKind op, Var a, Var b, double scalar = 0.0);
  Var reduce(OpKind op, Var a, bool full, std::size_t axis);

  std::vector<Node> nodes_;
  bool check_finite_ = false;
};

// Compares the analytic gradient of a scalar root with respect to `leaf` against
// central differences. Returns max |analytic - numeric| / max(1, |analytic|).
double check_gradients(Graph& graph, Var root, Var leaf, double step);

}  // namespace tsfuse
