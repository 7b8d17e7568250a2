// SPDX-License-Identifier: Apache-2.0
//
// Define-by-run reverse-mode differentiation over Tensor2 values.
//
// A Graph is built fresh for every forward pass. Each operation appends one
// node whose inputs already exist, so insertion order is a topological order
// and backward() is a single sweep in exact reverse insertion order.
//
// Leaves are either inputs (constants: never receive a gradient) or params
// (differentiable). Gradients of intermediate nodes are kept after backward()
// and can be read through grad(); this is how per-layer weight gradients are
// observed without extra passes.
#pragma once

#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "abmlora/activation.hpp"
#include "abmlora/tensor.hpp"

namespace abmlora {

/// Handle to a node in a Graph. Only meaningful for the graph that created it.
struct Var {
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
  std::size_t id = npos;
  bool valid() const noexcept { return id != npos; }
};

enum class OpKind {
  input,
  param,
  matmul,
  matmul_nt,
  add,
  sub,
  scale,
  add_scalar,
  hadamard,
  activation,
  square,
  sum,
  frobenius_sq,
  reshape,
  mean_rows,
  attention,
  softmax_cross_entropy,
};

class Graph {
 public:
  /// Upstream gradient injected at a node when starting backward().
  struct Seed {
    Var var;
    Tensor2 grad;
  };

  Var input(Tensor2 value);
  Var param(Tensor2 value);

  Var matmul(Var a, Var b);
  /// a * b^T. Linear layers use this with weights stored out x in.
  Var matmul_nt(Var a, Var b);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var scale(Var a, double s);
  Var add_scalar(Var a, double s);
  Var hadamard(Var a, Var b);
  Var activation(Var z, Activation kind);
  Var square(Var a);
  /// 1x1 sum of all entries.
  Var sum(Var a);
  /// 1x1 squared Frobenius norm.
  Var frobenius_sq(Var a);
  /// Reinterpret the row-major payload with a new shape of equal size.
  Var reshape(Var a, std::size_t rows, std::size_t cols);
  /// Average each consecutive block of `group` rows into one row.
  Var mean_rows(Var a, std::size_t group);
  /// Single-head scaled dot-product attention, applied independently to each
  /// consecutive block of `tokens` rows of q, k and v.
  Var attention(Var q, Var k, Var v, std::size_t tokens);
  /// 1x1 mean over rows of -log softmax(logits)[label]. Throws DataError on an
  /// out-of-range label.
  Var softmax_cross_entropy(Var logits, std::span<const std::size_t> labels);

  /// Seeds d(out)/d(out) = 1 on a 1x1 node and sweeps backwards.
  void backward(Var out);
  /// Sweeps backwards from several seeded nodes at once. Previous gradients are
  /// discarded first.
  void backward(std::span<const Seed> seeds);

  const Tensor2& value(Var v) const;
  bool requires_grad(Var v) const;
  bool has_grad(Var v) const;
  /// Throws Error when the node received no gradient.
  const Tensor2& grad(Var v) const;
  OpKind op(Var v) const;
  std::span<const std::size_t> inputs(Var v) const;
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    OpKind op = OpKind::input;
    std::vector<std::size_t> inputs;
    Tensor2 value;
    std::optional<Tensor2> grad;
    bool requires_grad = false;
    double scalar = 0.0;
    Activation act = Activation::identity;
    std::size_t group = 0;
    Tensor2 aux;
    std::vector<std::size_t> labels;
  };

  Var push(Node node);
  const Node& node(Var v) const;
  bool any_requires_grad(std::initializer_list<std::size_t> ids) const;
  void accumulate(std::size_t id, const Tensor2& g);
  void backward_node(std::size_t id);

  std::vector<Node> nodes_;
};

}  // namespace abmlora
