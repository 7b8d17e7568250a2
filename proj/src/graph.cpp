// SPDX-License-Identifier: Apache-2.0
#include "abmlora/graph.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "abmlora/errors.hpp"
#include "abmlora/kernels.hpp"

namespace abmlora {
namespace {

Tensor2 scalar_tensor(double v) { return Tensor2(1, 1, v); }

// Row-wise softmax of a block in place: rows [r0, r0 + n) of t.
void softmax_rows(Tensor2& t, std::size_t r0, std::size_t n) {
  for (std::size_t r = r0; r < r0 + n; ++r) {
    auto row = t.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double s = 0.0;
    for (double& v : row) {
      v = std::exp(v - mx);
      s += v;
    }
    for (double& v : row) v /= s;
  }
}

// Copy rows [r0, r0 + n) of src into a fresh n x cols tensor.
Tensor2 block(const Tensor2& src, std::size_t r0, std::size_t n) {
  Tensor2 out(n, src.cols());
  std::copy_n(src.data() + r0 * src.cols(), n * src.cols(), out.data());
  return out;
}

void put_block(Tensor2& dst, std::size_t r0, const Tensor2& src) {
  std::copy_n(src.data(), src.size(), dst.data() + r0 * dst.cols());
}

}  // namespace

Var Graph::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

const Graph::Node& Graph::node(Var v) const {
  if (!v.valid() || v.id >= nodes_.size()) throw Error("Graph: invalid variable handle");
  return nodes_[v.id];
}

bool Graph::any_requires_grad(std::initializer_list<std::size_t> ids) const {
  return std::any_of(ids.begin(), ids.end(), [&](std::size_t id) { return nodes_[id].requires_grad; });
}

Var Graph::input(Tensor2 value) {
  Node n;
  n.op = OpKind::input;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Graph::param(Tensor2 value) {
  Node n;
  n.op = OpKind::param;
  n.value = std::move(value);
  n.requires_grad = true;
  return push(std::move(n));
}

Var Graph::matmul(Var a, Var b) {
  Node n;
  n.op = OpKind::matmul;
  n.value = abmlora::matmul(node(a).value, node(b).value);
  n.inputs = {a.id, b.id};
  n.requires_grad = any_requires_grad({a.id, b.id});
  return push(std::move(n));
}

Var Graph::matmul_nt(Var a, Var b) {
  Node n;
  n.op = OpKind::matmul_nt;
  n.value = abmlora::matmul_nt(node(a).value, node(b).value);
  n.inputs = {a.id, b.id};
  n.requires_grad = any_requires_grad({a.id, b.id});
  return push(std::move(n));
}

Var Graph::add(Var a, Var b) {
  Node n;
  n.op = OpKind::add;
  n.value = abmlora::add(node(a).value, node(b).value);
  n.inputs = {a.id, b.id};
  n.requires_grad = any_requires_grad({a.id, b.id});
  return push(std::move(n));
}

Var Graph::sub(Var a, Var b) {
  Node n;
  n.op = OpKind::sub;
  n.value = abmlora::sub(node(a).value, node(b).value);
  n.inputs = {a.id, b.id};
  n.requires_grad = any_requires_grad({a.id, b.id});
  return push(std::move(n));
}

Var Graph::scale(Var a, double s) {
  Node n;
  n.op = OpKind::scale;
  n.value = abmlora::scale(node(a).value, s);
  n.scalar = s;
  n.inputs = {a.id};
  n.requires_grad = node(a).requires_grad;
  return push(std::move(n));
}

Var Graph::add_scalar(Var a, double s) {
  Node n;
  n.op = OpKind::add_scalar;
  n.value = node(a).value;
  for (double& v : n.value.values()) v += s;
  n.scalar = s;
  n.inputs = {a.id};
  n.requires_grad = node(a).requires_grad;
  return push(std::move(n));
}

Var Graph::hadamard(Var a, Var b) {
  Node n;
  n.op = OpKind::hadamard;
  n.value = abmlora::hadamard(node(a).value, node(b).value);
  n.inputs = {a.id, b.id};
  n.requires_grad = any_requires_grad({a.id, b.id});
  return push(std::move(n));
}

Var Graph::activation(Var z, Activation kind) {
  Node n;
  n.op = OpKind::activation;
  n.value = activate(node(z).value, kind);
  n.act = kind;
  n.inputs = {z.id};
  n.requires_grad = node(z).requires_grad;
  return push(std::move(n));
}

Var Graph::square(Var a) {
  Node n;
  n.op = OpKind::square;
  n.value = abmlora::hadamard(node(a).value, node(a).value);
  n.inputs = {a.id};
  n.requires_grad = node(a).requires_grad;
  return push(std::move(n));
}

Var Graph::sum(Var a) {
  Node n;
  n.op = OpKind::sum;
  double s = 0.0;
  for (double v : node(a).value.values()) s += v;
  n.value = scalar_tensor(s);
  n.inputs = {a.id};
  n.requires_grad = node(a).requires_grad;
  return push(std::move(n));
}

Var Graph::frobenius_sq(Var a) {
  Node n;
  n.op = OpKind::frobenius_sq;
  n.value = scalar_tensor(abmlora::frobenius_sq(node(a).value));
  n.inputs = {a.id};
  n.requires_grad = node(a).requires_grad;
  return push(std::move(n));
}

Var Graph::reshape(Var a, std::size_t rows, std::size_t cols) {
  const Tensor2& src = node(a).value;
  if (rows * cols != src.size()) {
    throw DimensionError("reshape: cannot view " + src.shape_str() + " as " +
                         std::to_string(rows) + "x" + std::to_string(cols));
  }
  Node n;
  n.op = OpKind::reshape;
  n.value = Tensor2(rows, cols, std::vector<double>(src.values().begin(), src.values().end()));
  n.inputs = {a.id};
  n.requires_grad = node(a).requires_grad;
  return push(std::move(n));
}

Var Graph::mean_rows(Var a, std::size_t group) {
  const Tensor2& src = node(a).value;
  if (group == 0 || src.rows() % group != 0) {
    throw DimensionError("mean_rows: " + std::to_string(src.rows()) +
                         " rows not divisible into groups of " + std::to_string(group));
  }
  Node n;
  n.op = OpKind::mean_rows;
  n.value = Tensor2(src.rows() / group, src.cols());
  for (std::size_t r = 0; r < src.rows(); ++r) {
    auto dst = n.value.row(r / group);
    auto s = src.row(r);
    for (std::size_t c = 0; c < src.cols(); ++c) dst[c] += s[c] / static_cast<double>(group);
  }
  n.group = group;
  n.inputs = {a.id};
  n.requires_grad = node(a).requires_grad;
  return push(std::move(n));
}

Var Graph::attention(Var q, Var k, Var v, std::size_t tokens) {
  const Tensor2& qv = node(q).value;
  const Tensor2& kv = node(k).value;
  const Tensor2& vv = node(v).value;
  if (!qv.same_shape(kv) || qv.rows() != vv.rows()) {
    throw DimensionError("attention: q " + qv.shape_str() + ", k " + kv.shape_str() + ", v " +
                         vv.shape_str() + " are incompatible");
  }
  if (tokens == 0 || qv.rows() % tokens != 0) {
    throw DimensionError("attention: " + std::to_string(qv.rows()) +
                         " rows not divisible into sequences of " + std::to_string(tokens));
  }
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(qv.cols()));
  Node n;
  n.op = OpKind::attention;
  n.value = Tensor2(vv.rows(), vv.cols());
  n.aux = Tensor2(qv.rows(), tokens);  // stacked attention probabilities
  for (std::size_t r0 = 0; r0 < qv.rows(); r0 += tokens) {
    Tensor2 scores = abmlora::scale(abmlora::matmul_nt(block(qv, r0, tokens), block(kv, r0, tokens)),
                                     inv_sqrt);
    softmax_rows(scores, 0, tokens);
    put_block(n.aux, r0, scores);
    put_block(n.value, r0, abmlora::matmul(scores, block(vv, r0, tokens)));
  }
  n.group = tokens;
  n.scalar = inv_sqrt;
  n.inputs = {q.id, k.id, v.id};
  n.requires_grad = any_requires_grad({q.id, k.id, v.id});
  return push(std::move(n));
}

Var Graph::softmax_cross_entropy(Var logits, std::span<const std::size_t> labels) {
  const Tensor2& z = node(logits).value;
  if (labels.size() != z.rows()) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for logits " + z.shape_str());
  }
  if (z.rows() == 0) throw DataError("softmax_cross_entropy: empty batch");
  Node n;
  n.op = OpKind::softmax_cross_entropy;
  n.aux = z;
  double loss = 0.0;
  for (std::size_t r = 0; r < z.rows(); ++r) {
    if (labels[r] >= z.cols()) {
      throw DataError("softmax_cross_entropy: label " + std::to_string(labels[r]) + " in row " +
                      std::to_string(r) + " is out of range for " + std::to_string(z.cols()) +
                      " classes");
    }
    auto row = z.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double s = 0.0;
    for (double v : row) s += std::exp(v - mx);
    const double log_norm = mx + std::log(s);
    loss += log_norm - row[labels[r]];
    auto prow = n.aux.row(r);
    for (std::size_t c = 0; c < z.cols(); ++c) prow[c] = std::exp(row[c] - log_norm);
  }
  n.value = scalar_tensor(loss / static_cast<double>(z.rows()));
  n.labels.assign(labels.begin(), labels.end());
  n.inputs = {logits.id};
  n.requires_grad = node(logits).requires_grad;
  return push(std::move(n));
}

void Graph::accumulate(std::size_t id, const Tensor2& g) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return;
  if (!n.grad) {
    n.grad = g;
  } else {
    axpy_inplace(*n.grad, 1.0, g);
  }
}

void Graph::backward(Var out) {
  const Tensor2& v = node(out).value;
  if (v.rows() != 1 || v.cols() != 1) {
    throw DimensionError("backward: output must be 1x1, got " + v.shape_str());
  }
  const Seed seed{out, scalar_tensor(1.0)};
  backward(std::span<const Seed>(&seed, 1));
}

void Graph::backward(std::span<const Seed> seeds) {
  for (Node& n : nodes_) n.grad.reset();
  std::size_t last = 0;
  for (const Seed& s : seeds) {
    require_same_shape(node(s.var).value, s.grad, "backward seed");
    accumulate(s.var.id, s.grad);
    last = std::max(last, s.var.id);
  }
  if (seeds.empty()) return;
  for (std::size_t id = last + 1; id-- > 0;) {
    if (nodes_[id].grad) backward_node(id);
  }
}

void Graph::backward_node(std::size_t id) {
  // Copy what we need: accumulate() may touch other nodes but never this one.
  const Node& n = nodes_[id];
  const Tensor2& g = *n.grad;
  const auto& in = n.inputs;
  switch (n.op) {
    case OpKind::input:
    case OpKind::param:
      break;
    case OpKind::matmul: {
      const Tensor2& a = nodes_[in[0]].value;
      const Tensor2& b = nodes_[in[1]].value;
      if (nodes_[in[0]].requires_grad) accumulate(in[0], abmlora::matmul_nt(g, b));
      if (nodes_[in[1]].requires_grad) accumulate(in[1], abmlora::matmul_tn(a, g));
      break;
    }
    case OpKind::matmul_nt: {
      const Tensor2& a = nodes_[in[0]].value;
      const Tensor2& b = nodes_[in[1]].value;
      if (nodes_[in[0]].requires_grad) accumulate(in[0], abmlora::matmul(g, b));
      if (nodes_[in[1]].requires_grad) accumulate(in[1], abmlora::matmul_tn(g, a));
      break;
    }
    case OpKind::add:
      accumulate(in[0], g);
      accumulate(in[1], g);
      break;
    case OpKind::sub:
      accumulate(in[0], g);
      if (nodes_[in[1]].requires_grad) accumulate(in[1], abmlora::scale(g, -1.0));
      break;
    case OpKind::scale:
      accumulate(in[0], abmlora::scale(g, n.scalar));
      break;
    case OpKind::add_scalar:
    case OpKind::reshape: {
      const Tensor2& src = nodes_[in[0]].value;
      accumulate(in[0], Tensor2(src.rows(), src.cols(),
                                std::vector<double>(g.values().begin(), g.values().end())));
      break;
    }
    case OpKind::hadamard:
      if (nodes_[in[0]].requires_grad) accumulate(in[0], abmlora::hadamard(g, nodes_[in[1]].value));
      if (nodes_[in[1]].requires_grad) accumulate(in[1], abmlora::hadamard(g, nodes_[in[0]].value));
      break;
    case OpKind::activation: {
      const Tensor2& z = nodes_[in[0]].value;
      if (n.act == Activation::relu) {
        Tensor2 gin(z.rows(), z.cols());
        kernels::active().relu_backward(z.data(), g.data(), gin.data(), z.size());
        accumulate(in[0], gin);
      } else {
        accumulate(in[0], abmlora::hadamard(g, activation_derivative(z, n.act)));
      }
      break;
    }
    case OpKind::square:
      accumulate(in[0], abmlora::scale(abmlora::hadamard(g, nodes_[in[0]].value), 2.0));
      break;
    case OpKind::sum: {
      const Tensor2& src = nodes_[in[0]].value;
      accumulate(in[0], Tensor2(src.rows(), src.cols(), g(0, 0)));
      break;
    }
    case OpKind::frobenius_sq:
      accumulate(in[0], abmlora::scale(nodes_[in[0]].value, 2.0 * g(0, 0)));
      break;
    case OpKind::mean_rows: {
      const Tensor2& src = nodes_[in[0]].value;
      Tensor2 gin(src.rows(), src.cols());
      const double inv = 1.0 / static_cast<double>(n.group);
      for (std::size_t r = 0; r < src.rows(); ++r) {
        auto dst = gin.row(r);
        auto gr = g.row(r / n.group);
        for (std::size_t c = 0; c < src.cols(); ++c) dst[c] = gr[c] * inv;
      }
      accumulate(in[0], gin);
      break;
    }
    case OpKind::attention: {
      const Tensor2& qv = nodes_[in[0]].value;
      const Tensor2& kv = nodes_[in[1]].value;
      const Tensor2& vv = nodes_[in[2]].value;
      const std::size_t t = n.group;
      Tensor2 dq(qv.rows(), qv.cols());
      Tensor2 dk(kv.rows(), kv.cols());
      Tensor2 dv(vv.rows(), vv.cols());
      for (std::size_t r0 = 0; r0 < qv.rows(); r0 += t) {
        const Tensor2 p = block(n.aux, r0, t);
        const Tensor2 go = block(g, r0, t);
        put_block(dv, r0, abmlora::matmul_tn(p, go));
        const Tensor2 dp = abmlora::matmul_nt(go, block(vv, r0, t));
        Tensor2 ds(t, t);
        for (std::size_t i = 0; i < t; ++i) {
          double inner = 0.0;
          for (std::size_t j = 0; j < t; ++j) inner += dp(i, j) * p(i, j);
          for (std::size_t j = 0; j < t; ++j) ds(i, j) = p(i, j) * (dp(i, j) - inner) * n.scalar;
        }
        put_block(dq, r0, abmlora::matmul(ds, block(kv, r0, t)));
        put_block(dk, r0, abmlora::matmul_tn(ds, block(qv, r0, t)));
      }
      accumulate(in[0], dq);
      accumulate(in[1], dk);
      accumulate(in[2], dv);
      break;
    }
    case OpKind::softmax_cross_entropy: {
      Tensor2 gin = n.aux;
      const double s = g(0, 0) / static_cast<double>(gin.rows());
      for (std::size_t r = 0; r < gin.rows(); ++r) gin(r, n.labels[r]) -= 1.0;
      for (double& v : gin.values()) v *= s;
      accumulate(in[0], gin);
      break;
    }
  }
}

const Tensor2& Graph::value(Var v) const { return node(v).value; }

bool Graph::requires_grad(Var v) const { return node(v).requires_grad; }

bool Graph::has_grad(Var v) const { return node(v).grad.has_value(); }

const Tensor2& Graph::grad(Var v) const {
  const Node& n = node(v);
  if (!n.grad) throw Error("Graph: node " + std::to_string(v.id) + " has no gradient");
  return *n.grad;
}

OpKind Graph::op(Var v) const { return node(v).op; }

std::span<const std::size_t> Graph::inputs(Var v) const { return node(v).inputs; }

}  // namespace abmlora
