// SPDX-License-Identifier: Apache-2.0
#include "grmc/graph.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>

namespace grmc::ad {

namespace {

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

// slice decomposition for axis reductions over rank-1/2 tensors
struct AxisSlices {
  std::size_t outer;   // number of slices
  std::size_t len;     // slice length
  std::size_t stride;  // step between slice elements
  std::size_t pitch;   // step between slice bases
};

AxisSlices axis_slices(const Tensor& t, int axis, const char* opname) {
  if (t.rank() == 1) {
    if (axis != 0) throw std::invalid_argument(std::string(opname) + ": axis out of range");
    return {1, t.numel(), 1, 0};
  }
  if (t.rank() == 2) {
    std::size_t rows = t.dim(0), cols = t.dim(1);
    if (axis == 1) return {rows, cols, 1, cols};
    if (axis == 0) return {cols, rows, cols, 1};
    throw std::invalid_argument(std::string(opname) + ": axis out of range");
  }
  throw std::invalid_argument(std::string(opname) + ": rank > 2 not supported");
}

void softmax_slice(const double* in, double* out, std::size_t len, std::size_t stride) {
  double m = in[0];
  for (std::size_t i = 1; i < len; ++i) m = std::max(m, in[i * stride]);
  double z = 0.0;
  for (std::size_t i = 0; i < len; ++i) {
    double e = std::exp(in[i * stride] - m);
    out[i * stride] = e;
    z += e;
  }
  double inv = 1.0 / z;
  for (std::size_t i = 0; i < len; ++i) out[i * stride] *= inv;
}

double logsumexp_slice(const double* in, std::size_t len, std::size_t stride) {
  double m = in[0];
  for (std::size_t i = 1; i < len; ++i) m = std::max(m, in[i * stride]);
  double z = 0.0;
  for (std::size_t i = 0; i < len; ++i) z += std::exp(in[i * stride] - m);
  return m + std::log(z);
}

}  // namespace

const char* op_name(OpTag tag) {
  switch (tag) {
    case OpTag::Leaf: return "leaf";
    case OpTag::Constant: return "constant";
    case OpTag::Add: return "add";
    case OpTag::Sub: return "sub";
    case OpTag::Mul: return "mul";
    case OpTag::Neg: return "neg";
    case OpTag::Exp: return "exp";
    case OpTag::Log: return "log";
    case OpTag::Relu: return "relu";
    case OpTag::Sigmoid: return "sigmoid";
    case OpTag::Scale: return "scale";
    case OpTag::AddScalar: return "add_scalar";
    case OpTag::MatMul: return "matmul";
    case OpTag::Softmax: return "softmax";
    case OpTag::LogSumExp: return "logsumexp";
    case OpTag::CrossEntropy: return "cross_entropy";
    case OpTag::CrossEntropyRows: return "cross_entropy_rows";
    case OpTag::Sum: return "sum";
    case OpTag::Mean: return "mean";
    case OpTag::RowSum: return "row_sum";
    case OpTag::AddRowVec: return "add_rowvec";
    case OpTag::RowwiseScale: return "rowwise_scale";
    case OpTag::Mix: return "mix";
    case OpTag::StraightThrough: return "straight_through";
    case OpTag::StWire: return "st_wire";
    case OpTag::MeanSoftmaxRows: return "mean_softmax_rows";
    case OpTag::QuadraticToVertex: return "quadratic_to_vertex";
  }
  return "?";
}

NodeId Graph::check(NodeId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size())
    throw std::out_of_range("graph: bad node id");
  return id;
}

bool Graph::any_parent_needs(const std::vector<NodeId>& parents) const {
  for (NodeId p : parents)
    if (nodes_[p].requires_grad) return true;
  return false;
}

NodeId Graph::emplace(Tensor value, OpTag tag, std::vector<NodeId> parents, BackwardFn back) {
  for (NodeId p : parents) check(p);
  Node nd;
  nd.tag = tag;
  nd.requires_grad = any_parent_needs(parents);
  nd.parents = std::move(parents);
  if (nd.requires_grad) {
    nd.grad = Tensor::zeros(value.shape());
    nd.back = std::move(back);
  }
  nd.value = std::move(value);
  nodes_.push_back(std::move(nd));
  return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Graph::leaf(Tensor value, bool requires_grad) {
  if (!value.all_finite()) throw std::invalid_argument("leaf: non-finite input");
  Node nd;
  nd.tag = requires_grad ? OpTag::Leaf : OpTag::Constant;
  nd.requires_grad = requires_grad;
  if (requires_grad) nd.grad = Tensor::zeros(value.shape());
  nd.value = std::move(value);
  nodes_.push_back(std::move(nd));
  return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Graph::constant(Tensor value) { return leaf(std::move(value), false); }

Tensor& Graph::adj(NodeId id) {
  auto i = static_cast<std::size_t>(id);
  if (!touched_[i]) {
    const auto& shape = nodes_[i].value.shape();
    if (adjoint_[i].shape() == shape)
      adjoint_[i].fill(0.0);
    else
      adjoint_[i] = Tensor::zeros(shape);
    touched_[i] = 1;
  }
  return adjoint_[i];
}

const Tensor& Graph::grad(NodeId id) const {
  const Node& nd = nodes_[check(id)];
  if (!nd.requires_grad) throw std::logic_error("grad: node does not track gradients");
  return nd.grad;
}

void Graph::backward(NodeId root) {
  const Node& r = nodes_[check(root)];
  if (!r.value.is_scalar()) throw std::invalid_argument("backward: root must be scalar");
  std::size_t n = nodes_.size();
  adjoint_.resize(n);
  touched_.assign(n, 0);
  adj(root)[0] = 1.0;

  std::size_t visits = 0;
  for (NodeId id = root; id >= 0; --id) {
    ++visits;
    Node& nd = nodes_[static_cast<std::size_t>(id)];
    if (!touched_[static_cast<std::size_t>(id)] || !nd.requires_grad) continue;
    if (nd.back) nd.back(*this, adjoint_[static_cast<std::size_t>(id)]);
  }
  for (NodeId id = root; id >= 0; --id) {
    Node& nd = nodes_[static_cast<std::size_t>(id)];
    if (nd.requires_grad && touched_[static_cast<std::size_t>(id)]) {
      const Tensor& a = adjoint_[static_cast<std::size_t>(id)];
      for (std::size_t i = 0; i < a.numel(); ++i) nd.grad[i] += a[i];
    }
  }
  last_backward_visits_ = visits;
}

void Graph::zero_grad() {
  for (Node& nd : nodes_)
    if (nd.requires_grad) nd.grad.fill(0.0);
}

void Graph::clear() {
  nodes_.clear();
  adjoint_.clear();
  touched_.clear();
  last_backward_visits_ = 0;
}

// ---------------------------------------------------------------------------
// elementwise ops (scalar-tensor broadcast allowed, nothing else)

namespace {
void check_binary(const Tensor& a, const Tensor& b, const char* opname) {
  if (!a.same_shape(b) && !a.is_scalar() && !b.is_scalar())
    throw std::invalid_argument(std::string(opname) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}
}  // namespace

NodeId Graph::add(NodeId a, NodeId b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  check_binary(av, bv, "add");
  const Tensor& big = av.numel() >= bv.numel() ? av : bv;
  Tensor out = Tensor::zeros(big.shape());
  std::size_t na = av.numel(), nb = bv.numel();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[na == 1 ? 0 : i] + bv[nb == 1 ? 0 : i];
  return emplace(std::move(out), OpTag::Add, {a, b}, [a, b](Graph& g, const Tensor& adj) {
    auto push = [&](NodeId p) {
      if (!g.nodes_[p].requires_grad) return;
      Tensor& pa = g.adj(p);
      if (pa.numel() == 1) {
        for (std::size_t i = 0; i < adj.numel(); ++i) pa[0] += adj[i];
      } else {
        for (std::size_t i = 0; i < adj.numel(); ++i) pa[i] += adj[i];
      }
    };
    push(a);
    push(b);
  });
}

NodeId Graph::sub(NodeId a, NodeId b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  check_binary(av, bv, "sub");
  const Tensor& big = av.numel() >= bv.numel() ? av : bv;
  Tensor out = Tensor::zeros(big.shape());
  std::size_t na = av.numel(), nb = bv.numel();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[na == 1 ? 0 : i] - bv[nb == 1 ? 0 : i];
  return emplace(std::move(out), OpTag::Sub, {a, b}, [a, b](Graph& g, const Tensor& adj) {
    if (g.nodes_[a].requires_grad) {
      Tensor& pa = g.adj(a);
      if (pa.numel() == 1)
        for (std::size_t i = 0; i < adj.numel(); ++i) pa[0] += adj[i];
      else
        for (std::size_t i = 0; i < adj.numel(); ++i) pa[i] += adj[i];
    }
    if (g.nodes_[b].requires_grad) {
      Tensor& pb = g.adj(b);
      if (pb.numel() == 1)
        for (std::size_t i = 0; i < adj.numel(); ++i) pb[0] -= adj[i];
      else
        for (std::size_t i = 0; i < adj.numel(); ++i) pb[i] -= adj[i];
    }
  });
}

NodeId Graph::mul(NodeId a, NodeId b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  check_binary(av, bv, "mul");
  const Tensor& big = av.numel() >= bv.numel() ? av : bv;
  Tensor out = Tensor::zeros(big.shape());
  std::size_t na = av.numel(), nb = bv.numel();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[na == 1 ? 0 : i] * bv[nb == 1 ? 0 : i];
  return emplace(std::move(out), OpTag::Mul, {a, b}, [a, b](Graph& g, const Tensor& adj) {
    const Tensor& av2 = g.value(a);
    const Tensor& bv2 = g.value(b);
    std::size_t na2 = av2.numel(), nb2 = bv2.numel();
    if (g.nodes_[a].requires_grad) {
      Tensor& pa = g.adj(a);
      for (std::size_t i = 0; i < adj.numel(); ++i)
        pa[na2 == 1 ? 0 : i] += adj[i] * bv2[nb2 == 1 ? 0 : i];
    }
    if (g.nodes_[b].requires_grad) {
      Tensor& pb = g.adj(b);
      for (std::size_t i = 0; i < adj.numel(); ++i)
        pb[nb2 == 1 ? 0 : i] += adj[i] * av2[na2 == 1 ? 0 : i];
    }
  });
}

NodeId Graph::neg(NodeId a) {
  Tensor out = value(a);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = -out[i];
  return emplace(std::move(out), OpTag::Neg, {a}, [a](Graph& g, const Tensor& adj) {
    if (!g.nodes_[a].requires_grad) return;
    Tensor& pa = g.adj(a);
    for (std::size_t i = 0; i < adj.numel(); ++i) pa[i] -= adj[i];
  });
}

NodeId Graph::exp(NodeId a) {
  Tensor out = value(a);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::exp(out[i]);
  NodeId id = emplace(std::move(out), OpTag::Exp, {a}, [a](Graph& g, const Tensor& adj) {
    if (!g.nodes_[a].requires_grad) return;
    NodeId self = static_cast<NodeId>(&adj - g.adjoint_.data());
    const Tensor& y = g.value(self);
    Tensor& pa = g.adj(a);
    for (std::size_t i = 0; i < adj.numel(); ++i) pa[i] += adj[i] * y[i];
  });
  return id;
}

NodeId Graph::log(NodeId a) {
  const Tensor& av = value(a);
  for (std::size_t i = 0; i < av.numel(); ++i)
    if (!(av[i] > 0.0)) throw std::domain_error("log: operand must be strictly positive");
  Tensor out = av;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::log(out[i]);
  return emplace(std::move(out), OpTag::Log, {a}, [a](Graph& g, const Tensor& adj) {
    if (!g.nodes_[a].requires_grad) return;
    const Tensor& x = g.value(a);
    Tensor& pa = g.adj(a);
    for (std::size_t i = 0; i < adj.numel(); ++i) pa[i] += adj[i] / x[i];
  });
}

NodeId Graph::relu(NodeId a) {
  Tensor out = value(a);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
  return emplace(std::move(out), OpTag::Relu, {a}, [a](Graph& g, const Tensor& adj) {
    if (!g.nodes_[a].requires_grad) return;
    const Tensor& x = g.value(a);
    Tensor& pa = g.adj(a);
    for (std::size_t i = 0; i < adj.numel(); ++i)
      if (x[i] > 0.0) pa[i] += adj[i];
  });
}

NodeId Graph::sigmoid(NodeId a) {
  Tensor out = value(a);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = stable_sigmoid(out[i]);
  NodeId id = emplace(std::move(out), OpTag::Sigmoid, {a}, [a](Graph& g, const Tensor& adj) {
    if (!g.nodes_[a].requires_grad) return;
    NodeId self = static_cast<NodeId>(&adj - g.adjoint_.data());
    const Tensor& y = g.value(self);
    Tensor& pa = g.adj(a);
    for (std::size_t i = 0; i < adj.numel(); ++i) pa[i] += adj[i] * y[i] * (1.0 - y[i]);
  });
  return id;
}

NodeId Graph::scale(NodeId a, double s) {
  Tensor out = value(a);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= s;
  return emplace(std::move(out), OpTag::Scale, {a}, [a, s](Graph& g, const Tensor& adj) {
    if (!g.nodes_[a].requires_grad) return;
    Tensor& pa = g.adj(a);
    for (std::size_t i = 0; i < adj.numel(); ++i) pa[i] += adj[i] * s;
  });
}

NodeId Graph::add_scalar(NodeId a, double s) {
  Tensor out = value(a);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += s;
  return emplace(std::move(out), OpTag::AddScalar, {a}, [a](Graph& g, const Tensor& adj) {
    if (!g.nodes_[a].requires_grad) return;
    Tensor& pa = g.adj(a);
    for (std::size_t i = 0; i < adj.numel(); ++i) pa[i] += adj[i];
  });
}

// ---------------------------------------------------------------------------
// linear algebra and reductions

NodeId Graph::matmul(NodeId a, NodeId b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
    throw std::invalid_argument("matmul: inner dimensions disagree, " + shape_str(av.shape()) +
                                " x " + shape_str(bv.shape()));
  std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out = Tensor::zeros({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      double x = av.at(i, p);
      if (x == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) out.at(i, j) += x * bv.at(p, j);
    }
  return emplace(std::move(out), OpTag::MatMul, {a, b}, [a, b, m, k, n](Graph& g, const Tensor& adj) {
    const Tensor& av2 = g.value(a);
    const Tensor& bv2 = g.value(b);
    if (g.nodes_[a].requires_grad) {
      Tensor& pa = g.adj(a);  // dA = dC * B^T
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          double d = adj[i * n + j];
          if (d == 0.0) continue;
          for (std::size_t p = 0; p < k; ++p) pa[i * k + p] += d * bv2[p * n + j];
        }
    }
    if (g.nodes_[b].requires_grad) {
      Tensor& pb = g.adj(b);  // dB = A^T * dC
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double x = av2[i * k + p];
          if (x == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) pb[p * n + j] += x * adj[i * n + j];
        }
    }
  });
}

NodeId Graph::softmax(NodeId a, int axis) {
  const Tensor& av = value(a);
  if (!av.all_finite()) throw std::invalid_argument("softmax: non-finite input");
  AxisSlices s = axis_slices(av, axis, "softmax");
  Tensor out = Tensor::zeros(av.shape());
  for (std::size_t k = 0; k < s.outer; ++k)
    softmax_slice(av.data() + k * s.pitch, out.data() + k * s.pitch, s.len, s.stride);
  return emplace(std::move(out), OpTag::Softmax, {a}, [a, s](Graph& g, const Tensor& adj) {
    if (!g.nodes_[a].requires_grad) return;
    NodeId self = static_cast<NodeId>(&adj - g.adjoint_.data());
    const Tensor& y = g.value(self);
    Tensor& pa = g.adj(a);
    for (std::size_t k = 0; k < s.outer; ++k) {
      const double* yk = y.data() + k * s.pitch;
      const double* ak = adj.data() + k * s.pitch;
      double dot = 0.0;
      for (std::size_t i = 0; i < s.len; ++i) dot += ak[i * s.stride] * yk[i * s.stride];
      double* pk = pa.data() + k * s.pitch;
      for (std::size_t i = 0; i < s.len; ++i)
        pk[i * s.stride] += yk[i * s.stride] * (ak[i * s.stride] - dot);
    }
  });
}

NodeId Graph::logsumexp(NodeId a, int axis) {
  const Tensor& av = value(a);
  if (!av.all_finite()) throw std::invalid_argument("logsumexp: non-finite input");
  AxisSlices s = axis_slices(av, axis, "logsumexp");
  std::vector<std::size_t> out_shape = av.shape();
  out_shape[static_cast<std::size_t>(axis)] = 1;
  Tensor out = Tensor::zeros(out_shape);
  for (std::size_t k = 0; k < s.outer; ++k)
    out[k] = logsumexp_slice(av.data() + k * s.pitch, s.len, s.stride);
  return emplace(std::move(out), OpTag::LogSumExp, {a}, [a, s](Graph& g, const Tensor& adj) {
    if (!g.nodes_[a].requires_grad) return;
    const Tensor& x = g.value(a);
    Tensor& pa = g.adj(a);
    std::vector<double> sm(s.len);
    for (std::size_t k = 0; k < s.outer; ++k) {
      const double* xk = x.data() + k * s.pitch;
      double m = xk[0];
      for (std::size_t i = 1; i < s.len; ++i) m = std::max(m, xk[i * s.stride]);
      double z = 0.0;
      for (std::size_t i = 0; i < s.len; ++i) {
        sm[i] = std::exp(xk[i * s.stride] - m);
        z += sm[i];
      }
      double* pk = pa.data() + k * s.pitch;
      for (std::size_t i = 0; i < s.len; ++i) pk[i * s.stride] += adj[k] * sm[i] / z;
    }
  });
}

NodeId Graph::cross_entropy(NodeId logits, std::size_t label) {
  const Tensor& lv = value(logits);
  if (lv.rank() != 1) throw std::invalid_argument("cross_entropy: logits must be rank 1");
  if (label >= lv.numel()) throw std::out_of_range("cross_entropy: label index out of range");
  double lse = logsumexp_slice(lv.data(), lv.numel(), 1);
  Tensor out = Tensor::scalar(lse - lv[label]);
  return emplace(std::move(out), OpTag::CrossEntropy, {logits},
                 [logits, label](Graph& g, const Tensor& adj) {
                   if (!g.nodes_[logits].requires_grad) return;
                   const Tensor& x = g.value(logits);
                   Tensor& pa = g.adj(logits);
                   std::vector<double> p(x.numel());
                   softmax_slice(x.data(), p.data(), x.numel(), 1);
                   for (std::size_t i = 0; i < x.numel(); ++i)
                     pa[i] += adj[0] * (p[i] - (i == label ? 1.0 : 0.0));
                 });
}

NodeId Graph::cross_entropy_rows(NodeId logits, std::vector<std::size_t> labels) {
  const Tensor& lv = value(logits);
  if (lv.rank() != 2) throw std::invalid_argument("cross_entropy_rows: logits must be rank 2");
  std::size_t rows = lv.dim(0), cols = lv.dim(1);
  if (labels.size() != rows)
    throw std::invalid_argument("cross_entropy_rows: one label per row required");
  for (std::size_t l : labels)
    if (l >= cols) throw std::out_of_range("cross_entropy_rows: label index out of range");
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r)
    total += logsumexp_slice(lv.data() + r * cols, cols, 1) - lv[r * cols + labels[r]];
  Tensor out = Tensor::scalar(total / static_cast<double>(rows));
  return emplace(std::move(out), OpTag::CrossEntropyRows, {logits},
                 [logits, labels = std::move(labels), rows, cols](Graph& g, const Tensor& adj) {
                   if (!g.nodes_[logits].requires_grad) return;
                   const Tensor& x = g.value(logits);
                   Tensor& pa = g.adj(logits);
                   std::vector<double> p(cols);
                   double w = adj[0] / static_cast<double>(rows);
                   for (std::size_t r = 0; r < rows; ++r) {
                     softmax_slice(x.data() + r * cols, p.data(), cols, 1);
                     for (std::size_t c = 0; c < cols; ++c)
                       pa[r * cols + c] += w * (p[c] - (c == labels[r] ? 1.0 : 0.0));
                   }
                 });
}

NodeId Graph::sum(NodeId a) {
  const Tensor& av = value(a);
  double total = 0.0;
  for (std::size_t i = 0; i < av.numel(); ++i) total += av[i];
  return emplace(Tensor::scalar(total), OpTag::Sum, {a}, [a](Graph& g, const Tensor& adj) {
    if (!g.nodes_[a].requires_grad) return;
    Tensor& pa = g.adj(a);
    for (std::size_t i = 0; i < pa.numel(); ++i) pa[i] += adj[0];
  });
}

NodeId Graph::mean(NodeId a) {
  const Tensor& av = value(a);
  double total = 0.0;
  for (std::size_t i = 0; i < av.numel(); ++i) total += av[i];
  double inv = 1.0 / static_cast<double>(av.numel());
  return emplace(Tensor::scalar(total * inv), OpTag::Mean, {a},
                 [a, inv](Graph& g, const Tensor& adj) {
                   if (!g.nodes_[a].requires_grad) return;
                   Tensor& pa = g.adj(a);
                   for (std::size_t i = 0; i < pa.numel(); ++i) pa[i] += adj[0] * inv;
                 });
}

NodeId Graph::row_sum(NodeId a) {
  const Tensor& av = value(a);
  if (av.rank() != 2) throw std::invalid_argument("row_sum: rank-2 input required");
  std::size_t rows = av.dim(0), cols = av.dim(1);
  Tensor out = Tensor::zeros({rows, 1});
  for (std::size_t r = 0; r < rows; ++r) {
    double t = 0.0;
    for (std::size_t c = 0; c < cols; ++c) t += av.at(r, c);
    out[r] = t;
  }
  return emplace(std::move(out), OpTag::RowSum, {a}, [a, rows, cols](Graph& g, const Tensor& adj) {
    if (!g.nodes_[a].requires_grad) return;
    Tensor& pa = g.adj(a);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) pa[r * cols + c] += adj[r];
  });
}

NodeId Graph::add_rowvec(NodeId mat, NodeId vec) {
  const Tensor& mv = value(mat);
  const Tensor& vv = value(vec);
  if (mv.rank() != 2 || vv.rank() != 1 || vv.numel() != mv.dim(1))
    throw std::invalid_argument("add_rowvec: need [R,C] and [C]");
  std::size_t rows = mv.dim(0), cols = mv.dim(1);
  Tensor out = mv;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out.at(r, c) += vv[c];
  return emplace(std::move(out), OpTag::AddRowVec, {mat, vec},
                 [mat, vec, rows, cols](Graph& g, const Tensor& adj) {
                   if (g.nodes_[mat].requires_grad) {
                     Tensor& pm = g.adj(mat);
                     for (std::size_t i = 0; i < adj.numel(); ++i) pm[i] += adj[i];
                   }
                   if (g.nodes_[vec].requires_grad) {
                     Tensor& pv = g.adj(vec);
                     for (std::size_t r = 0; r < rows; ++r)
                       for (std::size_t c = 0; c < cols; ++c) pv[c] += adj[r * cols + c];
                   }
                 });
}

NodeId Graph::rowwise_scale(NodeId s, NodeId a) {
  const Tensor& sv = value(s);
  const Tensor& av = value(a);
  if (sv.rank() != 2 || sv.dim(1) != 1 || av.rank() != 2 || sv.dim(0) != av.dim(0))
    throw std::invalid_argument("rowwise_scale: need [R,1] and [R,C]");
  std::size_t rows = av.dim(0), cols = av.dim(1);
  Tensor out = av;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out.at(r, c) *= sv[r];
  return emplace(std::move(out), OpTag::RowwiseScale, {s, a},
                 [s, a, rows, cols](Graph& g, const Tensor& adj) {
                   const Tensor& sv2 = g.value(s);
                   const Tensor& av2 = g.value(a);
                   if (g.nodes_[s].requires_grad) {
                     Tensor& ps = g.adj(s);
                     for (std::size_t r = 0; r < rows; ++r) {
                       double t = 0.0;
                       for (std::size_t c = 0; c < cols; ++c)
                         t += adj[r * cols + c] * av2[r * cols + c];
                       ps[r] += t;
                     }
                   }
                   if (g.nodes_[a].requires_grad) {
                     Tensor& pa = g.adj(a);
                     for (std::size_t r = 0; r < rows; ++r)
                       for (std::size_t c = 0; c < cols; ++c)
                         pa[r * cols + c] += adj[r * cols + c] * sv2[r];
                   }
                 });
}

NodeId Graph::mix(NodeId weights, std::span<const NodeId> inputs) {
  const Tensor& wv = value(weights);
  if (wv.rank() != 1 || wv.numel() != inputs.size())
    throw std::invalid_argument("mix: one weight per input required");
  if (inputs.empty()) throw std::invalid_argument("mix: empty input list");
  const Tensor& first = value(inputs[0]);
  for (NodeId id : inputs)
    if (!value(id).same_shape(first)) throw std::invalid_argument("mix: input shape mismatch");
  Tensor out = Tensor::zeros(first.shape());
  for (std::size_t e = 0; e < inputs.size(); ++e) {
    double w = wv[e];
    if (w == 0.0) continue;
    const Tensor& h = value(inputs[e]);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += w * h[i];
  }
  std::vector<NodeId> parents(inputs.begin(), inputs.end());
  parents.push_back(weights);
  std::vector<NodeId> in(inputs.begin(), inputs.end());
  return emplace(std::move(out), OpTag::Mix, std::move(parents),
                 [weights, in = std::move(in)](Graph& g, const Tensor& adj) {
                   const Tensor& wv2 = g.value(weights);
                   if (g.nodes_[weights].requires_grad) {
                     Tensor& pw = g.adj(weights);
                     for (std::size_t e = 0; e < in.size(); ++e) {
                       const Tensor& h = g.value(in[e]);
                       double t = 0.0;
                       for (std::size_t i = 0; i < adj.numel(); ++i) t += adj[i] * h[i];
                       pw[e] += t;
                     }
                   }
                   for (std::size_t e = 0; e < in.size(); ++e) {
                     if (!g.nodes_[in[e]].requires_grad) continue;
                     double w = wv2[e];
                     Tensor& ph = g.adj(in[e]);
                     for (std::size_t i = 0; i < adj.numel(); ++i) ph[i] += w * adj[i];
                   }
                 });
}

// ---------------------------------------------------------------------------
// straight-through wiring

NodeId Graph::straight_through(NodeId relaxed) {
  const Tensor& yv = value(relaxed);
  if (yv.rank() != 1) throw std::invalid_argument("straight_through: rank-1 input required");
  Tensor out = Tensor::onehot(yv.numel(), argmax_index(yv.view()));
  return emplace(std::move(out), OpTag::StraightThrough, {relaxed},
                 [relaxed](Graph& g, const Tensor& adj) {
                   if (!g.nodes_[relaxed].requires_grad) return;
                   Tensor& pa = g.adj(relaxed);
                   for (std::size_t i = 0; i < adj.numel(); ++i) pa[i] += adj[i];
                 });
}

NodeId Graph::hard_with_surrogate(Tensor hard, NodeId surrogate) {
  const Tensor& sv = value(surrogate);
  if (!hard.same_shape(sv)) throw std::invalid_argument("hard_with_surrogate: shape mismatch");
  return emplace(std::move(hard), OpTag::StWire, {surrogate},
                 [surrogate](Graph& g, const Tensor& adj) {
                   if (!g.nodes_[surrogate].requires_grad) return;
                   Tensor& pa = g.adj(surrogate);
                   for (std::size_t i = 0; i < adj.numel(); ++i) pa[i] += adj[i];
                 });
}

NodeId Graph::mean_softmax_rows(NodeId theta, Tensor noise, double lambda) {
  const Tensor& tv = value(theta);
  if (tv.rank() != 1) throw std::invalid_argument("mean_softmax_rows: theta must be rank 1");
  if (noise.rank() != 2 || noise.dim(1) != tv.numel())
    throw std::invalid_argument("mean_softmax_rows: noise must be [K,C]");
  if (!(lambda > 0.0)) throw std::invalid_argument("mean_softmax_rows: lambda must be positive");
  std::size_t K = noise.dim(0), C = tv.numel();
  double inv_lambda = 1.0 / lambda;
  auto rows = std::make_shared<Tensor>(Tensor::zeros({K, C}));
  Tensor out = Tensor::zeros({C});
  std::vector<double> z(C);
  for (std::size_t i = 0; i < K; ++i) {
    for (std::size_t c = 0; c < C; ++c) z[c] = (tv[c] + noise.at(i, c)) * inv_lambda;
    softmax_slice(z.data(), rows->data() + i * C, C, 1);
    for (std::size_t c = 0; c < C; ++c) out[c] += rows->at(i, c);
  }
  double inv_k = 1.0 / static_cast<double>(K);
  for (std::size_t c = 0; c < C; ++c) out[c] *= inv_k;
  return emplace(std::move(out), OpTag::MeanSoftmaxRows, {theta},
                 [theta, rows, K, C, inv_lambda, inv_k](Graph& g, const Tensor& adj) {
                   if (!g.nodes_[theta].requires_grad) return;
                   Tensor& pa = g.adj(theta);
                   double w = inv_lambda * inv_k;
                   for (std::size_t i = 0; i < K; ++i) {
                     const double* y = rows->data() + i * C;
                     double dot = 0.0;
                     for (std::size_t c = 0; c < C; ++c) dot += adj[c] * y[c];
                     for (std::size_t c = 0; c < C; ++c) pa[c] += w * y[c] * (adj[c] - dot);
                   }
                 });
}

NodeId Graph::quadratic_to_vertex(NodeId y, std::size_t target) {
  const Tensor& yv = value(y);
  if (yv.rank() != 1) throw std::invalid_argument("quadratic_to_vertex: rank-1 input required");
  if (target >= yv.numel()) throw std::out_of_range("quadratic_to_vertex: target out of range");
  double total = 0.0;
  for (std::size_t i = 0; i < yv.numel(); ++i) {
    double d = yv[i] - (i == target ? 1.0 : 0.0);
    total += d * d;
  }
  return emplace(Tensor::scalar(total), OpTag::QuadraticToVertex, {y},
                 [y, target](Graph& g, const Tensor& adj) {
                   if (!g.nodes_[y].requires_grad) return;
                   const Tensor& yv2 = g.value(y);
                   Tensor& pa = g.adj(y);
                   for (std::size_t i = 0; i < yv2.numel(); ++i)
                     pa[i] += adj[0] * 2.0 * (yv2[i] - (i == target ? 1.0 : 0.0));
                 });
}

// ---------------------------------------------------------------------------

double gradcheck(const std::function<NodeId(Graph&, NodeId)>& build, const Tensor& point,
                 double step) {
  if (!(step > 0.0)) throw std::invalid_argument("gradcheck: step must be positive");
  Graph g0;
  NodeId x0 = g0.leaf(point, true);
  NodeId y0 = build(g0, x0);
  if (!g0.value(y0).is_scalar()) throw std::invalid_argument("gradcheck: output must be scalar");
  g0.backward(y0);
  Tensor ad = g0.grad(x0);

  auto eval = [&](std::size_t i, double v) {
    Tensor p = point;
    p[i] = v;
    Graph g;
    NodeId x = g.leaf(p, true);
    NodeId y = build(g, x);
    return g.value(y)[0];
  };

  double max_err = 0.0;
  for (std::size_t i = 0; i < point.numel(); ++i) {
    double fd = (eval(i, point[i] + step) - eval(i, point[i] - step)) / (2.0 * step);
    double err = std::abs(ad[i] - fd) / std::max(1.0, std::abs(fd));
    max_err = std::max(max_err, err);
  }
  return max_err;
}

}  // namespace grmc::ad
