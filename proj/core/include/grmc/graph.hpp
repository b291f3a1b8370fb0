// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "grmc/tensor.hpp"

namespace grmc::ad {

using NodeId = std::int32_t;

enum class OpTag : std::uint8_t {
  Leaf,
  Constant,
  Add,
  Sub,
  Mul,
  Neg,
  Exp,
  Log,
  Relu,
  Sigmoid,
  Scale,
  AddScalar,
  MatMul,
  Softmax,
  LogSumExp,
  CrossEntropy,
  CrossEntropyRows,
  Sum,
  Mean,
  RowSum,
  AddRowVec,
  RowwiseScale,
  Mix,
  StraightThrough,
  StWire,
  MeanSoftmaxRows,
  QuadraticToVertex,
};

const char* op_name(OpTag tag);

// Eager reverse-mode tape. Nodes are appended in topological order; values
// are computed at construction and gradients by a single reverse sweep.
// Gradients accumulate across backward calls until zero_grad().
class Graph {
 public:
  explicit Graph(std::uint64_t seed = 0) : seed_(seed) {}

  NodeId leaf(Tensor value, bool requires_grad);
  NodeId constant(Tensor value);

  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId neg(NodeId a);
  NodeId exp(NodeId a);
  NodeId log(NodeId a);
  NodeId relu(NodeId a);
  NodeId sigmoid(NodeId a);
  NodeId scale(NodeId a, double s);
  NodeId add_scalar(NodeId a, double s);

  NodeId matmul(NodeId a, NodeId b);
  NodeId softmax(NodeId a, int axis);
  NodeId logsumexp(NodeId a, int axis);  // reduced axis kept with size 1
  NodeId cross_entropy(NodeId logits, std::size_t label);
  NodeId cross_entropy_rows(NodeId logits, std::vector<std::size_t> labels);
  NodeId sum(NodeId a);
  NodeId mean(NodeId a);
  NodeId row_sum(NodeId a);                       // [B,H] -> [B,1]
  NodeId add_rowvec(NodeId mat, NodeId vec);      // [B,H] + [H]
  NodeId rowwise_scale(NodeId scale, NodeId a);   // [B,1] x [B,H]
  NodeId mix(NodeId weights, std::span<const NodeId> inputs);

  // Forward emits onehot(argmax y); backward passes the adjoint through
  // unchanged, so the relaxation keeps its gradient.
  NodeId straight_through(NodeId relaxed);

  // Forward emits `hard` verbatim; backward routes the adjoint into
  // `surrogate`. Equivalent to hard + (surrogate - detach(surrogate)).
  NodeId hard_with_surrogate(Tensor hard, NodeId surrogate);

  // ybar = (1/K) sum_i softmax((theta + noise[i,:]) / lambda). The noise
  // matrix is a fixed constant; gradients flow to theta only.
  NodeId mean_softmax_rows(NodeId theta, Tensor noise, double lambda);

  NodeId quadratic_to_vertex(NodeId y, std::size_t target);  // sum((y - e_t)^2)

  void backward(NodeId root);
  void zero_grad();

  const Tensor& value(NodeId id) const { return nodes_[check(id)].value; }
  const Tensor& grad(NodeId id) const;
  bool requires_grad(NodeId id) const { return nodes_[check(id)].requires_grad; }
  OpTag tag(NodeId id) const { return nodes_[check(id)].tag; }
  std::span<const NodeId> parents(NodeId id) const {
    const auto& p = nodes_[check(id)].parents;
    return {p.data(), p.size()};
  }

  std::size_t size() const { return nodes_.size(); }
  std::uint64_t seed() const { return seed_; }
  std::size_t last_backward_visits() const { return last_backward_visits_; }

  void clear();

 private:
  friend struct BackwardCtx;
  using BackwardFn = std::function<void(Graph&, const Tensor& adj)>;

  struct Node {
    Tensor value;
    Tensor grad;  // allocated iff requires_grad
    OpTag tag = OpTag::Leaf;
    bool requires_grad = false;
    std::vector<NodeId> parents;
    BackwardFn back;
  };

  NodeId check(NodeId id) const;
  NodeId emplace(Tensor value, OpTag tag, std::vector<NodeId> parents, BackwardFn back);
  bool any_parent_needs(const std::vector<NodeId>& parents) const;

  // scratch adjoints for the active backward sweep
  bool adj_touched(NodeId id) const { return touched_[static_cast<std::size_t>(id)] != 0; }
  Tensor& adj(NodeId id);

  std::vector<Node> nodes_;
  std::vector<Tensor> adjoint_;
  std::vector<char> touched_;
  std::uint64_t seed_;
  std::size_t last_backward_visits_ = 0;
};

// Max over coordinates of |autodiff - central difference| / max(1, |central difference|).
// `build` must append a scalar-valued subgraph that depends on a single leaf.
double gradcheck(const std::function<NodeId(Graph&, NodeId)>& build, const Tensor& point,
                 double step);

}  // namespace grmc::ad
