// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode differentiation over dense tensors. A Graph is a symbolic tape:
// nodes are appended in topological order, leaves are resolved by name at
// evaluation time. The tape is cheap to build and is rebuilt for every step.
#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "cycleadapt/diff/tensor.hpp"

namespace cycleadapt::diff {

using NodeId = std::uint32_t;

enum class Op : std::uint8_t {
  Leaf,
  Constant,
  MatMul,       // (..., m, k) x (k, n)
  BatchMatMul,  // (..., m, k) x (..., k, n), identical leading dims
  Add,          // broadcasting
  Sub,          // broadcasting
  Mul,          // broadcasting, elementwise
  ScalarMul,
  Transpose,    // swaps the last two axes
  Reshape,
  Concat,
  Slice,
  Relu,
  LayerNorm,    // over the last axis, with gain and bias inputs
  MeanAbs,      // scalar L1 mean
  MaskSelect,   // keeps positions with mask==1 along an axis
  Sum,
  Rot6d,        // (..., 6) -> (..., 3, 3)
};

const char* op_name(Op op);

struct Node {
  Op op = Op::Leaf;
  std::vector<NodeId> inputs;

  // Per-op attributes; unused fields stay at their defaults.
  std::string name;          // Leaf
  bool trainable = false;    // Leaf
  std::shared_ptr<const Tensor> value;  // Constant
  double scalar = 0.0;       // ScalarMul
  std::size_t axis = 0;      // Concat, Slice, MaskSelect
  std::size_t start = 0;     // Slice
  std::size_t length = 0;    // Slice
  Shape shape;               // Reshape target
  std::vector<std::uint8_t> mask;  // MaskSelect
};

inline constexpr double kLayerNormEps = 1e-5;

class Graph {
 public:
  NodeId leaf(std::string name, bool trainable = true);
  NodeId constant(Tensor value);
  NodeId constant(std::shared_ptr<const Tensor> value);

  NodeId matmul(NodeId a, NodeId b);
  NodeId bmm(NodeId a, NodeId b);
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId a, double c);
  NodeId transpose(NodeId a);
  NodeId reshape(NodeId a, Shape shape);
  NodeId concat(std::vector<NodeId> parts, std::size_t axis);
  NodeId slice(NodeId a, std::size_t axis, std::size_t start, std::size_t length);
  NodeId relu(NodeId a);
  NodeId layer_norm(NodeId x, NodeId gain, NodeId bias);
  NodeId mean_abs(NodeId a);
  NodeId mask_select(NodeId a, std::size_t axis, std::vector<std::uint8_t> mask);
  NodeId sum(NodeId a);
  NodeId rot6d(NodeId a);

  const std::vector<Node>& nodes() const { return nodes_; }
  const Node& node(NodeId id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }

 private:
  NodeId push(Node n);
  std::vector<Node> nodes_;
};

using Bindings = std::map<std::string, Tensor>;
using GradientMap = std::map<std::string, Tensor>;

/// Values of every node, indexed by NodeId.
std::vector<Tensor> evaluate(const Graph& graph, const Bindings& bindings);

/// Gradients of a scalar node with respect to every trainable leaf, given
/// node values from evaluate(). Unreachable trainable leaves get zeros.
GradientMap backward(const Graph& graph, const std::vector<Tensor>& values, NodeId loss);
GradientMap backward(const Graph& graph, const Bindings& bindings, NodeId loss);

/// Worst relative disagreement between backward() and central differences
/// over every scalar of every trainable leaf. Coordinates whose perturbation
/// moves an L1 or ReLU input that sits within 10*step of zero are skipped.
double grad_check(const Graph& graph, const Bindings& bindings, NodeId loss, double step);

}  // namespace cycleadapt::diff
