#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "cerase/autodiff/tensor.hpp"

namespace cerase::ad {

enum class OpKind {
  kInput,        // bound leaf without gradient
  kParam,        // bound leaf with gradient
  kMatMul,       // [M,K] x [K,N]
  kAddBias,      // [M,N] + [N], broadcast over rows
  kMulColumns,   // [M,N] * [N], broadcast over rows
  kAdd,
  kSub,
  kMul,
  kScale,        // x * scalar
  kAddScalar,    // x + scalar
  kSilu,
  kSigmoid,
  kSum,          // -> scalar
  kMean,         // -> scalar
  kL1Norm,       // sum |x| -> scalar
  kSumSquares,   // sum x^2 -> scalar
  kReshape,
  kConcat,       // along the last axis
  kStopGradient,
  kTimeEmbedding,        // sinusoidal features of integer timesteps; no gradient to t
  kSoftmaxCrossEntropy,  // mean over rows; labels are class indices
  kCustomUnary,
};

std::string_view op_name(OpKind kind);

struct NodeId {
  std::uint32_t index = 0;
  friend bool operator==(NodeId, NodeId) = default;
};

/// Elementwise op with user-supplied value and derivative. Evaluated in
/// double precision regardless of the session's scalar type.
struct CustomUnary {
  std::string name;
  std::function<double(double)> value;
  std::function<double(double)> derivative;
};

struct Node {
  OpKind kind = OpKind::kInput;
  std::vector<NodeId> inputs;
  std::string name;  // leaf binding name, or empty
  double scalar = 0.0;
  Shape shape;            // kReshape target
  std::size_t width = 0;  // kTimeEmbedding feature count
  std::shared_ptr<const CustomUnary> custom;
};

/// Static operation graph. Nodes are appended in construction order, which is
/// always a valid topological order. A Graph is immutable once built and can
/// back any number of Sessions.
class Graph {
 public:
  NodeId input(std::string name);
  NodeId param(std::string name);

  NodeId matmul(NodeId a, NodeId b);
  NodeId add_bias(NodeId x, NodeId bias);
  NodeId mul_columns(NodeId x, NodeId column_scale);
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId x, double factor);
  NodeId add_scalar(NodeId x, double value);
  NodeId silu(NodeId x);
  NodeId sigmoid(NodeId x);
  NodeId sum(NodeId x);
  NodeId mean(NodeId x);
  NodeId l1_norm(NodeId x);
  NodeId sum_squares(NodeId x);
  NodeId reshape(NodeId x, Shape shape);
  NodeId concat(NodeId a, NodeId b);
  NodeId stop_gradient(NodeId x);
  NodeId time_embedding(NodeId timesteps, std::size_t width);
  NodeId softmax_cross_entropy(NodeId logits, NodeId labels);
  NodeId custom_unary(NodeId x, std::shared_ptr<const CustomUnary> op);

  /// dense(x, W, b) = x W + b
  NodeId dense(NodeId x, NodeId weight, NodeId bias) { return add_bias(matmul(x, weight), bias); }

  void mark_output(std::string name, NodeId id);

  const Node& node(NodeId id) const { return nodes_.at(id.index); }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }
  const std::map<std::string, NodeId>& leaves() const { return leaves_; }
  const std::map<std::string, NodeId>& outputs() const { return outputs_; }
  bool has_leaf(std::string_view name) const { return leaves_.find(std::string(name)) != leaves_.end(); }
  NodeId leaf(std::string_view name) const;

 private:
  NodeId push(Node node);
  NodeId leaf_node(OpKind kind, std::string name);

  std::vector<Node> nodes_;
  std::map<std::string, NodeId> leaves_;
  std::map<std::string, NodeId> outputs_;
};

}  // namespace cerase::ad
