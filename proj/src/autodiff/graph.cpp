#include "cerase/autodiff/graph.hpp"

#include <cstring>
#include <sstream>
#include <stdexcept>

namespace cerase::ad {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(float)) == 0;
}

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kInput: return "input";
    case OpKind::kParam: return "param";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kAddBias: return "add_bias";
    case OpKind::kMulColumns: return "mul_columns";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kScale: return "scale";
    case OpKind::kAddScalar: return "add_scalar";
    case OpKind::kSilu: return "silu";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kL1Norm: return "l1_norm";
    case OpKind::kSumSquares: return "sum_squares";
    case OpKind::kReshape: return "reshape";
    case OpKind::kConcat: return "concat";
    case OpKind::kStopGradient: return "stop_gradient";
    case OpKind::kTimeEmbedding: return "time_embedding";
    case OpKind::kSoftmaxCrossEntropy: return "softmax_cross_entropy";
    case OpKind::kCustomUnary: return "custom_unary";
  }
  return "?";
}

NodeId Graph::push(Node node) {
  for (NodeId in : node.inputs) {
    if (in.index >= nodes_.size()) {
      throw std::invalid_argument(std::string(op_name(node.kind)) + ": input node " +
                                  std::to_string(in.index) + " does not exist");
    }
  }
  nodes_.push_back(std::move(node));
  return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

NodeId Graph::leaf_node(OpKind kind, std::string name) {
  if (leaves_.count(name)) throw std::invalid_argument("graph: duplicate leaf '" + name + "'");
  Node n;
  n.kind = kind;
  n.name = name;
  NodeId id = push(std::move(n));
  leaves_.emplace(std::move(name), id);
  return id;
}

NodeId Graph::input(std::string name) { return leaf_node(OpKind::kInput, std::move(name)); }
NodeId Graph::param(std::string name) { return leaf_node(OpKind::kParam, std::move(name)); }

NodeId Graph::leaf(std::string_view name) const {
  auto it = leaves_.find(std::string(name));
  if (it == leaves_.end()) throw std::out_of_range("graph: no leaf named '" + std::string(name) + "'");
  return it->second;
}

namespace {
Node make(OpKind kind, std::initializer_list<NodeId> inputs) {
  Node n;
  n.kind = kind;
  n.inputs = inputs;
  return n;
}
}  // namespace

NodeId Graph::matmul(NodeId a, NodeId b) { return push(make(OpKind::kMatMul, {a, b})); }
NodeId Graph::add_bias(NodeId x, NodeId bias) { return push(make(OpKind::kAddBias, {x, bias})); }
NodeId Graph::mul_columns(NodeId x, NodeId s) { return push(make(OpKind::kMulColumns, {x, s})); }
NodeId Graph::add(NodeId a, NodeId b) { return push(make(OpKind::kAdd, {a, b})); }
NodeId Graph::sub(NodeId a, NodeId b) { return push(make(OpKind::kSub, {a, b})); }
NodeId Graph::mul(NodeId a, NodeId b) { return push(make(OpKind::kMul, {a, b})); }

NodeId Graph::scale(NodeId x, double factor) {
  Node n = make(OpKind::kScale, {x});
  n.scalar = factor;
  return push(std::move(n));
}

NodeId Graph::add_scalar(NodeId x, double value) {
  Node n = make(OpKind::kAddScalar, {x});
  n.scalar = value;
  return push(std::move(n));
}

NodeId Graph::silu(NodeId x) { return push(make(OpKind::kSilu, {x})); }
NodeId Graph::sigmoid(NodeId x) { return push(make(OpKind::kSigmoid, {x})); }
NodeId Graph::sum(NodeId x) { return push(make(OpKind::kSum, {x})); }
NodeId Graph::mean(NodeId x) { return push(make(OpKind::kMean, {x})); }
NodeId Graph::l1_norm(NodeId x) { return push(make(OpKind::kL1Norm, {x})); }
NodeId Graph::sum_squares(NodeId x) { return push(make(OpKind::kSumSquares, {x})); }

NodeId Graph::reshape(NodeId x, Shape shape) {
  Node n = make(OpKind::kReshape, {x});
  n.shape = std::move(shape);
  return push(std::move(n));
}

NodeId Graph::concat(NodeId a, NodeId b) { return push(make(OpKind::kConcat, {a, b})); }
NodeId Graph::stop_gradient(NodeId x) { return push(make(OpKind::kStopGradient, {x})); }

NodeId Graph::time_embedding(NodeId timesteps, std::size_t width) {
  if (width == 0 || width % 2 != 0) {
    throw std::invalid_argument("time_embedding: width must be positive and even, got " +
                                std::to_string(width));
  }
  Node n = make(OpKind::kTimeEmbedding, {timesteps});
  n.width = width;
  return push(std::move(n));
}

NodeId Graph::softmax_cross_entropy(NodeId logits, NodeId labels) {
  return push(make(OpKind::kSoftmaxCrossEntropy, {logits, labels}));
}

NodeId Graph::custom_unary(NodeId x, std::shared_ptr<const CustomUnary> op) {
  if (!op || !op->value || !op->derivative) throw std::invalid_argument("custom_unary: incomplete op");
  Node n = make(OpKind::kCustomUnary, {x});
  n.custom = std::move(op);
  return push(std::move(n));
}

void Graph::mark_output(std::string name, NodeId id) {
  if (id.index >= nodes_.size()) throw std::invalid_argument("mark_output: unknown node");
  outputs_[std::move(name)] = id;
}

}  // namespace cerase::ad
