#pragma once

#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "cerase/autodiff/graph.hpp"
#include "cerase/autodiff/tensor.hpp"

namespace cerase::ad {

template <class T>
using NamedTensors = std::map<std::string, BasicTensor<T>, std::less<>>;

/// Private evaluation state for one Graph: leaf bindings, forward values and
/// gradients. Several sessions may evaluate the same graph concurrently.
template <class T>
class Session {
 public:
  explicit Session(const Graph& graph);

  void bind(std::string_view name, BasicTensor<T> value);
  void bind_all(const NamedTensors<T>& values);
  bool is_bound(std::string_view name) const;
  /// Mutable access to a bound leaf, for in-place parameter updates.
  BasicTensor<T>& leaf(std::string_view name);

  /// Evaluates every node. Throws std::invalid_argument on shape mismatch,
  /// naming the op and the offending shapes.
  void forward();
  NamedTensors<T> outputs() const;
  const BasicTensor<T>& value(NodeId id) const;

  /// Reverse sweep from a scalar node. Returns gradients of every param leaf
  /// that the loss depends on (params outside the loss's cone get zeros).
  NamedTensors<T> backward(NodeId loss);

  const Graph& graph() const { return *graph_; }

 private:
  void eval_node(std::size_t i);
  void backprop_node(std::size_t i);
  BasicTensor<T>& grad_slot(NodeId id);

  const Graph* graph_;
  std::vector<BasicTensor<T>> values_;
  std::vector<BasicTensor<T>> grads_;
  std::vector<bool> bound_;
  std::vector<bool> has_grad_;
  std::vector<bool> needs_grad_;
  bool forward_done_ = false;
};

extern template class Session<float>;
extern template class Session<double>;

/// One-shot helper: bind, run forward, return the graph's marked outputs.
template <class T>
NamedTensors<T> forward(const Graph& graph, const NamedTensors<T>& inputs) {
  Session<T> s(graph);
  s.bind_all(inputs);
  s.forward();
  return s.outputs();
}

}  // namespace cerase::ad
