#include "cerase/autodiff/session.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace cerase::ad {

namespace {

template <class T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <class T>
using ConstMatMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <class T>
void ensure(BasicTensor<T>& t, const Shape& shape) {
  if (t.shape() != shape || t.size() != numel(shape)) t = BasicTensor<T>(shape);
}

template <class T>
void ensure_zero(BasicTensor<T>& t, const Shape& shape) {
  if (t.shape() != shape || t.size() != numel(shape)) {
    t = BasicTensor<T>(shape);
  } else {
    std::fill(t.values().begin(), t.values().end(), T{0});
  }
}

[[noreturn]] void shape_error(OpKind kind, const std::string& detail) {
  throw std::invalid_argument(std::string(op_name(kind)) + ": " + detail);
}

template <class T>
bool is_matrix(const BasicTensor<T>& t) {
  return t.rank() == 2;
}

template <class T>
T sigmoid_scalar(T x) {
  if (x >= 0) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

}  // namespace

template <class T>
Session<T>::Session(const Graph& graph)
    : graph_(&graph),
      values_(graph.size()),
      grads_(graph.size()),
      bound_(graph.size(), false),
      has_grad_(graph.size(), false),
      needs_grad_(graph.size(), false) {
  const auto& nodes = graph.nodes();
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const Node& n = nodes[i];
    switch (n.kind) {
      case OpKind::kParam: needs_grad_[i] = true; break;
      case OpKind::kInput:
      case OpKind::kStopGradient:
      case OpKind::kTimeEmbedding: needs_grad_[i] = false; break;
      case OpKind::kSoftmaxCrossEntropy: needs_grad_[i] = needs_grad_[n.inputs[0].index]; break;
      default:
        needs_grad_[i] = std::any_of(n.inputs.begin(), n.inputs.end(),
                                     [&](NodeId in) { return needs_grad_[in.index]; });
    }
  }
}

template <class T>
void Session<T>::bind(std::string_view name, BasicTensor<T> value) {
  const NodeId id = graph_->leaf(name);
  values_[id.index] = std::move(value);
  bound_[id.index] = true;
  forward_done_ = false;
}

template <class T>
void Session<T>::bind_all(const NamedTensors<T>& values) {
  for (const auto& [name, v] : values) {
    if (graph_->has_leaf(name)) bind(name, v);
  }
}

template <class T>
bool Session<T>::is_bound(std::string_view name) const {
  return graph_->has_leaf(name) && bound_[graph_->leaf(name).index];
}

template <class T>
BasicTensor<T>& Session<T>::leaf(std::string_view name) {
  const NodeId id = graph_->leaf(name);
  if (!bound_[id.index]) throw std::logic_error("session: leaf '" + std::string(name) + "' is not bound");
  forward_done_ = false;
  return values_[id.index];
}

template <class T>
const BasicTensor<T>& Session<T>::value(NodeId id) const {
  if (!forward_done_) throw std::logic_error("session: value requested before forward");
  return values_.at(id.index);
}

template <class T>
NamedTensors<T> Session<T>::outputs() const {
  NamedTensors<T> out;
  for (const auto& [name, id] : graph_->outputs()) out.emplace(name, value(id));
  return out;
}

template <class T>
void Session<T>::forward() {
  for (const auto& [name, id] : graph_->leaves()) {
    if (!bound_[id.index]) throw std::invalid_argument("forward: leaf '" + name + "' is not bound");
  }
  for (std::size_t i = 0; i < graph_->size(); ++i) eval_node(i);
  forward_done_ = true;
}

template <class T>
void Session<T>::eval_node(std::size_t i) {
  const Node& n = graph_->nodes()[i];
  if (n.kind == OpKind::kInput || n.kind == OpKind::kParam) return;
  auto in = [&](std::size_t k) -> const BasicTensor<T>& { return values_[n.inputs[k].index]; };
  BasicTensor<T>& out = values_[i];

  switch (n.kind) {
    case OpKind::kMatMul: {
      const auto& a = in(0);
      const auto& b = in(1);
      if (!is_matrix(a) || !is_matrix(b) || a.dim(1) != b.dim(0)) {
        shape_error(n.kind, "cannot multiply " + shape_string(a.shape()) + " by " + shape_string(b.shape()));
      }
      ensure(out, {a.dim(0), b.dim(1)});
      MatMap<T>(out.data().data(), a.dim(0), b.dim(1)).noalias() =
          ConstMatMap<T>(a.data().data(), a.dim(0), a.dim(1)) *
          ConstMatMap<T>(b.data().data(), b.dim(0), b.dim(1));
      break;
    }
    case OpKind::kAddBias:
    case OpKind::kMulColumns: {
      const auto& x = in(0);
      const auto& v = in(1);
      if (x.rank() < 1 || v.size() != x.cols() || v.rank() != 1) {
        shape_error(n.kind, "row vector " + shape_string(v.shape()) + " does not match " +
                                shape_string(x.shape()));
      }
      ensure(out, x.shape());
      const std::size_t cols = x.cols();
      const std::size_t rows = x.size() / cols;
      for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = x.data().data() + r * cols;
        T* o = out.data().data() + r * cols;
        if (n.kind == OpKind::kAddBias) {
          for (std::size_t c = 0; c < cols; ++c) o[c] = xr[c] + v[c];
        } else {
          for (std::size_t c = 0; c < cols; ++c) o[c] = xr[c] * v[c];
        }
      }
      break;
    }
    case OpKind::kAdd:
    case OpKind::kSub:
    case OpKind::kMul: {
      const auto& a = in(0);
      const auto& b = in(1);
      if (a.shape() != b.shape()) {
        shape_error(n.kind, "operand shapes differ: " + shape_string(a.shape()) + " vs " +
                                shape_string(b.shape()));
      }
      ensure(out, a.shape());
      const std::size_t sz = a.size();
      if (n.kind == OpKind::kAdd) {
        for (std::size_t k = 0; k < sz; ++k) out[k] = a[k] + b[k];
      } else if (n.kind == OpKind::kSub) {
        for (std::size_t k = 0; k < sz; ++k) out[k] = a[k] - b[k];
      } else {
        for (std::size_t k = 0; k < sz; ++k) out[k] = a[k] * b[k];
      }
      break;
    }
    case OpKind::kScale: {
      const auto& x = in(0);
      ensure(out, x.shape());
      const T f = static_cast<T>(n.scalar);
      for (std::size_t k = 0; k < x.size(); ++k) out[k] = x[k] * f;
      break;
    }
    case OpKind::kAddScalar: {
      const auto& x = in(0);
      ensure(out, x.shape());
      const T f = static_cast<T>(n.scalar);
      for (std::size_t k = 0; k < x.size(); ++k) out[k] = x[k] + f;
      break;
    }
    case OpKind::kSilu: {
      const auto& x = in(0);
      ensure(out, x.shape());
      for (std::size_t k = 0; k < x.size(); ++k) out[k] = x[k] * sigmoid_scalar(x[k]);
      break;
    }
    case OpKind::kSigmoid: {
      const auto& x = in(0);
      ensure(out, x.shape());
      for (std::size_t k = 0; k < x.size(); ++k) out[k] = sigmoid_scalar(x[k]);
      break;
    }
    case OpKind::kSum:
    case OpKind::kMean:
    case OpKind::kL1Norm:
    case OpKind::kSumSquares: {
      const auto& x = in(0);
      if (x.size() == 0) shape_error(n.kind, "reduction over empty tensor");
      ensure(out, {});
      double acc = 0.0;
      for (std::size_t k = 0; k < x.size(); ++k) {
        const double v = static_cast<double>(x[k]);
        acc += n.kind == OpKind::kL1Norm ? std::abs(v) : n.kind == OpKind::kSumSquares ? v * v : v;
      }
      if (n.kind == OpKind::kMean) acc /= static_cast<double>(x.size());
      out[0] = static_cast<T>(acc);
      break;
    }
    case OpKind::kReshape: {
      const auto& x = in(0);
      if (numel(n.shape) != x.size()) {
        shape_error(n.kind, "cannot reshape " + shape_string(x.shape()) + " to " + shape_string(n.shape));
      }
      out = BasicTensor<T>(n.shape, x.values());
      break;
    }
    case OpKind::kConcat: {
      const auto& a = in(0);
      const auto& b = in(1);
      if (a.rank() != b.rank() || a.rank() == 0 || a.rows() != b.rows() ||
          a.size() / a.cols() != b.size() / b.cols()) {
        shape_error(n.kind, "cannot concatenate " + shape_string(a.shape()) + " with " +
                                shape_string(b.shape()));
      }
      Shape s = a.shape();
      s.back() = a.cols() + b.cols();
      ensure(out, s);
      const std::size_t rows = a.size() / a.cols();
      for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(a.data().data() + r * a.cols(), a.cols(), out.data().data() + r * s.back());
        std::copy_n(b.data().data() + r * b.cols(), b.cols(), out.data().data() + r * s.back() + a.cols());
      }
      break;
    }
    case OpKind::kStopGradient: {
      out = in(0);
      break;
    }
    case OpKind::kTimeEmbedding: {
      const auto& t = in(0);
      if (t.rank() > 2 || (t.rank() == 2 && t.dim(1) != 1)) {
        shape_error(n.kind, "timesteps must be [M] or [M,1], got " + shape_string(t.shape()));
      }
      const std::size_t half = n.width / 2;
      ensure(out, {t.size(), n.width});
      for (std::size_t r = 0; r < t.size(); ++r) {
        const double tv = static_cast<double>(t[r]);
        for (std::size_t j = 0; j < half; ++j) {
          const double freq = std::exp(-std::log(10000.0) * static_cast<double>(j) / static_cast<double>(half));
          out.at(r, j) = static_cast<T>(std::sin(tv * freq));
          out.at(r, j + half) = static_cast<T>(std::cos(tv * freq));
        }
      }
      break;
    }
    case OpKind::kSoftmaxCrossEntropy: {
      const auto& logits = in(0);
      const auto& labels = in(1);
      if (!is_matrix(logits) || labels.size() != logits.dim(0)) {
        shape_error(n.kind, "logits " + shape_string(logits.shape()) + " vs labels " +
                                shape_string(labels.shape()));
      }
      ensure(out, {});
      double acc = 0.0;
      const std::size_t c = logits.dim(1);
      for (std::size_t r = 0; r < logits.dim(0); ++r) {
        const auto label = static_cast<std::size_t>(labels[r]);
        if (label >= c) shape_error(n.kind, "label " + std::to_string(label) + " out of range");
        double mx = -1e300;
        for (std::size_t k = 0; k < c; ++k) mx = std::max(mx, static_cast<double>(logits.at(r, k)));
        double z = 0.0;
        for (std::size_t k = 0; k < c; ++k) z += std::exp(static_cast<double>(logits.at(r, k)) - mx);
        acc += std::log(z) + mx - static_cast<double>(logits.at(r, label));
      }
      out[0] = static_cast<T>(acc / static_cast<double>(logits.dim(0)));
      break;
    }
    case OpKind::kCustomUnary: {
      const auto& x = in(0);
      ensure(out, x.shape());
      for (std::size_t k = 0; k < x.size(); ++k) out[k] = static_cast<T>(n.custom->value(static_cast<double>(x[k])));
      break;
    }
    case OpKind::kInput:
    case OpKind::kParam: break;
  }
}

template <class T>
BasicTensor<T>& Session<T>::grad_slot(NodeId id) {
  BasicTensor<T>& g = grads_[id.index];
  if (!has_grad_[id.index]) {
    ensure_zero(g, values_[id.index].shape());
    has_grad_[id.index] = true;
  }
  return g;
}

template <class T>
NamedTensors<T> Session<T>::backward(NodeId loss) {
  if (!forward_done_) throw std::logic_error("backward: forward has not been executed");
  if (loss.index >= graph_->size()) throw std::invalid_argument("backward: unknown loss node");
  if (values_[loss.index].size() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                shape_string(values_[loss.index].shape()));
  }
  std::fill(has_grad_.begin(), has_grad_.end(), false);
  grad_slot(loss)[0] = T{1};
  for (std::size_t i = loss.index + 1; i-- > 0;) {
    if (has_grad_[i] && needs_grad_[i]) backprop_node(i);
  }

  NamedTensors<T> result;
  for (const auto& [name, id] : graph_->leaves()) {
    if (graph_->node(id).kind != OpKind::kParam) continue;
    if (has_grad_[id.index]) {
      result.emplace(name, grads_[id.index]);
    } else {
      result.emplace(name, BasicTensor<T>(values_[id.index].shape()));
    }
  }
  // Intermediate gradients are discarded; only leaf results escape.
  std::fill(has_grad_.begin(), has_grad_.end(), false);
  return result;
}

template <class T>
void Session<T>::backprop_node(std::size_t i) {
  const Node& n = graph_->nodes()[i];
  if (n.kind == OpKind::kInput || n.kind == OpKind::kParam) return;
  const BasicTensor<T>& g = grads_[i];
  auto in_id = [&](std::size_t k) { return n.inputs[k]; };
  auto in = [&](std::size_t k) -> const BasicTensor<T>& { return values_[n.inputs[k].index]; };
  auto wants = [&](std::size_t k) { return needs_grad_[n.inputs[k].index]; };

  switch (n.kind) {
    case OpKind::kMatMul: {
      const auto& a = in(0);
      const auto& b = in(1);
      const ConstMatMap<T> G(g.data().data(), a.dim(0), b.dim(1));
      if (wants(0)) {
        auto& ga = grad_slot(in_id(0));
        MatMap<T>(ga.data().data(), a.dim(0), a.dim(1)).noalias() +=
            G * ConstMatMap<T>(b.data().data(), b.dim(0), b.dim(1)).transpose();
      }
      if (wants(1)) {
        auto& gb = grad_slot(in_id(1));
        MatMap<T>(gb.data().data(), b.dim(0), b.dim(1)).noalias() +=
            ConstMatMap<T>(a.data().data(), a.dim(0), a.dim(1)).transpose() * G;
      }
      break;
    }
    case OpKind::kAddBias:
    case OpKind::kMulColumns: {
      const auto& x = in(0);
      const auto& v = in(1);
      const std::size_t cols = x.cols();
      const std::size_t rows = x.size() / cols;
      const bool mul = n.kind == OpKind::kMulColumns;
      if (wants(0)) {
        auto& gx = grad_slot(in_id(0));
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += mul ? g[r * cols + c] * v[c] : g[r * cols + c];
        }
      }
      if (wants(1)) {
        auto& gv = grad_slot(in_id(1));
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < cols; ++c) gv[c] += mul ? g[r * cols + c] * x[r * cols + c] : g[r * cols + c];
        }
      }
      break;
    }
    case OpKind::kAdd:
    case OpKind::kSub: {
      const T sign = n.kind == OpKind::kSub ? T{-1} : T{1};
      if (wants(0)) {
        auto& ga = grad_slot(in_id(0));
        for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k];
      }
      if (wants(1)) {
        auto& gb = grad_slot(in_id(1));
        for (std::size_t k = 0; k < g.size(); ++k) gb[k] += sign * g[k];
      }
      break;
    }
    case OpKind::kMul: {
      const auto& a = in(0);
      const auto& b = in(1);
      if (wants(0)) {
        auto& ga = grad_slot(in_id(0));
        for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k] * b[k];
      }
      if (wants(1)) {
        auto& gb = grad_slot(in_id(1));
        for (std::size_t k = 0; k < g.size(); ++k) gb[k] += g[k] * a[k];
      }
      break;
    }
    case OpKind::kScale: {
      auto& gx = grad_slot(in_id(0));
      const T f = static_cast<T>(n.scalar);
      for (std::size_t k = 0; k < g.size(); ++k) gx[k] += g[k] * f;
      break;
    }
    case OpKind::kAddScalar:
    case OpKind::kReshape: {
      auto& gx = grad_slot(in_id(0));
      for (std::size_t k = 0; k < g.size(); ++k) gx[k] += g[k];
      break;
    }
    case OpKind::kSilu: {
      const auto& x = in(0);
      auto& gx = grad_slot(in_id(0));
      for (std::size_t k = 0; k < g.size(); ++k) {
        const T s = sigmoid_scalar(x[k]);
        gx[k] += g[k] * (s * (T{1} + x[k] * (T{1} - s)));
      }
      break;
    }
    case OpKind::kSigmoid: {
      const auto& y = values_[i];
      auto& gx = grad_slot(in_id(0));
      for (std::size_t k = 0; k < g.size(); ++k) gx[k] += g[k] * y[k] * (T{1} - y[k]);
      break;
    }
    case OpKind::kSum:
    case OpKind::kMean:
    case OpKind::kL1Norm:
    case OpKind::kSumSquares: {
      const auto& x = in(0);
      auto& gx = grad_slot(in_id(0));
      const T g0 = g[0];
      for (std::size_t k = 0; k < x.size(); ++k) {
        switch (n.kind) {
          case OpKind::kSum: gx[k] += g0; break;
          case OpKind::kMean: gx[k] += g0 / static_cast<T>(x.size()); break;
          case OpKind::kL1Norm: gx[k] += x[k] > T{0} ? g0 : x[k] < T{0} ? -g0 : T{0}; break;
          default: gx[k] += T{2} * x[k] * g0;
        }
      }
      break;
    }
    case OpKind::kConcat: {
      const auto& a = in(0);
      const auto& b = in(1);
      const std::size_t rows = a.size() / a.cols();
      const std::size_t w = a.cols() + b.cols();
      if (wants(0)) {
        auto& ga = grad_slot(in_id(0));
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < a.cols(); ++c) ga[r * a.cols() + c] += g[r * w + c];
        }
      }
      if (wants(1)) {
        auto& gb = grad_slot(in_id(1));
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < b.cols(); ++c) gb[r * b.cols() + c] += g[r * w + a.cols() + c];
        }
      }
      break;
    }
    case OpKind::kSoftmaxCrossEntropy: {
      const auto& logits = in(0);
      const auto& labels = in(1);
      auto& gl = grad_slot(in_id(0));
      const std::size_t c = logits.dim(1);
      const double scale = static_cast<double>(g[0]) / static_cast<double>(logits.dim(0));
      for (std::size_t r = 0; r < logits.dim(0); ++r) {
        double mx = -1e300;
        for (std::size_t k = 0; k < c; ++k) mx = std::max(mx, static_cast<double>(logits.at(r, k)));
        double z = 0.0;
        for (std::size_t k = 0; k < c; ++k) z += std::exp(static_cast<double>(logits.at(r, k)) - mx);
        const auto label = static_cast<std::size_t>(labels[r]);
        for (std::size_t k = 0; k < c; ++k) {
          const double p = std::exp(static_cast<double>(logits.at(r, k)) - mx) / z;
          gl.at(r, k) += static_cast<T>(scale * (p - (k == label ? 1.0 : 0.0)));
        }
      }
      break;
    }
    case OpKind::kCustomUnary: {
      const auto& x = in(0);
      auto& gx = grad_slot(in_id(0));
      for (std::size_t k = 0; k < g.size(); ++k) {
        gx[k] += g[k] * static_cast<T>(n.custom->derivative(static_cast<double>(x[k])));
      }
      break;
    }
    case OpKind::kStopGradient:
    case OpKind::kTimeEmbedding:
    case OpKind::kInput:
    case OpKind::kParam: break;
  }
}

template class Session<float>;
template class Session<double>;

}  // namespace cerase::ad
