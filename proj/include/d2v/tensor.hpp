#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "d2v/errors.hpp"

namespace d2v {

/// Standard precision is used for training, wide precision for oracles.
using Standard = float;
using Wide = double;

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <class Real>
struct TensorNode {
  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool leaf = true;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), Real(0));
  }
};

/**
 * Dense row-major array handle with shared storage.
 *
 * Copies of a Tensor alias the same node, which is how parameters are shared
 * between the student path, the teacher path and the optimizer. Values
 * produced by ops are never mutated afterwards; only leaf parameters are
 * written, and only through mutable_data().
 */
template <class Real>
class Tensor {
 public:
  using value_type = Real;

  Tensor() = default;

  Tensor(Shape shape, std::vector<Real> values, bool requires_grad = false)
      : node_(std::make_shared<TensorNode<Real>>()) {
    if (values.size() != d2v::numel(shape))
      throw ConfigError("tensor: " + std::to_string(values.size()) +
                        " values do not fill shape " + shape_str(shape));
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = d2v::numel(shape);
    return Tensor(std::move(shape), std::vector<Real>(n, Real(0)), requires_grad);
  }

  static Tensor full(Shape shape, Real v, bool requires_grad = false) {
    const auto n = d2v::numel(shape);
    return Tensor(std::move(shape), std::vector<Real>(n, v), requires_grad);
  }

  static Tensor scalar(Real v, bool requires_grad = false) {
    return Tensor(Shape{}, std::vector<Real>{v}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const Real> data() const { return node_->value; }
  std::span<Real> mutable_data() { return node_->value; }
  const std::vector<Real>& values() const { return node_->value; }

  Real operator[](std::size_t i) const { return node_->value[i]; }
  Real at(std::size_t row, std::size_t col) const {
    return node_->value[row * node_->shape.back() + col];
  }

  Real item() const {
    if (numel() != 1) throw StateError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  /// True when this value was produced by an op recorded on a graph.
  bool tracked() const { return node_ && !node_->leaf; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const Real> grad() const { return node_->grad; }
  std::span<Real> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  /// Independent copy of the values with no gradient history.
  Tensor detach() const { return Tensor(shape(), node_->value, false); }

  template <class Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape(), std::vector<Other>(node_->value.begin(), node_->value.end()));
  }

  const std::shared_ptr<TensorNode<Real>>& node() const { return node_; }

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

 private:
  std::shared_ptr<TensorNode<Real>> node_;
};

template <class Real>
using NamedTensors = std::vector<std::pair<std::string, Tensor<Real>>>;

/**
 * Ordered tape of executed differentiable ops.
 *
 * Ops record themselves on the graph that is active on the calling thread
 * (see GraphScope). backward() replays the tape in exact reverse order.
 */
template <class Real>
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  void record(std::string_view op, std::function<void()> backward) {
    tape_.push_back({op, std::move(backward)});
  }

  void note_leaf(const std::shared_ptr<TensorNode<Real>>& leaf) {
    for (const auto& l : leaves_)
      if (l == leaf) return;
    leaves_.push_back(leaf);
  }

  void backward(const Tensor<Real>& loss) {
    if (consumed_) throw StateError("backward called twice without reset");
    if (!loss.defined() || loss.numel() != 1)
      throw StateError("backward requires a scalar loss");
    consumed_ = true;
    if (!loss.requires_grad()) return;  // constant loss: nothing to propagate
    loss.node()->ensure_grad();
    loss.node()->grad[0] += Real(1);
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) it->backward();
    for (const auto& leaf : leaves_) leaf->ensure_grad();
  }

  void reset() {
    tape_.clear();
    leaves_.clear();
    consumed_ = false;
  }

  std::size_t size() const { return tape_.size(); }
  bool consumed() const { return consumed_; }

  std::vector<std::string_view> ops() const {
    std::vector<std::string_view> out;
    out.reserve(tape_.size());
    for (const auto& r : tape_) out.push_back(r.op);
    return out;
  }

 private:
  struct Record {
    std::string_view op;
    std::function<void()> backward;
  };
  std::vector<Record> tape_;
  std::vector<std::shared_ptr<TensorNode<Real>>> leaves_;
  bool consumed_ = false;
};

template <class Real>
Graph<Real>*& active_graph() {
  thread_local Graph<Real>* graph = nullptr;
  return graph;
}

/// Makes a graph the recording target for the current thread.
template <class Real>
class GraphScope {
 public:
  explicit GraphScope(Graph<Real>& graph) : previous_(active_graph<Real>()) {
    active_graph<Real>() = &graph;
  }
  ~GraphScope() { active_graph<Real>() = previous_; }
  GraphScope(const GraphScope&) = delete;
  GraphScope& operator=(const GraphScope&) = delete;

 private:
  Graph<Real>* previous_;
};

/// Suspends recording for the current thread (teacher forward, evaluation).
template <class Real>
class NoGradScope {
 public:
  NoGradScope() : previous_(active_graph<Real>()) { active_graph<Real>() = nullptr; }
  ~NoGradScope() { active_graph<Real>() = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Graph<Real>* previous_;
};

}  // namespace d2v
