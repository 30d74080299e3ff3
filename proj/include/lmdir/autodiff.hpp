#pragma once

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "lmdir/tensor.hpp"

namespace lmdir {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::function<void(const Tensor<T>&)> backward;

  // Gradient buffer, zero-filled on first touch.
  Tensor<T>& grad_ref() {
    if (grad.empty() && !value.empty()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

template <typename T>
class Graph;

template <typename T>
class Var {
 public:
  Var() = default;
  Var(Graph<T>* graph, std::shared_ptr<Node<T>> node) : graph_(graph), node_(std::move(node)) {}

  const Tensor<T>& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::int64_t dim(int axis) const { return node_->value.dim(axis); }
  int rank() const { return node_->value.rank(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const Tensor<T>& grad() const { return node_->grad; }
  bool valid() const { return static_cast<bool>(node_); }

  Graph<T>* graph() const { return graph_; }
  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  Graph<T>* graph_ = nullptr;
  std::shared_ptr<Node<T>> node_;
};

// Per-call differentiation context. Operations on Vars append to the tape only
// while recording; with recording off, intermediates are released as soon as
// nothing references them.
template <typename T>
class Graph {
 public:
  explicit Graph(bool record = true) : record_(record) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const noexcept { return record_; }

  Var<T> leaf(Tensor<T> value, bool requires_grad) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    node->requires_grad = record_ && requires_grad;
    return Var<T>(this, std::move(node));
  }

  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  // Creates the output node of an operation. `make_backward` is invoked only
  // when some input needs a gradient, so ops can move saved state into it.
  template <typename MakeBackward>
  Var<T> emit(Tensor<T> value, std::initializer_list<const Var<T>*> inputs, MakeBackward&& make_backward) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    bool needs = false;
    if (record_) {
      for (const Var<T>* in : inputs) needs = needs || in->requires_grad();
    }
    if (needs) {
      node->requires_grad = true;
      node->backward = make_backward();
      tape_.push_back(node);
    }
    return Var<T>(this, std::move(node));
  }

  // Reverse sweep from `root`; the seed defaults to ones (d root / d root).
  void backward(const Var<T>& root, const Tensor<T>* seed = nullptr) {
    if (!root.requires_grad()) return;
    auto& g = root.node()->grad_ref();
    if (seed != nullptr) {
      require_shape(seed->shape(), g.shape(), "backward seed");
      g = *seed;
    } else {
      g.fill(T{1});
    }
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) {
      Node<T>& n = **it;
      if (!n.grad.empty() && n.backward) n.backward(n.grad);
      n.backward = nullptr;
    }
    tape_.clear();
  }

  std::size_t tape_size() const noexcept { return tape_.size(); }

 private:
  bool record_;
  std::vector<std::shared_ptr<Node<T>>> tape_;
};

}  // namespace lmdir
