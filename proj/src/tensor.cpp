// Copyright 2026 The TriFormer Authors
// SPDX-License-Identifier: Apache-2.0

#include "triformer/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <sstream>
#include <unordered_set>

namespace triformer {

namespace {

std::atomic<std::uint64_t> g_node_counter{0};
thread_local bool t_grad_enabled = true;

}  // namespace

std::uint64_t next_node_id() { return ++g_node_counter; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_enabled() { return t_grad_enabled; }

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
T* TensorNode<T>::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), T(0));
  return grad.data();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : node_(std::make_shared<TensorNode<T>>()) {
  for (auto e : shape)
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  node_->data.assign(shape_numel(shape), fill);
  node_->shape = std::move(shape);
  node_->id = next_node_id();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : node_(std::make_shared<TensorNode<T>>()) {
  for (auto e : shape)
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  if (shape_numel(shape) != data.size())
    throw DimensionError("shape " + shape_str(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
  node_->data = std::move(data);
  node_->shape = std::move(shape);
  node_->id = next_node_id();
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw DimensionError("index rank mismatch for " + shape_str(shape()));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= node_->shape[axis]) throw DimensionError("index out of range for " + shape_str(shape()));
    flat = flat * node_->shape[axis] + i;
    ++axis;
  }
  return node_->data[flat];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
  node_->requires_grad = on;
  if (!on) node_->grad.clear();
  return *this;
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  Tensor out(node_->shape, node_->data);
  out.node_->requires_grad = node_->requires_grad;
  return out;
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(node_->shape, node_->data);
}

template <typename T>
void Tensor<T>::backward() const {
  if (numel() != 1)
    throw ContractError("backward() requires a scalar loss, got shape " + shape_str(shape()));
  if (!node_->requires_grad) throw ContractError("backward() on a tensor that does not require grad");

  // Creation order is a topological order of the graph, so sweeping ids in
  // descending order visits every consumer before its inputs.
  std::vector<TensorNode<T>*> order;
  std::unordered_set<const TensorNode<T>*> seen;
  std::vector<TensorNode<T>*> stack{node_.get()};
  seen.insert(node_.get());
  while (!stack.empty()) {
    TensorNode<T>* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const TensorNode<T>* a, const TensorNode<T>* b) { return a->id > b->id; });

  node_->grad_buffer()[0] += T(1);
  for (TensorNode<T>* n : order) {
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  // Release in ascending id order: clearing a node's parents may free them,
  // and every parent has a smaller id, so freed nodes are never revisited.
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    (*it)->backward_fn = nullptr;
    (*it)->parents.clear();
  }
}

template <typename T>
static Tensor<T> make_result_impl(Shape shape, std::vector<T> data,
                                  std::vector<std::shared_ptr<TensorNode<T>>> parents,
                                  std::function<void(TensorNode<T>&)> backward_fn) {
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->id = next_node_id();
  bool needs = false;
  if (t_grad_enabled) {
    for (auto& p : parents) needs = needs || p->requires_grad;
  }
  if (needs) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data,
                      std::initializer_list<const Tensor<T>*> inputs,
                      std::function<void(TensorNode<T>&)> backward_fn) {
  std::vector<std::shared_ptr<TensorNode<T>>> parents;
  parents.reserve(inputs.size());
  for (auto* t : inputs)
    if (t && t->defined()) parents.push_back(t->node());
  return make_result_impl<T>(std::move(shape), std::move(data), std::move(parents),
                             std::move(backward_fn));
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const std::vector<Tensor<T>>& inputs,
                      std::function<void(TensorNode<T>&)> backward_fn) {
  std::vector<std::shared_ptr<TensorNode<T>>> parents;
  parents.reserve(inputs.size());
  for (auto& t : inputs) parents.push_back(t.node());
  return make_result_impl<T>(std::move(shape), std::move(data), std::move(parents),
                             std::move(backward_fn));
}

#define TRIFORMER_INSTANTIATE(T)                                                             \
  template struct TensorNode<T>;                                                             \
  template class Tensor<T>;                                                                  \
  template Tensor<T> make_result<T>(Shape, std::vector<T>,                                   \
                                    std::initializer_list<const Tensor<T>*>,                 \
                                    std::function<void(TensorNode<T>&)>);                    \
  template Tensor<T> make_result<T>(Shape, std::vector<T>, const std::vector<Tensor<T>>&,    \
                                    std::function<void(TensorNode<T>&)>);

TRIFORMER_INSTANTIATE(float)
TRIFORMER_INSTANTIATE(double)

#undef TRIFORMER_INSTANTIATE

}  // namespace triformer
