#include "qarv/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_map>

namespace qarv::nn {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : node_(std::make_shared<Node>()) {
  node_->value.assign(shape_numel(shape), fill);
  node_->shape = std::move(shape);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) : node_(std::make_shared<Node>()) {
  if (shape_numel(shape) != values.size())
    throw std::invalid_argument("tensor: shape " + shape_str(shape) + " does not match " +
                                std::to_string(values.size()) + " values");
  node_->shape = std::move(shape);
  node_->value.assign(values.begin(), values.end());
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t i) const {
  if (i >= node_->shape.size())
    throw std::out_of_range("tensor: axis " + std::to_string(i) + " out of range for shape " +
                            shape_str(node_->shape));
  return node_->shape[i];
}

template <typename T>
T Tensor<T>::item() const {
  if (node_->value.size() != 1)
    throw std::invalid_argument("tensor: item() on non-scalar of shape " + shape_str(node_->shape));
  return node_->value[0];
}

template <typename T>
void Tensor<T>::zero_grad() {
  node_->grad.assign(node_->value.size(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  Tensor out(node_->shape);
  out.node_->value = node_->value;
  return out;
}

template <typename T>
bool Tensor<T>::all_finite() const {
  return std::all_of(node_->value.begin(), node_->value.end(),
                     [](T v) { return std::isfinite(v); });
}

template <typename T>
Tensor<T> make_result(Shape shape, std::initializer_list<const Tensor<T>*> inputs) {
  Tensor<T> out(std::move(shape));
  if (!grad_enabled()) return out;
  auto* node = out.node();
  for (const Tensor<T>* in : inputs) {
    if (in && in->defined() && in->requires_grad()) {
      node->requires_grad = true;
      node->inputs.push_back(in->node_ptr());
    }
  }
  return out;
}

template <typename T>
void backward(const Tensor<T>& loss) {
  using Node = typename Tensor<T>::Node;
  if (!loss.defined() || loss.numel() != 1)
    throw std::invalid_argument("backward: loss must be a scalar tensor");
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS. state 1 = on the stack, 2 = finished.
  std::vector<Node*> order;
  std::unordered_map<Node*, int> state;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.node(), 0);
  state[loss.node()] = 1;
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      int& s = state[child];
      if (s == 1) throw std::logic_error("backward: cycle in computation graph");
      if (s == 0) {
        s = 1;
        stack.emplace_back(child, 0);
      }
      continue;
    }
    state[node] = 2;
    order.push_back(node);
    stack.pop_back();
  }

  loss.node()->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward && node->grad.size() == node->value.size()) node->backward(*node);
  }
}

template class Tensor<float>;
template class Tensor<double>;
template Tensor<float> make_result(Shape, std::initializer_list<const Tensor<float>*>);
template Tensor<double> make_result(Shape, std::initializer_list<const Tensor<double>*>);
template void backward(const Tensor<float>&);
template void backward(const Tensor<double>&);

}  // namespace qarv::nn
