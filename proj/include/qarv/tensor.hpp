#pragma once

// Dense tensors with a reverse-mode tape.
//
// A Tensor is a cheap handle onto a shared node. Ops produce fresh nodes and,
// when gradients are enabled and any input requires them, record a backward
// closure plus references to their inputs. backward() walks that graph in
// reverse topological order. Values are never mutated once an op has consumed
// them, except by the optimizer between steps.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace qarv::nn {

using Shape = std::vector<std::size_t>;

// Every buffer starts on a 64-byte boundary so vectorized kernels take the
// same code path, and thus produce the same rounding, run to run.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
class Tensor {
 public:
  struct Node {
    Shape shape;
    Buffer<T> value;
    Buffer<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;

    Buffer<T>& grad_buffer() {
      if (grad.size() != value.size()) grad.assign(value.size(), T(0));
      return grad;
    }
  };

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> values);
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const;
  std::size_t numel() const { return node_->value.size(); }

  std::span<const T> values() const { return node_->value; }
  // Writable view of the buffer. Only meant for leaves (parameters, inputs)
  // and for ops filling a freshly created result.
  std::span<T> mutable_values() { return node_->value; }
  T item() const;
  T operator[](std::size_t i) const { return node_->value[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    node_->requires_grad = on;
    return *this;
  }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  std::span<T> grad() { return node_->grad_buffer(); }
  std::span<const T> grad() const { return node_->grad_buffer(); }
  void zero_grad();

  // Copy of the values as a new leaf with no history.
  Tensor detach() const;
  bool all_finite() const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Gradient recording is on by default; a NoGradGuard turns it off for the
// current thread (inference, encoding, decoding).
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Allocates the result node of an op and wires it to the inputs that need
// gradients. The caller fills the values and, if result.requires_grad(),
// installs the backward closure.
template <typename T>
Tensor<T> make_result(Shape shape, std::initializer_list<const Tensor<T>*> inputs);

// Accumulates d(loss)/d(leaf) into every reachable leaf that requires grad.
template <typename T>
void backward(const Tensor<T>& loss);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace qarv::nn
