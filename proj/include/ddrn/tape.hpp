#ifndef DDRN_TAPE_HPP_
#define DDRN_TAPE_HPP_

#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "ddrn/tensor.hpp"

namespace ddrn {

template <typename T>
class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, int id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  Tape<T>& tape() const { return *tape_; }
  int id() const { return id_; }

  const Shape& shape() const { return tape_->shape(id_); }
  std::size_t numel() const { return tape_->value(id_).size(); }
  std::size_t cols() const { const auto& s = shape(); return s.empty() ? 1 : s.back(); }
  std::size_t rows() const { return numel() / cols(); }
  std::span<const T> value() const { return tape_->value(id_); }
  T item() const;
  bool requires_grad() const { return tape_->requires_grad(id_); }
  /// Gradient after Tape::backward; empty span if none reached this node.
  std::span<const T> grad() const { return tape_->grad_if_any(id_); }
  Tensor<T> to_tensor() const;

 private:
  Tape<T>* tape_ = nullptr;
  int id_ = -1;
};

/// Records forward values and backward closures in topological order.
/// Confined to one thread. Bound leaves must outlive the tape.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf without gradient.
  Var<T> constant(Tensor<T> value);
  /// Leaf that reads `source` in place; if source.requires_grad(), backward
  /// accumulates into source.grad().
  Var<T> leaf(Tensor<T>& source);
  /// Leaf that reads `source` in place and never tracks a gradient.
  Var<T> view(const Tensor<T>& source);
  /// Owned leaf that tracks a gradient (read it through Var::grad()).
  Var<T> variable(Tensor<T> value);

  /// Appends an op output. `backward` is dropped when no input needs a gradient.
  Var<T> record(std::string_view op, Shape shape, std::vector<T> value,
                std::vector<int> inputs, BackwardFn backward);

  void backward(const Var<T>& root);
  void backward(const Var<T>& root, std::span<const T> seed);

  const Shape& shape(int id) const { return nodes_[id].shape; }
  std::span<const T> value(int id) const;
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  /// Gradient buffer, allocated zero-filled on first access.
  std::span<T> grad(int id);
  std::span<const T> grad_if_any(int id) const { return nodes_[id].grad; }
  std::size_t size() const { return nodes_.size(); }
  std::string_view op_name(int id) const { return nodes_[id].op; }
  const std::vector<int>& inputs(int id) const { return nodes_[id].inputs; }

 private:
  struct Node {
    std::string_view op;
    Shape shape;
    std::vector<T> value;
    const Tensor<T>* source = nullptr;
    Tensor<T>* sink = nullptr;
    bool requires_grad = false;
    std::vector<int> inputs;
    std::vector<T> grad;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

extern template class Tape<float>;
extern template class Tape<double>;
extern template class Var<float>;
extern template class Var<double>;

}  // namespace ddrn

#endif  // DDRN_TAPE_HPP_
