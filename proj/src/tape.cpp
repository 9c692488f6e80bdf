#include "ddrn/tape.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace ddrn {

template <typename T>
T Var<T>::item() const {
  auto v = value();
  if (v.size() != 1) throw ShapeError("item() on non-scalar " + shape_str(shape()));
  return v[0];
}

template <typename T>
Tensor<T> Var<T>::to_tensor() const {
  auto v = value();
  return Tensor<T>(shape(), std::vector<T>(v.begin(), v.end()));
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  Node n;
  n.op = "constant";
  n.shape = value.shape();
  n.value = std::move(value.storage());
  nodes_.push_back(std::move(n));
  return Var<T>(this, static_cast<int>(nodes_.size()) - 1);
}

template <typename T>
Var<T> Tape<T>::leaf(Tensor<T>& source) {
  Node n;
  n.op = "leaf";
  n.shape = source.shape();
  n.source = &source;
  if (source.requires_grad()) {
    n.sink = &source;
    n.requires_grad = true;
  }
  nodes_.push_back(std::move(n));
  return Var<T>(this, static_cast<int>(nodes_.size()) - 1);
}

template <typename T>
Var<T> Tape<T>::view(const Tensor<T>& source) {
  Node n;
  n.op = "view";
  n.shape = source.shape();
  n.source = &source;
  nodes_.push_back(std::move(n));
  return Var<T>(this, static_cast<int>(nodes_.size()) - 1);
}

template <typename T>
Var<T> Tape<T>::variable(Tensor<T> value) {
  Node n;
  n.op = "variable";
  n.shape = value.shape();
  n.value = std::move(value.storage());
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var<T>(this, static_cast<int>(nodes_.size()) - 1);
}

template <typename T>
Var<T> Tape<T>::record(std::string_view op, Shape shape, std::vector<T> value,
                       std::vector<int> inputs, BackwardFn backward) {
  if (shape_numel(shape) != value.size()) {
    throw ShapeError(std::string(op) + ": output shape " + shape_str(shape) + " vs " +
                     std::to_string(value.size()) + " values");
  }
  for (T v : value) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite output");
  }
  Node n;
  n.op = op;
  n.shape = std::move(shape);
  n.value = std::move(value);
  for (int in : inputs) {
    if (in < 0 || in >= static_cast<int>(nodes_.size())) {
      throw std::logic_error(std::string(op) + ": input id out of order");
    }
    n.requires_grad = n.requires_grad || nodes_[in].requires_grad;
  }
  n.inputs = std::move(inputs);
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var<T>(this, static_cast<int>(nodes_.size()) - 1);
}

template <typename T>
std::span<const T> Tape<T>::value(int id) const {
  const Node& n = nodes_[id];
  if (n.source != nullptr) return n.source->data();
  return n.value;
}

template <typename T>
std::span<T> Tape<T>::grad(int id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(shape_numel(n.shape), T(0));
  return n.grad;
}

template <typename T>
void Tape<T>::backward(const Var<T>& root) {
  if (root.numel() != 1) {
    throw ShapeError("backward() without a seed needs a scalar root, got " + shape_str(root.shape()));
  }
  const T one[1] = {T(1)};
  backward(root, std::span<const T>(one, 1));
}

template <typename T>
void Tape<T>::backward(const Var<T>& root, std::span<const T> seed) {
  if (&root.tape() != this) throw std::logic_error("backward: root belongs to another tape");
  if (backward_done_) throw std::logic_error("backward: tape already consumed");
  backward_done_ = true;
  const int root_id = root.id();
  if (seed.size() != shape_numel(nodes_[root_id].shape)) {
    throw ShapeError("backward: seed size does not match root");
  }
  if (!nodes_[root_id].requires_grad) return;
  auto g = grad(root_id);
  for (std::size_t i = 0; i < seed.size(); ++i) g[i] += seed[i];
  for (int id = root_id; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this, id);
  }
  for (Node& n : nodes_) {
    if (n.sink == nullptr || n.grad.empty()) continue;
    auto& dst = n.sink->grad();
    if (dst.empty()) dst.assign(n.grad.size(), T(0));
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += n.grad[i];
  }
}

template class Tape<float>;
template class Tape<double>;
template class Var<float>;
template class Var<double>;

}  // namespace ddrn
