// Reverse-mode automatic differentiation over a linear recording tape.
#pragma once

#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "selfdenoise/tensor.hpp"

namespace selfdenoise {

/// A persistent trainable tensor. `grad` stays empty until a backward pass
/// reaches it.
template <typename T>
struct Variable {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = true;

  bool has_grad() const noexcept { return !grad.empty(); }
  void zero_grad() { grad = Tensor<T>(); }
};

template <typename T>
class Tape;

/// Handle to a value recorded on a tape.
template <typename T>
struct Node {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
};

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  struct Entry {
    std::string op;
    std::vector<std::size_t> inputs;
    Tensor<T> value;
    Tensor<T> grad;
    bool needs_grad = false;
    Variable<T>* variable = nullptr;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Node<T> constant(Tensor<T> value, std::string op = "const") {
    Entry e;
    e.op = std::move(op);
    e.value = std::move(value);
    return push(std::move(e));
  }

  /// Registers a leaf bound to `v`; gradients flow back into `v.grad`.
  Node<T> variable(Variable<T>& v) {
    Entry e;
    e.op = "var:" + v.name;
    e.value = v.value;
    e.needs_grad = v.requires_grad;
    e.variable = &v;
    return push(std::move(e));
  }

  Node<T> record(std::string op, std::vector<std::size_t> inputs, Tensor<T> value, BackwardFn fn) {
    Entry e;
    e.op = std::move(op);
    for (auto i : inputs) {
      if (i >= entries_.size()) throw std::logic_error("tape input refers to a future node");
      e.needs_grad = e.needs_grad || entries_[i].needs_grad;
    }
    e.inputs = std::move(inputs);
    e.value = std::move(value);
    if (e.needs_grad) e.backward = std::move(fn);
    return push(std::move(e));
  }

  std::size_t size() const noexcept { return entries_.size(); }
  const Entry& entry(std::size_t id) const { return entries_.at(id); }
  Entry& mutable_entry(std::size_t id) { return entries_.at(id); }
  const Tensor<T>& value(std::size_t id) const { return entries_[id].value; }
  bool needs_grad(std::size_t id) const { return entries_[id].needs_grad; }

  /// Gradient of the last backward pass w.r.t. node `id` (empty if unreached).
  const Tensor<T>& grad(std::size_t id) const { return entries_[id].grad; }
  const Tensor<T>& grad(Node<T> n) const { return grad(n.id); }

  /// Zero-initialised on first use; backward rules accumulate into it.
  Tensor<T>& grad_buffer(std::size_t id) {
    auto& e = entries_[id];
    if (e.grad.empty()) e.grad = Tensor<T>(e.value.shape());
    return e.grad;
  }

  void backward(Node<T> loss) {
    if (loss.tape != this) throw std::invalid_argument("backward: node belongs to another tape");
    if (entries_[loss.id].value.size() != 1)
      throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                  shape_str(entries_[loss.id].value.shape()));
    for (auto& e : entries_) e.grad = Tensor<T>();
    grad_buffer(loss.id)[0] = T{1};
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      auto& e = entries_[i];
      if (!e.needs_grad || e.grad.empty()) continue;
      if (e.variable) {
        auto& v = *e.variable;
        if (v.grad.empty()) v.grad = Tensor<T>(v.value.shape());
        for (std::size_t k = 0; k < v.grad.size(); ++k) v.grad[k] += e.grad[k];
      } else if (e.backward) {
        e.backward(*this, i);
      }
    }
  }

 private:
  Node<T> push(Entry e) {
    entries_.push_back(std::move(e));
    return Node<T>{this, entries_.size() - 1};
  }

  std::vector<Entry> entries_;
};

template <typename T>
const Tensor<T>& Node<T>::value() const {
  return tape->value(id);
}

template <typename T>
void zero_grads(std::span<Variable<T>* const> params) {
  for (auto* p : params) p->zero_grad();
}

/// Concatenates the gradients of `params` (zeros where unreached).
template <typename T>
std::vector<T> flatten_grads(std::span<Variable<T>* const> params) {
  std::vector<T> out;
  for (auto* p : params) {
    if (p->has_grad())
      out.insert(out.end(), p->grad.data().begin(), p->grad.data().end());
    else
      out.insert(out.end(), p->value.size(), T{0});
  }
  return out;
}

}  // namespace selfdenoise
