#ifndef CFLAB_DIFFCORE_TAPE_HPP
#define CFLAB_DIFFCORE_TAPE_HPP

#include <deque>
#include <functional>
#include <initializer_list>
#include <string>
#include <string_view>

#include "cflab/diffcore/tensor.hpp"

namespace cflab::diffcore {

template <typename T>
class Tape;

/// Handle to a value recorded on a Tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t i) const { return value().dim(i); }
};

/// Wengert list for reverse-mode differentiation. Entries are appended in
/// evaluation order, so a reverse sweep visits them in topological order.
/// A tape is single-threaded; referenced tensors (parameters) are only read.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> v) { return push(std::move(v), nullptr, false, "constant"); }
  Var<T> variable(Tensor<T> v) { return push(std::move(v), nullptr, true, "variable"); }

  /// Leaf that aliases an external tensor, which must outlive the tape.
  Var<T> reference(const Tensor<T>& v, bool requires_grad) {
    Entry e;
    e.ref = &v;
    e.requires_grad = requires_grad;
    e.op = "parameter";
    entries_.push_back(std::move(e));
    return {this, entries_.size() - 1};
  }

  /// Record the output of a primitive. `fn` is kept only when some input
  /// requires a gradient.
  Var<T> record(Tensor<T> v, std::string_view op, std::initializer_list<Var<T>> inputs,
                BackwardFn fn) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || requires_grad(in.id);
    if (!v.all_finite()) throw NumericalError(std::string(op), "non-finite output");
    return push(std::move(v), needs ? std::move(fn) : nullptr, needs, op);
  }

  const Tensor<T>& value(std::size_t id) const {
    const Entry& e = entries_.at(id);
    return e.ref ? *e.ref : e.value;
  }
  bool requires_grad(std::size_t id) const { return entries_.at(id).requires_grad; }
  std::string_view op(std::size_t id) const { return entries_.at(id).op; }
  std::size_t size() const noexcept { return entries_.size(); }

  bool has_grad(std::size_t id) const { return !entries_.at(id).grad.empty(); }

  /// Gradient buffer for `id`, zero-initialized on first access in a sweep.
  Tensor<T>& grad(std::size_t id) {
    Entry& e = entries_.at(id);
    if (e.grad.empty()) e.grad = Tensor<T>(value(id).shape());
    return e.grad;
  }

  /// Reverse sweep seeded with `cotangent` at `root`. Clears gradients from
  /// any previous sweep, so one forward pass may serve several sweeps.
  void backward(Var<T> root, const Tensor<T>& cotangent) {
    if (cotangent.shape() != value(root.id).shape())
      throw ShapeError("cotangent shape " + shape_str(cotangent.shape()) +
                       " does not match output " + shape_str(value(root.id).shape()));
    for (auto& e : entries_) e.grad = Tensor<T>();
    if (!requires_grad(root.id)) return;
    entries_[root.id].grad = cotangent;
    for (std::size_t id = root.id + 1; id-- > 0;) {
      Entry& e = entries_[id];
      if (e.fn && !e.grad.empty()) {
        e.fn(*this, id);
        if (!e.grad.all_finite()) throw NumericalError(e.op, "non-finite gradient");
      }
    }
  }

  void backward(Var<T> root) {
    if (value(root.id).size() != 1) throw ShapeError("backward without cotangent needs a scalar root");
    backward(root, Tensor<T>(value(root.id).shape(), T(1)));
  }

 private:
  struct Entry {
    Tensor<T> value;
    const Tensor<T>* ref = nullptr;
    Tensor<T> grad;
    BackwardFn fn;
    bool requires_grad = false;
    std::string op;
  };

  Var<T> push(Tensor<T> v, BackwardFn fn, bool requires_grad, std::string_view op) {
    Entry e;
    e.value = std::move(v);
    e.fn = std::move(fn);
    e.requires_grad = requires_grad;
    e.op = std::string(op);
    entries_.push_back(std::move(e));
    return {this, entries_.size() - 1};
  }

  std::deque<Entry> entries_;
};

}  // namespace cflab::diffcore

#endif  // CFLAB_DIFFCORE_TAPE_HPP
