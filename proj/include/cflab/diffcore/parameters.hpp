#ifndef CFLAB_DIFFCORE_PARAMETERS_HPP
#define CFLAB_DIFFCORE_PARAMETERS_HPP

#include <cmath>
#include <deque>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cflab/diffcore/ops.hpp"
#include "cflab/diffcore/rng.hpp"

namespace cflab::diffcore {

template <typename T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>>>;

/// Flat list of named parameter tensors with stable addresses.
template <typename T>
class Parameters {
 public:
  std::size_t add(std::string name, Tensor<T> value) {
    if (find(name)) throw InvalidArgument("duplicate parameter name: " + name);
    names_.push_back(std::move(name));
    tensors_.push_back(std::move(value));
    return tensors_.size() - 1;
  }

  std::size_t size() const noexcept { return tensors_.size(); }
  const std::string& name(std::size_t i) const { return names_.at(i); }
  Tensor<T>& operator[](std::size_t i) { return tensors_.at(i); }
  const Tensor<T>& operator[](std::size_t i) const { return tensors_.at(i); }

  std::optional<std::size_t> find(const std::string& name) const {
    for (std::size_t i = 0; i < names_.size(); ++i)
      if (names_[i] == name) return i;
    return std::nullopt;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.size();
    return n;
  }

  template <typename U>
  Parameters<U> cast() const {
    Parameters<U> out;
    for (std::size_t i = 0; i < size(); ++i) out.add(names_[i], tensors_[i].template cast<U>());
    return out;
  }

  NamedTensors<T> named() const {
    NamedTensors<T> out;
    for (std::size_t i = 0; i < size(); ++i) out.emplace_back(names_[i], tensors_[i]);
    return out;
  }

  /// Overwrite values by name; every parameter must be present with its shape.
  template <typename U>
  void assign(const NamedTensors<U>& values) {
    for (std::size_t i = 0; i < size(); ++i) {
      auto it = std::find_if(values.begin(), values.end(),
                             [&](const auto& nv) { return nv.first == names_[i]; });
      if (it == values.end()) throw MissingArtifact("parameter missing from source: " + names_[i]);
      if (it->second.shape() != tensors_[i].shape())
        throw ShapeError("parameter " + names_[i] + " has shape " + shape_str(it->second.shape()) +
                         ", expected " + shape_str(tensors_[i].shape()));
      tensors_[i] = it->second.template cast<T>();
    }
  }

 private:
  std::vector<std::string> names_;
  std::deque<Tensor<T>> tensors_;
};

/// Binds parameters onto a tape for one forward pass.
template <typename T>
class Binding {
 public:
  Binding(Tape<T>& tape, const Parameters<T>& params, bool trainable)
      : tape_(tape), params_(params), trainable_(trainable), ids_(params.size(), kUnbound) {}

  Var<T> operator()(std::size_t index) {
    if (ids_.at(index) == kUnbound) ids_[index] = tape_.reference(params_[index], trainable_).id;
    return {&tape_, ids_[index]};
  }

  Tape<T>& tape() noexcept { return tape_; }

  /// Gradient per parameter after a reverse sweep; zeros where none flowed.
  std::vector<Tensor<T>> gradients() const {
    std::vector<Tensor<T>> out;
    out.reserve(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (ids_[i] != kUnbound && tape_.has_grad(ids_[i]))
        out.push_back(tape_.grad(ids_[i]));
      else
        out.emplace_back(params_[i].shape());
    }
    return out;
  }

 private:
  static constexpr std::size_t kUnbound = static_cast<std::size_t>(-1);
  Tape<T>& tape_;
  const Parameters<T>& params_;
  bool trainable_;
  std::vector<std::size_t> ids_;
};

namespace layers {

template <typename T>
Tensor<T> fan_in_uniform(const Shape& shape, std::size_t fan_in, Rng& rng) {
  Tensor<T> t(shape);
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

template <typename T>
struct Linear {
  std::size_t weight = 0, bias = 0;

  static Linear create(Parameters<T>& p, const std::string& name, std::size_t in, std::size_t out,
                       Rng& rng) {
    Linear l;
    l.weight = p.add(name + ".weight", fan_in_uniform<T>({out, in}, in, rng));
    l.bias = p.add(name + ".bias", Tensor<T>({out}));
    return l;
  }

  Var<T> operator()(Binding<T>& b, Var<T> x) const { return ops::linear(x, b(weight), b(bias)); }
};

template <typename T>
struct Conv2d {
  std::size_t weight = 0, bias = 0, stride = 1, pad = 1;

  static Conv2d create(Parameters<T>& p, const std::string& name, std::size_t in, std::size_t out,
                       std::size_t kernel, std::size_t stride, Rng& rng) {
    Conv2d c;
    c.weight = p.add(name + ".weight",
                     fan_in_uniform<T>({out, in, kernel, kernel}, in * kernel * kernel, rng));
    c.bias = p.add(name + ".bias", Tensor<T>({out}));
    c.stride = stride;
    c.pad = kernel / 2;
    return c;
  }

  Var<T> operator()(Binding<T>& b, Var<T> x) const {
    return ops::conv2d(x, b(weight), b(bias), stride, pad);
  }
};

template <typename T>
struct GroupNorm {
  std::size_t gamma = 0, beta = 0, groups = 1;

  static GroupNorm create(Parameters<T>& p, const std::string& name, std::size_t channels,
                          std::size_t max_groups = 8) {
    GroupNorm g;
    g.gamma = p.add(name + ".gamma", Tensor<T>({channels}, T(1)));
    g.beta = p.add(name + ".beta", Tensor<T>({channels}));
    g.groups = std::min(max_groups, channels);
    while (channels % g.groups) --g.groups;
    return g;
  }

  Var<T> operator()(Binding<T>& b, Var<T> x) const {
    return ops::group_norm(x, b(gamma), b(beta), groups);
  }
};

}  // namespace layers
}  // namespace cflab::diffcore

#endif  // CFLAB_DIFFCORE_PARAMETERS_HPP
