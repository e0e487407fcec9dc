#ifndef CFLAB_DIFFCORE_MAP_HPP
#define CFLAB_DIFFCORE_MAP_HPP

#include <concepts>

#include "cflab/diffcore/parameters.hpp"

namespace cflab::diffcore {

/// A parametric map: a differentiable function of a batched input tensor
/// whose weights live in a Parameters container.
///
/// `sample_shape()` is the per-sample input shape; inputs carry a leading
/// batch dimension in front of it.
template <typename M>
concept ParametricMap = requires(const M& m, Binding<typename M::scalar_type>& b,
                                 Var<typename M::scalar_type> x) {
  typename M::scalar_type;
  { m.parameters() } -> std::convertible_to<const Parameters<typename M::scalar_type>&>;
  { m.sample_shape() } -> std::convertible_to<Shape>;
  { m.forward(b, x) } -> std::same_as<Var<typename M::scalar_type>>;
};

template <ParametricMap M>
void check_input(const M& map, const Tensor<typename M::scalar_type>& input) {
  const Shape want = map.sample_shape();
  const Shape& got = input.shape();
  if (got.size() != want.size() + 1 || !std::equal(want.begin(), want.end(), got.begin() + 1))
    throw ShapeError("input shape " + shape_str(got) + " does not match (N," +
                     shape_str(want).substr(1));
}

template <ParametricMap M>
Tensor<typename M::scalar_type> evaluate(const M& map, const Tensor<typename M::scalar_type>& input) {
  using T = typename M::scalar_type;
  check_input(map, input);
  Tape<T> tape;
  Binding<T> bind(tape, map.parameters(), false);
  return map.forward(bind, tape.constant(input)).value();
}

/// Vector-Jacobian product with respect to the input.
template <ParametricMap M>
Tensor<typename M::scalar_type> grad_input(const M& map, const Tensor<typename M::scalar_type>& input,
                                           const Tensor<typename M::scalar_type>& cotangent) {
  using T = typename M::scalar_type;
  check_input(map, input);
  Tape<T> tape;
  Binding<T> bind(tape, map.parameters(), false);
  Var<T> x = tape.variable(input);
  Var<T> y = map.forward(bind, x);
  tape.backward(y, cotangent);
  return tape.has_grad(x.id) ? tape.grad(x.id) : Tensor<T>(input.shape());
}

/// Vector-Jacobian product with respect to every named parameter.
template <ParametricMap M>
NamedTensors<typename M::scalar_type> grad_params(const M& map,
                                                  const Tensor<typename M::scalar_type>& input,
                                                  const Tensor<typename M::scalar_type>& cotangent) {
  using T = typename M::scalar_type;
  check_input(map, input);
  Tape<T> tape;
  Binding<T> bind(tape, map.parameters(), true);
  Var<T> y = map.forward(bind, tape.constant(input));
  tape.backward(y, cotangent);
  auto grads = bind.gradients();
  NamedTensors<T> out;
  for (std::size_t i = 0; i < grads.size(); ++i)
    out.emplace_back(map.parameters().name(i), std::move(grads[i]));
  return out;
}

/// x -> x on vectors of length `dim`.
template <typename T>
class IdentityMap {
 public:
  using scalar_type = T;
  explicit IdentityMap(std::size_t dim) : dim_(dim) {}
  const Parameters<T>& parameters() const { return params_; }
  Shape sample_shape() const { return {dim_}; }
  Var<T> forward(Binding<T>&, Var<T> x) const { return ops::scale(x, T(1)); }

 private:
  std::size_t dim_;
  Parameters<T> params_;
};

/// x -> W x + b.
template <typename T>
class AffineMap {
 public:
  using scalar_type = T;
  AffineMap(std::size_t in, std::size_t out, Rng& rng) : in_(in) {
    layer_ = layers::Linear<T>::create(params_, "affine", in, out, rng);
  }
  AffineMap(Tensor<T> weight, Tensor<T> bias) : in_(weight.dim(1)) {
    layer_.weight = params_.add("affine.weight", std::move(weight));
    layer_.bias = params_.add("affine.bias", std::move(bias));
  }
  const Parameters<T>& parameters() const { return params_; }
  Parameters<T>& parameters() { return params_; }
  Shape sample_shape() const { return {in_}; }
  Var<T> forward(Binding<T>& b, Var<T> x) const { return layer_(b, x); }

 private:
  std::size_t in_;
  Parameters<T> params_;
  layers::Linear<T> layer_;
};

}  // namespace cflab::diffcore

#endif  // CFLAB_DIFFCORE_MAP_HPP
