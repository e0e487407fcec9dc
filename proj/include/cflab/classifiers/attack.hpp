#ifndef CFLAB_CLASSIFIERS_ATTACK_HPP
#define CFLAB_CLASSIFIERS_ATTACK_HPP

#include <functional>

#include "cflab/classifiers/classifier.hpp"

namespace cflab::classifiers {

struct AttackConfig {
  double eps = 0.25;  // l2 radius
  int steps = 10;
  double step_size = 0.05;
  int restarts = 1;
  double jitter = 1e-4;  // std of the Gaussian start around x0
  std::uint64_t seed = 0;

  void validate() const {
    if (!(eps >= 0)) throw InvalidArgument("attack radius must be non-negative");
    if (steps < 1) throw InvalidArgument("attack needs at least one step");
    if (restarts < 1) throw InvalidArgument("attack needs at least one restart");
    if (!(step_size > 0)) throw InvalidArgument("attack step size must be positive");
  }
};

/// Per-sample objective (N) computed from logits (N, K) on the tape.
template <typename T>
using Objective = std::function<Var<T>(Var<T> logits)>;

/// Cross-entropy against fixed labels.
template <typename T>
Objective<T> cross_entropy_objective(std::vector<int> labels) {
  return [labels = std::move(labels)](Var<T> logits) {
    return ops::scale(ops::pick(ops::log_softmax(logits), labels), T(-1));
  };
}

/// KL(p(.|x) || reference), reference given as fixed probabilities (N, K).
template <typename T>
Var<T> kl_to_reference(Var<T> logits, const Tensor<T>& reference) {
  Tensor<T> log_ref(reference.shape());
  for (std::size_t i = 0; i < log_ref.size(); ++i)
    log_ref[i] = std::log(std::max(reference[i], std::numeric_limits<T>::min()));
  auto lp = ops::log_softmax(logits);
  auto p = ops::exp(lp);
  return ops::sum_per_sample(ops::mul(p, ops::sub(lp, logits.tape->constant(std::move(log_ref)))));
}

template <typename T>
Objective<T> kl_objective(Tensor<T> reference) {
  return [reference = std::move(reference)](Var<T> logits) { return kl_to_reference(logits, reference); };
}

/// Euclidean projection onto the l2 ball of radius eps around x0, then onto
/// the box [0, 1]. With x0 in the box the result stays in the ball.
template <typename T>
void project_ball_box(T* x, const T* x0, std::size_t m, double eps) {
  double norm = 0;
  for (std::size_t j = 0; j < m; ++j) norm += double(x[j] - x0[j]) * double(x[j] - x0[j]);
  norm = std::sqrt(norm);
  if (norm > eps) {
    const double s = eps / norm;
    for (std::size_t j = 0; j < m; ++j) x[j] = static_cast<T>(x0[j] + s * (x[j] - x0[j]));
  }
  for (std::size_t j = 0; j < m; ++j) x[j] = std::clamp(x[j], T(0), T(1));
}

/// Objective value and its input gradient at x.
template <Classifier M>
std::pair<Tensor<typename M::scalar_type>, Tensor<typename M::scalar_type>> objective_and_grad(
    const M& model, const Tensor<typename M::scalar_type>& x, const Objective<typename M::scalar_type>& obj) {
  using T = typename M::scalar_type;
  Tape<T> tape;
  Binding<T> b(tape, model.parameters(), false);
  auto xv = tape.variable(x);
  auto val = obj(model.forward(b, xv));
  tape.backward(ops::sum(val));
  return {val.value(), tape.has_grad(xv.id) ? tape.grad(xv.id) : Tensor<T>(x.shape())};
}

/// l2 projected gradient ascent on `objective` within B_2(x0, eps) and [0, 1].
/// Each sample keeps the best point seen across all iterates and restarts,
/// starting from x0 itself.
template <Classifier M>
Tensor<typename M::scalar_type> pgd_attack(const M& model, const Tensor<typename M::scalar_type>& x0,
                                           const Objective<typename M::scalar_type>& objective,
                                           const AttackConfig& cfg) {
  using T = typename M::scalar_type;
  cfg.validate();
  diffcore::check_input(model, x0);
  const std::size_t n = x0.dim(0), m = x0.size() / n;
  for (T v : x0.data())
    if (!(v >= 0 && v <= 1)) throw InvalidArgument("pgd_attack: input outside [0, 1]");
  Tensor<T> best = x0;
  if (cfg.eps == 0) return best;
  auto [best_val, g0] = objective_and_grad(model, x0, objective);
  (void)g0;

  Rng rng(cfg.seed);
  for (int r = 0; r < cfg.restarts; ++r) {
    Tensor<T> x = x0;
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += static_cast<T>(cfg.jitter * rng.normal());
    for (std::size_t i = 0; i < n; ++i) project_ball_box(x.ptr() + i * m, x0.ptr() + i * m, m, cfg.eps);
    for (int s = 0; s <= cfg.steps; ++s) {
      auto [val, grad] = objective_and_grad(model, x, objective);
      for (std::size_t i = 0; i < n; ++i)
        if (val[i] > best_val[i]) {
          best_val[i] = val[i];
          std::copy(x.ptr() + i * m, x.ptr() + (i + 1) * m, best.ptr() + i * m);
        }
      if (s == cfg.steps) break;
      for (std::size_t i = 0; i < n; ++i) {
        T* xi = x.ptr() + i * m;
        const T* gi = grad.ptr() + i * m;
        const double gn = diffcore::norm2(std::span<const T>(gi, m));
        if (gn > 0)
          for (std::size_t j = 0; j < m; ++j) xi[j] += static_cast<T>(cfg.step_size * gi[j] / gn);
        project_ball_box(xi, x0.ptr() + i * m, m, cfg.eps);
      }
    }
  }
  return best;
}

}  // namespace cflab::classifiers

#endif  // CFLAB_CLASSIFIERS_ATTACK_HPP
