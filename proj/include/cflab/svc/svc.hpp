#ifndef CFLAB_SVC_SVC_HPP
#define CFLAB_SVC_SVC_HPP

#include <cmath>
#include <functional>

#include "cflab/classifiers/attack.hpp"
#include "cflab/guidance/result.hpp"

namespace cflab::svc {

using diffcore::Tensor;
using diffcore::Var;
using guidance::CounterfactualResult;
namespace ops = diffcore::ops;

struct BallConstraint {
  double eps = 0.3;
  double p = 4.0;

  void validate() const {
    if (!(eps > 0)) throw InvalidArgument("ball radius must be positive");
    if (!(p > 1) || std::isinf(p)) throw InvalidArgument("ball norm order must be finite and greater than 1");
  }
};

/// argmax of <g, s> over |s|_p <= eps: eps sign(g) |g|^(q-1) / |g|_q^(q-1),
/// q = p / (p - 1). Zero gradient gives zero.
template <typename T>
void lp_lmo(std::span<const T> g, const BallConstraint& c, std::span<T> out) {
  c.validate();
  const double q = c.p / (c.p - 1);
  double gmax = 0;
  for (T v : g) gmax = std::max(gmax, std::abs(double(v)));
  if (gmax == 0) {
    std::fill(out.begin(), out.end(), T(0));
    return;
  }
  // scaled by max |g| so the powers neither overflow nor underflow
  double sq = 0;
  for (T v : g) sq += std::pow(std::abs(double(v)) / gmax, q);
  const double gq = std::pow(sq, 1 / q);
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double a = std::abs(double(g[i])) / gmax;
    const double sgn = g[i] > 0 ? 1.0 : g[i] < 0 ? -1.0 : 0.0;
    out[i] = static_cast<T>(c.eps * sgn * std::pow(a, q - 1) / std::pow(gq, q - 1));
  }
}

template <typename T>
Tensor<T> lp_lmo(const Tensor<T>& g, const BallConstraint& c) {
  Tensor<T> out(g.shape());
  lp_lmo<T>(g.data(), c, out.data());
  return out;
}

struct SvcConfig {
  BallConstraint ball{};
  int iterations = 100;
  double momentum = 0.9;  // weight on the running gradient average

  void validate() const {
    ball.validate();
    if (iterations < 1) throw InvalidArgument("SVC needs at least one iteration");
    if (!(momentum >= 0 && momentum < 1)) throw InvalidArgument("SVC momentum must lie in [0, 1)");
  }
};

/// Largest constraint violation of the batch x around x0: the l_p distance in
/// excess of eps, or the distance outside [0, 1].
template <typename T>
double feasibility_violation(const Tensor<T>& x, const Tensor<T>& x0, const BallConstraint& c) {
  const std::size_t n = x.dim(0), m = x.size() / n;
  double worst = 0;
  std::vector<T> d(m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      const T v = x[i * m + j];
      worst = std::max({worst, double(-v), double(v - 1)});
      d[j] = v - x0[i * m + j];
    }
    worst = std::max(worst, diffcore::lp_norm<T>(d, c.p) - c.eps);
  }
  return worst;
}

/// Slack allowed on the ball constraint when checking iterates.
inline constexpr double kBallSlack = 1e-5;

/// Sparse visual counterfactuals: Frank-Wolfe ascent on log p(target | x)
/// over B_p(x0, eps) intersected with [0, 1]^d, for a batch x0 (N, C, H, W).
/// Each iteration moves towards the clipped LMO vertex with step
/// 2 / (k + 2), 1/2 or 1/4 of it, whichever scores best per image, and the
/// best iterate seen is returned. Flips and confidences refer to `model`.
/// `on_iterate(k, x_k)` sees every iterate of the batch.
template <classifiers::Classifier M>
std::vector<CounterfactualResult<typename M::scalar_type>> generate_svc(
    const M& model, const Tensor<typename M::scalar_type>& x0, const std::vector<int>& targets, const SvcConfig& cfg,
    const std::function<void(int, const Tensor<typename M::scalar_type>&)>& on_iterate = {}) {
  using T = typename M::scalar_type;
  cfg.validate();
  diffcore::check_input(model, x0);
  const std::size_t n = x0.dim(0), m = x0.size() / n, k = model.classes();
  if (targets.size() != n) throw InvalidArgument("generate_svc: one target per image");
  for (int y : targets)
    if (y < 0 || y >= static_cast<int>(k)) throw InvalidArgument("generate_svc: target class out of range");
  for (T v : x0.data())
    if (!(v >= 0 && v <= 1)) throw InvalidArgument("generate_svc: input outside [0, 1]");

  const auto objective = [&](Var<T> logits) { return ops::pick(ops::log_softmax(logits), targets); };
  auto score = [&](const Tensor<T>& x) {
    diffcore::Tape<T> tape;
    diffcore::Binding<T> b(tape, model.parameters(), false);
    return objective(model.forward(b, tape.constant(x))).value();
  };
  auto check = [&](const Tensor<T>& x, int it) {
    if (feasibility_violation(x, x0, cfg.ball) > kBallSlack)
      throw Error("generate_svc: iterate " + std::to_string(it) + " left the feasible set");
  };

  Tensor<T> x = x0, best = x0, avg(x0.shape()), vertex(x0.shape());
  auto [best_val, unused] = classifiers::objective_and_grad(model, x0, classifiers::Objective<T>(objective));
  (void)unused;
  std::vector<std::vector<double>> traces(n);
  for (int it = 0; it < cfg.iterations; ++it) {
    auto [val, grad] = classifiers::objective_and_grad(model, x, classifiers::Objective<T>(objective));
    for (std::size_t i = 0; i < grad.size(); ++i)
      avg[i] = it == 0 ? grad[i] : static_cast<T>(cfg.momentum * avg[i] + (1 - cfg.momentum) * grad[i]);
    for (std::size_t i = 0; i < n; ++i) {
      lp_lmo<T>(std::span<const T>(avg.ptr() + i * m, m), cfg.ball, std::span<T>(vertex.ptr() + i * m, m));
      for (std::size_t j = i * m; j < (i + 1) * m; ++j) vertex[j] = std::clamp<T>(x0[j] + vertex[j], 0, 1);
    }
    const double gamma = 2.0 / (it + 2.0);
    Tensor<T> next = x;
    std::vector<double> next_val(n, -std::numeric_limits<double>::infinity());
    for (double scale : {1.0, 0.5, 0.25}) {
      Tensor<T> cand = x;
      const double g = gamma * scale;
      for (std::size_t j = 0; j < cand.size(); ++j) cand[j] = static_cast<T>(x[j] + g * (vertex[j] - x[j]));
      const auto cv = score(cand);
      for (std::size_t i = 0; i < n; ++i)
        if (cv[i] > next_val[i]) {
          next_val[i] = cv[i];
          std::copy_n(cand.ptr() + i * m, m, next.ptr() + i * m);
        }
    }
    x = std::move(next);
    check(x, it + 1);
    if (on_iterate) on_iterate(it + 1, x);
    for (std::size_t i = 0; i < n; ++i) {
      traces[i].push_back(std::exp(next_val[i]));
      if (next_val[i] > best_val[i]) {
        best_val[i] = static_cast<T>(next_val[i]);
        std::copy_n(x.ptr() + i * m, m, best.ptr() + i * m);
      }
    }
  }

  const auto probs = classifiers::predict_proba(model, best);
  const auto pred = classifiers::argmax_rows(probs);
  std::vector<CounterfactualResult<T>> results(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& r = results[i];
    r.image = best.rows(i, i + 1);
    r.target = targets[i];
    r.confidence_trace = std::move(traces[i]);
    r.final_confidence = probs[i * k + targets[i]];
    r.flipped = pred[i] == targets[i];
    guidance::set_distances(r, x0.ptr() + i * m);
  }
  return results;
}

/// Parallel form: chunks of images on up to `jobs` threads.
template <classifiers::Classifier M>
std::vector<CounterfactualResult<typename M::scalar_type>> generate_svc(const M& model,
                                                                        const Tensor<typename M::scalar_type>& x0,
                                                                        const std::vector<int>& targets,
                                                                        const SvcConfig& cfg, unsigned jobs) {
  const std::size_t n = x0.dim(0), chunk = classifiers::kEvalChunk;
  if (targets.size() != n) throw InvalidArgument("generate_svc: one target per image");
  std::vector<CounterfactualResult<typename M::scalar_type>> results(n);
  diffcore::parallel_chunks((n + chunk - 1) / chunk, jobs, [&](std::size_t c) {
    const std::size_t lo = c * chunk, hi = std::min(n, lo + chunk);
    auto part = generate_svc(model, x0.rows(lo, hi), std::vector<int>(targets.begin() + lo, targets.begin() + hi), cfg);
    std::move(part.begin(), part.end(), results.begin() + lo);
  });
  return results;
}

}  // namespace cflab::svc

#endif  // CFLAB_SVC_SVC_HPP
