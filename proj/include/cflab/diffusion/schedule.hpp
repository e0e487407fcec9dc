#ifndef CFLAB_DIFFUSION_SCHEDULE_HPP
#define CFLAB_DIFFUSION_SCHEDULE_HPP

#include <cmath>
#include <vector>

#include "cflab/diffcore/tensor.hpp"

namespace cflab::diffusion {

using diffcore::Tensor;

/// Variance schedule over steps 1..T. Index 0 is the clean image (alpha_bar = 1).
class NoiseSchedule {
 public:
  /// Linear betas. The default endpoints are the 1e-4..0.02 range for 1000
  /// steps rescaled by 1000 / T so that alpha_bar(T) stays comparable.
  static NoiseSchedule linear(int steps) {
    const double s = 1000.0 / steps;
    return linear(steps, 1e-4 * s, 0.02 * s);
  }

  static NoiseSchedule linear(int steps, double beta_start, double beta_end) {
    if (steps < 2) throw InvalidArgument("schedule needs at least two steps");
    std::vector<double> betas(steps);
    for (int i = 0; i < steps; ++i)
      betas[i] = beta_start + (beta_end - beta_start) * i / static_cast<double>(steps - 1);
    return NoiseSchedule(std::move(betas), true);
  }

  /// `enforce` checks 0 < beta < 1 and alpha_bar(T) < 1e-3; toy schedules in
  /// tests switch it off.
  NoiseSchedule(std::vector<double> betas, bool enforce) : beta_(std::move(betas)) {
    if (beta_.empty()) throw InvalidArgument("empty schedule");
    alpha_bar_.assign(beta_.size() + 1, 1.0);
    for (std::size_t t = 1; t <= beta_.size(); ++t) {
      const double b = beta_[t - 1];
      if (!(b >= 0 && b < 1) || (enforce && b <= 0))
        throw InvalidArgument("beta out of range at step " + std::to_string(t));
      alpha_bar_[t] = alpha_bar_[t - 1] * (1 - b);
    }
    if (enforce && alpha_bar_.back() >= 1e-3)
      throw InvalidArgument("alpha_bar(T) must be below 1e-3 so x_T is close to N(0, I)");
  }

  int steps() const noexcept { return static_cast<int>(beta_.size()); }

  double beta(int t) const { return beta_.at(check(t) - 1); }
  double alpha_bar(int t) const { return alpha_bar_.at(static_cast<std::size_t>(t)); }

  /// (1 - alpha_bar(t-1)) / (1 - alpha_bar(t)) * beta(t); zero at t = 1.
  double posterior_variance(int t) const {
    check(t);
    const double denom = 1 - alpha_bar(t);
    return denom > 0 ? (1 - alpha_bar(t - 1)) / denom * beta(t) : 0.0;
  }

  /// log of the posterior variance with the t = 1 value replaced by t = 2,
  /// which keeps the log finite.
  double log_posterior_variance_clipped(int t) const {
    check(t);
    if (t == 1 && steps() >= 2) return std::log(posterior_variance(2));
    return std::log(posterior_variance(t));
  }

  /// Coefficients of the posterior mean: mean = c0 * x0 + ct * x_t.
  std::pair<double, double> posterior_mean_coefs(int t) const {
    check(t);
    const double denom = 1 - alpha_bar(t);
    const double c0 = std::sqrt(alpha_bar(t - 1)) * beta(t) / denom;
    const double ct = std::sqrt(1 - beta(t)) * (1 - alpha_bar(t - 1)) / denom;
    return {c0, ct};
  }

 private:
  int check(int t) const {
    if (t < 1 || t > steps())
      throw InvalidArgument("step " + std::to_string(t) + " outside 1.." + std::to_string(steps()));
    return t;
  }

  std::vector<double> beta_;
  std::vector<double> alpha_bar_;
};

/// sqrt(alpha_bar(t)) x0 + sqrt(1 - alpha_bar(t)) eps.
template <typename T>
Tensor<T> forward_diffuse(const NoiseSchedule& s, const Tensor<T>& x0, int t, const Tensor<T>& eps) {
  if (t < 1 || t > s.steps()) throw InvalidArgument("forward_diffuse: step out of range");
  if (x0.shape() != eps.shape()) throw ShapeError("forward_diffuse: noise shape mismatch");
  const double a = std::sqrt(s.alpha_bar(t)), b = std::sqrt(1 - s.alpha_bar(t));
  Tensor<T> out(x0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(a * x0[i] + b * eps[i]);
  return out;
}

/// Per-sample-step variant: sample i of x0 is noised to steps[i].
template <typename T>
Tensor<T> forward_diffuse(const NoiseSchedule& s, const Tensor<T>& x0, const std::vector<int>& steps,
                          const Tensor<T>& eps) {
  if (x0.shape() != eps.shape()) throw ShapeError("forward_diffuse: noise shape mismatch");
  const std::size_t n = x0.dim(0), m = x0.size() / n;
  if (steps.size() != n) throw ShapeError("forward_diffuse: one step per sample");
  Tensor<T> out(x0.shape());
  for (std::size_t i = 0; i < n; ++i) {
    if (steps[i] < 1 || steps[i] > s.steps()) throw InvalidArgument("forward_diffuse: step out of range");
    const double a = std::sqrt(s.alpha_bar(steps[i])), b = std::sqrt(1 - s.alpha_bar(steps[i]));
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = static_cast<T>(a * x0[i * m + j] + b * eps[i * m + j]);
  }
  return out;
}

}  // namespace cflab::diffusion

#endif  // CFLAB_DIFFUSION_SCHEDULE_HPP
