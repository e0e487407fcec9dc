#ifndef CFLAB_GUIDANCE_DVC_HPP
#define CFLAB_GUIDANCE_DVC_HPP

#include "cflab/classifiers/classifier.hpp"
#include "cflab/diffusion/model.hpp"
#include "cflab/guidance/cone.hpp"
#include "cflab/guidance/result.hpp"

namespace cflab::guidance {

using diffcore::Binding;
using diffcore::Tape;
using diffcore::Var;
namespace ops = diffcore::ops;

struct GuidanceConfig {
  double lambda_c = 0.6;
  double lambda_d = 0.5;
  double cone_angle = 30.0;  // degrees
  double start_fraction = 0.5;
  double distance_norm = 2.0;
  GuidanceMode mode = GuidanceMode::cone;
  /// false treats the denoised estimate as a leaf (ablation: no backprop
  /// through the denoiser).
  bool through_denoiser = true;

  void validate() const {
    if (!(lambda_c >= 0) || !(lambda_d >= 0)) throw InvalidArgument("guidance strengths must be non-negative");
    detail::check_angle(cone_angle);
    if (!(start_fraction > 0 && start_fraction <= 1)) throw InvalidArgument("start fraction must lie in (0, 1]");
    if (!(distance_norm >= 1)) throw InvalidArgument("distance norm order must be at least 1");
  }

  int start_step(int steps) const { return std::max(1, static_cast<int>(std::lround(start_fraction * steps))); }
};

/// Gradient of |x - x0|_p with respect to x, per sample.
template <typename T>
Tensor<T> distance_gradient(const Tensor<T>& x, const Tensor<T>& x0, double p) {
  const std::size_t n = x.dim(0), m = x.size() / n;
  Tensor<T> g(x.shape());
  std::vector<T> d(m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) d[j] = x[i * m + j] - x0[i * m + j];
    const double nrm = diffcore::lp_norm<T>(d, p);
    if (nrm < kZeroNorm) continue;
    for (std::size_t j = 0; j < m; ++j) {
      const double a = std::abs(double(d[j])) / nrm;
      g[i * m + j] = static_cast<T>((d[j] > 0 ? 1.0 : d[j] < 0 ? -1.0 : 0.0) * std::pow(a, p - 1));
    }
  }
  return g;
}

/// Everything one guided step needs: the unconditional transition, the
/// guidance direction and the plain confidence of the denoised estimate.
template <typename T>
struct GuidedStep {
  diffusion::DenoiserOutput<T> transition;
  Tensor<T> gamma;
  std::vector<double> confidence;
};

/// Gamma_DVC at (x_t, t) for a batch with per-sample targets. `x0` is the
/// original batch in [0, 1].
template <classifiers::Classifier P, classifiers::Classifier R, diffusion::StepDenoiser Net>
GuidedStep<typename Net::scalar_type> guidance_step(const P& plain, const R& robust,
                                                    const diffusion::DiffusionModel<Net>& model,
                                                    const Tensor<typename Net::scalar_type>& x0,
                                                    const Tensor<typename Net::scalar_type>& x_t, int t,
                                                    const std::vector<int>& targets, const GuidanceConfig& cfg) {
  using T = typename Net::scalar_type;
  const std::size_t n = x_t.dim(0), m = x_t.size() / n;
  const auto& sched = model.schedule();
  Tape<T> tape;
  Binding<T> bn(tape, model.net().parameters(), false), bp(tape, plain.parameters(), false),
      br(tape, robust.parameters(), false);
  auto xv = tape.variable(x_t);
  auto td = diffusion::denoise_on_tape(model, bn, xv, t);
  auto x0_dn = cfg.through_denoiser ? td.x0 : tape.variable(td.x0.value());
  auto img = ops::affine(x0_dn, T(0.5), T(0.5));
  auto lp_plain = ops::pick(ops::log_softmax(plain.forward(bp, img)), targets);

  GuidedStep<T> out;
  for (std::size_t i = 0; i < n; ++i) out.confidence.push_back(std::exp(double(lp_plain.value()[i])));

  const Tensor<T> ones({n}, T(1));
  auto grad_of = [&](Var<T> root, const Tensor<T>& cot) {
    try {
      tape.backward(root, cot);
    } catch (const NumericalError& e) {
      throw NumericalError("guidance step " + std::to_string(t), e.what());
    }
    if (cfg.through_denoiser) return tape.has_grad(xv.id) ? tape.grad(xv.id) : Tensor<T>(x_t.shape());
    // chain rule through x0_dn = (x_t - sqrt(1 - ab) eps) / sqrt(ab) with eps held fixed
    Tensor<T> g = tape.has_grad(x0_dn.id) ? tape.grad(x0_dn.id) : Tensor<T>(x_t.shape());
    const T s = static_cast<T>(1 / std::sqrt(sched.alpha_bar(t)));
    for (auto& v : g.data()) v *= s;
    return g;
  };

  const bool need_plain = cfg.mode != GuidanceMode::robust_only && cfg.lambda_c > 0;
  const bool need_robust = cfg.mode != GuidanceMode::plain_only && cfg.lambda_c > 0;
  Tensor<T> g_plain(x_t.shape()), g_robust(x_t.shape()), g_dist(x_t.shape());
  if (need_plain) g_plain = grad_of(lp_plain, ones);
  if (need_robust) {
    auto lp_robust = ops::pick(ops::log_softmax(robust.forward(br, img)), targets);
    g_robust = grad_of(lp_robust, ones);
  }
  if (cfg.lambda_d > 0) g_dist = grad_of(img, distance_gradient(img.value(), x0, cfg.distance_norm));

  out.gamma = Tensor<T>(x_t.shape());
  for (std::size_t i = 0; i < n; ++i) {
    auto row = [&](const Tensor<T>& a) { return std::span<const T>(a.ptr() + i * m, m); };
    compose_guidance<T>(cfg.mode, {row(g_plain), row(g_robust), row(g_dist)}, cfg.lambda_c, cfg.lambda_d,
                        cfg.cone_angle, std::span<T>(out.gamma.ptr() + i * m, m));
  }

  auto& d = out.transition;
  d.eps = td.eps.value();
  d.v = diffusion::interpolation_weight(td.raw.value());
  d.mu = diffusion::mean_from_eps(sched, x_t, d.eps, t);
  d.sigma = diffusion::sigma_from_v(sched, d.v, t);
  if (!d.mu.all_finite() || !d.sigma.all_finite() || !out.gamma.all_finite())
    throw NumericalError("guidance step " + std::to_string(t), "non-finite transition");
  return out;
}

template <classifiers::Classifier P>
void finish_result(const P& plain, const Tensor<typename P::scalar_type>& x0,
                   std::vector<CounterfactualResult<typename P::scalar_type>>& results) {
  using T = typename P::scalar_type;
  const std::size_t n = results.size(), m = x0.size() / n;
  Shape shape = x0.shape();
  shape[0] = n;
  Tensor<T> batch(shape);
  for (std::size_t i = 0; i < n; ++i) std::copy_n(results[i].image.ptr(), m, batch.ptr() + i * m);
  const auto probs = classifiers::predict_proba(plain, batch);
  const auto pred = classifiers::argmax_rows(probs);
  const std::size_t k = probs.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    auto& r = results[i];
    r.final_confidence = probs[i * k + r.target];
    r.flipped = pred[i] == r.target;
    set_distances(r, x0.ptr() + i * m);
  }
}

inline constexpr std::size_t kDvcChunk = 8;

/// Diffusion visual counterfactuals for a batch x0 (N, C, H, W) in [0, 1].
/// Image i draws its noise from derive_seed(seed, {i}); chunks of images run
/// on up to `jobs` threads.
template <classifiers::Classifier P, classifiers::Classifier R, diffusion::StepDenoiser Net>
std::vector<CounterfactualResult<typename Net::scalar_type>> generate_dvc(
    const P& plain, const R& robust, const diffusion::DiffusionModel<Net>& model,
    const Tensor<typename Net::scalar_type>& x0, const std::vector<int>& targets, const GuidanceConfig& cfg,
    std::uint64_t seed, unsigned jobs = 1) {
  using T = typename Net::scalar_type;
  cfg.validate();
  diffcore::check_input(plain, x0);
  const std::size_t n = x0.dim(0), m = x0.size() / n;
  if (targets.size() != n) throw InvalidArgument("generate_dvc: one target per image");
  for (int y : targets)
    if (y < 0 || y >= static_cast<int>(plain.classes()) || y >= static_cast<int>(robust.classes()))
      throw InvalidArgument("generate_dvc: target class out of range");
  for (T v : x0.data())
    if (!(v >= 0 && v <= 1)) throw InvalidArgument("generate_dvc: input outside [0, 1]");

  const int s = cfg.start_step(model.schedule().steps());
  std::vector<CounterfactualResult<T>> results(n);
  diffcore::parallel_chunks((n + kDvcChunk - 1) / kDvcChunk, jobs, [&](std::size_t c) {
    const std::size_t lo = c * kDvcChunk, hi = std::min(n, lo + kDvcChunk), cn = hi - lo;
    std::vector<Rng> rngs;
    for (std::size_t i = lo; i < hi; ++i) rngs.emplace_back(derive_seed(seed, {i}));
    auto draw = [&] {
      Tensor<T> z(x0.rows(lo, hi).shape());
      for (std::size_t i = 0; i < cn; ++i)
        for (std::size_t j = 0; j < m; ++j) z[i * m + j] = static_cast<T>(rngs[i].normal());
      return z;
    };
    const Tensor<T> src = x0.rows(lo, hi);
    const std::vector<int> ys(targets.begin() + lo, targets.begin() + hi);
    Tensor<T> x = diffusion::forward_diffuse(model.schedule(), diffusion::to_model_range(src), s, draw());
    std::vector<std::vector<double>> traces(cn);
    for (int t = s; t >= 1; --t) {
      auto step = guidance_step(plain, robust, model, src, x, t, ys, cfg);
      for (std::size_t i = 0; i < cn; ++i) traces[i].push_back(step.confidence[i]);
      step.transition.mu = guided_mean(step.transition.mu, step.transition.sigma, step.gamma);
      x = t > 1 ? diffusion::reverse_step_from(step.transition, t, draw()) : step.transition.mu;
    }
    x = diffusion::to_image_range(std::move(x));
    std::vector<CounterfactualResult<T>> part(cn);
    for (std::size_t i = 0; i < cn; ++i) {
      part[i].image = x.rows(i, i + 1);
      part[i].target = ys[i];
      part[i].confidence_trace = std::move(traces[i]);
    }
    finish_result(plain, src, part);
    std::move(part.begin(), part.end(), results.begin() + lo);
  });
  return results;
}

/// Single-image convenience form; x0 is (1, C, H, W).
template <classifiers::Classifier P, classifiers::Classifier R, diffusion::StepDenoiser Net>
CounterfactualResult<typename Net::scalar_type> generate_dvc(const P& plain, const R& robust,
                                                             const diffusion::DiffusionModel<Net>& model,
                                                             const Tensor<typename Net::scalar_type>& x0,
                                                             int target, const GuidanceConfig& cfg,
                                                             std::uint64_t seed) {
  if (x0.dim(0) != 1) throw ShapeError("generate_dvc: expected a single image");
  return generate_dvc(plain, robust, model, x0, std::vector<int>{target}, cfg, seed).front();
}

}  // namespace cflab::guidance

#endif  // CFLAB_GUIDANCE_DVC_HPP
