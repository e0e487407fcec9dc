#ifndef CFLAB_DIFFUSION_MODEL_HPP
#define CFLAB_DIFFUSION_MODEL_HPP

#include "cflab/diffcore/map.hpp"
#include "cflab/diffcore/parallel.hpp"
#include "cflab/diffusion/schedule.hpp"
#include "cflab/diffusion/unet.hpp"

namespace cflab::diffusion {

/// A network taking (x_t, steps) to a (N, 2C, H, W) map: C channels of
/// predicted noise followed by C channels of variance logits.
template <typename N>
concept StepDenoiser = requires(const N& n, Binding<typename N::scalar_type>& b,
                                Var<typename N::scalar_type> x, const std::vector<int>& steps) {
  typename N::scalar_type;
  { n.parameters() } -> std::convertible_to<const Parameters<typename N::scalar_type>&>;
  { n.sample_shape() } -> std::convertible_to<Shape>;
  { n.forward(b, x, steps) } -> std::same_as<Var<typename N::scalar_type>>;
};

template <StepDenoiser Net>
class DiffusionModel {
 public:
  using scalar_type = typename Net::scalar_type;

  DiffusionModel(Net net, NoiseSchedule schedule) : net_(std::move(net)), schedule_(std::move(schedule)) {}

  const Net& net() const noexcept { return net_; }
  Net& net() noexcept { return net_; }
  const NoiseSchedule& schedule() const noexcept { return schedule_; }
  Shape sample_shape() const { return net_.sample_shape(); }

 private:
  Net net_;
  NoiseSchedule schedule_;
};

template <typename T>
struct DenoiserOutput {
  Tensor<T> eps, v, mu, sigma;
};

/// Split the network output into noise prediction and variance logits.
template <typename T>
std::pair<Var<T>, Var<T>> split_heads(Var<T> out) {
  const std::size_t c = out.dim(1) / 2;
  return {ops::slice_channels(out, 0, c), ops::slice_channels(out, c, 2 * c)};
}

/// (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps) / sqrt(1 - beta_t), elementwise.
template <typename T>
Tensor<T> mean_from_eps(const NoiseSchedule& s, const Tensor<T>& x_t, const Tensor<T>& eps, int t) {
  const double k = s.beta(t) / std::sqrt(1 - s.alpha_bar(t)), d = 1 / std::sqrt(1 - s.beta(t));
  Tensor<T> mu(x_t.shape());
  for (std::size_t i = 0; i < mu.size(); ++i) mu[i] = static_cast<T>(d * (x_t[i] - k * eps[i]));
  return mu;
}

/// Interpolation weight v in (0, 1) from the raw head output.
template <typename T>
Tensor<T> interpolation_weight(const Tensor<T>& raw) {
  Tensor<T> v(raw.shape());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(1 / (1 + std::exp(-double(raw[i]))));
  return v;
}

/// exp(v log beta_t + (1 - v) log beta~_t).
template <typename T>
Tensor<T> sigma_from_v(const NoiseSchedule& s, const Tensor<T>& v, int t) {
  const double lb = std::log(s.beta(t)), lp = s.log_posterior_variance_clipped(t);
  Tensor<T> sig(v.shape());
  for (std::size_t i = 0; i < sig.size(); ++i) sig[i] = static_cast<T>(std::exp(v[i] * lb + (1 - v[i]) * lp));
  return sig;
}

inline void check_step(const NoiseSchedule& s, int t) {
  if (t < 1 || t > s.steps())
    throw InvalidArgument("step " + std::to_string(t) + " outside 1.." + std::to_string(s.steps()));
}

template <StepDenoiser Net>
DenoiserOutput<typename Net::scalar_type> denoise(const DiffusionModel<Net>& model,
                                                  const Tensor<typename Net::scalar_type>& x_t, int t) {
  using T = typename Net::scalar_type;
  check_step(model.schedule(), t);
  Tape<T> tape;
  Binding<T> bind(tape, model.net().parameters(), false);
  auto [eps, raw] = split_heads(model.net().forward(bind, tape.constant(x_t), std::vector<int>(x_t.dim(0), t)));
  if (eps.value().shape() != x_t.shape()) throw ShapeError("denoiser output does not match image shape");
  DenoiserOutput<T> out;
  out.eps = eps.value();
  out.v = interpolation_weight(raw.value());
  out.mu = mean_from_eps(model.schedule(), x_t, out.eps, t);
  out.sigma = sigma_from_v(model.schedule(), out.v, t);
  if (!out.mu.all_finite() || !out.sigma.all_finite()) throw NumericalError("denoise", "non-finite output");
  return out;
}

/// mu + sqrt(sigma) * noise for t > 1, mu at t = 1.
template <typename T>
Tensor<T> reverse_step_from(const DenoiserOutput<T>& d, int t, const Tensor<T>& noise) {
  Tensor<T> x = d.mu;
  if (t > 1) {
    if (noise.shape() != x.shape()) throw ShapeError("reverse_step: noise shape mismatch");
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += std::sqrt(d.sigma[i]) * noise[i];
  }
  return x;
}

template <StepDenoiser Net>
Tensor<typename Net::scalar_type> reverse_step(const DiffusionModel<Net>& model,
                                               const Tensor<typename Net::scalar_type>& x_t, int t,
                                               const Tensor<typename Net::scalar_type>& noise) {
  return reverse_step_from(denoise(model, x_t, t), t, noise);
}

/// x_t / sqrt(alpha_bar_t) - sqrt(1 - alpha_bar_t) / sqrt(alpha_bar_t) * eps, on the tape.
template <typename T>
Var<T> denoised_from_eps(const NoiseSchedule& s, Var<T> x_t, Var<T> eps, int t) {
  check_step(s, t);
  const double ab = s.alpha_bar(t);
  if (!(ab > 1e-12)) throw NumericalError("denoised_estimate", "alpha_bar is numerically zero");
  return ops::combine(x_t, eps, -std::sqrt(1 - ab), 1 / std::sqrt(ab));
}

/// Noise prediction, variance logits and denoised estimate recorded on one tape.
template <typename T>
struct TapeDenoise {
  Var<T> eps, raw, x0;
};

template <StepDenoiser Net>
TapeDenoise<typename Net::scalar_type> denoise_on_tape(const DiffusionModel<Net>& model,
                                                       Binding<typename Net::scalar_type>& b,
                                                       Var<typename Net::scalar_type> x_t, int t) {
  check_step(model.schedule(), t);
  auto [eps, raw] = split_heads(model.net().forward(b, x_t, std::vector<int>(x_t.dim(0), t)));
  return {eps, raw, denoised_from_eps(model.schedule(), x_t, eps, t)};
}

template <StepDenoiser Net>
Tensor<typename Net::scalar_type> denoised_estimate(const DiffusionModel<Net>& model,
                                                    const Tensor<typename Net::scalar_type>& x_t, int t) {
  using T = typename Net::scalar_type;
  Tape<T> tape;
  Binding<T> bind(tape, model.net().parameters(), false);
  return denoise_on_tape(model, bind, tape.constant(x_t), t).x0.value();
}

/// x_t -> denoised estimate at a fixed step, as a parametric map.
template <StepDenoiser Net>
class DenoisedMap {
 public:
  using scalar_type = typename Net::scalar_type;
  DenoisedMap(const DiffusionModel<Net>& model, int t) : model_(model), t_(t) {}
  const Parameters<scalar_type>& parameters() const { return model_.net().parameters(); }
  Shape sample_shape() const { return model_.sample_shape(); }
  Var<scalar_type> forward(Binding<scalar_type>& b, Var<scalar_type> x) const {
    return denoise_on_tape(model_, b, x, t_).x0;
  }

 private:
  const DiffusionModel<Net>& model_;
  int t_;
};

/// Map [0, 1] images to the [-1, 1] diffusion range and back.
template <typename T>
Tensor<T> to_model_range(Tensor<T> x) {
  for (auto& v : x.data()) v = 2 * v - 1;
  return x;
}

template <typename T>
Tensor<T> to_image_range(Tensor<T> x, bool clip = true) {
  for (auto& v : x.data()) {
    v = (v + 1) / 2;
    if (clip) v = std::clamp(v, T(0), T(1));
  }
  return x;
}

inline constexpr std::size_t kSampleChunk = 16;

/// Ancestral sampling from N(0, I). Image i draws from its own stream, so the
/// result does not depend on `jobs`. Returns (n, C, H, W) in [0, 1].
template <StepDenoiser Net>
Tensor<typename Net::scalar_type> sample_unconditional(const DiffusionModel<Net>& model, std::size_t n,
                                                       std::uint64_t seed, unsigned jobs = 1) {
  using T = typename Net::scalar_type;
  Shape shape = model.sample_shape();
  shape.insert(shape.begin(), n);
  if (n == 0) return Tensor<T>();
  const std::size_t m = shape_size(model.sample_shape());
  Tensor<T> result(shape);
  const std::size_t chunks = (n + kSampleChunk - 1) / kSampleChunk;
  diffcore::parallel_chunks(chunks, jobs, [&](std::size_t c) {
    const std::size_t lo = c * kSampleChunk, hi = std::min(n, lo + kSampleChunk);
    std::vector<Rng> rngs;
    for (std::size_t i = lo; i < hi; ++i) rngs.emplace_back(derive_seed(seed, {i}));
    Shape cs = shape;
    cs[0] = hi - lo;
    auto draw = [&] {
      Tensor<T> z(cs);
      for (std::size_t i = 0; i < hi - lo; ++i)
        for (std::size_t j = 0; j < m; ++j) z[i * m + j] = static_cast<T>(rngs[i].normal());
      return z;
    };
    Tensor<T> x = draw();
    for (int t = model.schedule().steps(); t >= 1; --t) {
      auto d = denoise(model, x, t);
      x = t > 1 ? reverse_step_from(d, t, draw()) : d.mu;
    }
    x = to_image_range(std::move(x));
    std::copy(x.ptr(), x.ptr() + x.size(), result.ptr() + lo * m);
  });
  return result;
}

}  // namespace cflab::diffusion

#endif  // CFLAB_DIFFUSION_MODEL_HPP
