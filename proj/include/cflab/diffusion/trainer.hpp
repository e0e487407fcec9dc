#ifndef CFLAB_DIFFUSION_TRAINER_HPP
#define CFLAB_DIFFUSION_TRAINER_HPP

#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>

#include "cflab/diffcore/checkpoint.hpp"
#include "cflab/diffcore/optim.hpp"
#include "cflab/diffusion/model.hpp"

namespace cflab::diffusion {

using diffcore::NamedTensors;

template <typename T>
struct HybridLoss {
  Var<T> simple;  // batch mean of ||eps - eps_hat||^2
  Var<T> vlb;     // batch mean of the per-image variational term, in nats
};

/// Simple noise-regression loss plus the variational term that trains the
/// variance head. The mean inside the variational term uses a stopped copy of
/// the noise prediction, so only the variance head receives its gradient.
/// x0 is in the model range; steps and eps are per sample.
template <StepDenoiser Net>
HybridLoss<typename Net::scalar_type> hybrid_loss(const DiffusionModel<Net>& model,
                                                  Binding<typename Net::scalar_type>& b,
                                                  const Tensor<typename Net::scalar_type>& x0,
                                                  const std::vector<int>& steps,
                                                  const Tensor<typename Net::scalar_type>& eps) {
  using T = typename Net::scalar_type;
  const auto& s = model.schedule();
  auto& tape = b.tape();
  const std::size_t n = x0.dim(0), m = x0.size() / n;
  const Tensor<T> x_t = forward_diffuse(s, x0, steps, eps);

  auto [eps_hat, raw] = split_heads(model.net().forward(b, tape.constant(x_t), steps));
  auto simple = ops::scale(ops::sum(ops::square(ops::sub(eps_hat, tape.constant(eps)))), T(1) / T(n));

  // log Sigma = log beta~ + v (log beta - log beta~), and the variational term
  // per pixel is 0.5 (log Sigma + A exp(-log Sigma)) + B with A, B fixed.
  const Tensor<T>& eh = eps_hat.value();
  Tensor<T> lo(x0.shape()), span(x0.shape()), a(x0.shape()), c(x0.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const int t = steps[i];
    const double lb = std::log(s.beta(t)), lp = s.log_posterior_variance_clipped(t);
    const double k = s.beta(t) / std::sqrt(1 - s.alpha_bar(t)), d = 1 / std::sqrt(1 - s.beta(t));
    const auto [c0, ct] = s.posterior_mean_coefs(t);
    for (std::size_t j = 0; j < m; ++j) {
      const std::size_t q = i * m + j;
      const double mu = d * (x_t[q] - k * eh[q]);
      lo[q] = static_cast<T>(lp);
      span[q] = static_cast<T>(lb - lp);
      if (t > 1) {
        const double diff = c0 * x0[q] + ct * x_t[q] - mu;
        a[q] = static_cast<T>(std::exp(lp) + diff * diff);
        c[q] = static_cast<T>(-0.5 - 0.5 * lp);
      } else {
        const double diff = x0[q] - mu;
        a[q] = static_cast<T>(diff * diff);
        c[q] = static_cast<T>(0.5 * std::log(2 * std::numbers::pi));
      }
    }
  }
  auto log_sigma = ops::add(tape.constant(lo), ops::mul(ops::sigmoid(raw), tape.constant(span)));
  auto per_pixel = ops::add(ops::mul(tape.constant(a), ops::exp(ops::scale(log_sigma, T(-1)))), log_sigma);
  auto vlb = ops::add(ops::scale(ops::sum(per_pixel), T(0.5) / T(n)),
                      ops::scale(ops::sum(tape.constant(c)), T(1) / T(n)));
  return {simple, vlb};
}

struct TrainConfig {
  std::size_t iterations = 4000;
  std::size_t batch = 32;
  double lr = 2e-3;
  double lambda_vlb = 1e-3;
  double ema_decay = 0.995;
  std::size_t warmup = 200;
  std::size_t checkpoint_every = 1000;
  std::size_t log_every = 10;
  std::uint64_t seed = 0;
  std::string checkpoint_path;  // empty disables checkpoints
  std::string loss_csv_path;    // empty disables the loss curve file
  bool resume = false;
  std::function<void(std::size_t, double, double)> progress;
};

struct LossPoint {
  std::size_t iteration;
  double simple, vlb;
};

struct TrainResult {
  std::vector<LossPoint> curve;
  std::size_t iterations_done = 0;
};

/// Checkpoint entries: model weights under their names, EMA weights under
/// "ema.<name>", optimizer state, and the iteration counter.
template <typename T>
NamedTensors<T> training_state(const Parameters<T>& params, const Parameters<T>& ema,
                               const diffcore::Adam<T>& adam, std::size_t iteration) {
  NamedTensors<T> out = params.named();
  for (auto& [name, t] : ema.named()) out.emplace_back("ema." + name, std::move(t));
  for (auto& e : adam.state(params)) out.push_back(std::move(e));
  out.emplace_back("meta/iteration", Tensor<T>::scalar(static_cast<T>(iteration)));
  return out;
}

/// Select the "ema.<name>" entries of a training checkpoint, renamed to <name>.
inline NamedTensors<float> ema_weights(const NamedTensors<float>& entries) {
  NamedTensors<float> out;
  for (const auto& [name, t] : entries)
    if (name.rfind("ema.", 0) == 0) out.emplace_back(name.substr(4), t);
  return out;
}

/// Adam training on images given in [0, 1]. After training the network holds
/// the EMA weights. A non-finite loss aborts with NumericalError after saving
/// the last good state to `checkpoint_path` + ".last_good".
template <StepDenoiser Net>
TrainResult train_diffusion(DiffusionModel<Net>& model, const Tensor<typename Net::scalar_type>& images,
                            const TrainConfig& cfg) {
  using T = typename Net::scalar_type;
  if (images.empty() || images.dim(0) == 0) throw InvalidArgument("train_diffusion: empty dataset");
  if (cfg.batch == 0) throw InvalidArgument("train_diffusion: batch must be positive");
  const Tensor<T> data = to_model_range(images);
  const std::size_t n = data.dim(0), m = data.size() / n;
  auto& params = model.net().parameters();
  diffcore::Adam<T> adam;
  diffcore::Ema<T> ema(params, cfg.ema_decay);
  std::size_t start = 0;

  if (cfg.resume && !cfg.checkpoint_path.empty() && std::filesystem::exists(cfg.checkpoint_path)) {
    const auto entries = diffcore::load_checkpoint(cfg.checkpoint_path);
    params.assign(entries);
    ema.shadow().assign(ema_weights(entries));
    adam.load_state(params, entries);
    start = static_cast<std::size_t>(diffcore::checkpoint_scalar(entries, "meta/iteration").value_or(0));
  }

  TrainResult result;
  std::ofstream csv;
  if (!cfg.loss_csv_path.empty()) {
    csv.open(cfg.loss_csv_path, start > 0 ? std::ios::app : std::ios::trunc);
    if (!csv) throw MissingArtifact("cannot write loss curve: " + cfg.loss_csv_path);
    if (start == 0) csv << "iteration,loss_simple,loss_vlb\n";
  }
  auto save = [&](const std::string& path, std::size_t it) {
    if (!path.empty()) diffcore::save_checkpoint(path, training_state(params, ema.shadow(), adam, it));
  };

  Shape bshape = data.shape();
  bshape[0] = cfg.batch;
  for (std::size_t it = start; it < cfg.iterations; ++it) {
    Rng rng(derive_seed(cfg.seed, {it}));
    Tensor<T> x0(bshape);
    std::vector<int> steps(cfg.batch);
    for (std::size_t i = 0; i < cfg.batch; ++i) {
      const auto k = static_cast<std::size_t>(rng.integer(0, static_cast<int>(n) - 1));
      std::copy(data.ptr() + k * m, data.ptr() + (k + 1) * m, x0.ptr() + i * m);
      steps[i] = rng.integer(1, model.schedule().steps());
    }
    const Tensor<T> eps = rng.normal_tensor<T>(bshape);

    double ls = 0, lv = 0;
    std::vector<Tensor<T>> grads;
    try {
      Tape<T> tape;
      Binding<T> bind(tape, params, true);
      auto loss = hybrid_loss(model, bind, x0, steps, eps);
      ls = loss.simple.value()[0];
      lv = loss.vlb.value()[0];
      tape.backward(ops::add(loss.simple, ops::scale(loss.vlb, static_cast<T>(cfg.lambda_vlb))));
      grads = bind.gradients();
    } catch (const NumericalError&) {
      ls = std::numeric_limits<double>::quiet_NaN();
    }
    if (!std::isfinite(ls) || !std::isfinite(lv)) {
      save(cfg.checkpoint_path.empty() ? "" : cfg.checkpoint_path + ".last_good", it);
      throw NumericalError("train_diffusion", "loss diverged at iteration " + std::to_string(it));
    }
    const double warm = cfg.warmup ? std::min(1.0, (it + 1.0) / cfg.warmup) : 1.0;
    adam.step(params, grads, cfg.lr * warm);
    ema.update(params);

    if ((it + 1) % cfg.log_every == 0 || it + 1 == cfg.iterations) {
      result.curve.push_back({it + 1, ls, lv});
      if (csv) csv << it + 1 << ',' << ls << ',' << lv << '\n' << std::flush;
      if (cfg.progress) cfg.progress(it + 1, ls, lv);
    }
    if (cfg.checkpoint_every && (it + 1) % cfg.checkpoint_every == 0) save(cfg.checkpoint_path, it + 1);
  }
  result.iterations_done = cfg.iterations;
  save(cfg.checkpoint_path, cfg.iterations);
  params.assign(ema.shadow().named());
  return result;
}

}  // namespace cflab::diffusion

#endif  // CFLAB_DIFFUSION_TRAINER_HPP
