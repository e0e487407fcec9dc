#ifndef CFLAB_DIFFCORE_OPTIM_HPP
#define CFLAB_DIFFCORE_OPTIM_HPP

#include <cmath>
#include <numbers>
#include <vector>

#include "cflab/diffcore/parameters.hpp"

namespace cflab::diffcore {

/// lr * (1 + cos(pi * step / total)) / 2
inline double cosine_rate(double base, std::size_t step, std::size_t total) {
  if (total == 0) return base;
  const double frac = std::min(1.0, static_cast<double>(step) / static_cast<double>(total));
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * frac));
}

template <typename T>
class SgdMomentum {
 public:
  explicit SgdMomentum(double momentum = 0.9, double weight_decay = 0.0)
      : momentum_(momentum), weight_decay_(weight_decay) {}

  void step(Parameters<T>& params, const std::vector<Tensor<T>>& grads, double lr) {
    if (velocity_.empty())
      for (std::size_t i = 0; i < params.size(); ++i) velocity_.emplace_back(params[i].shape());
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i];
      auto& v = velocity_[i];
      const auto& g = grads.at(i);
      for (std::size_t j = 0; j < p.size(); ++j) {
        const T gj = g[j] + static_cast<T>(weight_decay_) * p[j];
        v[j] = static_cast<T>(momentum_) * v[j] + gj;
        p[j] -= static_cast<T>(lr) * v[j];
      }
    }
  }

  const std::vector<Tensor<T>>& state() const { return velocity_; }
  void set_state(std::vector<Tensor<T>> v) { velocity_ = std::move(v); }

 private:
  double momentum_, weight_decay_;
  std::vector<Tensor<T>> velocity_;
};

template <typename T>
class Adam {
 public:
  explicit Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(Parameters<T>& params, const std::vector<Tensor<T>>& grads, double lr) {
    if (m_.empty())
      for (std::size_t i = 0; i < params.size(); ++i) {
        m_.emplace_back(params[i].shape());
        v_.emplace_back(params[i].shape());
      }
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i];
      const auto& g = grads.at(i);
      for (std::size_t j = 0; j < p.size(); ++j) {
        m_[i][j] = static_cast<T>(beta1_ * m_[i][j] + (1 - beta1_) * g[j]);
        v_[i][j] = static_cast<T>(beta2_ * v_[i][j] + (1 - beta2_) * g[j] * g[j]);
        const double mh = m_[i][j] / c1, vh = v_[i][j] / c2;
        p[j] -= static_cast<T>(lr * mh / (std::sqrt(vh) + eps_));
      }
    }
  }

  std::size_t steps() const noexcept { return t_; }

  /// Moments flattened as named tensors for checkpointing.
  NamedTensors<T> state(const Parameters<T>& params) const {
    NamedTensors<T> out;
    for (std::size_t i = 0; i < m_.size(); ++i) {
      out.emplace_back("adam.m." + params.name(i), m_[i]);
      out.emplace_back("adam.v." + params.name(i), v_[i]);
    }
    out.emplace_back("adam.t", Tensor<T>::scalar(static_cast<T>(t_)));
    return out;
  }

  template <typename U>
  void load_state(const Parameters<T>& params, const NamedTensors<U>& entries) {
    auto lookup = [&](const std::string& n) -> const Tensor<U>* {
      for (const auto& [k, t] : entries)
        if (k == n) return &t;
      return nullptr;
    };
    const auto* t = lookup("adam.t");
    if (!t) return;
    m_.clear();
    v_.clear();
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto* m = lookup("adam.m." + params.name(i));
      const auto* v = lookup("adam.v." + params.name(i));
      if (!m || !v) throw MissingArtifact("optimizer state incomplete for " + params.name(i));
      m_.push_back(m->template cast<T>());
      v_.push_back(v->template cast<T>());
    }
    t_ = static_cast<std::size_t>((*t)[0]);
  }

 private:
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<Tensor<T>> m_, v_;
};

/// Exponential moving average of parameters.
template <typename T>
class Ema {
 public:
  Ema(const Parameters<T>& params, double decay) : shadow_(params), decay_(decay) {}

  void update(const Parameters<T>& params) {
    for (std::size_t i = 0; i < params.size(); ++i)
      for (std::size_t j = 0; j < params[i].size(); ++j)
        shadow_[i][j] = static_cast<T>(decay_ * shadow_[i][j] + (1 - decay_) * params[i][j]);
  }

  const Parameters<T>& shadow() const noexcept { return shadow_; }
  Parameters<T>& shadow() noexcept { return shadow_; }

 private:
  Parameters<T> shadow_;
  double decay_;
};

}  // namespace cflab::diffcore

#endif  // CFLAB_DIFFCORE_OPTIM_HPP
