#ifndef CFLAB_CLASSIFIERS_TRAIN_HPP
#define CFLAB_CLASSIFIERS_TRAIN_HPP

#include <filesystem>

#include "cflab/classifiers/attack.hpp"
#include "cflab/classifiers/metrics.hpp"
#include "cflab/diffcore/checkpoint.hpp"
#include "cflab/diffcore/optim.hpp"

namespace cflab::classifiers {

struct TradesConfig {
  double beta = 6.0;
  AttackConfig attack{};

  void validate() const {
    if (!(beta >= 0)) throw InvalidArgument("TRADES beta must be non-negative");
    attack.validate();
  }
};

/// Batch mean of CE(clean, y) + beta * KL(p(.|adv) || p(.|clean)), both
/// branches differentiable.
template <typename T>
Var<T> trades_objective(Var<T> logits_clean, Var<T> logits_adv, const std::vector<int>& labels, double beta) {
  const T inv_n = T(1) / static_cast<T>(labels.size());
  auto ce = ops::scale(ops::sum(ops::pick(ops::log_softmax(logits_clean), labels)), -inv_n);
  if (beta == 0) return ce;
  auto lc = ops::log_softmax(logits_clean);
  auto la = ops::log_softmax(logits_adv);
  auto kl = ops::sum(ops::mul(ops::exp(la), ops::sub(la, lc)));
  return ops::add(ce, ops::scale(kl, static_cast<T>(beta) * inv_n));
}

/// TRADES loss on the batch (x, labels). With beta = 0 no attack is run and
/// the result is the plain cross-entropy.
template <Classifier M>
Var<typename M::scalar_type> trades_loss(const M& model, Binding<typename M::scalar_type>& b,
                                         const Tensor<typename M::scalar_type>& x, const std::vector<int>& labels,
                                         const TradesConfig& cfg) {
  using T = typename M::scalar_type;
  cfg.validate();
  auto& tape = b.tape();
  auto logits = model.forward(b, tape.constant(x));
  if (cfg.beta == 0) return trades_objective(logits, logits, labels, 0.0);
  const Tensor<T> p_clean = ops::softmax(tape.constant(logits.value())).value();
  const auto x_adv = pgd_attack(model, x, kl_objective(p_clean), cfg.attack);
  auto logits_adv = model.forward(b, tape.constant(x_adv));
  return trades_objective(logits, logits_adv, labels, cfg.beta);
}

struct ClassifierTrainConfig {
  std::size_t epochs = 20;
  std::size_t batch = 32;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  TradesConfig trades{};  // used in robust mode
  std::uint64_t seed = 0;
  unsigned jobs = 1;
  std::string checkpoint_path;  // empty disables
  bool resume = false;          // continue from checkpoint_path when it exists
  std::function<void(std::size_t, double, const Metrics&)> progress;
};

struct EpochReport {
  std::size_t epoch;
  double train_loss;
  Metrics validation;
};

/// Weights, momentum buffers ("sgd.v.<name>") and the finished epoch count.
template <typename T>
diffcore::NamedTensors<T> classifier_state(const Parameters<T>& params, const diffcore::SgdMomentum<T>& sgd, std::size_t epoch) {
  diffcore::NamedTensors<T> out = params.named();
  for (std::size_t i = 0; i < sgd.state().size(); ++i) out.emplace_back("sgd.v." + params.name(i), sgd.state()[i]);
  out.emplace_back("meta/epoch", Tensor<T>::scalar(static_cast<T>(epoch)));
  return out;
}

/// SGD with momentum and a cosine schedule. Plain mode minimizes
/// cross-entropy, robust mode the TRADES loss. Batches are shuffled per epoch
/// from a stream derived from the seed; attack randomness uses its own stream.
template <typename T>
std::vector<EpochReport> train_classifier(ConvClassifier<T>& model, const Tensor<T>& images,
                                          const std::vector<int>& labels, const Tensor<T>& val_images,
                                          const std::vector<int>& val_labels, const ClassifierTrainConfig& cfg) {
  if (images.empty() || labels.empty()) throw InvalidArgument("train_classifier: empty training set");
  if (images.dim(0) != labels.size()) throw InvalidArgument("train_classifier: label count mismatch");
  if (cfg.batch == 0) throw InvalidArgument("train_classifier: batch must be positive");
  TradesConfig trades = cfg.trades;
  if (model.mode() == Mode::plain) trades.beta = 0;
  trades.validate();

  const std::size_t n = images.dim(0), m = images.size() / n;
  const std::size_t per_epoch = (n + cfg.batch - 1) / cfg.batch, total = per_epoch * cfg.epochs;
  diffcore::SgdMomentum<T> sgd(cfg.momentum, cfg.weight_decay);
  std::vector<EpochReport> history;
  std::size_t first = 0;
  if (cfg.resume && !cfg.checkpoint_path.empty() && std::filesystem::exists(cfg.checkpoint_path)) {
    const auto entries = diffcore::load_checkpoint(cfg.checkpoint_path);
    model.parameters().assign(entries);
    first = static_cast<std::size_t>(diffcore::checkpoint_scalar(entries, "meta/epoch").value_or(0));
    std::vector<Tensor<T>> velocity;
    for (std::size_t i = 0; i < model.parameters().size(); ++i)
      for (const auto& [name, t] : entries)
        if (name == "sgd.v." + model.parameters().name(i)) velocity.push_back(t.template cast<T>());
    if (velocity.size() == model.parameters().size()) sgd.set_state(std::move(velocity));
  }
  std::size_t step = first * per_epoch;
  for (std::size_t epoch = first; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle(derive_seed(cfg.seed, {0, epoch}));
    std::shuffle(order.begin(), order.end(), shuffle.engine());
    double loss_sum = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch, ++step) {
      const std::size_t bs = std::min(cfg.batch, n - start);
      Shape shape = images.shape();
      shape[0] = bs;
      Tensor<T> x(shape);
      std::vector<int> y(bs);
      for (std::size_t i = 0; i < bs; ++i) {
        std::copy_n(images.ptr() + order[start + i] * m, m, x.ptr() + i * m);
        y[i] = labels[order[start + i]];
      }
      trades.attack.seed = derive_seed(cfg.seed, {1, step});
      Tape<T> tape;
      Binding<T> b(tape, model.parameters(), true);
      double value = std::numeric_limits<double>::quiet_NaN();
      try {
        auto loss = trades_loss(model, b, x, y, trades);
        value = loss.value()[0];
        tape.backward(loss);
      } catch (const NumericalError& e) {
        throw NumericalError("train_classifier", "epoch " + std::to_string(epoch) + " step " +
                                                     std::to_string(step) + ": " + e.what());
      }
      if (!std::isfinite(value))
        throw NumericalError("train_classifier", "non-finite loss at epoch " + std::to_string(epoch));
      sgd.step(model.parameters(), b.gradients(), diffcore::cosine_rate(cfg.lr, step, total));
      loss_sum += value * bs;
    }
    EpochReport rep{epoch + 1, loss_sum / n, {}};
    if (!val_images.empty()) {
      const auto pred = predict(model, val_images, cfg.jobs);
      const auto cm = confusion_matrix(pred, val_labels, static_cast<int>(model.classes()));
      rep.validation.accuracy = accuracy(cm);
      rep.validation.quadratic_kappa = quadratic_kappa(cm);
      try {
        rep.validation.balanced_accuracy = balanced_accuracy(cm);
      } catch (const InvalidArgument&) {
        rep.validation.balanced_accuracy = std::numeric_limits<double>::quiet_NaN();
      }
    }
    history.push_back(rep);
    if (!cfg.checkpoint_path.empty())
      diffcore::save_checkpoint(cfg.checkpoint_path, classifier_state(model.parameters(), sgd, epoch + 1));
    if (cfg.progress) cfg.progress(rep.epoch, rep.train_loss, rep.validation);
  }
  return history;
}

/// Accuracy on `x` after an l2 PGD attack on cross-entropy.
template <Classifier M>
double robust_accuracy(const M& model, const Tensor<typename M::scalar_type>& x, const std::vector<int>& labels,
                       const AttackConfig& cfg, unsigned jobs = 1) {
  using T = typename M::scalar_type;
  const std::size_t n = x.dim(0);
  std::vector<int> correct(n, 0);
  diffcore::parallel_chunks((n + kEvalChunk - 1) / kEvalChunk, jobs, [&](std::size_t c) {
    const std::size_t lo = c * kEvalChunk, hi = std::min(n, lo + kEvalChunk);
    std::vector<int> y(labels.begin() + lo, labels.begin() + hi);
    auto a = cfg;
    a.seed = derive_seed(cfg.seed, {c});
    const auto adv = pgd_attack(model, x.rows(lo, hi), cross_entropy_objective<T>(y), a);
    const auto pred = predict(model, adv);
    for (std::size_t i = 0; i < pred.size(); ++i) correct[lo + i] = pred[i] == y[i];
  });
  return std::accumulate(correct.begin(), correct.end(), 0.0) / static_cast<double>(n);
}

}  // namespace cflab::classifiers

#endif  // CFLAB_CLASSIFIERS_TRAIN_HPP
