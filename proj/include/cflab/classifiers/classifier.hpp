#ifndef CFLAB_CLASSIFIERS_CLASSIFIER_HPP
#define CFLAB_CLASSIFIERS_CLASSIFIER_HPP

#include "cflab/diffcore/map.hpp"
#include "cflab/diffcore/parallel.hpp"

namespace cflab::classifiers {

using diffcore::Binding;
using diffcore::Parameters;
using diffcore::Shape;
using diffcore::Tape;
using diffcore::Tensor;
using diffcore::Var;
namespace layers = diffcore::layers;
namespace ops = diffcore::ops;

enum class Mode { plain, robust };

inline std::string to_string(Mode m) { return m == Mode::plain ? "plain" : "robust"; }

inline Mode parse_mode(const std::string& s) {
  if (s == "plain") return Mode::plain;
  if (s == "robust") return Mode::robust;
  throw InvalidArgument("unknown classifier mode: " + s);
}

struct ClassifierConfig {
  std::size_t classes = 2;
  std::vector<std::size_t> widths{16, 32, 64, 64};
  std::size_t image_size = 32;
  std::uint64_t seed = 0;
};

/// Inputs in [0, 1] are centred to [-1, 1], then conv3x3 -> group norm -> relu
/// -> 2x2 average pool per block, then global average pooling and a linear head
/// producing logits.
template <typename T>
class ConvClassifier {
 public:
  using scalar_type = T;

  explicit ConvClassifier(ClassifierConfig cfg, Mode mode = Mode::plain) : cfg_(std::move(cfg)), mode_(mode) {
    if (cfg_.classes < 2) throw InvalidArgument("classifier needs at least two classes");
    if (cfg_.widths.empty()) throw InvalidArgument("classifier needs at least one block");
    Rng rng(cfg_.seed);
    std::size_t in = 1;
    for (std::size_t i = 0; i < cfg_.widths.size(); ++i) {
      const std::string name = "block" + std::to_string(i);
      blocks_.push_back({layers::Conv2d<T>::create(params_, name + ".conv", in, cfg_.widths[i], 3, 1, rng),
                         layers::GroupNorm<T>::create(params_, name + ".norm", cfg_.widths[i])});
      in = cfg_.widths[i];
    }
    head_ = layers::Linear<T>::create(params_, "head", in, cfg_.classes, rng);
  }

  const ClassifierConfig& config() const noexcept { return cfg_; }
  Mode mode() const noexcept { return mode_; }
  std::size_t classes() const noexcept { return cfg_.classes; }
  const Parameters<T>& parameters() const noexcept { return params_; }
  Parameters<T>& parameters() noexcept { return params_; }
  Shape sample_shape() const { return {1, cfg_.image_size, cfg_.image_size}; }

  Var<T> forward(Binding<T>& b, Var<T> x) const {
    x = ops::affine(x, T(2), T(-1));
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      x = ops::relu(blocks_[i].norm(b, blocks_[i].conv(b, x)));
      if (x.dim(2) % 2 == 0 && x.dim(2) > 1) x = ops::avg_pool2(x);
    }
    return head_(b, ops::global_avg_pool(x));
  }

 private:
  struct Block {
    layers::Conv2d<T> conv;
    layers::GroupNorm<T> norm;
  };
  ClassifierConfig cfg_;
  Mode mode_;
  Parameters<T> params_;
  std::vector<Block> blocks_;
  layers::Linear<T> head_;
};

/// A parametric map emitting (N, K) logits.
template <typename M>
concept Classifier = diffcore::ParametricMap<M> && requires(const M& m) {
  { m.classes() } -> std::convertible_to<std::size_t>;
};

inline constexpr std::size_t kEvalChunk = 64;

/// Softmax probabilities (N, K), evaluated in chunks on up to `jobs` threads.
template <Classifier M>
Tensor<typename M::scalar_type> predict_proba(const M& model, const Tensor<typename M::scalar_type>& x,
                                              unsigned jobs = 1) {
  using T = typename M::scalar_type;
  diffcore::check_input(model, x);
  const std::size_t n = x.dim(0), k = model.classes();
  Tensor<T> out({n, k});
  diffcore::parallel_chunks((n + kEvalChunk - 1) / kEvalChunk, jobs, [&](std::size_t c) {
    const std::size_t lo = c * kEvalChunk, hi = std::min(n, lo + kEvalChunk);
    Tape<T> tape;
    Binding<T> b(tape, model.parameters(), false);
    const auto p = ops::softmax(model.forward(b, tape.constant(x.rows(lo, hi)))).value();
    std::copy(p.ptr(), p.ptr() + p.size(), out.ptr() + lo * k);
  });
  return out;
}

template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& probs) {
  const std::size_t n = probs.dim(0), k = probs.dim(1);
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = probs.ptr() + i * k;
    out[i] = static_cast<int>(std::max_element(row, row + k) - row);
  }
  return out;
}

template <Classifier M>
std::vector<int> predict(const M& model, const Tensor<typename M::scalar_type>& x, unsigned jobs = 1) {
  return argmax_rows(predict_proba(model, x, jobs));
}

}  // namespace cflab::classifiers

#endif  // CFLAB_CLASSIFIERS_CLASSIFIER_HPP
