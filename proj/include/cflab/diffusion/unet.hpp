#ifndef CFLAB_DIFFUSION_UNET_HPP
#define CFLAB_DIFFUSION_UNET_HPP

#include <algorithm>
#include <optional>

#include "cflab/diffcore/parameters.hpp"

namespace cflab::diffusion {

using diffcore::Binding;
using diffcore::Parameters;
using diffcore::Shape;
using diffcore::shape_size;
using diffcore::Tape;
using diffcore::Var;
namespace layers = diffcore::layers;
namespace ops = diffcore::ops;

struct UNetConfig {
  std::size_t base_channels = 16;  // level widths: base, 2*base, 4*base
  std::size_t image_channels = 1;
  std::size_t image_size = 32;
  std::uint64_t seed = 0;
};

/// Group norm with at least two channels per group, so per-channel offsets
/// added before it are not cancelled outright.
template <typename T>
layers::GroupNorm<T> unet_norm(Parameters<T>& p, const std::string& name, std::size_t channels) {
  return layers::GroupNorm<T>::create(p, name, channels, std::clamp<std::size_t>(channels / 2, 1, 8));
}

/// Residual block with the time embedding added after the first convolution.
template <typename T>
struct ResBlock {
  layers::GroupNorm<T> norm1, norm2;
  layers::Conv2d<T> conv1, conv2;
  layers::Linear<T> time;
  std::optional<layers::Conv2d<T>> skip;

  static ResBlock create(Parameters<T>& p, const std::string& name, std::size_t in, std::size_t out,
                         std::size_t emb, Rng& rng) {
    ResBlock r;
    r.norm1 = unet_norm(p, name + ".norm1", in);
    r.conv1 = layers::Conv2d<T>::create(p, name + ".conv1", in, out, 3, 1, rng);
    r.time = layers::Linear<T>::create(p, name + ".time", emb, out, rng);
    r.norm2 = unet_norm(p, name + ".norm2", out);
    r.conv2 = layers::Conv2d<T>::create(p, name + ".conv2", out, out, 3, 1, rng);
    if (in != out) r.skip = layers::Conv2d<T>::create(p, name + ".skip", in, out, 1, 1, rng);
    return r;
  }

  Var<T> operator()(Binding<T>& b, Var<T> x, Var<T> emb) const {
    auto h = conv1(b, ops::silu(norm1(b, x)));
    h = ops::add_channel(h, time(b, emb));
    h = conv2(b, ops::silu(norm2(b, h)));
    return ops::add(h, skip ? (*skip)(b, x) : x);
  }
};

/// Three-level U-Net emitting two maps per pixel: predicted noise and the
/// raw variance-interpolation logit.
template <typename T>
class UNet {
 public:
  using scalar_type = T;

  explicit UNet(UNetConfig cfg) : cfg_(cfg) {
    Rng rng(cfg.seed);
    const std::size_t c = cfg.base_channels, emb = 4 * c;
    temb1_ = layers::Linear<T>::create(params_, "temb.0", c, emb, rng);
    temb2_ = layers::Linear<T>::create(params_, "temb.1", emb, emb, rng);
    in_ = layers::Conv2d<T>::create(params_, "in", cfg.image_channels, c, 3, 1, rng);
    enc1_ = ResBlock<T>::create(params_, "enc1", c, c, emb, rng);
    down1_ = layers::Conv2d<T>::create(params_, "down1", c, c, 3, 2, rng);
    enc2_ = ResBlock<T>::create(params_, "enc2", c, 2 * c, emb, rng);
    down2_ = layers::Conv2d<T>::create(params_, "down2", 2 * c, 2 * c, 3, 2, rng);
    enc3_ = ResBlock<T>::create(params_, "enc3", 2 * c, 4 * c, emb, rng);
    mid_ = ResBlock<T>::create(params_, "mid", 4 * c, 4 * c, emb, rng);
    dec2_ = ResBlock<T>::create(params_, "dec2", 6 * c, 2 * c, emb, rng);
    dec1_ = ResBlock<T>::create(params_, "dec1", 3 * c, c, emb, rng);
    out_norm_ = unet_norm(params_, "out.norm", c);
    out_ = layers::Conv2d<T>::create(params_, "out", c, 2 * cfg.image_channels, 3, 1, rng);
  }

  const UNetConfig& config() const noexcept { return cfg_; }
  const Parameters<T>& parameters() const noexcept { return params_; }
  Parameters<T>& parameters() noexcept { return params_; }
  Shape sample_shape() const { return {cfg_.image_channels, cfg_.image_size, cfg_.image_size}; }

  /// x (N, C, H, W) at steps (N) -> (N, 2C, H, W): [eps | v logit].
  Var<T> forward(Binding<T>& b, Var<T> x, const std::vector<int>& steps) const {
    auto& tape = b.tape();
    auto sin = tape.constant(ops::sinusoidal_embedding<T>(steps, cfg_.base_channels));
    auto emb = ops::silu(temb2_(b, ops::silu(temb1_(b, sin))));

    auto h = in_(b, x);
    auto s1 = enc1_(b, h, emb);
    auto s2 = enc2_(b, down1_(b, s1), emb);
    auto m = mid_(b, enc3_(b, down2_(b, s2), emb), emb);
    auto u2 = dec2_(b, ops::concat_channels(ops::upsample_nearest2(m), s2), emb);
    auto u1 = dec1_(b, ops::concat_channels(ops::upsample_nearest2(u2), s1), emb);
    return out_(b, ops::silu(out_norm_(b, u1)));
  }

 private:
  UNetConfig cfg_;
  Parameters<T> params_;
  layers::Linear<T> temb1_, temb2_;
  layers::Conv2d<T> in_, down1_, down2_, out_;
  ResBlock<T> enc1_, enc2_, enc3_, mid_, dec2_, dec1_;
  layers::GroupNorm<T> out_norm_;
};

/// The denoiser at fixed steps, viewed as a single-input parametric map.
template <typename T>
class DenoiserAt {
 public:
  using scalar_type = T;
  DenoiserAt(const UNet<T>& net, std::vector<int> steps) : net_(net), steps_(std::move(steps)) {}
  const Parameters<T>& parameters() const { return net_.parameters(); }
  Shape sample_shape() const { return net_.sample_shape(); }
  Var<T> forward(Binding<T>& b, Var<T> x) const { return net_.forward(b, x, steps_); }

 private:
  const UNet<T>& net_;
  std::vector<int> steps_;
};

}  // namespace cflab::diffusion

#endif  // CFLAB_DIFFUSION_UNET_HPP
