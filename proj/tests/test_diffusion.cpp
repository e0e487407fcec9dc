#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cflab/diffusion/trainer.hpp"
#include "support_gradcheck.hpp"

using namespace cflab;
using namespace cflab::diffusion;
using cflab::testing::contract;
using cflab::testing::numeric_gradient;
using cflab::testing::relative_error;

namespace {

/// Emits hand-set noise and variance-logit maps plus a trainable offset,
/// ignoring the input. Batches must match the hand-set batch size.
template <typename T>
struct FixedNet {
  using scalar_type = T;
  Tensor<T> eps, raw;
  Parameters<T> params;

  FixedNet(Tensor<T> e, Tensor<T> r) : eps(std::move(e)), raw(std::move(r)) {
    params.add("offset", Tensor<T>({eps.dim(0), 2 * eps.dim(1), eps.dim(2), eps.dim(3)}));
  }

  const Parameters<T>& parameters() const { return params; }
  Parameters<T>& parameters() { return params; }
  Shape sample_shape() const { return {eps.dim(1), eps.dim(2), eps.dim(3)}; }
  Var<T> forward(Binding<T>& b, Var<T> x, const std::vector<int>&) const {
    if (x.dim(0) != eps.dim(0)) throw ShapeError("FixedNet: batch size is fixed");
    auto base = ops::concat_channels(b.tape().constant(eps), b.tape().constant(raw));
    return ops::add(base, b(0));
  }
};

template <typename T>
FixedNet<T> fixed(Tensor<T> eps) {
  Tensor<T> raw(eps.shape());
  return FixedNet<T>(std::move(eps), std::move(raw));
}

Tensor<float> scalar_image(float v) { return Tensor<float>({1, 1, 1, 1}, v); }

NoiseSchedule toy(std::vector<double> betas) { return NoiseSchedule(std::move(betas), false); }

UNetConfig tiny_unet(std::uint64_t seed) {
  UNetConfig c;
  c.base_channels = 4;
  c.image_size = 8;
  c.seed = seed;
  return c;
}

}  // namespace

TEST(Schedule, LinearDefaultsAndInvariants) {
  const auto s = NoiseSchedule::linear(200);
  EXPECT_EQ(s.steps(), 200);
  EXPECT_NEAR(s.beta(1), 5e-4, 1e-12);
  EXPECT_NEAR(s.beta(200), 0.1, 1e-12);
  EXPECT_LT(s.alpha_bar(200), 1e-3);
  for (int t = 1; t <= 200; ++t) {
    EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
    EXPECT_LE(s.posterior_variance(t), s.beta(t));
    EXPECT_TRUE(std::isfinite(s.log_posterior_variance_clipped(t)));
  }
  EXPECT_THROW(NoiseSchedule::linear(20, 1e-4, 2e-4), InvalidArgument);  // alpha_bar(T) too large
  EXPECT_THROW(NoiseSchedule({0.1, 1.5}, true), InvalidArgument);
  EXPECT_THROW(s.beta(0), InvalidArgument);
  EXPECT_THROW(s.beta(201), InvalidArgument);
}

TEST(ForwardDiffuse, Examples) {
  // degenerate schedule: alpha_bar = 1 returns x0
  const auto id = toy({0.0, 0.0});
  EXPECT_EQ(forward_diffuse(id, scalar_image(0.3f), 2, scalar_image(5.f))[0], 0.3f);
  const auto s = toy({0.1, 0.2});
  EXPECT_EQ(forward_diffuse(s, scalar_image(0.f), 1, scalar_image(0.f))[0], 0.f);
  EXPECT_NEAR(s.alpha_bar(2), 0.72, 1e-12);
  EXPECT_NEAR(forward_diffuse(s, scalar_image(1.f), 2, scalar_image(1.f))[0], 1.3777, 1e-4);
  EXPECT_THROW(forward_diffuse(s, scalar_image(1.f), 3, scalar_image(1.f)), InvalidArgument);
  EXPECT_THROW(forward_diffuse(s, scalar_image(1.f), 0, scalar_image(1.f)), InvalidArgument);
  EXPECT_THROW(forward_diffuse(s, scalar_image(1.f), 1, Tensor<float>({1, 1, 1, 2})), ShapeError);
}

TEST(ForwardDiffuse, IteratedKernelMatchesClosedForm) {
  const auto s = NoiseSchedule::linear(200);
  const double x0 = 0.7;
  for (int t : {1, 10, 50, 200}) {
    Rng ra(derive_seed(11, {static_cast<std::uint64_t>(t)})), rb(derive_seed(12, {static_cast<std::uint64_t>(t)}));
    const int trials = 10000;
    double ma = 0, va = 0, mb = 0, vb = 0;
    std::vector<double> a(trials), b(trials);
    for (int k = 0; k < trials; ++k) {
      double x = x0;
      for (int u = 1; u <= t; ++u) x = std::sqrt(1 - s.beta(u)) * x + std::sqrt(s.beta(u)) * ra.normal();
      a[k] = x;
      b[k] = forward_diffuse(s, Tensor<double>({1, 1, 1, 1}, x0), t, Tensor<double>({1, 1, 1, 1}, rb.normal()))[0];
      ma += a[k];
      mb += b[k];
    }
    ma /= trials;
    mb /= trials;
    for (int k = 0; k < trials; ++k) {
      va += (a[k] - ma) * (a[k] - ma);
      vb += (b[k] - mb) * (b[k] - mb);
    }
    va /= trials - 1;
    vb /= trials - 1;
    // both samplers against the exact law N(sqrt(alpha_bar) x0, 1 - alpha_bar)
    const double m_true = std::sqrt(s.alpha_bar(t)) * x0, v_true = 1 - s.alpha_bar(t);
    EXPECT_NEAR(ma, m_true, 0.02) << "t=" << t;
    EXPECT_NEAR(mb, m_true, 0.02) << "t=" << t;
    EXPECT_NEAR(vb / v_true, 1.0, 0.03) << "t=" << t;
    EXPECT_NEAR(va / v_true, 1.0, 0.03) << "t=" << t;
  }
}

TEST(ReverseStep, MeanMatchesScalarPosteriorFormula) {
  const auto s = NoiseSchedule::linear(200);
  for (int t : {1, 2, 37, 120, 200}) {
    const float xt = 0.42f, eh = -0.8f;
    DiffusionModel model(fixed(scalar_image(eh)), s);
    const auto out = denoise(model, scalar_image(xt), t);
    // independent evaluation: posterior mean with x0 replaced by its estimate
    const double ab = s.alpha_bar(t), abp = s.alpha_bar(t - 1), b = s.beta(t);
    const double x0 = (xt - std::sqrt(1 - ab) * eh) / std::sqrt(ab);
    const double mu_post = std::sqrt(abp) * b / (1 - ab) * x0 + std::sqrt(1 - b) * (1 - abp) / (1 - ab) * xt;
    const double mu_eps = (xt - b / std::sqrt(1 - ab) * eh) / std::sqrt(1 - b);
    EXPECT_NEAR(mu_post, mu_eps, 1e-9);
    EXPECT_NEAR(out.mu[0], mu_eps, 1e-5 * std::max(1.0, std::abs(mu_eps)));
    // v = 0.5 puts sigma at the geometric mean of the bounds
    const double lo = std::exp(s.log_posterior_variance_clipped(t)), hi = b;
    EXPECT_NEAR(out.v[0], 0.5f, 1e-7);
    EXPECT_NEAR(out.sigma[0], std::sqrt(lo * hi), 1e-6);
    EXPECT_GE(out.sigma[0], std::min(lo, hi) * (1 - 1e-6));
    EXPECT_LE(out.sigma[0], std::max(lo, hi) * (1 + 1e-6));
  }
}

TEST(ReverseStep, ZeroNoiseAndFinalStep) {
  const auto s = NoiseSchedule::linear(200);
  DiffusionModel model(fixed(scalar_image(0.3f)), s);
  const auto x = scalar_image(0.9f);
  EXPECT_EQ(reverse_step(model, x, 50, scalar_image(0.f))[0], denoise(model, x, 50).mu[0]);
  // noise is ignored at t = 1
  EXPECT_EQ(reverse_step(model, x, 1, scalar_image(3.f))[0], denoise(model, x, 1).mu[0]);
  const auto with_noise = reverse_step(model, x, 50, scalar_image(1.f))[0];
  const auto d = denoise(model, x, 50);
  EXPECT_NEAR(with_noise, d.mu[0] + std::sqrt(d.sigma[0]), 1e-6);
  EXPECT_EQ(reverse_step(model, x, 50, scalar_image(1.f))[0], with_noise);
  EXPECT_THROW(reverse_step(model, x, 0, scalar_image(0.f)), InvalidArgument);
}

TEST(ReverseStep, NonFiniteDenoiserOutputThrows) {
  const auto s = NoiseSchedule::linear(200);
  DiffusionModel model(fixed(scalar_image(std::numeric_limits<float>::infinity())), s);
  EXPECT_THROW(reverse_step(model, scalar_image(0.f), 5, scalar_image(0.f)), NumericalError);
}

TEST(DenoisedEstimate, Examples) {
  // single step with alpha_bar = 0.25
  const auto s = toy({0.75});
  DiffusionModel model(fixed(scalar_image(0.2f)), s);
  EXPECT_NEAR(denoised_estimate(model, scalar_image(0.5f), 1)[0], 0.6536, 1e-4);
  DiffusionModel zero(fixed(scalar_image(0.f)), s);
  EXPECT_FLOAT_EQ(denoised_estimate(zero, scalar_image(0.5f), 1)[0], 1.0f);
}

template <typename T>
double worst_inversion_error(int t, double* quantum = nullptr) {
  const auto s = NoiseSchedule::linear(200);
  Rng rng(5);
  const Shape shape{4, 1, 32, 32};
  Tensor<T> x0(shape);
  for (auto& v : x0.data()) v = static_cast<T>(rng.uniform(-1, 1));
  const auto eps = rng.normal_tensor<T>(shape);
  DiffusionModel model(fixed(eps), s);
  const auto x_t = forward_diffuse(s, x0, t, eps);
  const auto x0_dn = denoised_estimate(model, x_t, t);
  double err = 0, top = 0;
  for (std::size_t i = 0; i < x0.size(); ++i) {
    err = std::max(err, double(std::abs(x0_dn[i] - x0[i])));
    top = std::max(top, double(std::abs(x_t[i])));
  }
  // half an ulp of the largest x_t, amplified by the inversion
  if (quantum) *quantum = top * std::numeric_limits<T>::epsilon() / 2 / std::sqrt(s.alpha_bar(t));
  return err;
}

TEST(DenoisedEstimate, InvertsForwardDiffuseWithOracleNoise) {
  for (int t = 1; t <= 200; ++t) EXPECT_LT(worst_inversion_error<double>(t), 1e-5) << "t=" << t;
  const auto s = NoiseSchedule::linear(200);
  for (int t = 1; t <= 200; ++t) {
    double quantum = 0;
    const double err = worst_inversion_error<float>(t, &quantum);
    if (s.alpha_bar(t) >= 2.5e-4)
      EXPECT_LT(err, 1e-5) << "t=" << t;
    else  // x_t itself cannot carry x0 to 1e-5 in 32-bit here
      EXPECT_LT(err, 1e-6 + 2 * quantum) << "t=" << t;
  }
}

TEST(DenoisedEstimate, GradientThroughDenoiserMatchesFiniteDifferences) {
  UNet<double> net(tiny_unet(3));
  DiffusionModel model(std::move(net), NoiseSchedule::linear(200));
  Rng rng(9);
  const auto x = rng.normal_tensor<double>({2, 1, 8, 8});
  const auto w = rng.normal_tensor<double>({2, 1, 8, 8});
  for (int t : {1, 100, 200}) {
    DenoisedMap map(model, t);
    const auto analytic = diffcore::grad_input(map, x, w);
    const auto numeric = numeric_gradient([&](const Tensor<double>& z) { return contract(diffcore::evaluate(map, z), w); }, x);
    EXPECT_LT(relative_error(analytic, numeric), 1e-3) << "t=" << t;
  }
}

TEST(UNet, ParameterGradientsMatchFiniteDifferences) {
  UNet<double> net(tiny_unet(4));
  // move every parameter off its initial value so norms and biases are exercised
  Rng rng(21);
  for (std::size_t i = 0; i < net.parameters().size(); ++i)
    for (auto& v : net.parameters()[i].data()) v += 0.05 * rng.normal();
  const auto x = rng.normal_tensor<double>({2, 1, 8, 8});
  const std::vector<int> steps{3, 150};
  const auto w = rng.normal_tensor<double>({2, 2, 8, 8});
  DenoiserAt<double> map(net, steps);
  const auto grads = diffcore::grad_params(map, x, w);
  ASSERT_EQ(grads.size(), net.parameters().size());
  double worst = 0;
  for (std::size_t i = 0; i < grads.size(); ++i) {
    auto f = [&](const Tensor<double>& p) {
      UNet<double> copy = net;
      copy.parameters()[i] = p;
      return contract(diffcore::evaluate(DenoiserAt<double>(copy, steps), x), w);
    };
    const double e = relative_error(grads[i].second, numeric_gradient(f, net.parameters()[i]));
    worst = std::max(worst, e);
  }
  EXPECT_LT(worst, 1e-3);
  const auto numeric_x = numeric_gradient([&](const Tensor<double>& z) { return contract(diffcore::evaluate(map, z), w); }, x);
  EXPECT_LT(relative_error(diffcore::grad_input(map, x, w), numeric_x), 1e-3);
}

TEST(UNet, OutputShapeAndBatchIndependence) {
  UNet<float> net(tiny_unet(1));
  Rng rng(2);
  const auto x = rng.normal_tensor<float>({3, 1, 8, 8});
  const auto all = diffcore::evaluate(DenoiserAt<float>(net, {5, 6, 7}), x);
  EXPECT_EQ(all.shape(), (Shape{3, 2, 8, 8}));
  const auto one = diffcore::evaluate(DenoiserAt<float>(net, {6}), x.rows(1, 2));
  for (std::size_t j = 0; j < one.size(); ++j) EXPECT_NEAR(one[j], all[one.size() + j], 1e-5);
}

TEST(HybridLoss, OracleAndZeroDenoisers) {
  const auto s = NoiseSchedule::linear(200);
  Rng rng(31);
  const Shape shape{64, 1, 32, 32};
  Tensor<float> x0(shape);
  for (auto& v : x0.data()) v = static_cast<float>(rng.uniform(-1, 1));
  const auto eps = rng.normal_tensor<float>(shape);
  std::vector<int> steps(64);
  for (auto& t : steps) t = rng.integer(1, 200);

  Tape<float> t1;
  DiffusionModel oracle(fixed(eps), s);
  Binding<float> b1(t1, oracle.net().parameters(), true);
  EXPECT_EQ(hybrid_loss(oracle, b1, x0, steps, eps).simple.value()[0], 0.f);

  Tape<float> t2;
  DiffusionModel zero(fixed(Tensor<float>(shape)), s);
  Binding<float> b2(t2, zero.net().parameters(), true);
  const double d = 32 * 32;
  EXPECT_NEAR(hybrid_loss(zero, b2, x0, steps, eps).simple.value()[0], d, 0.05 * d);
}

TEST(HybridLoss, VariationalTermMatchesScalarOracle) {
  const auto s = NoiseSchedule::linear(200);
  for (int t : {1, 2, 90, 200}) {
    const double x0 = 0.3, e = -1.1, eh = -0.7, raw = 0.4;
    Tensor<double> r({1, 1, 1, 1}, raw);
    DiffusionModel model(FixedNet<double>(Tensor<double>({1, 1, 1, 1}, eh), r), s);
    Tape<double> tape;
    Binding<double> b(tape, model.net().parameters(), true);
    const auto loss = hybrid_loss(model, b, Tensor<double>({1, 1, 1, 1}, x0), {t}, Tensor<double>({1, 1, 1, 1}, e));

    const double ab = s.alpha_bar(t), abp = s.alpha_bar(t - 1), beta = s.beta(t);
    const double xt = std::sqrt(ab) * x0 + std::sqrt(1 - ab) * e;
    const double mu = (xt - beta / std::sqrt(1 - ab) * eh) / std::sqrt(1 - beta);
    const double tilde = t > 1 ? (1 - abp) / (1 - ab) * beta : (1 - s.alpha_bar(1)) / (1 - s.alpha_bar(2)) * s.beta(2);
    const double v = 1 / (1 + std::exp(-raw));
    const double sig = std::exp(v * std::log(beta) + (1 - v) * std::log(tilde));
    double expect;
    if (t > 1) {
      const double mt = std::sqrt(abp) * beta / (1 - ab) * x0 + std::sqrt(1 - beta) * (1 - abp) / (1 - ab) * xt;
      expect = 0.5 * (std::log(sig / tilde) + (tilde + (mt - mu) * (mt - mu)) / sig - 1);
    } else {
      expect = 0.5 * (std::log(2 * M_PI * sig) + (x0 - mu) * (x0 - mu) / sig);
    }
    EXPECT_NEAR(loss.vlb.value()[0], expect, 1e-9) << "t=" << t;
    EXPECT_NEAR(loss.simple.value()[0], (e - eh) * (e - eh), 1e-12);
  }
}

TEST(HybridLoss, VariationalTermDoesNotTrainNoiseHead) {
  const auto s = NoiseSchedule::linear(200);
  DiffusionModel model(fixed(Tensor<double>({1, 1, 1, 1}, 0.5)), s);
  Tape<double> tape;
  Binding<double> b(tape, model.net().parameters(), true);
  const auto loss = hybrid_loss(model, b, Tensor<double>({1, 1, 1, 1}, 0.2), {40}, Tensor<double>({1, 1, 1, 1}, -0.3));
  tape.backward(loss.vlb);
  const auto g = b.gradients()[0];  // offset over [eps | raw]
  EXPECT_EQ(g[0], 0.0);
  EXPECT_NE(g[1], 0.0);
}

TEST(Sampling, EmptyDeterministicAndInRange) {
  DiffusionModel model(UNet<float>(tiny_unet(8)), NoiseSchedule::linear(200));
  EXPECT_TRUE(sample_unconditional(model, 0, 1).empty());
  const auto a = sample_unconditional(model, 3, 77);
  const auto b = sample_unconditional(model, 3, 77, 2);
  EXPECT_EQ(a.shape(), (Shape{3, 1, 8, 8}));
  EXPECT_TRUE(a == b);
  EXPECT_FALSE(a == sample_unconditional(model, 3, 78));
  for (float v : a.data()) {
    EXPECT_GE(v, 0.f);
    EXPECT_LE(v, 1.f);
  }
}

namespace {

Tensor<float> toy_images(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<float> x({n, 1, 8, 8});
  for (std::size_t i = 0; i < n; ++i) {
    const int cx = rng.integer(2, 5), cy = rng.integer(2, 5);
    for (int y = 0; y < 8; ++y)
      for (int xx = 0; xx < 8; ++xx)
        x[i * 64 + y * 8 + xx] = std::abs(xx - cx) + std::abs(y - cy) <= 1 ? 0.9f : 0.2f;
  }
  return x;
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Training, LossDecreasesAndCurveIsWritten) {
  const auto dir = std::filesystem::temp_directory_path() / "cflab_test_train";
  std::filesystem::create_directories(dir);
  DiffusionModel model(UNet<float>(tiny_unet(2)), NoiseSchedule::linear(200));
  TrainConfig cfg;
  cfg.iterations = 300;
  cfg.batch = 16;
  cfg.warmup = 20;
  cfg.log_every = 10;
  cfg.loss_csv_path = (dir / "loss.csv").string();
  const auto res = train_diffusion(model, toy_images(64, 1), cfg);
  ASSERT_EQ(res.curve.size(), 30u);
  double first = 0, last = 0;
  for (int k = 0; k < 5; ++k) {
    first += res.curve[k].simple;
    last += res.curve[res.curve.size() - 1 - k].simple;
  }
  EXPECT_LT(last, 0.5 * first);
  const auto csv = slurp(cfg.loss_csv_path);
  EXPECT_EQ(csv.rfind("iteration,loss_simple,loss_vlb\n", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 31);
}

TEST(Training, ResumeReproducesUninterruptedRun) {
  const auto dir = std::filesystem::temp_directory_path() / "cflab_test_resume";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  const auto data = toy_images(32, 2);
  TrainConfig cfg;
  cfg.iterations = 12;
  cfg.batch = 4;
  cfg.seed = 5;

  DiffusionModel straight(UNet<float>(tiny_unet(6)), NoiseSchedule::linear(200));
  train_diffusion(straight, data, cfg);

  DiffusionModel resumed(UNet<float>(tiny_unet(6)), NoiseSchedule::linear(200));
  auto part = cfg;
  part.iterations = 7;
  part.checkpoint_path = (dir / "ckpt.bin").string();
  train_diffusion(resumed, data, part);
  DiffusionModel fresh(UNet<float>(tiny_unet(99)), NoiseSchedule::linear(200));
  auto rest = cfg;
  rest.checkpoint_path = part.checkpoint_path;
  rest.resume = true;
  train_diffusion(fresh, data, rest);
  for (std::size_t i = 0; i < straight.net().parameters().size(); ++i)
    EXPECT_TRUE(straight.net().parameters()[i] == fresh.net().parameters()[i]) << straight.net().parameters().name(i);
}

TEST(Training, DivergenceAbortsAndKeepsLastGoodState) {
  const auto dir = std::filesystem::temp_directory_path() / "cflab_test_diverge";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  Tensor<float> eps({4, 1, 2, 2});
  DiffusionModel model(fixed(eps), NoiseSchedule::linear(200));
  TrainConfig cfg;
  cfg.iterations = 50;
  cfg.batch = 4;
  cfg.warmup = 0;
  cfg.lr = 1e38;  // the first update pushes the output past float range
  cfg.checkpoint_path = (dir / "ckpt.bin").string();
  Tensor<float> images({4, 1, 2, 2}, 0.5f);
  EXPECT_THROW(train_diffusion(model, images, cfg), NumericalError);
  const auto saved = diffcore::load_checkpoint(cfg.checkpoint_path + ".last_good");
  EXPECT_TRUE(diffcore::checkpoint_scalar(saved, "meta/iteration").has_value());
  EXPECT_THROW(train_diffusion(model, Tensor<float>(), cfg), InvalidArgument);
}
