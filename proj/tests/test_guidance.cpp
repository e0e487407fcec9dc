#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "cflab/guidance/dvc.hpp"
#include "support_gradcheck.hpp"

using namespace cflab;
using namespace cflab::guidance;
using classifiers::ClassifierConfig;
using classifiers::ConvClassifier;
using diffusion::DiffusionModel;
using diffusion::NoiseSchedule;
using diffusion::UNet;
using diffusion::UNetConfig;

namespace {

constexpr double kPi = std::numbers::pi;

Tensor<double> vec(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor<double>({n}, std::move(v));
}

double norm(const Tensor<double>& a) {
  double s = 0;
  for (double v : a.data()) s += v * v;
  return std::sqrt(s);
}

double angle(const Tensor<double>& a, const Tensor<double>& b) {
  double d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d += a[i] * b[i];
  return std::acos(std::clamp(d / (norm(a) * norm(b)), -1.0, 1.0));
}

// Minimizes |r - z| over z = rho (cos phi u + sin phi (cos th e1 + sin th e2)),
// phi in [0, alpha], with rho chosen optimally for each direction. Coarse grid
// followed by two zoomed refinements.
Tensor<double> brute_force_cone(const Tensor<double>& r, const Tensor<double>& g, double alpha) {
  const std::size_t d = r.size();
  std::vector<Tensor<double>> basis{g};
  for (auto& v : basis[0].data()) v /= norm(g);
  for (std::size_t k = 0; k < d && basis.size() < d; ++k) {  // Gram-Schmidt on the standard basis
    Tensor<double> e({d});
    e[k] = 1;
    for (const auto& b : basis) {
      double p = 0;
      for (std::size_t i = 0; i < d; ++i) p += e[i] * b[i];
      for (std::size_t i = 0; i < d; ++i) e[i] -= p * b[i];
    }
    if (const double en = norm(e); en > 1e-6) {
      for (auto& v : e.data()) v /= en;
      basis.push_back(e);
    }
  }
  auto point = [&](double phi, double th) {
    Tensor<double> dir({d});
    for (std::size_t i = 0; i < d; ++i) {
      dir[i] = std::cos(phi) * basis[0][i];
      if (d >= 2) dir[i] += std::sin(phi) * std::cos(th) * basis[1][i];
      if (d >= 3) dir[i] += std::sin(phi) * std::sin(th) * basis[2][i];
    }
    double rho = 0;
    for (std::size_t i = 0; i < d; ++i) rho += r[i] * dir[i];
    rho = std::max(0.0, rho);
    for (auto& v : dir.data()) v *= rho;
    return dir;
  };
  auto loss = [&](const Tensor<double>& z) {
    double s = 0;
    for (std::size_t i = 0; i < d; ++i) s += (r[i] - z[i]) * (r[i] - z[i]);
    return s;
  };
  double phi0 = 0, phi1 = alpha, th0 = 0, th1 = 2 * kPi, best_phi = 0, best_th = 0;
  for (int level = 0; level < 3; ++level) {
    double best = 1e300;
    const int steps = 200;
    for (int a = 0; a <= steps; ++a)
      for (int b = 0; b <= (d >= 2 ? steps : 0); ++b) {
        const double phi = phi0 + (phi1 - phi0) * a / steps, th = th0 + (th1 - th0) * b / steps;
        const double l = loss(point(phi, th));
        if (l < best) {
          best = l;
          best_phi = phi;
          best_th = th;
        }
      }
    const double dp = 3 * (phi1 - phi0) / steps, dt = 3 * (th1 - th0) / steps;
    phi0 = std::max(0.0, best_phi - dp);
    phi1 = std::min(alpha, best_phi + dp);
    th0 = best_th - dt;
    th1 = best_th + dt;
  }
  return point(best_phi, best_th);
}

UNetConfig tiny_unet(std::uint64_t seed) {
  UNetConfig c;
  c.base_channels = 4;
  c.image_size = 8;
  c.seed = seed;
  return c;
}

ClassifierConfig tiny_classifier(std::uint64_t seed) {
  ClassifierConfig c;
  c.widths = {4, 4};
  c.image_size = 8;
  c.seed = seed;
  return c;
}

template <typename T>
Tensor<T> uniform_images(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<T> x({n, 1, 8, 8});
  for (auto& v : x.data()) v = static_cast<T>(rng.uniform(0.1, 0.9));
  return x;
}

}  // namespace

TEST(Cone, Examples) {
  const auto g = vec({1.0, 0.0});
  EXPECT_TRUE(cone_project(g, g, 30.0) == g);
  const auto apex = cone_project(vec({-1.0, 0.0}), g, 30.0);
  EXPECT_EQ(apex[0], 0.0);
  EXPECT_EQ(apex[1], 0.0);

  const auto z = cone_project(vec({0.0, 1.0}), g, 30.0);
  EXPECT_NEAR(z[0], 0.4330, 1e-4);
  EXPECT_NEAR(z[1], 0.2500, 1e-4);
  EXPECT_NEAR(norm(z), 0.5, 1e-12);
  EXPECT_NEAR(std::abs(z[1]), std::tan(kPi / 6) * z[0], 1e-12);  // on the boundary

  EXPECT_THROW(cone_project(g, vec({0.0, 0.0}), 30.0), InvalidArgument);
  EXPECT_THROW(cone_project(g, g, 0.0), InvalidArgument);
  EXPECT_THROW(cone_project(g, g, 90.0), InvalidArgument);
}

TEST(Cone, MatchesBruteForceInLowDimensions) {
  Rng rng(21);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t d = 2 + trial % 2;
    const double alpha_deg = rng.uniform(5, 80);
    const auto r = rng.normal_tensor<double>({d}), g = rng.normal_tensor<double>({d});
    const auto got = cone_project(r, g, alpha_deg);
    const auto want = brute_force_cone(r, g, alpha_deg * kPi / 180);
    for (std::size_t i = 0; i < d; ++i) EXPECT_NEAR(got[i], want[i], 1e-3) << "trial " << trial;
  }
}

TEST(Cone, IdempotentAndInsideCone) {
  Rng rng(22);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t d = 2 + trial % 30;
    const double alpha_deg = rng.uniform(1, 89);
    const auto r = rng.normal_tensor<double>({d}), g = rng.normal_tensor<double>({d});
    const auto z = cone_project(r, g, alpha_deg);
    const auto zz = cone_project(z, g, alpha_deg);
    for (std::size_t i = 0; i < d; ++i) EXPECT_NEAR(zz[i], z[i], 1e-6);
    if (norm(z) > 0) {
      EXPECT_LE(angle(z, g), alpha_deg * kPi / 180 + 1e-6);
    }
    if (angle(r, g) <= alpha_deg * kPi / 180) {
      EXPECT_TRUE(z == r);
    }
  }
}

TEST(Guidance, ComposeFixture) {
  const std::vector<double> plain{1, 0}, robust{0, 1}, dist{1 / std::sqrt(2.0), 1 / std::sqrt(2.0)};
  std::vector<double> out(2);
  compose_guidance<double>(GuidanceMode::cone, {plain, robust, dist}, 1.0, 1.0, 30.0, out);
  EXPECT_NEAR(out[0], 0.1589, 1e-4);
  EXPECT_NEAR(out[1], -0.2071, 1e-4);

  const std::vector<double> big_plain{3, 4};
  compose_guidance<double>(GuidanceMode::plain_only, {big_plain, robust, dist}, 0.7, 0.0, 30.0, out);
  EXPECT_NEAR(out[0], 0.7 * 0.6, 1e-15);
  EXPECT_NEAR(out[1], 0.7 * 0.8, 1e-15);

  compose_guidance<double>(GuidanceMode::robust_only, {plain, robust, dist}, 0.0, 0.0, 30.0, out);
  EXPECT_EQ(out[0], 0.0);
  EXPECT_EQ(out[1], 0.0);

  const std::vector<double> zero{0, 0};
  compose_guidance<double>(GuidanceMode::cone, {zero, robust, zero}, 1.0, 1.0, 30.0, out);
  EXPECT_EQ(out[0], 0.0);
  EXPECT_EQ(out[1], 0.0);
}

TEST(Guidance, GuidedMean) {
  const Tensor<double> mu({1, 2}, std::vector<double>{3, 4}), sigma({1, 2}, 0.1);
  const Tensor<double> gamma({1, 2}, std::vector<double>{0.2, 0});
  const auto m = guided_mean(mu, sigma, gamma);
  EXPECT_NEAR(m[0], 3.1, 1e-12);
  EXPECT_NEAR(m[1], 4.0, 1e-12);
  EXPECT_TRUE(guided_mean(mu, sigma, Tensor<double>({1, 2})) == mu);
  const auto m2 = guided_mean(mu, Tensor<double>({1, 2}, 0.2), gamma);
  EXPECT_NEAR(m2[0] - mu[0], 2 * (m[0] - mu[0]), 1e-12);
}

TEST(Guidance, DirectionFollowsGradientThroughDenoiser) {
  DiffusionModel model(UNet<double>(tiny_unet(3)), NoiseSchedule::linear(200));
  ConvClassifier<double> plain(tiny_classifier(4)), robust(tiny_classifier(5), classifiers::Mode::robust);
  const auto x0 = uniform_images<double>(1, 6);
  Rng rng(7);
  const auto x_t = rng.normal_tensor<double>({1, 1, 8, 8});
  for (int t : {30, 100}) {
    GuidanceConfig cfg;
    cfg.mode = GuidanceMode::plain_only;
    cfg.lambda_c = 1;
    cfg.lambda_d = 0;
    const auto step = guidance_step(plain, robust, model, x0, x_t, t, {1}, cfg);
    auto f = [&](const Tensor<double>& x) {
      const auto img = diffusion::denoised_estimate(model, x, t);
      Tensor<double> im = img;
      for (auto& v : im.data()) v = 0.5 * v + 0.5;
      return std::log(classifiers::predict_proba(plain, im)[1]);
    };
    auto g = cflab::testing::numeric_gradient(f, x_t, 1e-5);
    const double n = norm(g);
    for (auto& v : g.data()) v /= n;
    EXPECT_LT(cflab::testing::relative_error(step.gamma, g), 1e-4) << "t = " << t;
    EXPECT_NEAR(step.confidence[0], std::exp(f(x_t)), 1e-12);

    // distance term alone points along -unit(grad d)
    cfg.lambda_c = 0;
    cfg.lambda_d = 2;
    const auto dstep = guidance_step(plain, robust, model, x0, x_t, t, {1}, cfg);
    auto fd = [&](const Tensor<double>& x) {
      const auto img = diffusion::denoised_estimate(model, x, t);
      double s = 0;
      for (std::size_t i = 0; i < img.size(); ++i) s += std::pow(0.5 * img[i] + 0.5 - x0[i], 2);
      return std::sqrt(s);
    };
    auto gd = cflab::testing::numeric_gradient(fd, x_t, 1e-5);
    const double nd = norm(gd);
    for (auto& v : gd.data()) v *= -2 / nd;
    EXPECT_LT(cflab::testing::relative_error(dstep.gamma, gd), 1e-4) << "t = " << t;
  }
}

TEST(Guidance, ZeroStrengthRecoversUnconditionalChain) {
  DiffusionModel model(UNet<float>(tiny_unet(8)), NoiseSchedule::linear(200));
  ConvClassifier<float> plain(tiny_classifier(9)), robust(tiny_classifier(10));
  const auto x0 = uniform_images<float>(2, 11);
  GuidanceConfig cfg;
  cfg.lambda_c = 0;
  cfg.lambda_d = 0;
  cfg.start_fraction = 0.1;
  const auto res = generate_dvc(plain, robust, model, x0, {0, 1}, cfg, 12);

  const int s = 20;
  for (std::size_t i = 0; i < 2; ++i) {
    Rng rng(derive_seed(12, {i}));
    auto draw = [&] {
      Tensor<float> z({1, 1, 8, 8});
      for (auto& v : z.data()) v = static_cast<float>(rng.normal());
      return z;
    };
    auto x = diffusion::forward_diffuse(model.schedule(), diffusion::to_model_range(x0.rows(i, i + 1)), s, draw());
    for (int t = s; t >= 1; --t) {
      const auto d = diffusion::denoise(model, x, t);
      x = t > 1 ? diffusion::reverse_step_from(d, t, draw()) : d.mu;
    }
    x = diffusion::to_image_range(x);
    ASSERT_EQ(res[i].confidence_trace.size(), static_cast<std::size_t>(s));
    for (std::size_t j = 0; j < x.size(); ++j) EXPECT_NEAR(res[i].image[j], x[j], 1e-5);
  }
}

TEST(Guidance, GenerateIsDeterministicAndInBox) {
  DiffusionModel model(UNet<float>(tiny_unet(13)), NoiseSchedule::linear(200));
  ConvClassifier<float> plain(tiny_classifier(14)), robust(tiny_classifier(15));
  const auto x0 = uniform_images<float>(3, 16);
  GuidanceConfig cfg;
  cfg.lambda_c = 2;
  cfg.start_fraction = 0.15;
  const auto a = generate_dvc(plain, robust, model, x0, {1, 0, 1}, cfg, 17, 2);
  const auto b = generate_dvc(plain, robust, model, x0, {1, 0, 1}, cfg, 17, 1);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_TRUE(a[i].image == b[i].image);
    EXPECT_EQ(a[i].confidence_trace, b[i].confidence_trace);
    EXPECT_EQ(a[i].confidence_trace.size(), 30u);
    for (float v : a[i].image.data()) {
      EXPECT_GE(v, 0.f);
      EXPECT_LE(v, 1.f);
    }
    const auto p = classifiers::predict_proba(plain, a[i].image);
    EXPECT_DOUBLE_EQ(a[i].final_confidence, p[a[i].target]);
    EXPECT_EQ(a[i].flipped, classifiers::argmax_rows(p)[0] == a[i].target);
    EXPECT_GE(a[i].l1, a[i].l2);
    EXPECT_GE(a[i].l2, a[i].l4);
  }
  const auto single = generate_dvc(plain, robust, model, x0.rows(0, 1), 1, cfg, 17);
  EXPECT_TRUE(single.image == generate_dvc(plain, robust, model, x0.rows(0, 1), 1, cfg, 17).image);

  GuidanceConfig bad;
  bad.cone_angle = 95;
  EXPECT_THROW(generate_dvc(plain, robust, model, x0, {1, 0, 1}, bad, 1), InvalidArgument);
  EXPECT_THROW(generate_dvc(plain, robust, model, x0, {1, 0, 2}, cfg, 1), InvalidArgument);
}

TEST(Guidance, CsvRowAndPanel) {
  CounterfactualResult<float> r;
  r.image = Tensor<float>({1, 1, 2, 2}, 0.5f);
  r.target = 0;
  r.flipped = true;
  r.final_confidence = 0.9;
  const std::vector<float> orig{0.5f, 0.5f, 0.25f, 1.0f};
  set_distances(r, orig.data());
  EXPECT_NEAR(r.l1, 0.75, 1e-7);
  EXPECT_NEAR(r.l2, std::sqrt(0.3125), 1e-7);
  RunRecord rec{"img7", "dvc", "cone", 0.3, 0.5, 30.0};
  EXPECT_EQ(counterfactual_csv_row(rec, r).substr(0, 36), "img7,dvc,cone,0,0.3,0.5,30,,1,0.9,0.");
  const auto panel = counterfactual_panel(orig.data(), r, 2);
  EXPECT_EQ(panel.channels, 3u);
  EXPECT_EQ(panel.height, 4u);
}
