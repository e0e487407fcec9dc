#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>

#include "cflab/diffcore/checkpoint.hpp"
#include "cflab/diffcore/map.hpp"
#include "cflab/diffcore/optim.hpp"
#include "support_opcheck.hpp"

using namespace cflab;
using namespace cflab::diffcore;
using cflab::testing::op_gradient_error;

namespace {

Tensor<double> randn(Shape s, std::uint64_t seed, double sd = 1.0) {
  Rng rng(seed);
  return rng.normal_tensor<double>(s, sd);
}

constexpr double kTol = 1e-3;

}  // namespace

TEST(Evaluate, IdentityAndAffine) {
  IdentityMap<double> id(2);
  auto y = evaluate(id, Tensor<double>({1, 2}, {0.2, 0.7}));
  EXPECT_EQ(y.vec(), (std::vector<double>{0.2, 0.7}));

  AffineMap<double> aff(Tensor<double>({2, 2}, {2, 0, 0, 3}), Tensor<double>({2}));
  auto z = evaluate(aff, Tensor<double>({1, 2}, {1, 1}));
  EXPECT_DOUBLE_EQ(z[0], 2.0);
  EXPECT_DOUBLE_EQ(z[1], 3.0);
}

TEST(Evaluate, ShapeMismatchThrows) {
  IdentityMap<double> id(2);
  EXPECT_THROW(evaluate(id, Tensor<double>({1, 3})), ShapeError);
}

TEST(Evaluate, NonFiniteReportsPrimitive) {
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>({2}, {-1.0, 1.0}));
  try {
    ops::log(x);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_EQ(e.where(), "log");
  }
}

// Two-layer net y = W2 relu(W1 x + b1) + b2, checked against a scalar-by-scalar
// evaluation written independently of the tape.
TEST(Evaluate, TwoLayerMatchesHandEvaluation) {
  struct Net {
    using scalar_type = double;
    Parameters<double> p;
    layers::Linear<double> l1, l2;
    const Parameters<double>& parameters() const { return p; }
    Shape sample_shape() const { return {3}; }
    Var<double> forward(Binding<double>& b, Var<double> x) const {
      return l2(b, ops::relu(l1(b, x)));
    }
  } net;
  Rng rng(3);
  net.l1 = layers::Linear<double>::create(net.p, "l1", 3, 4, rng);
  net.l2 = layers::Linear<double>::create(net.p, "l2", 4, 2, rng);
  net.p[1] = randn({4}, 9);
  Tensor<double> x({1, 3}, {0.3, -1.2, 0.8});

  const auto &W1 = net.p[0], &b1 = net.p[1], &W2 = net.p[2], &b2 = net.p[3];
  double hidden[4];
  for (int i = 0; i < 4; ++i) {
    double s = b1[i];
    for (int j = 0; j < 3; ++j) s += W1[i * 3 + j] * x[j];
    hidden[i] = s > 0 ? s : 0;
  }
  auto y = evaluate(net, x);
  for (int i = 0; i < 2; ++i) {
    double s = b2[i];
    for (int j = 0; j < 4; ++j) s += W2[i * 4 + j] * hidden[j];
    EXPECT_NEAR(y[i], s, 1e-12);
  }
}

TEST(Evaluate, IsPure) {
  Rng rng(5);
  AffineMap<float> aff(6, 3, rng);
  auto x = Rng(6).normal_tensor<float>({4, 6});
  EXPECT_EQ(evaluate(aff, x), evaluate(aff, x));
}

TEST(GradInput, IdentityAndAffineAdjoint) {
  IdentityMap<double> id(3);
  Tensor<double> c({1, 3}, {1, -2, 5});
  EXPECT_EQ(grad_input(id, Tensor<double>({1, 3}), c), c);

  Tensor<double> W({2, 3}, {1, 2, 3, 4, 5, 6});
  AffineMap<double> aff(W, Tensor<double>({2}));
  auto g = grad_input(aff, Tensor<double>({1, 3}), Tensor<double>({1, 2}, {1, 10}));
  EXPECT_DOUBLE_EQ(g[0], 41);
  EXPECT_DOUBLE_EQ(g[1], 52);
  EXPECT_DOUBLE_EQ(g[2], 63);
}

TEST(GradParams, BiasAndScalarWeight) {
  AffineMap<double> bias_only(Tensor<double>({2, 2}, {1, 0, 0, 1}), Tensor<double>({2}));
  auto g = grad_params(bias_only, Tensor<double>({1, 2}), Tensor<double>({1, 2}, {0.5, -3}));
  EXPECT_EQ(g[1].first, "affine.bias");
  EXPECT_EQ(g[1].second.vec(), (std::vector<double>{0.5, -3}));

  AffineMap<double> w(Tensor<double>({1, 1}, {2.0}), Tensor<double>({1}));
  auto gw = grad_params(w, Tensor<double>({1, 1}, {3.0}), Tensor<double>({1, 1}, {1.0}));
  EXPECT_DOUBLE_EQ(gw[0].second[0], 3.0);
}

TEST(GradCheck, Elementwise) {
  auto a = randn({2, 3, 4, 4}, 1), b = randn({2, 3, 4, 4}, 2);
  auto pos = a;
  for (auto& v : pos.data()) v = std::abs(v) + 0.5;
  EXPECT_LT(op_gradient_error([](auto&, auto& v) { return ops::add(v[0], v[1]); }, {a, b}), kTol);
  EXPECT_LT(op_gradient_error([](auto&, auto& v) { return ops::sub(v[0], v[1]); }, {a, b}), kTol);
  EXPECT_LT(op_gradient_error([](auto&, auto& v) { return ops::mul(v[0], v[1]); }, {a, b}), kTol);
  EXPECT_LT(op_gradient_error([](auto&, auto& v) { return ops::affine(v[0], 1.7, -0.2); }, {a}), kTol);
  EXPECT_LT(op_gradient_error([](auto&, auto& v) { return ops::silu(v[0]); }, {a}), kTol);
  EXPECT_LT(op_gradient_error([](auto&, auto& v) { return ops::sigmoid(v[0]); }, {a}), kTol);
  EXPECT_LT(op_gradient_error([](auto&, auto& v) { return ops::exp(v[0]); }, {a}), kTol);
  EXPECT_LT(op_gradient_error([](auto&, auto& v) { return ops::log(v[0]); }, {pos}), kTol);
  EXPECT_LT(op_gradient_error([](auto&, auto& v) { return ops::square(v[0]); }, {a}), kTol);
  EXPECT_LT(op_gradient_error([](auto&, auto& v) { return ops::combine(v[0], v[1], -0.3, 2.5); }, {a, b}), kTol);
  EXPECT_LT(op_gradient_error([](auto&, auto& v) { return ops::scale_per_sample(v[0], {0.5, -2.0}); }, {a}),
            kTol);
  // keep relu inputs away from the kink
  EXPECT_LT(op_gradient_error([](auto&, auto& v) { return ops::relu(v[0]); }, {pos}), kTol);
  auto kinked = a;
  for (auto& v : kinked.data()) v = (v > 0 ? 0.1 : -0.1) + v;
  EXPECT_LT(op_gradient_error([](auto&, auto& v) { return ops::relu(v[0]); }, {kinked}), kTol);
}

TEST(GradCheck, Reductions) {
  auto a = randn({3, 5}, 3);
  EXPECT_LT(op_gradient_error([](auto&, auto& v) { return ops::sum(v[0]); }, {a}), kTol);
  EXPECT_LT(op_gradient_error([](auto&, auto& v) { return ops::mean(v[0]); }, {a}), kTol);
  EXPECT_LT(op_gradient_error([](auto&, auto& v) { return ops::sum_per_sample(v[0]); }, {a}), kTol);
  EXPECT_LT(op_gradient_error([](auto&, auto& v) { return ops::log_softmax(v[0]); }, {a}), kTol);
  EXPECT_LT(op_gradient_error([](auto&, auto& v) { return ops::softmax(v[0]); }, {a}), kTol);
  EXPECT_LT(op_gradient_error([](auto&, auto& v) { return ops::pick(v[0], {0, 4, 2}); }, {a}), kTol);
  EXPECT_LT(op_gradient_error([](auto&, auto& v) { return ops::reshape(v[0], {15}); }, {a}), kTol);
}

TEST(GradCheck, Linear) {
  EXPECT_LT(op_gradient_error([](auto&, auto& v) { return ops::linear(v[0], v[1], v[2]); },
                              {randn({4, 5}, 1), randn({3, 5}, 2), randn({3}, 3)}),
            kTol);
}

TEST(GradCheck, Conv2dStrides) {
  for (std::size_t stride : {1u, 2u})
    for (std::size_t k : {1u, 3u}) {
      const std::size_t pad = k / 2;
      EXPECT_LT(op_gradient_error(
                    [=](auto&, auto& v) { return ops::conv2d(v[0], v[1], v[2], stride, pad); },
                    {randn({2, 3, 6, 6}, 4), randn({4, 3, k, k}, 5), randn({4}, 6)}),
                kTol)
          << "stride " << stride << " kernel " << k;
    }
}

TEST(GradCheck, ResamplingAndChannels) {
  auto x = randn({2, 4, 4, 4}, 7), y = randn({2, 2, 4, 4}, 8);
  EXPECT_LT(op_gradient_error([](auto&, auto& v) { return ops::upsample_nearest2(v[0]); }, {x}), kTol);
  EXPECT_LT(op_gradient_error([](auto&, auto& v) { return ops::avg_pool2(v[0]); }, {x}), kTol);
  EXPECT_LT(op_gradient_error([](auto&, auto& v) { return ops::global_avg_pool(v[0]); }, {x}), kTol);
  EXPECT_LT(op_gradient_error([](auto&, auto& v) { return ops::concat_channels(v[0], v[1]); }, {x, y}),
            kTol);
  EXPECT_LT(op_gradient_error([](auto&, auto& v) { return ops::slice_channels(v[0], 1, 3); }, {x}), kTol);
  EXPECT_LT(op_gradient_error([](auto&, auto& v) { return ops::add_channel(v[0], v[1]); },
                              {x, randn({2, 4}, 9)}),
            kTol);
}

TEST(GradCheck, GroupNorm) {
  EXPECT_LT(op_gradient_error(
                [](auto&, auto& v) { return ops::group_norm(v[0], v[1], v[2], 2); },
                {randn({2, 4, 3, 3}, 10), randn({4}, 11), randn({4}, 12)}),
            kTol);
}

TEST(GradCheck, CompositionMatchesWholeGraph) {
  EXPECT_LT(op_gradient_error(
                [](auto&, auto& v) {
                  auto h = ops::silu(ops::conv2d(v[0], v[1], v[2], 1, 1));
                  auto p = ops::global_avg_pool(ops::avg_pool2(h));
                  return ops::log_softmax(p);
                },
                {randn({2, 2, 4, 4}, 13), randn({3, 2, 3, 3}, 14), randn({3}, 15)}),
            kTol);
}

TEST(Tape, SecondSweepResetsGradients) {
  Tape<double> tape;
  auto x = tape.variable(Tensor<double>({2}, {1, 2}));
  auto y = ops::scale(x, 3.0);
  tape.backward(y, Tensor<double>({2}, {1, 1}));
  tape.backward(y, Tensor<double>({2}, {1, 0}));
  EXPECT_EQ(tape.grad(x.id).vec(), (std::vector<double>{3, 0}));
}

TEST(Embedding, SinusoidalValues) {
  auto e = ops::sinusoidal_embedding<double>({0, 3}, 4);
  EXPECT_DOUBLE_EQ(e[0], 0.0);
  EXPECT_DOUBLE_EQ(e[2], 1.0);
  EXPECT_NEAR(e[4], std::sin(3.0), 1e-12);
  EXPECT_NEAR(e[5], std::sin(3.0 * 0.01), 1e-12);
}

TEST(Checkpoint, BitExactRoundTrip) {
  NamedTensors<float> entries;
  Rng rng(2);
  entries.emplace_back("conv.weight", rng.normal_tensor<float>({2, 1, 3, 3}));
  entries.emplace_back("bias", Tensor<float>({1}, {-0.0f}));
  entries.emplace_back("naïve", Tensor<float>({2}, {1e-38f, 3.4e38f}));
  const std::string bytes = encode_checkpoint(entries);
  EXPECT_EQ(bytes.substr(0, 6), "CFLAB1");
  auto back = decode_checkpoint(bytes);
  ASSERT_EQ(back.size(), entries.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].first, entries[i].first);
    EXPECT_EQ(std::memcmp(back[i].second.ptr(), entries[i].second.ptr(), 4 * back[i].second.size()), 0);
  }
  EXPECT_EQ(encode_checkpoint(back), bytes);

  const auto path = std::filesystem::temp_directory_path() / "cflab_ckpt_test.bin";
  save_checkpoint(path.string(), entries);
  EXPECT_EQ(encode_checkpoint(load_checkpoint(path.string())), bytes);
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsBadMagicAndTruncation) {
  EXPECT_THROW(decode_checkpoint("CFLAB2xxxx"), MissingArtifact);
  NamedTensors<float> e{{"a", Tensor<float>({3})}};
  auto bytes = encode_checkpoint(e);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 1)), MissingArtifact);
}

TEST(Optim, SgdMomentumAndCosine) {
  Parameters<double> p;
  p.add("w", Tensor<double>({1}, {1.0}));
  SgdMomentum<double> sgd(0.9);
  std::vector<Tensor<double>> g{Tensor<double>({1}, {1.0})};
  sgd.step(p, g, 0.1);
  EXPECT_DOUBLE_EQ(p[0][0], 0.9);
  sgd.step(p, g, 0.1);
  EXPECT_NEAR(p[0][0], 0.9 - 0.1 * 1.9, 1e-12);
  EXPECT_DOUBLE_EQ(cosine_rate(0.01, 0, 10), 0.01);
  EXPECT_NEAR(cosine_rate(0.01, 10, 10), 0.0, 1e-15);
  EXPECT_NEAR(cosine_rate(0.01, 5, 10), 0.005, 1e-15);
}

TEST(Optim, AdamMinimizesQuadratic) {
  Parameters<double> p;
  p.add("w", Tensor<double>({2}, {3.0, -2.0}));
  Adam<double> adam;
  for (int i = 0; i < 2000; ++i) {
    std::vector<Tensor<double>> g{Tensor<double>({2}, {2 * p[0][0], 2 * p[0][1]})};
    adam.step(p, g, 0.01);
  }
  EXPECT_NEAR(p[0][0], 0.0, 1e-2);
  EXPECT_NEAR(p[0][1], 0.0, 1e-2);
}
