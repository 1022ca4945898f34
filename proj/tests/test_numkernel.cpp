#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "exitrate/numkernel.hpp"
#include "support.hpp"

using namespace exitrate;
using testsupport::numeric_gradient;
using testsupport::random_matrix;
using testsupport::random_vector;
using testsupport::relative_error;

namespace {

const double kHalfLog2TwoPi = 0.5 * std::log2(2.0 * std::numbers::pi);

DenseLayer layer(Matrix w, Vector b, Activation a) { return DenseLayer{std::move(w), std::move(b), a}; }

}  // namespace

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  Rng c = Rng::derived(7, 3), d = Rng::derived(7, 3), e = Rng::derived(7, 4);
  EXPECT_EQ(c.normal(), d.normal());
  EXPECT_NE(Rng::derived(7, 3).next_u64(), e.next_u64());
}

TEST(Rng, NormalMoments) {
  Rng rng(1);
  double s = 0.0, s2 = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    s += x;
    s2 += x * x;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(s2 / n, 1.0, 0.01);
}

TEST(Rng, ShuffleIsPermutation) {
  Rng rng(5);
  std::vector<int> v(50);
  std::iota(v.begin(), v.end(), 0);
  auto w = v;
  rng.shuffle(w);
  EXPECT_NE(v, w);
  std::sort(w.begin(), w.end());
  EXPECT_EQ(v, w);
}

TEST(Matrix, RejectsWrongElementCount) {
  EXPECT_THROW(Matrix(2, 3, Vector(5)), ShapeError);
  Matrix m(2, 3, 1.5);
  EXPECT_EQ(m.size(), 6u);
  EXPECT_EQ(m.row(1).size(), 3u);
}

TEST(GaussianNll, ClosedFormValues) {
  const Vector zero{0.0}, one{1.0};
  EXPECT_NEAR(gaussian_nll_bits(zero, zero, one), 1.32574806473616, 1e-13);
  EXPECT_NEAR(gaussian_nll_bits(one, zero, one), 2.04709558518064, 1e-12);
  const Vector x{0.3, -1.0, 2.0, 5.0};
  EXPECT_NEAR(gaussian_nll_bits(x, x, Vector(4, 1.0)), 4 * kHalfLog2TwoPi, 1e-12);
}

TEST(GaussianNll, RejectsVarianceBelowFloor) {
  const Vector x{0.0};
  EXPECT_THROW(gaussian_nll_bits(x, x, Vector{1e-7}), NumericError);
  EXPECT_THROW(gaussian_nll_bits(x, Vector{0.0, 1.0}, Vector{1.0}), ShapeError);
}

TEST(GaussianNll, BoundedBelowByLogTerm) {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.below(10);
    const Vector x = random_vector(rng, n), mu = random_vector(rng, n);
    Vector var(n);
    for (double& v : var) v = 0.01 + rng.uniform() * 4.0;
    double floor_bits = 0.0;
    for (double v : var) floor_bits += 0.5 * std::log2(2.0 * std::numbers::pi * v);
    EXPECT_GT(gaussian_nll_bits(x, mu, var), floor_bits);
    EXPECT_NEAR(gaussian_nll_bits(mu, mu, var), floor_bits, 1e-12);
  }
}

TEST(GaussianNll, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    const std::size_t n = 1 + rng.below(8);
    Vector x = random_vector(rng, n), mu = random_vector(rng, n), var(n);
    for (double& v : var) v = 0.2 + rng.uniform() * 3.0;
    const auto g = gaussian_nll_bits_grad(x, mu, var);
    Vector analytic = g.d_x;
    analytic.insert(analytic.end(), g.d_mu.begin(), g.d_mu.end());
    analytic.insert(analytic.end(), g.d_var.begin(), g.d_var.end());
    const Vector numeric = numeric_gradient({x, mu, var}, [&] { return gaussian_nll_bits(x, mu, var); });
    EXPECT_LT(relative_error(analytic, numeric), 1e-4) << "seed " << seed;
  }
}

TEST(Cosine, Examples) {
  EXPECT_DOUBLE_EQ(cosine_similarity(Vector{3, 4}, Vector{3, 4}), 1.0);
  EXPECT_DOUBLE_EQ(cosine_similarity(Vector{1, 0}, Vector{0, 1}), 0.0);
  // 32 / sqrt(14 * 77)
  EXPECT_NEAR(cosine_similarity(Vector{1, 2, 3}, Vector{4, 5, 6}), 0.9746318461970762, 1e-15);
  EXPECT_THROW(cosine_similarity(Vector{0, 0}, Vector{1, 0}), NumericError);
}

TEST(Cosine, PositiveScaleInvariance) {
  Rng rng(3);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 1 + rng.below(16);
    const Vector a = random_vector(rng, n), b = random_vector(rng, n);
    const double alpha = std::exp(rng.normal(0.0, 2.0));
    Vector scaled = a;
    for (double& v : scaled) v *= alpha;
    EXPECT_NEAR(cosine_similarity(scaled, b), cosine_similarity(a, b), 1e-12);
  }
}

TEST(Cosine, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    const std::size_t n = 2 + rng.below(8);
    const Vector a = random_vector(rng, n);
    Vector b = random_vector(rng, n);
    const Vector analytic = cosine_similarity_grad_b(a, b);
    const Vector numeric = numeric_gradient({b}, [&] { return cosine_similarity(a, b); });
    EXPECT_LT(relative_error(analytic, numeric), 1e-4) << "seed " << seed;
  }
}

TEST(Mlp, ForwardExamples) {
  Matrix eye(2, 2);
  eye(0, 0) = eye(1, 1) = 1.0;
  const Mlp id({layer(eye, {0, 0}, Activation::identity)});
  EXPECT_EQ(id.forward(Vector{1, 2}), (Vector{1, 2}));
  const Mlp relu({layer(eye, {0, 0}, Activation::relu)});
  EXPECT_EQ(relu.forward(Vector{-1, 2}), (Vector{0, 2}));

  // h = relu([[1,-1],[2,0.5]] x + [0.5,-1]) ; y = [3,-2] h + 1, at x = [1,2]:
  // pre = [1-2+0.5, 2+1-1] = [-0.5, 2] -> h = [0, 2] -> y = -4 + 1 = -3
  const Mlp two({layer(Matrix(2, 2, Vector{1, -1, 2, 0.5}), {0.5, -1}, Activation::relu),
                 layer(Matrix(1, 2, Vector{3, -2}), {1}, Activation::identity)});
  EXPECT_EQ(two.forward(Vector{1, 2}), (Vector{-3}));
  EXPECT_EQ(two.parameter_count(), 4u + 2u + 2u + 1u);
}

TEST(Mlp, RejectsBrokenChain) {
  EXPECT_THROW(Mlp({layer(Matrix(3, 2), Vector(3), Activation::relu),
                    layer(Matrix(1, 2), Vector(1), Activation::identity)}),
               ShapeError);
  EXPECT_THROW(Mlp({layer(Matrix(3, 2), Vector(2), Activation::relu)}), ShapeError);
}

TEST(Mlp, ParameterCountFormula) {
  Rng rng(0);
  const std::vector<std::size_t> widths{7, 5, 3, 2};
  const Mlp m = Mlp::random(widths, Activation::relu, Activation::identity, rng);
  EXPECT_EQ(m.parameter_count(), (7u * 5 + 5) + (5u * 3 + 3) + (3u * 2 + 2));
}

TEST(Mlp, BackwardExamples) {
  Matrix eye(2, 2);
  eye(0, 0) = eye(1, 1) = 1.0;
  const Mlp id({layer(eye, {0, 0}, Activation::identity)});
  ForwardCache cache;
  id.forward(Vector{0.3, -0.7}, cache);
  auto grads = id.zero_gradients();
  EXPECT_EQ(id.backward(cache, Vector{1, 0}, grads), (Vector{1, 0}));

  // Single affine layer, loss = y^2, y = w.x + b: dL/dw = 2 y x.
  const Vector x{0.5, -2.0, 1.5};
  const Mlp lin({layer(Matrix(1, 3, Vector{0.2, 0.1, -0.4}), {0.3}, Activation::identity)});
  cache.clear();
  const double y = lin.forward(x, cache)[0];
  auto g = lin.zero_gradients();
  lin.backward(cache, Vector{2.0 * y}, g);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_DOUBLE_EQ(g.weight[0](0, j), 2.0 * y * x[j]);
  EXPECT_DOUBLE_EQ(g.bias[0][0], 2.0 * y);

  auto fresh = lin.zero_gradients();
  EXPECT_THROW(lin.backward(ForwardCache{}, Vector{1.0}, fresh), UsageError);
}

class MlpGradient : public ::testing::TestWithParam<Activation> {};

TEST_P(MlpGradient, MatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    const std::vector<std::size_t> widths{2 + rng.below(5), 2 + rng.below(6), 1 + rng.below(4)};
    Mlp net = Mlp::random(widths, GetParam(), Activation::identity, rng);
    for (auto b : net.parameter_blocks())
      for (double& p : b) p += rng.normal(0.0, 0.05);
    Vector x = random_vector(rng, widths[0]);
    const Vector w = random_vector(rng, widths.back());
    auto loss = [&] {  // w.y + y.y/2
      const Vector y = net.forward(x);
      double s = 0.0;
      for (std::size_t i = 0; i < y.size(); ++i) s += w[i] * y[i] + 0.5 * y[i] * y[i];
      return s;
    };
    ForwardCache cache;
    const Vector y = net.forward(x, cache);
    Vector up(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) up[i] = w[i] + y[i];
    auto grads = net.zero_gradients();
    const Vector dx = net.backward(cache, up, grads);
    const Vector analytic = testsupport::flatten(grads.blocks());
    const Vector numeric = numeric_gradient(net.parameter_blocks(), loss);
    EXPECT_LT(relative_error(analytic, numeric), 1e-4) << "seed " << seed;
    EXPECT_LT(relative_error(dx, numeric_gradient({x}, loss)), 1e-4) << "seed " << seed;
  }
}

INSTANTIATE_TEST_SUITE_P(Activations, MlpGradient,
                         ::testing::Values(Activation::identity, Activation::relu, Activation::tanh),
                         [](const auto& info) { return std::string(to_string(info.param)); });

TEST(Mlp, ActivationNames) {
  for (Activation a : {Activation::identity, Activation::relu, Activation::tanh}) {
    EXPECT_EQ(activation_from_string(to_string(a)), a);
  }
  EXPECT_THROW(activation_from_string("gelu"), FormatError);  // only read from module files
}

TEST(Adam, ZeroGradientLeavesParameters) {
  Vector p{1.0, -2.0};
  const Vector g{0.0, 0.0};
  AdamState adam;
  std::vector<std::span<double>> ps{p};
  std::vector<std::span<const double>> gs{g};
  adam.step(ps, gs);
  adam.step(ps, gs);
  EXPECT_EQ(p, (Vector{1.0, -2.0}));
  EXPECT_EQ(adam.step_count(), 2);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  // t = 1: m_hat = g, v_hat = g^2, step = lr * g / (|g| + eps).
  Vector p{0.5};
  const Vector g{1.0};
  AdamState adam(AdamConfig{.lr = 1e-4});
  std::vector<std::span<double>> ps{p};
  std::vector<std::span<const double>> gs{g};
  adam.step(ps, gs);
  EXPECT_NEAR(p[0], 0.5 - 1e-4 * 1.0 / (1.0 + 1e-8), 1e-15);
  const double after_one = p[0];
  adam.step(ps, gs);
  EXPECT_LT(p[0], after_one);
}

TEST(Adam, RejectsShapeChanges) {
  Vector p{1.0, 2.0}, q{1.0};
  const Vector g{0.1, 0.1}, h{0.1};
  AdamState adam;
  std::vector<std::span<double>> ps{p};
  std::vector<std::span<const double>> gs{g};
  adam.step(ps, gs);
  std::vector<std::span<double>> qs{q};
  std::vector<std::span<const double>> hs{h};
  EXPECT_THROW(adam.step(qs, hs), ShapeError);
  EXPECT_EQ(adam.first_moments()[0].size(), 2u);
}

TEST(Finite, RequireFiniteThrowsNumeric) {
  EXPECT_TRUE(all_finite(Vector{1.0, 2.0}));
  EXPECT_THROW(require_finite(Vector{1.0, std::nan("")}, "x"), NumericError);
  EXPECT_THROW(require_finite(Vector{HUGE_VAL}, "x"), NumericError);
}
