#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "gradcheck.hpp"
#include "pudnet/ops.hpp"

using namespace pudnet;
using pudnet::testing::gradcheck;
using pudnet::testing::random_tensor;

namespace {

constexpr double kTol = 1e-4;

// Reduces a tensor to a scalar with fixed random weights, so every output
// element contributes a distinct coefficient to the checked gradient.
Tensord weighted_sum(const Tensord& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  return ops::sum(ops::mul(y, random_tensor(y.shape(), rng)));
}

std::vector<double> naive_conv(const Tensord& x, const Tensord& w, std::size_t stride, std::size_t pad) {
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = w.dim(0), K = w.dim(2);
  const std::size_t Ho = (H + 2 * pad - K) / stride + 1, Wo = (W + 2 * pad - K) / stride + 1;
  std::vector<double> out(B * O * Ho * Wo, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          double acc = 0.0;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t ki = 0; ki < K; ++ki)
              for (std::size_t kj = 0; kj < K; ++kj) {
                const long r = static_cast<long>(i * stride + ki) - static_cast<long>(pad);
                const long q = static_cast<long>(j * stride + kj) - static_cast<long>(pad);
                if (r < 0 || q < 0 || r >= static_cast<long>(H) || q >= static_cast<long>(W)) continue;
                acc += x.data()[((b * C + c) * H + r) * W + q] * w.data()[((o * C + c) * K + ki) * K + kj];
              }
          out[((b * O + o) * Ho + i) * Wo + j] = acc;
        }
  return out;
}

}  // namespace

TEST(Matmul, Examples) {
  Tensord I({2, 2}, {1, 0, 0, 1}), v({2, 1}, {3, 4});
  EXPECT_EQ(ops::matmul(I, v).data()[1], 4.0);
  Tensord a({1, 2}, {1, 2});
  EXPECT_EQ(ops::matmul(a, v).item(), 11.0);
  EXPECT_THROW(ops::matmul(v, v), DimensionError);
}

TEST(Matmul, SumGradientIsOnesTimesBTransposed) {
  Rng rng(1);
  auto a = random_tensor({4, 5}, rng), b = random_tensor({5, 3}, rng);
  a.set_requires_grad(true);
  GradTape<double> tape;
  {
    TapeScope<double> scope(tape);
    backward(ops::sum(ops::matmul(a, b)));
  }
  const auto g = a.grad();
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t k = 0; k < 5; ++k) {
      double row = 0.0;
      for (std::size_t j = 0; j < 3; ++j) row += b.data()[k * 3 + j];
      EXPECT_NEAR(g[i * 5 + k], row, 1e-12);
    }
  auto r = gradcheck({&a, &b}, [&] { return weighted_sum(ops::matmul(a, b)); });
  EXPECT_LT(r.max_rel_error, kTol) << r.worst;
}

TEST(Transpose, Gradient) {
  Rng rng(2);
  auto a = random_tensor({3, 4}, rng);
  EXPECT_EQ(ops::transpose(a).shape(), (Shape{4, 3}));
  EXPECT_EQ(ops::transpose(a).data()[1], a.data()[4]);
  EXPECT_LT(gradcheck({&a}, [&] { return weighted_sum(ops::transpose(a)); }).max_rel_error, kTol);
}

TEST(Conv2d, OnesTimesScalarKernel) {
  auto x = Tensord::full({1, 1, 3, 3}, 1.0);
  Tensord w({1, 1, 1, 1}, {2.0});
  auto y = ops::conv2d(x, w, 1, 0);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
  for (double v : y.data()) EXPECT_EQ(v, 2.0);
}

TEST(Conv2d, ImpulseReproducesFlippedKernel) {
  std::vector<double> xv(25, 0.0);
  xv[12] = 1.0;  // centre of 5×5
  Tensord x({1, 1, 5, 5}, xv);
  Tensord w({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  auto y = ops::conv2d(x, w, 1, 1);
  // correlation: y[2+di][2+dj] = w[1-di][1-dj]
  for (int di = -1; di <= 1; ++di)
    for (int dj = -1; dj <= 1; ++dj)
      EXPECT_EQ(y.data()[(2 + di) * 5 + (2 + dj)], w.data()[(1 - di) * 3 + (1 - dj)]);
}

TEST(Conv2d, MatchesNaiveLoop) {
  Rng rng(3);
  for (std::size_t stride : {1u, 2u})
    for (std::size_t pad : {0u, 1u, 2u}) {
      auto x = random_tensor({2, 3, 8, 8}, rng);
      auto w = random_tensor({4, 3, 3, 3}, rng);
      auto y = ops::conv2d(x, w, stride, pad);
      const auto ref = naive_conv(x, w, stride, pad);
      ASSERT_EQ(y.numel(), ref.size());
      EXPECT_EQ(y.dim(2), (8 + 2 * pad - 3) / stride + 1);
      for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_NEAR(y.data()[i], ref[i], 1e-10);
    }
}

TEST(Conv2d, Errors) {
  auto x = Tensord::zeros({1, 2, 4, 4});
  EXPECT_THROW(ops::conv2d(x, Tensord::zeros({1, 3, 3, 3}), 1, 1), DimensionError);
  EXPECT_THROW(ops::conv2d(x, Tensord::zeros({1, 2, 7, 7}), 1, 1), DimensionError);
  EXPECT_ANY_THROW(ops::conv2d(x, Tensord::zeros({1, 2, 3, 3}), 0, 1));
}

TEST(Conv2d, Gradient) {
  Rng rng(4);
  auto x = random_tensor({2, 2, 5, 5}, rng), w = random_tensor({3, 2, 3, 3}, rng);
  for (std::size_t stride : {1u, 2u}) {
    auto r = gradcheck({&x, &w}, [&] { return weighted_sum(ops::conv2d(x, w, stride, 1)); });
    EXPECT_LT(r.max_rel_error, kTol) << "stride " << stride << " " << r.worst;
  }
}

TEST(Pointwise, Examples) {
  EXPECT_EQ(ops::sigmoid(Tensord::scalar(0.0)).item(), 0.5);
  EXPECT_EQ(ops::tanh(Tensord::scalar(0.0)).item(), 0.0);
  EXPECT_NEAR(ops::leaky_relu(Tensord::scalar(-1.0), 0.01).item(), -0.01, 1e-15);
  EXPECT_EQ(ops::leaky_relu(Tensord::scalar(2.0), 0.01).item(), 2.0);
}

TEST(Pointwise, SigmoidSaturatesWithoutOverflow) {
  Tensord x({2}, {-800.0, 800.0});
  auto y = ops::sigmoid(x);
  EXPECT_GE(y.data()[0], 0.0);
  EXPECT_LE(y.data()[1], 1.0);
}

TEST(Pointwise, Gradients) {
  Rng rng(5);
  auto x = random_tensor({3, 4}, rng, -2.0, 2.0);
  auto pos = random_tensor({3, 4}, rng, 0.5, 2.0);
  EXPECT_LT(gradcheck({&x}, [&] { return weighted_sum(ops::sigmoid(x)); }).max_rel_error, kTol);
  EXPECT_LT(gradcheck({&x}, [&] { return weighted_sum(ops::tanh(x)); }).max_rel_error, kTol);
  EXPECT_LT(gradcheck({&x}, [&] { return weighted_sum(ops::leaky_relu(x, 0.1)); }).max_rel_error, kTol);
  EXPECT_LT(gradcheck({&pos}, [&] { return weighted_sum(ops::log(pos)); }).max_rel_error, kTol);
  EXPECT_LT(gradcheck({&x}, [&] { return weighted_sum(ops::scale(x, -1.7)); }).max_rel_error, kTol);
  EXPECT_LT(gradcheck({&x}, [&] { return weighted_sum(ops::add_scalar(x, 0.3)); }).max_rel_error, kTol);
}

TEST(Broadcast, ShapesAndErrors) {
  auto a = Tensord::full({2, 3}, 1.0);
  Tensord row({3}, {1, 2, 3});
  EXPECT_EQ(ops::add(a, row).data()[5], 4.0);
  EXPECT_EQ(ops::mul(row, a).shape(), (Shape{2, 3}));
  EXPECT_THROW(ops::add(a, Tensord::zeros({2})), DimensionError);
  EXPECT_THROW(ops::mul(a, Tensord::zeros({3, 3})), DimensionError);
}

TEST(Broadcast, Gradients) {
  Rng rng(6);
  auto a = random_tensor({2, 3, 4}, rng), b = random_tensor({3, 1}, rng), c = random_tensor({4}, rng);
  EXPECT_LT(gradcheck({&a, &b}, [&] { return weighted_sum(ops::add(a, b)); }).max_rel_error, kTol);
  EXPECT_LT(gradcheck({&a, &b}, [&] { return weighted_sum(ops::sub(a, b)); }).max_rel_error, kTol);
  EXPECT_LT(gradcheck({&a, &c}, [&] { return weighted_sum(ops::mul(a, c)); }).max_rel_error, kTol);
}

TEST(Structural, ReshapeConcatGather) {
  Rng rng(7);
  auto a = random_tensor({2, 3}, rng), b = random_tensor({2, 2}, rng), c = random_tensor({1, 3}, rng);
  EXPECT_THROW(ops::reshape(a, {4}), DimensionError);
  EXPECT_EQ(ops::concat<double>({a, b}, 1).shape(), (Shape{2, 5}));
  EXPECT_EQ(ops::concat<double>({a, c}, 0).shape(), (Shape{3, 3}));
  EXPECT_THROW(ops::concat<double>({a, b}, 0), DimensionError);
  const std::vector<std::size_t> rows{1, 1, 0};
  auto g = ops::gather_rows(a, rows);
  EXPECT_EQ(g.data()[0], a.data()[3]);
  const std::vector<std::size_t> bad{2};
  EXPECT_THROW(ops::gather_rows(a, bad), IndexError);

  EXPECT_LT(gradcheck({&a}, [&] { return weighted_sum(ops::reshape(a, {3, 2})); }).max_rel_error, kTol);
  EXPECT_LT(gradcheck({&a, &b}, [&] { return weighted_sum(ops::concat<double>({a, b}, 1)); }).max_rel_error, kTol);
  EXPECT_LT(gradcheck({&a, &c}, [&] { return weighted_sum(ops::concat<double>({a, c}, 0)); }).max_rel_error, kTol);
  EXPECT_LT(gradcheck({&a}, [&] { return weighted_sum(ops::gather_rows(a, rows)); }).max_rel_error, kTol);
}

TEST(Reductions, ValuesAndGradients) {
  Tensord a({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(ops::sum(a).item(), 21.0);
  EXPECT_EQ(ops::mean(a).item(), 3.5);
  EXPECT_EQ(ops::sum(a, 0).data()[2], 9.0);
  EXPECT_EQ(ops::mean(a, 1).data()[1], 5.0);
  EXPECT_THROW(ops::sum(a, 2), DimensionError);
  Rng rng(8);
  auto x = random_tensor({2, 3, 4}, rng);
  for (std::size_t axis = 0; axis < 3; ++axis) {
    EXPECT_LT(gradcheck({&x}, [&] { return weighted_sum(ops::sum(x, axis)); }).max_rel_error, kTol);
    EXPECT_LT(gradcheck({&x}, [&] { return weighted_sum(ops::mean(x, axis)); }).max_rel_error, kTol);
  }
  EXPECT_LT(gradcheck({&x}, [&] { return ops::mean(ops::mul(x, x)); }).max_rel_error, kTol);
}

TEST(Pooling, ValuesAndGradients) {
  Tensord x({1, 1, 3, 4}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12});
  auto p = ops::avg_pool2d(x, 2);
  EXPECT_EQ(p.shape(), (Shape{1, 1, 1, 2}));
  EXPECT_EQ(p.data()[0], 3.5);
  EXPECT_EQ(ops::global_avg_pool(x).item(), 6.5);
  Rng rng(9);
  auto y = random_tensor({2, 3, 5, 4}, rng);
  EXPECT_LT(gradcheck({&y}, [&] { return weighted_sum(ops::avg_pool2d(y, 2)); }).max_rel_error, kTol);
  EXPECT_LT(gradcheck({&y}, [&] { return weighted_sum(ops::global_avg_pool(y)); }).max_rel_error, kTol);
}

TEST(Normalisation, InstanceNormStandardises) {
  Rng rng(10);
  auto x = random_tensor({2, 3, 4, 4}, rng, -3.0, 5.0);
  auto y = ops::instance_norm(x, 0.0);
  for (std::size_t s = 0; s < 6; ++s) {
    double m = 0, v = 0;
    for (std::size_t i = 0; i < 16; ++i) m += y.data()[s * 16 + i];
    m /= 16;
    for (std::size_t i = 0; i < 16; ++i) v += std::pow(y.data()[s * 16 + i] - m, 2);
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v / 16, 1.0, 1e-9);
  }
  EXPECT_LT(gradcheck({&x}, [&] { return weighted_sum(ops::instance_norm(x)); }).max_rel_error, kTol);
}

TEST(Normalisation, BatchNorm) {
  Rng rng(11);
  auto x = random_tensor({3, 2, 3, 3}, rng, -2.0, 3.0);
  auto g = random_tensor({2}, rng, 0.5, 1.5), b = random_tensor({2}, rng);
  auto r = ops::batch_norm_train(x, g, b);
  ASSERT_EQ(r.batch_mean.size(), 2u);
  double m0 = 0;
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t i = 0; i < 9; ++i) m0 += x.data()[(n * 2) * 9 + i];
  EXPECT_NEAR(r.batch_mean[0], m0 / 27, 1e-12);
  // eval with the batch statistics reproduces the train output
  auto e = ops::batch_norm_eval<double>(x, g, b, r.batch_mean, r.batch_var);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(e.data()[i], r.y.data()[i], 1e-12);
  EXPECT_LT(gradcheck({&x, &g, &b}, [&] { return weighted_sum(ops::batch_norm_train(x, g, b).y); }).max_rel_error,
            kTol);
  EXPECT_LT(gradcheck({&x, &g, &b},
                      [&] { return weighted_sum(ops::batch_norm_eval<double>(x, g, b, r.batch_mean, r.batch_var)); })
                .max_rel_error,
            kTol);
}

TEST(SoftmaxCrossEntropy, Examples) {
  const std::vector<std::size_t> l0{0};
  EXPECT_NEAR(ops::softmax_cross_entropy(Tensord({1, 2}, {0, 0}), l0).item(), std::log(2.0), 1e-12);
  EXPECT_NEAR(ops::softmax_cross_entropy(Tensord({1, 2}, {1000, 0}), l0).item(), 0.0, 1e-12);
  const std::vector<std::size_t> bad{2};
  EXPECT_THROW(ops::softmax_cross_entropy(Tensord({1, 2}, {0, 0}), bad), IndexError);
}

TEST(SoftmaxCrossEntropy, TranslationInvariant) {
  Rng rng(12);
  const std::vector<std::size_t> labels{0, 3, 1};
  for (int trial = 0; trial < 20; ++trial) {
    auto z = random_tensor({3, 4}, rng, -5.0, 5.0);
    const double c = rng.uniform(-50.0, 50.0);
    EXPECT_NEAR(ops::softmax_cross_entropy(z, labels).item(),
                ops::softmax_cross_entropy(ops::add_scalar(z, c), labels).item(), 1e-9);
  }
}

TEST(SoftmaxCrossEntropy, GradientMatchesClosedFormAndDifferences) {
  Rng rng(13);
  auto z = random_tensor({3, 4}, rng, -2.0, 2.0);
  const std::vector<std::size_t> labels{2, 0, 3};
  auto r = gradcheck({&z}, [&] { return ops::softmax_cross_entropy(z, labels); });
  EXPECT_LT(r.max_rel_error, kTol);
  z.set_requires_grad(true);
  {
    GradTape<double> tape;
    TapeScope<double> scope(tape);
    backward(ops::softmax_cross_entropy(z, labels));
  }
  auto p = ops::softmax(z.detach());
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t c = 0; c < 4; ++c)
      EXPECT_NEAR(z.grad()[b * 4 + c], (p.data()[b * 4 + c] - (c == labels[b] ? 1.0 : 0.0)) / 3.0, 1e-12);
}

TEST(Softmax, RowsSumToOneAndGradients) {
  Rng rng(14);
  auto z = random_tensor({3, 5}, rng, -3.0, 3.0);
  auto p = ops::softmax(z);
  for (std::size_t b = 0; b < 3; ++b) {
    double s = 0;
    for (std::size_t c = 0; c < 5; ++c) s += p.data()[b * 5 + c];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  EXPECT_LT(gradcheck({&z}, [&] { return weighted_sum(ops::softmax(z)); }).max_rel_error, kTol);
  EXPECT_LT(gradcheck({&z}, [&] { return weighted_sum(ops::log_softmax(z)); }).max_rel_error, kTol);
}

TEST(Cosine, Examples) {
  Tensord a({3}, {1, 2, 3});
  // the 1e-8 added to each norm shifts exact values by ~1e-8
  EXPECT_NEAR(ops::cosine_similarity(a, a).item(), 1.0, 1e-7);
  EXPECT_NEAR(ops::cosine_similarity(Tensord({2}, {1, 0}), Tensord({2}, {0, 1})).item(), 0.0, 1e-15);
  EXPECT_NEAR(ops::cosine_similarity(Tensord({2}, {1, 1}), Tensord({2}, {-1, -1})).item(), -1.0, 1e-7);
  EXPECT_EQ(ops::cosine_similarity(Tensord({2}, {0, 0}), Tensord({2}, {1, 1})).item(), 0.0);
  EXPECT_THROW(ops::cosine_similarity(a, Tensord({2}, {1, 1})), DimensionError);
}

TEST(Cosine, AlwaysBounded) {
  Rng rng(15);
  for (int t = 0; t < 500; ++t) {
    const double s = std::pow(10.0, rng.uniform(-6.0, 6.0));
    auto a = random_tensor({6}, rng, -s, s), b = random_tensor({6}, rng, -s, s);
    const double c = ops::cosine_similarity(a, b).item();
    EXPECT_GE(c, -1.0 - 1e-9);
    EXPECT_LE(c, 1.0 + 1e-9);
  }
}

TEST(Cosine, Gradients) {
  Rng rng(16);
  auto a = random_tensor({5}, rng), b = random_tensor({5}, rng);
  auto A = random_tensor({3, 5}, rng), B = random_tensor({4, 5}, rng);
  EXPECT_LT(gradcheck({&a, &b}, [&] { return ops::cosine_similarity(a, b); }).max_rel_error, kTol);
  EXPECT_LT(gradcheck({&A, &B}, [&] { return weighted_sum(ops::cosine_matrix(A, B)); }).max_rel_error, kTol);
  EXPECT_LT(gradcheck({&A}, [&] { return weighted_sum(ops::l2_normalize(A)); }).max_rel_error, kTol);
  auto m = ops::cosine_matrix(A, B);
  EXPECT_NEAR(m.data()[1 * 4 + 2],
              ops::cosine_similarity(ops::reshape(ops::gather_rows(A, std::vector<std::size_t>{1}), {5}),
                                     ops::reshape(ops::gather_rows(B, std::vector<std::size_t>{2}), {5}))
                  .item(),
              1e-12);
}

TEST(KlDivPadded, ZeroWhenEqualAndNonNegative) {
  Rng rng(17);
  const std::vector<std::size_t> cols{4, 1, 2};
  auto p = ops::softmax(random_tensor({2, 3}, rng, -2.0, 2.0));
  // q = p scattered into 6 columns, zeros elsewhere
  std::vector<double> qv(12, 0.0);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t k = 0; k < 3; ++k) qv[b * 6 + cols[k]] = p.data()[b * 3 + k];
  EXPECT_NEAR(ops::kl_div_padded(Tensord({2, 6}, qv), p, cols).item(), 0.0, 1e-6);
  for (int t = 0; t < 50; ++t) {
    auto q = ops::softmax(random_tensor({2, 6}, rng, -4.0, 4.0));
    auto pp = ops::softmax(random_tensor({2, 3}, rng, -4.0, 4.0));
    EXPECT_GE(ops::kl_div_padded(q, pp, cols).item(), -1e-6);
  }
  EXPECT_THROW(ops::kl_div_padded(Tensord::full({2, 6}, 0.5), p, cols), ContractError);
  const std::vector<std::size_t> bad{0, 1, 6};
  EXPECT_THROW(ops::kl_div_padded(ops::softmax(random_tensor({2, 6}, rng)), p, bad), IndexError);
}

TEST(KlDivPadded, Gradient) {
  Rng rng(18);
  const std::vector<std::size_t> cols{0, 3};
  auto zq = random_tensor({3, 4}, rng), zp = random_tensor({3, 2}, rng);
  auto r = gradcheck({&zq, &zp}, [&] { return ops::kl_div_padded(ops::softmax(zq), ops::softmax(zp), cols, 1e-3); });
  EXPECT_LT(r.max_rel_error, kTol) << r.worst;
}
