#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "l2sm/l2sm.hpp"

using namespace l2sm;
using l2sm::testing::random_tensor;

namespace {

Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  Tensor c({a.extent(0), b.extent(1)});
  for (std::size_t i = 0; i < a.extent(0); ++i)
    for (std::size_t j = 0; j < b.extent(1); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.extent(1); ++k) s += a.at(i, k) * b.at(k, j);
      c.at(i, j) = s;
    }
  return c;
}

Tensor transpose(const Tensor& a) {
  Tensor t({a.extent(1), a.extent(0)});
  for (std::size_t i = 0; i < a.extent(0); ++i)
    for (std::size_t j = 0; j < a.extent(1); ++j) t.at(j, i) = a.at(i, j);
  return t;
}

// Direct seven-loop cross-correlation.
Tensor naive_conv(const Tensor& x, const Tensor& k, std::size_t stride, std::size_t pad) {
  const std::size_t N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  const std::size_t F = k.extent(0), kh = k.extent(2), kw = k.extent(3);
  const std::size_t Ho = (H + 2 * pad - kh) / stride + 1, Wo = (W + 2 * pad - kw) / stride + 1;
  Tensor y({N, F, Ho, Wo});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t oy = 0; oy < Ho; ++oy)
        for (std::size_t ox = 0; ox < Wo; ++ox) {
          double s = 0.0;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < kh; ++i)
              for (std::size_t j = 0; j < kw; ++j) {
                const long iy = static_cast<long>(oy * stride + i) - static_cast<long>(pad);
                const long ix = static_cast<long>(ox * stride + j) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W)) continue;
                s += x.at(n, c, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)) * k.at(f, c, i, j);
              }
          y.at(n, f, oy, ox) = s;
        }
  return y;
}

void expect_near_all(const Tensor& a, const Tensor& b, double tol) {
  ASSERT_EQ(a.shape(), b.shape());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], tol) << "at " << i;
}

}  // namespace

TEST(Tensor, ShapeAndSizeAgree) {
  Tensor t({2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
  EXPECT_EQ(t.rank(), 3u);
  EXPECT_THROW(Tensor({2, 0}), ShapeError);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  EXPECT_THROW(t.reshape({5, 5}), ShapeError);
}

TEST(Rng, SameSeedSameSequence) {
  Rng a(42), b(42), c(43);
  for (int i = 0; i < 100; ++i) {
    const double x = a.uniform();
    EXPECT_EQ(x, b.uniform());
    EXPECT_GE(x, 0.0);
    EXPECT_LT(x, 1.0);
  }
  EXPECT_NE(a.next_u64(), c.next_u64());
}

TEST(Rng, StateRoundTrip) {
  Rng a(7);
  a.normal();
  Rng b(0);
  b.set_state(a.state());
  for (int i = 0; i < 20; ++i) EXPECT_EQ(a.normal(), b.normal());
}

TEST(Rng, PermutationIsBijective) {
  Rng r(3);
  auto p = r.permutation(50);
  std::sort(p.begin(), p.end());
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_EQ(p[i], i);
}

TEST(Matmul, IdentityCase) {
  const Tensor I = Tensor::matrix({{1, 0}, {0, 1}});
  const Tensor B = Tensor::matrix({{5, 6}, {7, 8}});
  EXPECT_EQ(matmul(I, B), B);
  EXPECT_EQ(matmul(B, I), B);
}

TEST(Matmul, RowTimesColumn) {
  const Tensor c = matmul(Tensor::matrix({{1, 2}}), Tensor::matrix({{3}, {4}}));
  EXPECT_EQ(c.shape(), (Shape{1, 1}));
  EXPECT_EQ(c[0], 11.0);
}

TEST(Matmul, ZeroLeftOperand) {
  Rng r(1);
  const Tensor c = matmul(Tensor({2, 2}), random_tensor({2, 5}, r));
  for (double v : c.data()) EXPECT_EQ(v, 0.0);
}

TEST(Matmul, MismatchReportsBothShapes) {
  try {
    matmul(Tensor({2, 3}), Tensor({2, 3}));
    FAIL();
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
  }
}

TEST(Matmul, MatchesNaiveOnRandomShapes) {
  Rng r(11);
  for (int t = 0; t < 40; ++t) {
    const std::size_t m = 1 + r.below(9), k = 1 + r.below(9), n = 1 + r.below(9);
    const Tensor a = random_tensor({m, k}, r), b = random_tensor({k, n}, r);
    expect_near_all(matmul(a, b), naive_matmul(a, b), 1e-12);
    expect_near_all(matmul_tn(transpose(a), b), naive_matmul(a, b), 1e-12);
    expect_near_all(matmul_nt(a, transpose(b)), naive_matmul(a, b), 1e-12);
  }
}

TEST(Matmul, IdentityIsExactOnRandomInput) {
  Rng r(5);
  const Tensor a = random_tensor({6, 6}, r);
  Tensor I({6, 6});
  for (std::size_t i = 0; i < 6; ++i) I.at(i, i) = 1.0;
  EXPECT_EQ(matmul(I, a), a);
  EXPECT_EQ(matmul(a, I), a);
}

TEST(Conv2d, OnesKernelSumsWindow) {
  const Tensor y = conv2d(Tensor({1, 1, 3, 3}, 1.0), Tensor({1, 1, 3, 3}, 1.0), 1, 0);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y[0], 9.0);
}

TEST(Conv2d, DeltaKernelIsIdentity) {
  Rng r(2);
  for (std::size_t k : {1u, 3u, 5u}) {
    const Tensor x = random_tensor({2, 3, 7, 6}, r);
    Tensor delta({3, 3, k, k});
    for (std::size_t c = 0; c < 3; ++c) delta.at(c, c, k / 2, k / 2) = 1.0;
    EXPECT_EQ(conv2d(x, delta, 1, k / 2), x);
  }
}

TEST(Conv2d, ZeroInputGivesZero) {
  Rng r(4);
  const Tensor y = conv2d(Tensor({1, 2, 5, 5}), random_tensor({3, 2, 3, 3}, r), 1, 1);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2d, NonIntegralOutputRejected) {
  EXPECT_THROW(conv2d(Tensor({1, 1, 6, 6}), Tensor({1, 1, 3, 3}), 2, 0), ShapeError);
  EXPECT_THROW(conv2d(Tensor({1, 1, 2, 2}), Tensor({1, 1, 3, 3}), 1, 0), ShapeError);
  EXPECT_THROW(conv2d(Tensor({1, 2, 5, 5}), Tensor({1, 1, 3, 3}), 1, 0), ShapeError);
}

TEST(Conv2d, MatchesDirectLoopsWithStrideAndPadding) {
  Rng r(9);
  for (int t = 0; t < 30; ++t) {
    const std::size_t k = 1 + r.below(3), stride = 1 + r.below(2), pad = r.below(2);
    std::size_t H = k + r.below(5);
    H += (H + 2 * pad - k) % stride ? stride - (H + 2 * pad - k) % stride : 0;
    const Tensor x = random_tensor({1 + r.below(3), 1 + r.below(3), H, H}, r);
    const Tensor w = random_tensor({1 + r.below(4), x.extent(1), k, k}, r);
    expect_near_all(conv2d(x, w, stride, pad), naive_conv(x, w, stride, pad), 1e-12);
  }
}

TEST(Conv2d, BackwardIsAdjointOfForward) {
  // <conv(x, w), g> == <x, dX(g)> == <w, dW(g)>
  Rng r(10);
  for (int t = 0; t < 10; ++t) {
    const Tensor x = random_tensor({2, 2, 6, 6}, r), w = random_tensor({3, 2, 3, 3}, r);
    const Tensor y = conv2d(x, w, 1, 1);
    const Tensor g = random_tensor(y.shape(), r);
    const double lhs = dot(y.data(), g.data());
    EXPECT_NEAR(lhs, dot(x.data(), conv2d_backward_input(g, w, x.shape(), 1, 1).data()), 1e-10);
    EXPECT_NEAR(lhs, dot(w.data(), conv2d_backward_kernels(x, g, w.shape(), 1, 1).data()), 1e-10);
  }
}

TEST(MaxPool, TwoByTwo) {
  const auto r = maxpool2d(Tensor({1, 1, 2, 2}, {1, 2, 3, 4}), 2, 2);
  EXPECT_EQ(r.output.size(), 1u);
  EXPECT_EQ(r.output[0], 4.0);
  EXPECT_EQ(r.argmax[0], 3u);
}

TEST(MaxPool, ConstantInputFirstIndexWins) {
  const auto r = maxpool2d(Tensor({1, 1, 4, 4}, 2.5), 2, 2);
  for (double v : r.output.data()) EXPECT_EQ(v, 2.5);
  EXPECT_EQ(r.argmax, (std::vector<std::size_t>{0, 2, 8, 10}));
}

TEST(MaxPool, IotaFourByFour) {
  Tensor x({1, 1, 4, 4});
  for (std::size_t i = 0; i < 16; ++i) x[i] = static_cast<double>(i);
  const auto r = maxpool2d(x, 2, 2);
  EXPECT_EQ(r.output.values(), (std::vector<double>{5, 7, 13, 15}));
}

TEST(MaxPool, WindowLargerThanInputRejected) {
  EXPECT_THROW(maxpool2d(Tensor({1, 1, 2, 2}), 3, 1), ShapeError);
}

TEST(MaxPool, MatchesBruteForceWindowsUpTo8x8) {
  Rng r(12);
  for (int t = 0; t < 100; ++t) {
    const std::size_t H = 1 + r.below(8), W = 1 + r.below(8);
    const std::size_t window = 1 + r.below(std::min(H, W)), stride = 1 + r.below(3);
    Tensor x = random_tensor({1 + r.below(2), 1 + r.below(3), H, W}, r);
    // Coarse values force ties.
    for (double& v : x.data()) v = std::round(v * 3.0);
    const auto got = maxpool2d(x, window, stride);
    const std::size_t Ho = (H - window) / stride + 1, Wo = (W - window) / stride + 1;
    std::size_t o = 0;
    for (std::size_t n = 0; n < x.extent(0); ++n)
      for (std::size_t c = 0; c < x.extent(1); ++c)
        for (std::size_t oy = 0; oy < Ho; ++oy)
          for (std::size_t ox = 0; ox < Wo; ++ox, ++o) {
            double best = -INFINITY;
            std::size_t best_i = 0;
            for (std::size_t dy = 0; dy < window; ++dy)
              for (std::size_t dx = 0; dx < window; ++dx) {
                const std::size_t i = ((n * x.extent(1) + c) * H + oy * stride + dy) * W + ox * stride + dx;
                if (x[i] > best) best = x[i], best_i = i;
              }
            ASSERT_EQ(got.output[o], best);
            ASSERT_EQ(got.argmax[o], best_i);
          }
  }
}

TEST(MaxPool, BackwardRoutesToArgmax) {
  Tensor x({1, 1, 2, 4}, {1, 9, 2, 3, 4, 5, 8, 7});
  const auto r = maxpool2d(x, 2, 2);
  const Tensor g = maxpool2d_backward(Tensor({1, 1, 1, 2}, {10, 20}), r.argmax, x.shape());
  EXPECT_EQ(g.values(), (std::vector<double>{0, 10, 0, 0, 0, 0, 20, 0}));
}

TEST(ReduceL2Norm, Examples) {
  EXPECT_EQ(reduce_l2_norm(Tensor::vector({3, 4}), 0)[0], 5.0);
  EXPECT_EQ(reduce_l2_norm(Tensor::vector({0, 1, 0}), 0)[0], 1.0);
  EXPECT_EQ(reduce_l2_norm(Tensor::vector({0, 0}), 0)[0], 0.0);
  const Tensor rows = reduce_l2_norm(Tensor::matrix({{3, 4}, {6, 8}}), 1);
  EXPECT_EQ(rows.values(), (std::vector<double>{5, 10}));
  const Tensor cols = reduce_l2_norm(Tensor::matrix({{3, 0}, {4, 0}}), 0);
  EXPECT_EQ(cols.values(), (std::vector<double>{5, 0}));
}

TEST(ReduceL2Norm, NonNegativeAndZeroOnlyForZero) {
  Rng r(13);
  for (int t = 0; t < 100; ++t) {
    Tensor x = random_tensor({1 + r.below(10)}, r);
    if (t % 10 == 0) x.fill(0.0);
    const double n = reduce_l2_norm(x, 0)[0];
    EXPECT_GE(n, 0.0);
    bool all_zero = true;
    for (double v : x.data()) all_zero &= v == 0.0;
    EXPECT_EQ(n == 0.0, all_zero);
  }
}

TEST(Kernels, DeterministicSingleThreaded) {
  Rng r(14);
  const Tensor x = random_tensor({4, 3, 9, 9}, r), w = random_tensor({5, 3, 3, 3}, r);
  EXPECT_EQ(conv2d(x, w, 1, 0), conv2d(x, w, 1, 0));
  const Tensor a = random_tensor({20, 30}, r), b = random_tensor({30, 10}, r);
  EXPECT_EQ(matmul(a, b), matmul(a, b));
}

TEST(Kernels, ParallelModeWithinTolerance) {
  Rng r(15);
  const Tensor x = random_tensor({6, 3, 9, 9}, r), w = random_tensor({5, 3, 3, 3}, r);
  const Tensor g = random_tensor({6, 5, 7, 7}, r);
  const Tensor y1 = conv2d(x, w, 1, 0);
  const Tensor k1 = conv2d_backward_kernels(x, g, w.shape(), 1, 0);
  set_kernel_threads(3);
  const Tensor y3 = conv2d(x, w, 1, 0);
  const Tensor k3 = conv2d_backward_kernels(x, g, w.shape(), 1, 0);
  set_kernel_threads(1);
  expect_near_all(y1, y3, 1e-9);
  expect_near_all(k1, k3, 1e-9);
}
