#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "l2sm/l2sm.hpp"

using namespace l2sm;
using namespace l2sm::testing;

TEST(SoftmaxCE, UniformLogitsGiveLogC) {
  SoftmaxCrossEntropy ce;
  const std::vector<std::size_t> labels{3};
  EXPECT_NEAR(ce.forward(Tensor({1, 10}, 0.7), labels), std::log(10.0), 1e-12);
}

TEST(SoftmaxCE, SaturatedCorrectLogit) {
  SoftmaxCrossEntropy ce;
  Tensor z({1, 5});
  z[2] = 30.0;
  EXPECT_LT(ce.forward(z, std::vector<std::size_t>{2}), 1e-9);
  const Tensor g = ce.backward();
  for (double v : g.data()) EXPECT_NEAR(v, 0.0, 1e-9);
}

TEST(SoftmaxCE, OneTwoThree) {
  SoftmaxCrossEntropy ce;
  const double expected = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0)) - 3.0;
  EXPECT_NEAR(ce.forward(Tensor::matrix({{1, 2, 3}}), std::vector<std::size_t>{2}), expected, 1e-12);
  EXPECT_NEAR(expected, 0.40761, 1e-5);
}

TEST(SoftmaxCE, TwoClassUniformGradient) {
  SoftmaxCrossEntropy ce;
  ce.forward(Tensor({1, 2}), std::vector<std::size_t>{0});
  const Tensor g = ce.backward();
  EXPECT_DOUBLE_EQ(g[0], -0.5);
  EXPECT_DOUBLE_EQ(g[1], 0.5);
}

TEST(SoftmaxCE, LabelOutOfRangeNamesIndex) {
  SoftmaxCrossEntropy ce;
  try {
    ce.forward(Tensor({3, 4}), std::vector<std::size_t>{0, 1, 4});
    FAIL();
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("index 2"), std::string::npos) << e.what();
  }
}

TEST(SoftmaxCE, BackwardBeforeForward) {
  SoftmaxCrossEntropy ce;
  EXPECT_THROW(ce.backward(), StateError);
}

TEST(SoftmaxCE, RandomInvariants) {
  Rng r(1);
  for (int t = 0; t < 200; ++t) {
    const std::size_t M = 1 + r.below(6), C = 2 + r.below(9);
    Tensor z = random_tensor({M, C}, r, -20.0, 20.0);
    std::vector<std::size_t> labels(M);
    for (auto& l : labels) l = r.below(C);
    SoftmaxCrossEntropy ce;
    const double loss = ce.forward(z, labels);
    EXPECT_GE(loss, 0.0);
    const Tensor p = ce.probabilities();
    const Tensor g = ce.backward();
    for (std::size_t m = 0; m < M; ++m) {
      double ps = 0.0, gs = 0.0;
      for (std::size_t c = 0; c < C; ++c) ps += p.at(m, c), gs += g.at(m, c);
      EXPECT_NEAR(ps, 1.0, 1e-12);
      EXPECT_NEAR(gs, 0.0, 1e-12);
    }
    // Shift invariance.
    Tensor shifted = z;
    for (std::size_t m = 0; m < M; ++m) {
      const double c = r.uniform(-100.0, 100.0);
      for (double& v : shifted.row(m)) v += c;
    }
    SoftmaxCrossEntropy ce2;
    EXPECT_NEAR(ce2.forward(shifted, labels), loss, 1e-9);
    // Raising the true-class logit lowers the loss.
    Tensor raised = z;
    raised.at(0, labels[0]) += r.uniform(0.1, 5.0);
    SoftmaxCrossEntropy ce3;
    EXPECT_LE(ce3.forward(raised, labels), loss);
  }
}

TEST(SoftmaxCE, FiniteForHugeLogits) {
  SoftmaxCrossEntropy ce;
  const double loss = ce.forward(Tensor::matrix({{1e4, -1e4, 0}, {-1e4, 1e4, 5e3}}), std::vector<std::size_t>{1, 0});
  EXPECT_TRUE(std::isfinite(loss));
  EXPECT_TRUE(all_finite(ce.backward()));
}

TEST(SoftmaxCE, GradientMatchesFiniteDifferences) {
  Rng r(2);
  for (int t = 0; t < 20; ++t) {
    const std::size_t M = 1 + r.below(5), C = 2 + r.below(8);
    std::vector<std::size_t> labels(M);
    for (auto& l : labels) l = r.below(C);
    const auto rep = check_softmax_ce(random_tensor({M, C}, r, -3.0, 3.0), labels);
    EXPECT_LT(rep.max_rel, kRelTol) << rep.worst;
  }
}
