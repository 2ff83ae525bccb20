#include <gtest/gtest.h>

#include "bronchodepth/error.hpp"
#include "bronchodepth/losses.hpp"
#include "support.hpp"

using namespace bronchodepth;
using namespace bronchodepth::losses;
using testsupport::fd_gradient_error;
using testsupport::relative_error;

namespace {

torch::Tensor t4(std::vector<double> v, int64_t rows, int64_t cols) {
  return torch::tensor(v, torch::kDouble).view({1, 1, rows, cols});
}

}  // namespace

TEST(Berhu, LinearBelowThresholdQuadraticAbove) {
  auto gt = t4({0.0, 0.0}, 1, 2);
  // |e| = 0.1 (linear) and 0.5 (quadratic) with c = 0.2
  auto pred = t4({0.1, 0.5}, 1, 2);
  const double expected = 0.1 + (0.25 + 0.04) / 0.4;
  EXPECT_NEAR(berhu_loss(gt, pred, 0.2).item<double>(), expected, 1e-12);
}

TEST(Berhu, ThresholdIsKTimesBatchMaximum) {
  auto gt = torch::zeros({2, 1, 2, 2}, torch::kDouble);
  auto pred = torch::zeros({2, 1, 2, 2}, torch::kDouble);
  pred[1][0][1][0] = -5.0;
  pred[0][0][0][0] = 3.0;
  EXPECT_DOUBLE_EQ(berhu_threshold(gt, pred), 1.0);
  EXPECT_DOUBLE_EQ(berhu_threshold(gt, pred, 0.5), 2.5);
}

TEST(Berhu, ZeroThresholdFallsBackToL1) {
  auto gt = t4({1.0, 2.0, 3.0, 4.0}, 2, 2);
  EXPECT_DOUBLE_EQ(berhu_threshold(gt, gt), 0.0);
  EXPECT_DOUBLE_EQ(berhu_loss(gt, gt, 0.0).item<double>(), 0.0);
  auto pred = t4({1.5, 2.0, 2.0, 4.0}, 2, 2);
  EXPECT_DOUBLE_EQ(berhu_loss(gt, pred, 0.0).item<double>(), 1.5);
}

TEST(Berhu, NonFiniteInputIsANumericError) {
  auto gt = t4({1.0, std::nan("")}, 1, 2);
  try {
    berhu_threshold(gt, torch::zeros_like(gt));
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.category(), ErrorCategory::numeric);
  }
}

TEST(Berhu, BatchReductionIsMeanOfPerImageSums) {
  auto gt = torch::zeros({2, 1, 1, 2}, torch::kDouble);
  auto pred = torch::tensor({0.1, 0.1, 0.3, 0.0}, torch::kDouble).view({2, 1, 1, 2});
  EXPECT_NEAR(berhu_loss(gt, pred, 1.0).item<double>(), (0.2 + 0.3) / 2.0, 1e-12);
}

TEST(Berhu, ContinuousWithContinuousSlopeAtThreshold) {
  const double c = 0.2;
  auto value = [&](double x) { return berhu_loss(t4({0.0}, 1, 1), t4({x}, 1, 1), c).item<double>(); };
  auto slope = [&](double x) {
    auto p = t4({x}, 1, 1).requires_grad_(true);
    berhu_loss(t4({0.0}, 1, 1), p, c).backward();
    return p.grad().item<double>();
  };
  EXPECT_LT(std::abs(value(c + 1e-7) - value(c - 1e-7)), 1e-6);
  EXPECT_LT(std::abs(slope(c + 1e-7) - slope(c - 1e-7)), 1e-6);
}

TEST(GradientStepTest, OnlyPowersOfTwoUpToEight) {
  for (int h : {1, 2, 4, 8}) EXPECT_EQ(GradientStep(h).pixels(), h);
  for (int h : {0, 3, 16, -1}) EXPECT_THROW(GradientStep{h}, ContractViolation);
}

TEST(ScaleInvariantGradient, RowAndColumnChannels) {
  // [[1, 2], [3, 5]]
  auto img = t4({1.0, 2.0, 3.0, 5.0}, 2, 2);
  auto g = scale_invariant_gradient(img, GradientStep(1));
  ASSERT_EQ(g.sizes(), (std::vector<int64_t>{1, 2, 2, 2}));
  const double eps = kGradientEpsilon;
  EXPECT_NEAR(g[0][0][0][0].item<double>(), 2.0 / (4.0 + eps), 1e-15);  // rows: 3 vs 1
  EXPECT_NEAR(g[0][0][0][1].item<double>(), 3.0 / (7.0 + eps), 1e-15);  // rows: 5 vs 2
  EXPECT_EQ(g[0][0][1][0].item<double>(), 0.0);
  EXPECT_NEAR(g[0][1][0][0].item<double>(), 1.0 / (3.0 + eps), 1e-15);  // cols: 2 vs 1
  EXPECT_NEAR(g[0][1][1][0].item<double>(), 2.0 / (8.0 + eps), 1e-15);  // cols: 5 vs 3
  EXPECT_EQ(g[0][1][0][1].item<double>(), 0.0);
}

TEST(ScaleInvariantGradient, OneByTwoExample) {
  auto img = t4({1.0, 3.0}, 1, 2);
  auto g = scale_invariant_gradient(img, GradientStep(1));
  EXPECT_NEAR(g[0][1][0][0].item<double>(), 0.5, 1e-8);
  EXPECT_EQ(g[0][0][0][0].item<double>(), 0.0);
}

TEST(ScaleInvariantGradient, StepLargerThanImageRejected) {
  auto img = torch::ones({1, 1, 4, 4}, torch::kDouble);
  EXPECT_THROW(scale_invariant_gradient(img, GradientStep(8)), ContractViolation);
  // a step equal to the side leaves every neighbour outside the image
  auto g = scale_invariant_gradient(img, GradientStep(4));
  EXPECT_EQ(g.abs().sum().item<double>(), 0.0);
}

TEST(ScaleInvariantGradient, IdenticalMapsGiveZeroLoss) {
  auto d = 1.0 + torch::rand({2, 1, 8, 8}, torch::kDouble);
  EXPECT_EQ(gradient_loss(d, d, GradientStep(2)).item<double>(), 0.0);
}

TEST(ScaleInvariantGradient, InvariantToGlobalScale) {
  torch::manual_seed(3);
  for (double s : {0.5, 2.0, 10.0}) {
    auto d = 0.5 + torch::rand({4, 1, 16, 16}, torch::kDouble) * 30.0;
    for (int h : {1, 2, 4, 8}) EXPECT_LT(gradient_loss(d, s * d, GradientStep(h)).item<double>(), 1e-6);
  }
}

TEST(Confidence, TargetIsDetachedExponential) {
  auto gt = t4({2.0}, 1, 1);
  auto pred = t4({1.0}, 1, 1).requires_grad_(true);
  auto c = confidence_target(gt, pred);
  EXPECT_FALSE(c.requires_grad());
  EXPECT_NEAR(c.item<double>(), std::exp(-1.0), 1e-15);
  EXPECT_NEAR(confidence_loss(c, t4({0.5}, 1, 1)).item<double>(), std::abs(std::exp(-1.0) - 0.5), 1e-15);
}

TEST(Weights, Validation) {
  LossWeights w;
  EXPECT_NO_THROW(w.validate());
  w.gradient = -1;
  EXPECT_THROW(w.validate(), ContractViolation);
  EXPECT_THROW((LossWeights{0, 0, 0}.validate()), ContractViolation);
}

TEST(Supervised, MatchesStraightLineOracle) {
  torch::manual_seed(11);
  for (int fixture = 0; fixture < 20; ++fixture) {
    auto gt = 1.0 + 40.0 * torch::rand({4, 1, 8, 8}, torch::kDouble);
    auto out = testsupport::random_outputs(4, 8, torch::kDouble, 1.0, 40.0);
    const LossWeights w{1.0, 0.5, 0.5};
    auto loss = supervised_loss(gt, out, w);
    auto oracle = testsupport::oracle_supervised(gt, out, 1.0, 0.5, 0.5, kBerhuK);
    EXPECT_LT(relative_error(loss.total.item<double>(), oracle.total), 1e-6);
    for (int s = 0; s < 4; ++s) {
      EXPECT_LT(relative_error(loss.terms[s].depth.item<double>(), oracle.scales[s].depth), 1e-6);
      EXPECT_LT(relative_error(loss.terms[s].gradient.item<double>(), oracle.scales[s].gradient), 1e-6);
      EXPECT_LT(relative_error(loss.terms[s].confidence.item<double>(), oracle.scales[s].confidence), 1e-6);
      EXPECT_LT(relative_error(loss.terms[s].threshold, oracle.scales[s].threshold), 1e-12);
    }
  }
}

TEST(Supervised, FloatMatchesOracleToo) {
  torch::manual_seed(12);
  auto gt = 1.0 + 40.0 * torch::rand({4, 1, 8, 8});
  auto out = testsupport::random_outputs(4, 8, torch::kFloat, 1.0, 40.0);
  auto loss = supervised_loss(gt, out, LossWeights{});
  auto oracle = testsupport::oracle_supervised(gt, out, 1.0, 0.5, 0.5, kBerhuK);
  EXPECT_LT(relative_error(loss.total.item<double>(), oracle.total), 1e-5);
}

TEST(Supervised, RejectsMisshapenOutputs) {
  auto gt = torch::ones({2, 1, 8, 8});
  auto out = testsupport::random_outputs(2, 8, torch::kFloat);
  std::swap(out.scales[1], out.scales[2]);
  EXPECT_THROW(supervised_loss(gt, out, LossWeights{}), ContractViolation);
  auto wrong_batch = testsupport::random_outputs(3, 8, torch::kFloat);
  EXPECT_THROW(supervised_loss(gt, wrong_batch, LossWeights{}), ContractViolation);
}

TEST(Adversarial, KnownValues) {
  auto zero = torch::zeros({2, 1, 2, 2}, torch::kDouble);
  EXPECT_NEAR(discriminator_loss(zero, zero).item<double>(), 2.0 * std::log(2.0), 1e-12);
  EXPECT_NEAR(encoder_adversarial_loss(zero).item<double>(), std::log(2.0), 1e-12);
  // confident, correct discriminator
  EXPECT_LT(discriminator_loss(torch::full({1, 1, 2, 2}, 20.0), torch::full({1, 1, 2, 2}, -20.0)).item<double>(),
            1e-8);
}

// ------------------------------------------------------------- gradients

TEST(FiniteDifference, Berhu) {
  torch::manual_seed(21);
  auto gt = 10.0 * torch::rand({2, 1, 6, 6}, torch::kDouble);
  auto pred = 10.0 * torch::rand({2, 1, 6, 6}, torch::kDouble);
  const double c = berhu_threshold(gt, pred);
  EXPECT_LT(fd_gradient_error([&](const torch::Tensor& p) { return berhu_loss(gt, p, c); }, pred), 1e-4);
}

TEST(FiniteDifference, Gradient) {
  torch::manual_seed(22);
  auto gt = 1.0 + 10.0 * torch::rand({2, 1, 8, 8}, torch::kDouble);
  auto pred = 1.0 + 10.0 * torch::rand({2, 1, 8, 8}, torch::kDouble);
  for (int h : {1, 2, 4, 8}) {
    EXPECT_LT(fd_gradient_error([&](const torch::Tensor& p) { return gradient_loss(gt, p, GradientStep(h)); }, pred),
              1e-4)
        << "h=" << h;
  }
}

TEST(FiniteDifference, Confidence) {
  torch::manual_seed(23);
  auto target = torch::rand({2, 1, 6, 6}, torch::kDouble);
  auto pred = torch::rand({2, 1, 6, 6}, torch::kDouble);
  EXPECT_LT(fd_gradient_error([&](const torch::Tensor& p) { return confidence_loss(target, p); }, pred), 1e-4);
}

TEST(FiniteDifference, SupervisedAllScales) {
  torch::manual_seed(24);
  auto gt = 1.0 + 20.0 * torch::rand({2, 1, 8, 8}, torch::kDouble);
  auto base = testsupport::random_outputs(2, 8, torch::kDouble, 1.0, 20.0);
  const auto targets = detached_targets(gt, base);
  for (size_t s = 0; s < 4; ++s) {
    for (bool confidence : {false, true}) {
      auto f = [&](const torch::Tensor& x) {
        auto out = base;
        (confidence ? out.scales[s].confidence : out.scales[s].depth) = x;
        return supervised_loss(gt, out, LossWeights{}, targets).total;
      };
      auto x = confidence ? base.scales[s].confidence : base.scales[s].depth;
      EXPECT_LT(fd_gradient_error(f, x), 1e-4) << "scale " << s << (confidence ? " confidence" : " depth");
    }
  }
}

TEST(FiniteDifference, AdversarialLosses) {
  torch::manual_seed(25);
  auto real = torch::randn({2, 1, 3, 3}, torch::kDouble);
  auto fake = torch::randn({2, 1, 3, 3}, torch::kDouble);
  EXPECT_LT(fd_gradient_error([&](const torch::Tensor& x) { return discriminator_loss(x, fake); }, real), 1e-4);
  EXPECT_LT(fd_gradient_error([&](const torch::Tensor& x) { return discriminator_loss(real, x); }, fake), 1e-4);
  EXPECT_LT(fd_gradient_error([&](const torch::Tensor& x) { return encoder_adversarial_loss(x); }, fake), 1e-4);
}
