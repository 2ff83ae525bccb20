#include "bronchodepth/losses.hpp"

#include <cmath>
#include <string>

#include "bronchodepth/error.hpp"

namespace bronchodepth {

const ScaleOutput& MultiScaleOutput::at_ratio(int ratio) const {
  for (const auto& s : scales) {
    if (s.ratio == ratio) return s;
  }
  throw ContractViolation("multi-scale output has no ratio " + std::to_string(ratio));
}

void MultiScaleOutput::validate() const {
  for (size_t i = 0; i < scales.size(); ++i) {
    const auto& s = scales[i];
    require(s.ratio == kScales[i], "multi-scale output must hold ratios 1,2,4,8 in order");
    require(s.depth.defined() && s.confidence.defined(),
            "multi-scale output is missing ratio " + std::to_string(kScales[i]));
    require(s.depth.dim() == 4 && s.confidence.dim() == 4, "multi-scale tensors must be rank 4");
    require(s.depth.sizes() == s.confidence.sizes(), "depth/confidence shape mismatch");
  }
}

namespace losses {
namespace {

namespace F = torch::nn::functional;

void check_pair(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  require(a.defined() && b.defined(), std::string(what) + ": undefined tensor");
  require(a.dim() == 4, std::string(what) + ": expected a rank-4 tensor");
  require(a.sizes() == b.sizes(), std::string(what) + ": shape mismatch");
}

// Mean over the batch of per-image sums.
torch::Tensor batch_mean_of_sums(const torch::Tensor& per_pixel) {
  return per_pixel.sum({1, 2, 3}).mean();
}

}  // namespace

void LossWeights::validate() const {
  require(depth >= 0.0 && gradient >= 0.0 && confidence >= 0.0, "loss weights must be >= 0");
  require(depth + gradient + confidence > 0.0, "loss weights must not all be zero");
}

GradientStep::GradientStep(int pixels) : pixels_(pixels) {
  require(pixels == 1 || pixels == 2 || pixels == 4 || pixels == 8,
          "gradient step must be one of 1, 2, 4, 8 (got " + std::to_string(pixels) + ")");
}

double berhu_threshold(const torch::Tensor& gt, const torch::Tensor& pred, double k) {
  check_pair(gt, pred, "berhu_threshold");
  require(k > 0.0, "berhu_threshold: k must be positive");
  require(gt.numel() > 0, "berhu_threshold: empty batch");
  torch::NoGradGuard no_grad;
  if (!torch::isfinite(gt).all().item<bool>() || !torch::isfinite(pred).all().item<bool>()) {
    throw Error(ErrorCategory::numeric, "berhu_threshold: non-finite depth value");
  }
  return k * (gt - pred).abs().max().item<double>();
}

torch::Tensor berhu_loss(const torch::Tensor& gt, const torch::Tensor& pred, double c) {
  check_pair(gt, pred, "berhu_loss");
  require(c >= 0.0, "berhu_loss: threshold must be >= 0");
  auto err = (gt - pred).abs();
  if (c == 0.0) return batch_mean_of_sums(err);
  auto quadratic = (err * err + c * c) / (2.0 * c);
  return batch_mean_of_sums(torch::where(err <= c, err, quadratic));
}

torch::Tensor scale_invariant_gradient(const torch::Tensor& img, GradientStep step) {
  require(img.defined() && img.dim() == 4, "scale_invariant_gradient: expected a rank-4 tensor");
  const int64_t h = step.pixels();
  const int64_t rows = img.size(2);
  const int64_t cols = img.size(3);
  require(h <= rows && h <= cols, "scale_invariant_gradient: step exceeds image side");
  using namespace torch::indexing;

  auto normalised = [](const torch::Tensor& next, const torch::Tensor& here) {
    return (next - here) / (next.abs() + here.abs() + kGradientEpsilon);
  };
  auto down = normalised(img.index({Slice(), Slice(), Slice(h, None), Slice()}),
                         img.index({Slice(), Slice(), Slice(None, rows - h), Slice()}));
  auto right = normalised(img.index({Slice(), Slice(), Slice(), Slice(h, None)}),
                          img.index({Slice(), Slice(), Slice(), Slice(None, cols - h)}));
  // pad order is (left, right, top, bottom)
  down = F::pad(down, F::PadFuncOptions({0, 0, 0, h}));
  right = F::pad(right, F::PadFuncOptions({0, h, 0, 0}));
  return torch::cat({down, right}, 1);
}

torch::Tensor gradient_loss(const torch::Tensor& gt, const torch::Tensor& pred, GradientStep step) {
  check_pair(gt, pred, "gradient_loss");
  auto diff = scale_invariant_gradient(gt, step) - scale_invariant_gradient(pred, step);
  // linalg_vector_norm has a zero subgradient at 0; border pixels are exactly 0.
  auto norm = torch::linalg_vector_norm(diff, 2, {1}, /*keepdim=*/true);
  return batch_mean_of_sums(norm);
}

torch::Tensor confidence_target(const torch::Tensor& gt, const torch::Tensor& pred) {
  check_pair(gt, pred, "confidence_target");
  torch::NoGradGuard no_grad;
  return torch::exp(-(gt - pred).abs());
}

torch::Tensor confidence_loss(const torch::Tensor& target, const torch::Tensor& pred) {
  check_pair(target, pred, "confidence_loss");
  return batch_mean_of_sums((target - pred).abs());
}

torch::Tensor upsample_to(const torch::Tensor& pred, int64_t side) {
  if (pred.size(2) == side && pred.size(3) == side) return pred;
  return F::interpolate(pred, F::InterpolateFuncOptions()
                                  .size(std::vector<int64_t>{side, side})
                                  .mode(torch::kBilinear)
                                  .align_corners(false));
}

namespace {

int64_t checked_side(const torch::Tensor& gt, const MultiScaleOutput& outputs) {
  outputs.validate();
  require(gt.defined() && gt.dim() == 4 && gt.size(1) == 1, "supervised_loss: gt must be [B,1,H,W]");
  require(gt.size(2) == gt.size(3), "supervised_loss: depth maps must be square");
  const int64_t side = gt.size(2);
  for (const auto& s : outputs.scales) {
    require(s.depth.size(0) == gt.size(0), "supervised_loss: batch size mismatch");
    require(s.depth.size(2) * s.ratio == side && s.depth.size(3) * s.ratio == side,
            "supervised_loss: ratio-" + std::to_string(s.ratio) + " output has the wrong size");
  }
  return side;
}

}  // namespace

DetachedTargets detached_targets(const torch::Tensor& gt, const MultiScaleOutput& outputs, double k) {
  const int64_t side = checked_side(gt, outputs);
  torch::NoGradGuard no_grad;
  DetachedTargets targets;
  for (size_t i = 0; i < outputs.scales.size(); ++i) {
    auto up = upsample_to(outputs.scales[i].depth, side);
    targets.thresholds[i] = berhu_threshold(gt, up, k);
    targets.confidence[i] = confidence_target(gt, up);
  }
  return targets;
}

SupervisedLoss supervised_loss(const torch::Tensor& gt, const MultiScaleOutput& outputs,
                               const LossWeights& weights, double k) {
  return supervised_loss(gt, outputs, weights, detached_targets(gt, outputs, k));
}

SupervisedLoss supervised_loss(const torch::Tensor& gt, const MultiScaleOutput& outputs,
                               const LossWeights& weights, const DetachedTargets& targets) {
  weights.validate();
  const int64_t side = checked_side(gt, outputs);
  SupervisedLoss result;
  result.total = torch::zeros({}, gt.options());
  for (size_t i = 0; i < outputs.scales.size(); ++i) {
    const auto& s = outputs.scales[i];
    auto depth = upsample_to(s.depth, side);
    auto confidence = upsample_to(s.confidence, side);
    auto& terms = result.terms[i];
    terms.ratio = s.ratio;
    terms.threshold = targets.thresholds[i];
    terms.depth = berhu_loss(gt, depth, targets.thresholds[i]);
    terms.gradient = gradient_loss(gt, depth, GradientStep(s.ratio));
    terms.confidence = confidence_loss(targets.confidence[i], confidence);
    result.total = result.total + weights.depth * terms.depth + weights.gradient * terms.gradient +
                   weights.confidence * terms.confidence;
  }
  return result;
}

torch::Tensor discriminator_loss(const torch::Tensor& real_logits, const torch::Tensor& fake_logits) {
  require(real_logits.defined() && fake_logits.defined(), "discriminator_loss: undefined logits");
  // BCE(x, 1) = softplus(-x), BCE(x, 0) = softplus(x)
  return F::softplus(-real_logits).mean() + F::softplus(fake_logits).mean();
}

torch::Tensor encoder_adversarial_loss(const torch::Tensor& fake_logits) {
  require(fake_logits.defined(), "encoder_adversarial_loss: undefined logits");
  return F::softplus(-fake_logits).mean();
}

}  // namespace losses
}  // namespace bronchodepth
