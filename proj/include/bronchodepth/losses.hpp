#pragma once

#include <array>
#include <torch/torch.h>

#include "bronchodepth/multiscale.hpp"

// Supervised and adversarial objectives. All functions are pure: inputs are
// rank-4 [batch, channels, height, width] tensors (float or double) and every
// per-image pixel sum is reduced over the batch with a mean.
namespace bronchodepth::losses {

inline constexpr double kBerhuK = 0.2;
inline constexpr double kGradientEpsilon = 1e-8;

struct LossWeights {
  double depth = 1.0;
  double gradient = 0.5;
  double confidence = 0.5;

  void validate() const;
};

/// Pixel step of the finite-difference operator; one of 1, 2, 4, 8.
class GradientStep {
 public:
  explicit GradientStep(int pixels);
  int pixels() const noexcept { return pixels_; }

 private:
  int pixels_;
};

/// k times the largest absolute depth error over the whole batch. The result is
/// a plain number, so no gradient flows through it.
double berhu_threshold(const torch::Tensor& gt, const torch::Tensor& pred, double k = kBerhuK);

/// Reverse Huber of |gt - pred|: linear up to c, (x^2 + c^2) / 2c above.
/// c == 0 degenerates to plain L1.
torch::Tensor berhu_loss(const torch::Tensor& gt, const torch::Tensor& pred, double c);

/// Normalised finite differences, [B,2,H,W]: channel 0 steps along rows (i+h),
/// channel 1 along columns (j+h). Entries whose neighbour falls outside the
/// image are zero.
torch::Tensor scale_invariant_gradient(const torch::Tensor& img, GradientStep step);

torch::Tensor gradient_loss(const torch::Tensor& gt, const torch::Tensor& pred, GradientStep step);

/// exp(-|gt - pred|), detached from the graph.
torch::Tensor confidence_target(const torch::Tensor& gt, const torch::Tensor& pred);

torch::Tensor confidence_loss(const torch::Tensor& target, const torch::Tensor& pred);

/// Quantities the supervised objective treats as constants: the per-scale BerHu
/// thresholds and confidence targets. Exposed so a finite-difference check can
/// hold them fixed while perturbing predictions.
struct DetachedTargets {
  std::array<double, 4> thresholds{};
  std::array<torch::Tensor, 4> confidence;
};

struct ScaleTerms {
  int ratio = 1;
  double threshold = 0.0;
  torch::Tensor depth;
  torch::Tensor gradient;
  torch::Tensor confidence;
};

struct SupervisedLoss {
  torch::Tensor total;
  std::array<ScaleTerms, 4> terms;
};

/// Bilinear (align_corners = false) upsampling of a ratio-h prediction to `side`.
torch::Tensor upsample_to(const torch::Tensor& pred, int64_t side);

DetachedTargets detached_targets(const torch::Tensor& gt, const MultiScaleOutput& outputs,
                                 double k = kBerhuK);

SupervisedLoss supervised_loss(const torch::Tensor& gt, const MultiScaleOutput& outputs,
                               const LossWeights& weights, double k = kBerhuK);

SupervisedLoss supervised_loss(const torch::Tensor& gt, const MultiScaleOutput& outputs,
                               const LossWeights& weights, const DetachedTargets& targets);

/// Binary cross-entropy on raw patch logits: synthetic-domain features are
/// labelled 1, real-domain features 0. Each term is averaged over patches and
/// batch, then the two are added.
torch::Tensor discriminator_loss(const torch::Tensor& real_logits, const torch::Tensor& fake_logits);

/// Non-saturating generator objective -mean(log sigmoid(logit)).
torch::Tensor encoder_adversarial_loss(const torch::Tensor& fake_logits);

}  // namespace bronchodepth::losses
