#pragma once

#include <array>
#include <torch/torch.h>

namespace bronchodepth {

/// Output scale ratios (ground-truth side / prediction side) emitted by the decoder.
inline constexpr std::array<int, 4> kScales{1, 2, 4, 8};

struct ScaleOutput {
  int ratio = 1;
  torch::Tensor depth;       // [B,1,S/ratio,S/ratio], millimetres, >= 0
  torch::Tensor confidence;  // [B,1,S/ratio,S/ratio], in (0,1)
};

/// Depth and confidence predictions at every ratio in kScales, ordered 1,2,4,8.
struct MultiScaleOutput {
  std::array<ScaleOutput, 4> scales;

  const ScaleOutput& at_ratio(int ratio) const;
  /// Throws ContractViolation unless scales hold exactly ratios 1,2,4,8 with rank-4 tensors.
  void validate() const;
};

}  // namespace bronchodepth
