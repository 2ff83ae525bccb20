#pragma once

#include <array>
#include <cstdint>
#include <torch/torch.h>

#include "bronchodepth/multiscale.hpp"

namespace bronchodepth::networks {

inline constexpr std::array<int64_t, 5> kEncoderChannels{64, 64, 128, 256, 512};
inline constexpr std::array<int64_t, 5> kDecoderChannels{16, 32, 64, 128, 256};
/// Pyramid level consumed by adversarial level i (1-based): the last two skips and the bottleneck.
inline constexpr std::array<int, 3> kAdversarialLevels{2, 3, 4};

/// [batch, 2, height, width]: channel 0 is the x ramp over columns, channel 1
/// the y ramp over rows, both linspace(-1, 1). A single-pixel axis is 0.
torch::Tensor coordinate_channels(int64_t batch, int64_t height, int64_t width,
                                  const torch::TensorOptions& options = {});

torch::Tensor append_coordinates(const torch::Tensor& features);

/// Reflection padding, falling back to replication when the map is too small to reflect.
torch::Tensor pad_reflect(const torch::Tensor& x, int64_t pad);

/// Coordinate convolution: append coordinate channels, reflection-padded 3x3
/// convolution back to the nominal width, ELU.
class CoordConvImpl : public torch::nn::Module {
 public:
  explicit CoordConvImpl(int64_t channels);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d conv_{nullptr};
};
TORCH_MODULE(CoordConv);

class BasicBlockImpl : public torch::nn::Module {
 public:
  BasicBlockImpl(int64_t in_channels, int64_t out_channels, int64_t stride);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
  torch::nn::BatchNorm2d bn1_{nullptr}, bn2_{nullptr};
  torch::nn::Sequential downsample_{nullptr};
};
TORCH_MODULE(BasicBlock);

struct FeaturePyramid {
  std::array<torch::Tensor, 5> levels;
  std::array<bool, 5> post_coordconv{};

  /// Feature map seen by discriminator i in {1, 2, 3}.
  const torch::Tensor& adversarial(int i) const;
};

/// 18-layer residual encoder; every stage output passes through its own
/// coordinate convolution before it reaches the decoder.
class EncoderImpl : public torch::nn::Module {
 public:
  EncoderImpl();
  FeaturePyramid forward(const torch::Tensor& images);

 private:
  torch::nn::Conv2d stem_conv_{nullptr};
  torch::nn::BatchNorm2d stem_bn_{nullptr};
  std::array<torch::nn::Sequential, 4> stages_;
  std::array<CoordConv, 5> coordconvs_{CoordConv(nullptr), CoordConv(nullptr), CoordConv(nullptr),
                                       CoordConv(nullptr), CoordConv(nullptr)};
};
TORCH_MODULE(Encoder);

/// Reflection-padded 3x3 convolution followed by ELU.
class ConvBlockImpl : public torch::nn::Module {
 public:
  ConvBlockImpl(int64_t in_channels, int64_t out_channels);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d conv_{nullptr};
};
TORCH_MODULE(ConvBlock);

/// Five nearest-neighbour upsampling levels with skip concatenation; the last
/// four emit (ReLU depth, sigmoid confidence) heads at ratios 8, 4, 2, 1.
class DecoderImpl : public torch::nn::Module {
 public:
  DecoderImpl();
  MultiScaleOutput forward(const FeaturePyramid& pyramid);

 private:
  std::array<ConvBlock, 5> pre_{ConvBlock(nullptr), ConvBlock(nullptr), ConvBlock(nullptr),
                                ConvBlock(nullptr), ConvBlock(nullptr)};
  std::array<ConvBlock, 5> post_{ConvBlock(nullptr), ConvBlock(nullptr), ConvBlock(nullptr),
                                 ConvBlock(nullptr), ConvBlock(nullptr)};
  std::array<torch::nn::Conv2d, 4> depth_heads_{nullptr, nullptr, nullptr, nullptr};
  std::array<torch::nn::Conv2d, 4> confidence_heads_{nullptr, nullptr, nullptr, nullptr};
};
TORCH_MODULE(Decoder);

/// PatchGAN discriminator: two k4/s2 convolutions then three k3 convolutions,
/// InstanceNorm + LeakyReLU(0.2) between them, raw logits out.
class DiscriminatorImpl : public torch::nn::Module {
 public:
  explicit DiscriminatorImpl(int64_t in_channels, int64_t k3_stride = 1);
  torch::Tensor forward(const torch::Tensor& features);

  int64_t in_channels() const noexcept { return in_channels_; }

 private:
  int64_t in_channels_;
  std::array<torch::nn::Conv2d, 5> convs_{nullptr, nullptr, nullptr, nullptr, nullptr};
};
TORCH_MODULE(Discriminator);

/// Copies every parameter and buffer of `from` into `to` (same architecture).
void copy_state(const torch::nn::Module& from, torch::nn::Module& to);

/// Independent deep copy of an encoder.
Encoder clone_encoder(const Encoder& source);

/// Toggles requires_grad on every parameter.
void set_trainable(torch::nn::Module& module, bool trainable);

/// All parameters flattened into one double vector (for equality checks).
torch::Tensor flat_parameters(const torch::nn::Module& module);

/// Sum of squared gradient entries, sqrt'ed; parameters without a gradient count as zero.
double gradient_norm(const torch::nn::Module& module);

}  // namespace bronchodepth::networks
