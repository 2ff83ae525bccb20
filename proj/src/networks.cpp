#include "bronchodepth/networks.hpp"

#include <cmath>
#include <string>

#include "bronchodepth/error.hpp"

namespace bronchodepth::networks {
namespace {

namespace F = torch::nn::functional;
namespace nn = torch::nn;

torch::Tensor ramp(int64_t n, const torch::TensorOptions& options) {
  if (n == 1) return torch::zeros({1}, options);
  return torch::linspace(-1.0, 1.0, n, options);
}

nn::Conv2d conv3x3_unpadded(int64_t in, int64_t out) {
  return nn::Conv2d(nn::Conv2dOptions(in, out, 3).padding(0));
}

}  // namespace

torch::Tensor coordinate_channels(int64_t batch, int64_t height, int64_t width,
                                  const torch::TensorOptions& options) {
  require(batch > 0 && height > 0 && width > 0, "coordinate_channels: sizes must be positive");
  auto xs = ramp(width, options).view({1, 1, 1, width}).expand({batch, 1, height, width});
  auto ys = ramp(height, options).view({1, 1, height, 1}).expand({batch, 1, height, width});
  return torch::cat({xs, ys}, 1);
}

torch::Tensor append_coordinates(const torch::Tensor& features) {
  require(features.dim() == 4, "coordconv: expected a rank-4 tensor");
  auto coords = coordinate_channels(features.size(0), features.size(2), features.size(3),
                                    features.options().requires_grad(false));
  return torch::cat({features, coords}, 1);
}

torch::Tensor pad_reflect(const torch::Tensor& x, int64_t pad) {
  const bool reflectable = x.size(2) > pad && x.size(3) > pad;
  F::PadFuncOptions options({pad, pad, pad, pad});
  if (reflectable) {
    options.mode(torch::kReflect);
  } else {
    options.mode(torch::kReplicate);
  }
  return F::pad(x, options);
}

CoordConvImpl::CoordConvImpl(int64_t channels)
    : conv_(register_module("conv", conv3x3_unpadded(channels + 2, channels))) {}

torch::Tensor CoordConvImpl::forward(const torch::Tensor& x) {
  return F::elu(conv_(pad_reflect(append_coordinates(x), 1)));
}

BasicBlockImpl::BasicBlockImpl(int64_t in_channels, int64_t out_channels, int64_t stride) {
  conv1_ = register_module(
      "conv1", nn::Conv2d(nn::Conv2dOptions(in_channels, out_channels, 3).stride(stride).padding(1).bias(false)));
  bn1_ = register_module("bn1", nn::BatchNorm2d(out_channels));
  conv2_ = register_module(
      "conv2", nn::Conv2d(nn::Conv2dOptions(out_channels, out_channels, 3).padding(1).bias(false)));
  bn2_ = register_module("bn2", nn::BatchNorm2d(out_channels));
  if (stride != 1 || in_channels != out_channels) {
    downsample_ = register_module(
        "downsample",
        nn::Sequential(nn::Conv2d(nn::Conv2dOptions(in_channels, out_channels, 1).stride(stride).bias(false)),
                       nn::BatchNorm2d(out_channels)));
  }
}

torch::Tensor BasicBlockImpl::forward(const torch::Tensor& x) {
  auto out = torch::relu(bn1_(conv1_(x)));
  out = bn2_(conv2_(out));
  auto identity = downsample_ ? downsample_->forward(x) : x;
  return torch::relu(out + identity);
}

const torch::Tensor& FeaturePyramid::adversarial(int i) const {
  require(i >= 1 && i <= 3, "adversarial level must be 1, 2 or 3");
  return levels[kAdversarialLevels[i - 1]];
}

EncoderImpl::EncoderImpl() {
  stem_conv_ = register_module("stem_conv",
                               nn::Conv2d(nn::Conv2dOptions(3, 64, 7).stride(2).padding(3).bias(false)));
  stem_bn_ = register_module("stem_bn", nn::BatchNorm2d(64));
  int64_t in = 64;
  for (size_t s = 0; s < stages_.size(); ++s) {
    const int64_t out = kEncoderChannels[s + 1];
    const int64_t stride = s == 0 ? 1 : 2;
    stages_[s] = register_module("stage" + std::to_string(s + 1),
                                 nn::Sequential(BasicBlock(in, out, stride), BasicBlock(out, out, 1)));
    in = out;
  }
  for (size_t l = 0; l < coordconvs_.size(); ++l) {
    coordconvs_[l] = register_module("coordconv" + std::to_string(l), CoordConv(kEncoderChannels[l]));
  }

  // He initialisation for the residual trunk, identity-affine batch norms.
  for (auto& module : modules(/*include_self=*/false)) {
    if (auto* bn = module->as<nn::BatchNorm2d>()) {
      nn::init::ones_(bn->weight);
      nn::init::zeros_(bn->bias);
    }
  }
  nn::init::kaiming_normal_(stem_conv_->weight, 0.0, torch::kFanOut, torch::kReLU);
  for (auto& stage : stages_) {
    for (auto& module : stage->modules(false)) {
      if (auto* conv = module->as<nn::Conv2d>()) {
        nn::init::kaiming_normal_(conv->weight, 0.0, torch::kFanOut, torch::kReLU);
      }
    }
  }
}

FeaturePyramid EncoderImpl::forward(const torch::Tensor& images) {
  require(images.dim() == 4 && images.size(1) == 3, "encoder: expected [B,3,H,W] images");
  require(images.size(2) % 32 == 0 && images.size(3) % 32 == 0,
          "encoder: image sides must be multiples of 32");
  std::array<torch::Tensor, 5> raw;
  raw[0] = torch::relu(stem_bn_(stem_conv_(images)));
  auto x = F::max_pool2d(raw[0], F::MaxPool2dFuncOptions(3).stride(2).padding(1));
  for (size_t s = 0; s < stages_.size(); ++s) {
    x = stages_[s]->forward(x);
    raw[s + 1] = x;
  }
  FeaturePyramid pyramid;
  for (size_t l = 0; l < raw.size(); ++l) {
    pyramid.levels[l] = coordconvs_[l]->forward(raw[l]);
    pyramid.post_coordconv[l] = true;
  }
  return pyramid;
}

ConvBlockImpl::ConvBlockImpl(int64_t in_channels, int64_t out_channels)
    : conv_(register_module("conv", conv3x3_unpadded(in_channels, out_channels))) {}

torch::Tensor ConvBlockImpl::forward(const torch::Tensor& x) { return F::elu(conv_(pad_reflect(x, 1))); }

DecoderImpl::DecoderImpl() {
  for (int level = 4; level >= 0; --level) {
    const int64_t in = level == 4 ? kEncoderChannels[4] : kDecoderChannels[level + 1];
    const int64_t out = kDecoderChannels[level];
    const int64_t skip = level > 0 ? kEncoderChannels[level - 1] : 0;
    pre_[level] = register_module("pre" + std::to_string(level), ConvBlock(in, out));
    post_[level] = register_module("post" + std::to_string(level), ConvBlock(out + skip, out));
  }
  for (int level = 0; level < 4; ++level) {
    depth_heads_[level] =
        register_module("depth_head" + std::to_string(level), conv3x3_unpadded(kDecoderChannels[level], 1));
    confidence_heads_[level] =
        register_module("confidence_head" + std::to_string(level), conv3x3_unpadded(kDecoderChannels[level], 1));
  }
}

MultiScaleOutput DecoderImpl::forward(const FeaturePyramid& pyramid) {
  for (size_t l = 0; l < pyramid.levels.size(); ++l) {
    require(pyramid.levels[l].defined() && pyramid.levels[l].size(1) == kEncoderChannels[l],
            "decoder: malformed feature pyramid at level " + std::to_string(l));
  }
  MultiScaleOutput out;
  auto x = pyramid.levels[4];
  for (int level = 4; level >= 0; --level) {
    x = pre_[level](x);
    x = F::interpolate(x, F::InterpolateFuncOptions()
                              .scale_factor(std::vector<double>{2.0, 2.0})
                              .mode(torch::kNearest));
    if (level > 0) x = torch::cat({x, pyramid.levels[level - 1]}, 1);
    x = post_[level](x);
    if (level < 4) {
      auto& scale = out.scales[level];
      scale.ratio = 1 << level;
      scale.depth = torch::relu(depth_heads_[level](pad_reflect(x, 1)));
      scale.confidence = torch::sigmoid(confidence_heads_[level](pad_reflect(x, 1)));
    }
  }
  return out;
}

DiscriminatorImpl::DiscriminatorImpl(int64_t in_channels, int64_t k3_stride) : in_channels_(in_channels) {
  require(in_channels > 0, "discriminator: channel count must be positive");
  require(k3_stride == 1 || k3_stride == 2, "discriminator: k3 stride must be 1 or 2");
  const std::array<int64_t, 6> widths{in_channels, 64, 128, 256, 512, 1};
  for (size_t i = 0; i < convs_.size(); ++i) {
    const bool k4 = i < 2;
    auto options = nn::Conv2dOptions(widths[i], widths[i + 1], k4 ? 4 : 3).stride(k4 ? 2 : k3_stride).padding(1);
    convs_[i] = register_module("conv" + std::to_string(i), nn::Conv2d(options));
    nn::init::normal_(convs_[i]->weight, 0.0, 0.02);
    nn::init::zeros_(convs_[i]->bias);
  }
}

torch::Tensor DiscriminatorImpl::forward(const torch::Tensor& features) {
  require(features.dim() == 4 && features.size(1) == in_channels_,
          "discriminator: expected " + std::to_string(in_channels_) + " input channels");
  auto x = features;
  for (size_t i = 0; i + 1 < convs_.size(); ++i) {
    x = convs_[i](x);
    // instance norm of a single pixel is undefined; it only occurs below 256-px inputs
    if (i > 0 && x.size(2) * x.size(3) > 1) {
      x = F::instance_norm(x, F::InstanceNormFuncOptions().eps(1e-5));
    }
    x = F::leaky_relu(x, F::LeakyReLUFuncOptions().negative_slope(0.2));
  }
  return convs_.back()(x);
}

void copy_state(const torch::nn::Module& from, torch::nn::Module& to) {
  torch::NoGradGuard no_grad;
  auto src_params = from.named_parameters(true);
  auto dst_params = to.named_parameters(true);
  require(src_params.size() == dst_params.size(), "copy_state: parameter sets differ");
  for (auto& item : src_params) {
    auto* dst = dst_params.find(item.key());
    require(dst != nullptr, "copy_state: missing parameter " + item.key());
    dst->copy_(item.value());
  }
  auto src_buffers = from.named_buffers(true);
  auto dst_buffers = to.named_buffers(true);
  require(src_buffers.size() == dst_buffers.size(), "copy_state: buffer sets differ");
  for (auto& item : src_buffers) {
    auto* dst = dst_buffers.find(item.key());
    require(dst != nullptr, "copy_state: missing buffer " + item.key());
    dst->copy_(item.value());
  }
}

Encoder clone_encoder(const Encoder& source) {
  Encoder copy;
  copy_state(*source, *copy);
  copy->train(source->is_training());
  return copy;
}

void set_trainable(torch::nn::Module& module, bool trainable) {
  for (auto& p : module.parameters(true)) p.set_requires_grad(trainable);
}

torch::Tensor flat_parameters(const torch::nn::Module& module) {
  std::vector<torch::Tensor> flat;
  for (const auto& p : module.parameters(true)) flat.push_back(p.detach().reshape({-1}).to(torch::kDouble));
  for (const auto& b : module.buffers(true)) flat.push_back(b.detach().reshape({-1}).to(torch::kDouble));
  return torch::cat(flat);
}

double gradient_norm(const torch::nn::Module& module) {
  double sq = 0.0;
  for (const auto& p : module.parameters(true)) {
    if (p.grad().defined()) sq += p.grad().detach().to(torch::kDouble).pow(2).sum().item<double>();
  }
  return std::sqrt(sq);
}

}  // namespace bronchodepth::networks
