#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "bronchodepth/airway.hpp"
#include "bronchodepth/losses.hpp"
#include "bronchodepth/render.hpp"

namespace bronchodepth {

struct ModelConfig {
  int image_size = 256;
  int disc_k3_stride = 1;
  std::array<int, 4> scales{1, 2, 4, 8};
};

struct AugmentConfig {
  bool horizontal_flip = true;
  bool vertical_flip = true;
  bool color_jitter = true;
  double brightness = 0.2;
  double contrast = 0.2;
  double saturation = 0.2;
  double hue = 0.05;
};

struct DataConfig {
  uint64_t seed = 0;
  int trees = 4;
  int tree_levels = 4;
  synth::TreeOptions tree;
  /// Intrinsics at 256 px; scaled to model.image_size when rendering.
  synth::CameraIntrinsics camera;
  synth::ShadingOptions shading;
  synth::DegradationOptions degradation;
  synth::PoseJitter jitter;
  int synthetic_frames = 2500;
  double val_fraction = 0.2;
  uint64_t split_seed = 0;
  int real_train_frames = 2000;
  int real_eval_frames = 500;
};

struct SupervisedConfig {
  int epochs = 30;
  int batch_size = 64;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  losses::LossWeights weights;
  double berhu_k = losses::kBerhuK;
  AugmentConfig augment;
  /// 0 runs every epoch; otherwise stop after this many iterations.
  int64_t max_iterations = 0;
  uint64_t seed = 0;
};

struct AdaptConfig {
  int64_t iterations = 12000;
  double lr = 5e-6;
  double disc_lr = 5e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  std::array<double, 2> milestones{0.6, 0.8};
  int batch_size = 16;
  AugmentConfig augment;
  double collapse_threshold = 1e-3;
  int64_t collapse_patience = 500;
  uint64_t seed = 0;
};

struct EvalConfig {
  bool median_scale = false;
  double clamp_mm = 1e-3;
  int vis_frames = 8;
  int batch_size = 8;
};

struct ExperimentConfig {
  DataConfig data;
  SupervisedConfig supervised;
  AdaptConfig adapt;
  EvalConfig eval;
  ModelConfig model;

  /// Throws a config Error naming the first violated bound.
  void validate() const;
  nlohmann::json to_json() const;
  /// Missing keys take defaults; unknown keys are rejected.
  static ExperimentConfig from_json(const nlohmann::json& j);
  /// Sorted keys, fixed float formatting.
  std::string canonical() const;
  /// SHA-256 of canonical(), hex.
  std::string hash() const;
};

/// Parses and validates a config file. An empty file yields the defaults.
ExperimentConfig validate_config(const std::filesystem::path& path);

ExperimentConfig parse_config(const std::string& text);

}  // namespace bronchodepth
