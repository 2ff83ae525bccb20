#pragma once

#include <array>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>
#include <torch/torch.h>

#include "bronchodepth/config.hpp"
#include "bronchodepth/dataset.hpp"
#include "bronchodepth/evalmetrics.hpp"
#include "bronchodepth/networks.hpp"
#include "bronchodepth/schedule.hpp"

namespace bronchodepth::pipeline {

namespace fs = std::filesystem;

/// Single-threaded, deterministic ATen kernels.
void use_deterministic_mode();

/// BGR uint8 image -> [3,H,W] float RGB in [0,1].
torch::Tensor image_to_tensor(const cv::Mat& bgr);
/// CV_32FC1 -> [1,H,W] float.
torch::Tensor depth_to_tensor(const cv::Mat& depth);
/// [1,H,W] or [H,W] float -> CV_32FC1.
cv::Mat tensor_to_mat(const torch::Tensor& map);

/// Random flips (shared by colour and depth) and colour jitter.
class Augmenter {
 public:
  explicit Augmenter(const AugmentConfig& config) : config_(config) {}

  /// Flips colour and depth identically; jitters colour when `jitter` is set.
  void apply(torch::Tensor& image, torch::Tensor* depth, std::mt19937_64& rng, bool jitter) const;

  /// Brightness, contrast, saturation and hue shift on [3,H,W] RGB in [0,1].
  static torch::Tensor color_jitter(const torch::Tensor& image, double brightness, double contrast,
                                    double saturation, double hue);

 private:
  AugmentConfig config_;
};

/// Epoch-shuffled batch indices as a pure function of (seed, stream, iteration).
class BatchSchedule {
 public:
  BatchSchedule(size_t dataset_size, size_t batch_size, uint64_t seed, uint64_t stream);

  size_t iterations_per_epoch() const { return per_epoch_; }
  std::vector<size_t> indices(int64_t iteration) const;
  int64_t epoch_of(int64_t iteration) const { return iteration / static_cast<int64_t>(per_epoch_); }

 private:
  size_t size_;
  size_t batch_;
  size_t per_epoch_;
  uint64_t seed_;
  uint64_t stream_;
};

enum class TrainingStep { supervised, adapted };

struct CheckpointManifest {
  int format_version = 1;
  std::string module_name = "bronchodepth";
  TrainingStep step = TrainingStep::supervised;
  int64_t iteration = 0;
  int64_t epoch = 0;
  uint64_t rng_seed = 0;
  std::string config_hash;
  int image_size = 256;
  int disc_k3_stride = 1;

  nlohmann::json to_json() const;
  static CheckpointManifest from_json(const nlohmann::json& j);
};

CheckpointManifest read_checkpoint_manifest(const fs::path& dir);

/// F_S and G_S.
struct DepthModel {
  networks::Encoder encoder;
  networks::Decoder decoder;

  /// Fresh models initialised from `seed` (torch global generator).
  static DepthModel create(uint64_t seed);
};

/// F_R and the three discriminators A^1..A^3.
struct AdaptedParts {
  networks::Encoder encoder;
  std::array<networks::Discriminator, 3> discriminators{networks::Discriminator(nullptr),
                                                        networks::Discriminator(nullptr),
                                                        networks::Discriminator(nullptr)};
};

/// Read-only checkpoint for inference and evaluation.
class Checkpoint {
 public:
  static Checkpoint load(const fs::path& dir);

  const CheckpointManifest& manifest() const { return manifest_; }
  bool adapted() const { return manifest_.step == TrainingStep::adapted; }
  /// Synthetic images go through F_S, real images through F_R (adapted checkpoints only).
  networks::Encoder encoder_for(synth::Domain domain) const;
  networks::Decoder decoder() const { return model_.decoder; }
  const DepthModel& model() const { return model_; }
  const std::optional<AdaptedParts>& adapted_parts() const { return adapted_; }

 private:
  CheckpointManifest manifest_;
  DepthModel model_;
  std::optional<AdaptedParts> adapted_;
};

/// Append-only JSON-lines log; disabled when constructed with an empty path.
class JsonlLog {
 public:
  JsonlLog() = default;
  explicit JsonlLog(const fs::path& path);
  void write(const nlohmann::json& record);

 private:
  std::optional<std::ofstream> out_;
};

struct SupervisedStep {
  int64_t iteration = 0;
  int64_t epoch = 0;
  double total = 0.0;
  std::array<std::array<double, 3>, 4> terms{};  // [scale][depth, gradient, confidence]
  double lr = 0.0;
  double encoder_grad_norm = 0.0;
  double decoder_grad_norm = 0.0;
};

struct SupervisedResult {
  fs::path last_checkpoint;
  std::optional<fs::path> best_checkpoint;
  double best_val_abs_rel = 0.0;
  std::vector<double> losses;
};

/// Step one: trains F_S and G_S on labeled synthetic pairs with the multi-scale objective.
class SupervisedTrainer {
 public:
  SupervisedTrainer(const ExperimentConfig& config, data::LabeledDataset train,
                    std::optional<data::LabeledDataset> val = std::nullopt, fs::path log_path = {});

  int64_t iteration() const { return iteration_; }
  int64_t total_iterations() const;
  const BatchSchedule& schedule() const { return schedule_; }

  /// One optimiser step on the batch scheduled for the current iteration.
  /// Throws a numeric Error (after writing `snapshot_dir`, when set) on a non-finite loss.
  SupervisedStep step();
  void run_until(int64_t iteration);
  /// Mean abs-rel of G_S(F_S(.)) over the validation split.
  double validate();
  /// Full schedule with per-epoch validation; writes `last` and `best` under ckpt_root.
  SupervisedResult train(const fs::path& ckpt_root);

  void save(const fs::path& dir) const;
  void load(const fs::path& dir);

  const DepthModel& model() const { return model_; }
  void set_snapshot_dir(fs::path dir) { snapshot_dir_ = std::move(dir); }

 private:
  ExperimentConfig config_;
  std::string config_hash_;
  data::LabeledDataset train_;
  std::optional<data::LabeledDataset> val_;
  DepthModel model_;
  std::unique_ptr<torch::optim::Adam> optimizer_;
  BatchSchedule schedule_;
  Augmenter augmenter_;
  int64_t iteration_ = 0;
  JsonlLog log_;
  fs::path snapshot_dir_;
  std::chrono::steady_clock::time_point started_;
};

struct AdaptStep {
  int64_t iteration = 0;
  double lr = 0.0;
  std::array<double, 3> discriminator_loss{};
  std::array<double, 3> encoder_loss{};
  std::array<double, 3> discriminator_accuracy{};
  double encoder_s_grad_norm = 0.0;
  double decoder_grad_norm = 0.0;
  double encoder_r_grad_norm = 0.0;
  double discriminator_grad_norm = 0.0;
  bool collapse_warning = false;
};

/// Step two: adversarially trains F_R (cloned from F_S) against three patch
/// discriminators while F_S and G_S stay frozen.
class AdaptTrainer {
 public:
  /// `synthetic` and `real` are colour-only views; `real` must be an unlabeled
  /// real-like dataset.
  AdaptTrainer(const ExperimentConfig& config, const fs::path& supervised_checkpoint,
               data::UnlabeledDataset synthetic, data::UnlabeledDataset real, fs::path log_path = {});

  int64_t iteration() const { return iteration_; }
  double lr_at(int64_t iteration) const { return schedule_.lr_at(iteration); }
  const LrSchedule& lr_schedule() const { return schedule_; }

  AdaptStep step();
  void run_until(int64_t iteration, const std::function<void(const AdaptStep&)>& on_step = {});
  /// Runs all configured iterations; writes `last` under ckpt_root.
  fs::path train(const fs::path& ckpt_root);

  void save(const fs::path& dir) const;
  void load(const fs::path& dir);

  const DepthModel& frozen() const { return model_; }
  const AdaptedParts& adapted() const { return parts_; }

 private:
  ExperimentConfig config_;
  std::string config_hash_;
  CheckpointManifest source_manifest_;
  data::UnlabeledDataset synthetic_;
  data::UnlabeledDataset real_;
  DepthModel model_;
  AdaptedParts parts_;
  std::unique_ptr<torch::optim::Adam> encoder_optimizer_;
  std::unique_ptr<torch::optim::Adam> discriminator_optimizer_;
  LrSchedule schedule_;
  BatchSchedule synthetic_batches_;
  BatchSchedule real_batches_;
  Augmenter augmenter_;
  int64_t iteration_ = 0;
  int64_t low_loss_streak_ = 0;
  JsonlLog log_;
  std::chrono::steady_clock::time_point started_;
};

struct Inference {
  cv::Mat depth;       // CV_32FC1, mm
  cv::Mat confidence;  // CV_32FC1, (0,1)
  std::string encoder; // "F_S" or "F_R"
};

/// Full-resolution depth and confidence for one image. Real-domain inference
/// requires an adapted checkpoint.
Inference infer(const Checkpoint& checkpoint, const cv::Mat& color, synth::Domain domain);

struct EvalOptions {
  bool median_scale = false;
  double clamp_mm = metrics::kPredictionFloorMm;
  int batch_size = 8;
  int vis_frames = 0;
  fs::path vis_dir;  // depth_vis/{%06d}.png: colour | ground truth | one panel per checkpoint
};

/// One report row per checkpoint. Real-like datasets run through F_R when the
/// checkpoint is adapted and F_S otherwise; synthetic ones always use F_S.
std::vector<metrics::ReportRow> evaluate_checkpoints(const std::vector<fs::path>& checkpoints,
                                                     const std::vector<std::string>& labels,
                                                     const data::LabeledDataset& dataset, const EvalOptions& options);

}  // namespace bronchodepth::pipeline
