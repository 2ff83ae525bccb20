#include "bronchodepth/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include <opencv2/imgproc.hpp>

#include "bronchodepth/error.hpp"
#include "bronchodepth/losses.hpp"

namespace bronchodepth::pipeline {
namespace {

// Independent RNG streams derived from a run seed.
enum Stream : uint64_t {
  kSupervisedOrder = 1,
  kSupervisedAugment,
  kAdaptSyntheticOrder,
  kAdaptRealOrder,
  kAdaptAugment,
  kDiscriminatorInit,
};

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorCategory::io, "cannot create " + dir.string() + ": " + ec.message());
}

template <class Module>
void save_module(const Module& module, const fs::path& path) {
  try {
    torch::save(module, path.string());
  } catch (const c10::Error& e) {
    throw Error(ErrorCategory::io, "cannot write " + path.string() + ": " + e.what_without_backtrace());
  }
}

template <class Module>
void load_module(Module& module, const fs::path& path) {
  if (!fs::exists(path)) throw Error(ErrorCategory::io, "missing checkpoint file " + path.string());
  try {
    torch::load(module, path.string());
  } catch (const c10::Error& e) {
    throw Error(ErrorCategory::io, "cannot read " + path.string() + ": " + e.what_without_backtrace());
  }
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  out << j.dump(2) << '\n';
  if (!out) throw Error(ErrorCategory::io, "cannot write " + path.string());
}

std::string step_name(TrainingStep step) { return step == TrainingStep::supervised ? "supervised" : "adapted"; }

void check_image_size(const data::DatasetManifest& manifest, int expected, const std::string& what) {
  if (manifest.image_size != expected) {
    throw Error(ErrorCategory::data, what + " images are " + std::to_string(manifest.image_size) +
                                         " px but model.image_size is " + std::to_string(expected));
  }
}

std::array<networks::Discriminator, 3> make_discriminators(int k3_stride) {
  std::array<networks::Discriminator, 3> out{networks::Discriminator(nullptr), networks::Discriminator(nullptr),
                                             networks::Discriminator(nullptr)};
  for (int i = 0; i < 3; ++i) {
    out[i] = networks::Discriminator(networks::kEncoderChannels[networks::kAdversarialLevels[i]], k3_stride);
  }
  return out;
}

std::vector<torch::Tensor> discriminator_parameters(const AdaptedParts& parts) {
  std::vector<torch::Tensor> params;
  for (const auto& d : parts.discriminators) {
    for (auto& p : d->parameters()) params.push_back(p);
  }
  return params;
}

/// Full-resolution depth/confidence for a batch, eval mode, no graph.
std::pair<torch::Tensor, torch::Tensor> predict(networks::Encoder encoder, networks::Decoder decoder,
                                                const torch::Tensor& images) {
  torch::NoGradGuard no_grad;
  const bool enc_training = encoder->is_training();
  const bool dec_training = decoder->is_training();
  encoder->eval();
  decoder->eval();
  auto out = decoder->forward(encoder->forward(images));
  encoder->train(enc_training);
  decoder->train(dec_training);
  return {out.scales[0].depth, out.scales[0].confidence};
}

}  // namespace

void use_deterministic_mode() {
  torch::set_num_threads(1);
  at::globalContext().setDeterministicAlgorithms(true, false);
}

torch::Tensor image_to_tensor(const cv::Mat& bgr) {
  require(bgr.type() == CV_8UC3, "image_to_tensor: expected an 8-bit BGR image");
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  auto t = torch::from_blob(rgb.data, {rgb.rows, rgb.cols, 3}, torch::kUInt8);
  return t.permute({2, 0, 1}).to(torch::kFloat).div(255.0).contiguous();
}

torch::Tensor depth_to_tensor(const cv::Mat& depth) {
  require(depth.type() == CV_32FC1, "depth_to_tensor: expected CV_32FC1");
  cv::Mat dense = depth.isContinuous() ? depth : depth.clone();
  return torch::from_blob(dense.data, {1, dense.rows, dense.cols}, torch::kFloat).clone();
}

cv::Mat tensor_to_mat(const torch::Tensor& map) {
  auto t = map.detach().to(torch::kFloat).contiguous();
  if (t.dim() == 3) t = t.squeeze(0);
  require(t.dim() == 2, "tensor_to_mat: expected a single-channel map");
  cv::Mat out(static_cast<int>(t.size(0)), static_cast<int>(t.size(1)), CV_32FC1);
  std::memcpy(out.data, t.data_ptr<float>(), static_cast<size_t>(t.numel()) * sizeof(float));
  return out;
}

torch::Tensor Augmenter::color_jitter(const torch::Tensor& image, double brightness, double contrast,
                                      double saturation, double hue) {
  auto luma = [](const torch::Tensor& x) { return 0.299 * x[0] + 0.587 * x[1] + 0.114 * x[2]; };
  auto x = (image * brightness).clamp(0.0, 1.0);
  const auto mean = luma(x).mean();
  x = ((x - mean) * contrast + mean).clamp(0.0, 1.0);
  const auto grey = luma(x).unsqueeze(0);
  x = ((x - grey) * saturation + grey).clamp(0.0, 1.0);
  if (hue != 0.0) {
    // rotate chroma in YIQ space
    const double angle = 2.0 * std::numbers::pi * hue;
    const double c = std::cos(angle);
    const double s = std::sin(angle);
    auto y = 0.299 * x[0] + 0.587 * x[1] + 0.114 * x[2];
    auto i = 0.596 * x[0] - 0.274 * x[1] - 0.322 * x[2];
    auto q = 0.211 * x[0] - 0.523 * x[1] + 0.312 * x[2];
    auto i2 = c * i - s * q;
    auto q2 = s * i + c * q;
    x = torch::stack({y + 0.956 * i2 + 0.621 * q2, y - 0.272 * i2 - 0.647 * q2, y - 1.106 * i2 + 1.703 * q2})
            .clamp(0.0, 1.0);
  }
  return x;
}

void Augmenter::apply(torch::Tensor& image, torch::Tensor* depth, std::mt19937_64& rng, bool jitter) const {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  // Draw every variate so the stream does not depend on which switches are on.
  const double u_h = unit(rng);
  const double u_v = unit(rng);
  const double u_b = unit(rng);
  const double u_c = unit(rng);
  const double u_s = unit(rng);
  const double u_hue = unit(rng);
  if (config_.horizontal_flip && u_h < 0.5) {
    image = image.flip({2});
    if (depth) *depth = depth->flip({2});
  }
  if (config_.vertical_flip && u_v < 0.5) {
    image = image.flip({1});
    if (depth) *depth = depth->flip({1});
  }
  if (jitter && config_.color_jitter) {
    auto around_one = [](double u, double range) { return 1.0 + (2.0 * u - 1.0) * range; };
    image = color_jitter(image, around_one(u_b, config_.brightness), around_one(u_c, config_.contrast),
                         around_one(u_s, config_.saturation), (2.0 * u_hue - 1.0) * config_.hue);
  }
}

BatchSchedule::BatchSchedule(size_t dataset_size, size_t batch_size, uint64_t seed, uint64_t stream)
    : size_(dataset_size), batch_(std::min(batch_size, dataset_size)), seed_(seed), stream_(stream) {
  if (dataset_size == 0) throw Error(ErrorCategory::data, "cannot train on an empty dataset");
  require(batch_size > 0, "batch size must be positive");
  per_epoch_ = (size_ + batch_ - 1) / batch_;
}

std::vector<size_t> BatchSchedule::indices(int64_t iteration) const {
  require(iteration >= 0, "iteration must be >= 0");
  const auto epoch = static_cast<uint64_t>(epoch_of(iteration));
  const auto pos = static_cast<size_t>(iteration % static_cast<int64_t>(per_epoch_));
  std::vector<size_t> order(size_);
  std::iota(order.begin(), order.end(), size_t{0});
  std::mt19937_64 rng(derive_seed(seed_, stream_, epoch));
  std::shuffle(order.begin(), order.end(), rng);
  const size_t begin = pos * batch_;
  const size_t end = std::min(begin + batch_, size_);
  return {order.begin() + static_cast<std::ptrdiff_t>(begin), order.begin() + static_cast<std::ptrdiff_t>(end)};
}

nlohmann::json CheckpointManifest::to_json() const {
  return {{"format_version", format_version}, {"module_name", module_name}, {"step", step_name(step)},
          {"iteration", iteration},           {"epoch", epoch},             {"rng_seed", rng_seed},
          {"config_hash", config_hash},       {"image_size", image_size},   {"disc_k3_stride", disc_k3_stride}};
}

CheckpointManifest CheckpointManifest::from_json(const nlohmann::json& j) {
  try {
    CheckpointManifest m;
    m.format_version = j.at("format_version").get<int>();
    if (m.format_version != 1) throw Error(ErrorCategory::data, "unsupported checkpoint format version");
    m.module_name = j.at("module_name").get<std::string>();
    const auto step = j.at("step").get<std::string>();
    if (step != "supervised" && step != "adapted") throw Error(ErrorCategory::data, "unknown checkpoint step " + step);
    m.step = step == "supervised" ? TrainingStep::supervised : TrainingStep::adapted;
    m.iteration = j.at("iteration").get<int64_t>();
    m.epoch = j.at("epoch").get<int64_t>();
    m.rng_seed = j.at("rng_seed").get<uint64_t>();
    m.config_hash = j.at("config_hash").get<std::string>();
    m.image_size = j.at("image_size").get<int>();
    m.disc_k3_stride = j.at("disc_k3_stride").get<int>();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCategory::data, std::string("malformed checkpoint manifest: ") + e.what());
  }
}

CheckpointManifest read_checkpoint_manifest(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw Error(ErrorCategory::config, "no checkpoint at " + dir.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCategory::data, "unreadable checkpoint manifest in " + dir.string() + ": " + e.what());
  }
  return CheckpointManifest::from_json(j);
}

DepthModel DepthModel::create(uint64_t seed) {
  torch::manual_seed(seed);
  DepthModel m{networks::Encoder(), networks::Decoder()};
  return m;
}

Checkpoint Checkpoint::load(const fs::path& dir) {
  Checkpoint ckpt;
  ckpt.manifest_ = read_checkpoint_manifest(dir);
  ckpt.model_ = DepthModel::create(0);
  load_module(ckpt.model_.encoder, dir / "encoder_s.pt");
  load_module(ckpt.model_.decoder, dir / "decoder.pt");
  ckpt.model_.encoder->eval();
  ckpt.model_.decoder->eval();
  if (ckpt.adapted()) {
    AdaptedParts parts;
    load_module(parts.encoder, dir / "encoder_r.pt");
    parts.encoder->eval();
    parts.discriminators = make_discriminators(ckpt.manifest_.disc_k3_stride);
    for (int i = 0; i < 3; ++i) {
      load_module(parts.discriminators[i], dir / ("discriminator_" + std::to_string(i + 1) + ".pt"));
    }
    ckpt.adapted_ = std::move(parts);
  }
  return ckpt;
}

networks::Encoder Checkpoint::encoder_for(synth::Domain domain) const {
  if (domain == synth::Domain::synthetic) return model_.encoder;
  if (!adapted_) {
    throw Error(ErrorCategory::config, "real-domain inference needs an adapted checkpoint (this one is supervised)");
  }
  return adapted_->encoder;
}

JsonlLog::JsonlLog(const fs::path& path) {
  if (path.empty()) return;
  if (path.has_parent_path()) ensure_dir(path.parent_path());
  out_.emplace(path, std::ios::app);
  if (!*out_) throw Error(ErrorCategory::io, "cannot open log " + path.string());
}

void JsonlLog::write(const nlohmann::json& record) {
  if (!out_) return;
  *out_ << record.dump() << '\n';
  out_->flush();
}

// ---------------------------------------------------------------- supervised

SupervisedTrainer::SupervisedTrainer(const ExperimentConfig& config, data::LabeledDataset train,
                                     std::optional<data::LabeledDataset> val, fs::path log_path)
    : config_(config),
      config_hash_(config.hash()),
      train_(std::move(train)),
      val_(std::move(val)),
      model_(DepthModel::create(config.supervised.seed)),
      schedule_(train_.size(), static_cast<size_t>(config.supervised.batch_size), config.supervised.seed,
                kSupervisedOrder),
      augmenter_(config.supervised.augment),
      log_(log_path),
      started_(std::chrono::steady_clock::now()) {
  config_.validate();
  if (train_.manifest().domain != "synthetic") {
    throw Error(ErrorCategory::data, "supervised training needs the synthetic domain");
  }
  check_image_size(train_.manifest(), config_.model.image_size, "training");
  if (val_) check_image_size(val_->manifest(), config_.model.image_size, "validation");
  std::vector<torch::Tensor> params = model_.encoder->parameters();
  for (auto& p : model_.decoder->parameters()) params.push_back(p);
  optimizer_ = std::make_unique<torch::optim::Adam>(
      params, torch::optim::AdamOptions(config_.supervised.lr)
                  .betas(std::make_tuple(config_.supervised.beta1, config_.supervised.beta2)));
}

int64_t SupervisedTrainer::total_iterations() const {
  const int64_t full = static_cast<int64_t>(config_.supervised.epochs) * static_cast<int64_t>(schedule_.iterations_per_epoch());
  return config_.supervised.max_iterations > 0 ? std::min(full, config_.supervised.max_iterations) : full;
}

SupervisedStep SupervisedTrainer::step() {
  const int64_t it = iteration_;
  const auto& cfg = config_.supervised;
  std::mt19937_64 rng(derive_seed(cfg.seed, kSupervisedAugment, static_cast<uint64_t>(it)));
  std::vector<torch::Tensor> images;
  std::vector<torch::Tensor> depths;
  for (size_t idx : schedule_.indices(it)) {
    auto sample = train_.load(idx);
    auto image = image_to_tensor(sample.color);
    auto depth = depth_to_tensor(sample.depth);
    augmenter_.apply(image, &depth, rng, /*jitter=*/true);
    images.push_back(image);
    depths.push_back(depth);
  }
  auto image_batch = torch::stack(images);
  auto depth_batch = torch::stack(depths);

  auto fail = [&](const std::string& why) {
    if (!snapshot_dir_.empty()) save(snapshot_dir_);
    throw Error(ErrorCategory::numeric, why + " at iteration " + std::to_string(it) +
                                            (snapshot_dir_.empty() ? "" : "; snapshot in " + snapshot_dir_.string()));
  };

  model_.encoder->train();
  model_.decoder->train();
  auto outputs = model_.decoder->forward(model_.encoder->forward(image_batch));
  losses::SupervisedLoss loss;
  try {
    loss = losses::supervised_loss(depth_batch, outputs, cfg.weights, cfg.berhu_k);
  } catch (const Error& e) {
    if (e.category() != ErrorCategory::numeric) throw;
    fail(e.what());
  }

  SupervisedStep record;
  record.iteration = it;
  record.epoch = schedule_.epoch_of(it);
  record.total = loss.total.item<double>();
  record.lr = cfg.lr;
  for (size_t s = 0; s < 4; ++s) {
    record.terms[s] = {loss.terms[s].depth.item<double>(), loss.terms[s].gradient.item<double>(),
                       loss.terms[s].confidence.item<double>()};
  }
  if (!std::isfinite(record.total)) fail("non-finite supervised loss");

  optimizer_->zero_grad();
  loss.total.backward();
  record.encoder_grad_norm = networks::gradient_norm(*model_.encoder);
  record.decoder_grad_norm = networks::gradient_norm(*model_.decoder);
  optimizer_->step();
  ++iteration_;

  nlohmann::json terms = nlohmann::json::object();
  for (size_t s = 0; s < 4; ++s) {
    terms["h" + std::to_string(kScales[s])] = {{"depth", record.terms[s][0]},
                                               {"gradient", record.terms[s][1]},
                                               {"confidence", record.terms[s][2]},
                                               {"berhu_threshold", loss.terms[s].threshold}};
  }
  log_.write({{"phase", "supervised"},
              {"iteration", it},
              {"epoch", record.epoch},
              {"loss", {{"total", record.total}, {"terms", terms}}},
              {"lr", record.lr},
              {"grad_norms", {{"encoder_s", record.encoder_grad_norm}, {"decoder", record.decoder_grad_norm}}},
              {"wall_time", seconds_since(started_)}});
  return record;
}

void SupervisedTrainer::run_until(int64_t iteration) {
  while (iteration_ < iteration) step();
}

double SupervisedTrainer::validate() {
  if (!val_ || val_->empty()) return std::numeric_limits<double>::quiet_NaN();
  std::vector<metrics::FrameStats> stats;
  const size_t batch = static_cast<size_t>(config_.eval.batch_size);
  for (size_t begin = 0; begin < val_->size(); begin += batch) {
    std::vector<torch::Tensor> images;
    std::vector<cv::Mat> truths;
    for (size_t i = begin; i < std::min(begin + batch, val_->size()); ++i) {
      auto sample = val_->load(i);
      images.push_back(image_to_tensor(sample.color));
      truths.push_back(sample.depth);
    }
    auto [depth, confidence] = predict(model_.encoder, model_.decoder, torch::stack(images));
    for (size_t k = 0; k < truths.size(); ++k) {
      stats.push_back(metrics::frame_stats(truths[k], tensor_to_mat(depth[static_cast<int64_t>(k)]),
                                           config_.eval.clamp_mm));
    }
  }
  return metrics::aggregate(stats).abs_rel;
}

SupervisedResult SupervisedTrainer::train(const fs::path& ckpt_root) {
  SupervisedResult result;
  result.best_val_abs_rel = std::numeric_limits<double>::infinity();
  set_snapshot_dir(ckpt_root / "nan_snapshot");
  const int64_t total = total_iterations();
  const auto per_epoch = static_cast<int64_t>(schedule_.iterations_per_epoch());
  while (iteration_ < total) {
    const int64_t epoch_end = std::min(total, (iteration_ / per_epoch + 1) * per_epoch);
    while (iteration_ < epoch_end) result.losses.push_back(step().total);
    const int64_t epoch = (iteration_ - 1) / per_epoch;
    save(ckpt_root / "last");
    result.last_checkpoint = ckpt_root / "last";
    const double val = validate();
    if (std::isfinite(val)) {
      log_.write({{"phase", "validation"}, {"epoch", epoch}, {"iteration", iteration_}, {"abs_rel", val},
                  {"wall_time", seconds_since(started_)}});
      if (val < result.best_val_abs_rel) {
        result.best_val_abs_rel = val;
        save(ckpt_root / "best");
        result.best_checkpoint = ckpt_root / "best";
      }
    }
  }
  return result;
}

void SupervisedTrainer::save(const fs::path& dir) const {
  ensure_dir(dir);
  CheckpointManifest m;
  m.step = TrainingStep::supervised;
  m.iteration = iteration_;
  m.epoch = schedule_.epoch_of(std::max<int64_t>(iteration_ - 1, 0));
  m.rng_seed = config_.supervised.seed;
  m.config_hash = config_hash_;
  m.image_size = config_.model.image_size;
  m.disc_k3_stride = config_.model.disc_k3_stride;
  save_module(model_.encoder, dir / "encoder_s.pt");
  save_module(model_.decoder, dir / "decoder.pt");
  save_module(*optimizer_, dir / "optimizer.pt");
  write_json(dir / "manifest.json", m.to_json());
}

void SupervisedTrainer::load(const fs::path& dir) {
  const auto m = read_checkpoint_manifest(dir);
  if (m.step != TrainingStep::supervised) throw Error(ErrorCategory::config, "not a supervised checkpoint: " + dir.string());
  load_module(model_.encoder, dir / "encoder_s.pt");
  load_module(model_.decoder, dir / "decoder.pt");
  load_module(*optimizer_, dir / "optimizer.pt");
  iteration_ = m.iteration;
}

// --------------------------------------------------------------- adversarial

AdaptTrainer::AdaptTrainer(const ExperimentConfig& config, const fs::path& supervised_checkpoint,
                           data::UnlabeledDataset synthetic, data::UnlabeledDataset real, fs::path log_path)
    : config_(config),
      config_hash_(config.hash()),
      synthetic_(std::move(synthetic)),
      real_(std::move(real)),
      model_(DepthModel::create(0)),
      schedule_(config.adapt.lr, config.adapt.iterations, config.adapt.milestones),
      synthetic_batches_(synthetic_.size(), static_cast<size_t>(config.adapt.batch_size), config.adapt.seed,
                         kAdaptSyntheticOrder),
      real_batches_(real_.size(), static_cast<size_t>(config.adapt.batch_size), config.adapt.seed, kAdaptRealOrder),
      augmenter_(config.adapt.augment),
      log_(log_path),
      started_(std::chrono::steady_clock::now()) {
  config_.validate();
  if (real_.manifest().domain != "real_like" || real_.manifest().labeled) {
    throw Error(ErrorCategory::data, "the real-domain set for adaptation must be an unlabeled real_like dataset");
  }
  if (synthetic_.manifest().domain != "synthetic") {
    throw Error(ErrorCategory::data, "the synthetic-domain set for adaptation must be synthetic");
  }
  check_image_size(synthetic_.manifest(), config_.model.image_size, "synthetic");
  check_image_size(real_.manifest(), config_.model.image_size, "real-like");

  source_manifest_ = read_checkpoint_manifest(supervised_checkpoint);
  if (source_manifest_.step != TrainingStep::supervised) {
    throw Error(ErrorCategory::config, "adaptation starts from a supervised checkpoint");
  }
  load_module(model_.encoder, supervised_checkpoint / "encoder_s.pt");
  load_module(model_.decoder, supervised_checkpoint / "decoder.pt");
  networks::set_trainable(*model_.encoder, false);
  networks::set_trainable(*model_.decoder, false);
  model_.encoder->eval();
  model_.decoder->eval();

  parts_.encoder = networks::clone_encoder(model_.encoder);
  networks::set_trainable(*parts_.encoder, true);
  parts_.encoder->train();
  torch::manual_seed(derive_seed(config_.adapt.seed, kDiscriminatorInit));
  parts_.discriminators = make_discriminators(config_.model.disc_k3_stride);

  const auto betas = std::make_tuple(config_.adapt.beta1, config_.adapt.beta2);
  encoder_optimizer_ = std::make_unique<torch::optim::Adam>(
      parts_.encoder->parameters(), torch::optim::AdamOptions(config_.adapt.lr).betas(betas));
  discriminator_optimizer_ = std::make_unique<torch::optim::Adam>(
      discriminator_parameters(parts_), torch::optim::AdamOptions(config_.adapt.disc_lr).betas(betas));
}

AdaptStep AdaptTrainer::step() {
  const int64_t it = iteration_;
  const auto& cfg = config_.adapt;
  AdaptStep record;
  record.iteration = it;
  record.lr = schedule_.lr_at(it);
  const double factor = record.lr / cfg.lr;
  for (auto& group : encoder_optimizer_->param_groups()) {
    static_cast<torch::optim::AdamOptions&>(group.options()).lr(record.lr);
  }
  for (auto& group : discriminator_optimizer_->param_groups()) {
    static_cast<torch::optim::AdamOptions&>(group.options()).lr(cfg.disc_lr * factor);
  }

  std::mt19937_64 rng(derive_seed(cfg.seed, kAdaptAugment, static_cast<uint64_t>(it)));
  std::vector<torch::Tensor> synthetic_images;
  for (size_t idx : synthetic_batches_.indices(it)) {
    auto image = image_to_tensor(synthetic_.load(idx));
    augmenter_.apply(image, nullptr, rng, /*jitter=*/true);
    synthetic_images.push_back(image);
  }
  std::vector<torch::Tensor> real_images;
  for (size_t idx : real_batches_.indices(it)) {
    auto image = image_to_tensor(real_.load(idx));
    augmenter_.apply(image, nullptr, rng, /*jitter=*/false);
    real_images.push_back(image);
  }

  networks::FeaturePyramid source;
  {
    torch::NoGradGuard no_grad;
    source = model_.encoder->forward(torch::stack(synthetic_images));
  }
  parts_.encoder->train();
  const auto target = parts_.encoder->forward(torch::stack(real_images));

  // Discriminators: synthetic features are "real" (1), adapted real-domain features "fake" (0).
  for (auto& d : parts_.discriminators) networks::set_trainable(*d, true);
  auto disc_total = torch::zeros({});
  for (int i = 0; i < 3; ++i) {
    auto& d = parts_.discriminators[i];
    auto real_logits = d->forward(source.adversarial(i + 1));
    auto fake_logits = d->forward(target.adversarial(i + 1).detach());
    auto loss = losses::discriminator_loss(real_logits, fake_logits);
    record.discriminator_loss[i] = loss.item<double>();
    record.discriminator_accuracy[i] =
        0.5 * ((real_logits > 0).to(torch::kDouble).mean() + (fake_logits < 0).to(torch::kDouble).mean()).item<double>();
    disc_total = disc_total + loss;
  }
  discriminator_optimizer_->zero_grad();
  disc_total.backward();
  double disc_sq = 0.0;
  for (const auto& d : parts_.discriminators) disc_sq += std::pow(networks::gradient_norm(*d), 2);
  record.discriminator_grad_norm = std::sqrt(disc_sq);
  discriminator_optimizer_->step();

  // Encoder: non-saturating objective through frozen discriminators.
  for (auto& d : parts_.discriminators) networks::set_trainable(*d, false);
  auto encoder_total = torch::zeros({});
  for (int i = 0; i < 3; ++i) {
    auto loss = losses::encoder_adversarial_loss(parts_.discriminators[i]->forward(target.adversarial(i + 1)));
    record.encoder_loss[i] = loss.item<double>();
    encoder_total = encoder_total + loss;
  }
  encoder_optimizer_->zero_grad();
  encoder_total.backward();
  record.encoder_r_grad_norm = networks::gradient_norm(*parts_.encoder);
  record.encoder_s_grad_norm = networks::gradient_norm(*model_.encoder);
  record.decoder_grad_norm = networks::gradient_norm(*model_.decoder);
  encoder_optimizer_->step();
  for (auto& d : parts_.discriminators) networks::set_trainable(*d, true);

  const double disc_sum = record.discriminator_loss[0] + record.discriminator_loss[1] + record.discriminator_loss[2];
  if (!std::isfinite(disc_sum) || !std::isfinite(encoder_total.item<double>())) {
    throw Error(ErrorCategory::numeric, "non-finite adversarial loss at iteration " + std::to_string(it));
  }
  low_loss_streak_ = disc_sum < cfg.collapse_threshold ? low_loss_streak_ + 1 : 0;
  record.collapse_warning = low_loss_streak_ == cfg.collapse_patience;
  ++iteration_;

  nlohmann::json record_json = {
      {"phase", "adapt"},
      {"iteration", it},
      {"loss",
       {{"discriminator", record.discriminator_loss},
        {"encoder", record.encoder_loss},
        {"total", disc_sum + record.encoder_loss[0] + record.encoder_loss[1] + record.encoder_loss[2]}}},
      {"discriminator_accuracy", record.discriminator_accuracy},
      {"lr", record.lr},
      {"grad_norms",
       {{"encoder_s", record.encoder_s_grad_norm},
        {"decoder", record.decoder_grad_norm},
        {"encoder_r", record.encoder_r_grad_norm},
        {"discriminators", record.discriminator_grad_norm}}},
      {"wall_time", seconds_since(started_)}};
  if (record.collapse_warning) {
    record_json["warning"] = "possible mode collapse: discriminator loss below threshold for " +
                             std::to_string(cfg.collapse_patience) + " iterations";
  }
  log_.write(record_json);
  return record;
}

void AdaptTrainer::run_until(int64_t iteration, const std::function<void(const AdaptStep&)>& on_step) {
  while (iteration_ < iteration) {
    auto record = step();
    if (on_step) on_step(record);
  }
}

fs::path AdaptTrainer::train(const fs::path& ckpt_root) {
  run_until(config_.adapt.iterations);
  save(ckpt_root / "last");
  return ckpt_root / "last";
}

void AdaptTrainer::save(const fs::path& dir) const {
  ensure_dir(dir);
  CheckpointManifest m;
  m.step = TrainingStep::adapted;
  m.iteration = iteration_;
  m.epoch = source_manifest_.epoch;
  m.rng_seed = config_.adapt.seed;
  m.config_hash = config_hash_;
  m.image_size = config_.model.image_size;
  m.disc_k3_stride = config_.model.disc_k3_stride;
  save_module(model_.encoder, dir / "encoder_s.pt");
  save_module(model_.decoder, dir / "decoder.pt");
  save_module(parts_.encoder, dir / "encoder_r.pt");
  for (int i = 0; i < 3; ++i) {
    save_module(parts_.discriminators[i], dir / ("discriminator_" + std::to_string(i + 1) + ".pt"));
  }
  save_module(*encoder_optimizer_, dir / "optimizer_encoder.pt");
  save_module(*discriminator_optimizer_, dir / "optimizer_discriminator.pt");
  write_json(dir / "manifest.json", m.to_json());
}

void AdaptTrainer::load(const fs::path& dir) {
  const auto m = read_checkpoint_manifest(dir);
  if (m.step != TrainingStep::adapted) throw Error(ErrorCategory::config, "not an adapted checkpoint: " + dir.string());
  load_module(parts_.encoder, dir / "encoder_r.pt");
  for (int i = 0; i < 3; ++i) {
    load_module(parts_.discriminators[i], dir / ("discriminator_" + std::to_string(i + 1) + ".pt"));
  }
  load_module(*encoder_optimizer_, dir / "optimizer_encoder.pt");
  load_module(*discriminator_optimizer_, dir / "optimizer_discriminator.pt");
  iteration_ = m.iteration;
}

// ----------------------------------------------------------------- inference

Inference infer(const Checkpoint& checkpoint, const cv::Mat& color, synth::Domain domain) {
  require(color.type() == CV_8UC3, "infer: expected an 8-bit colour image");
  if (color.rows != color.cols || color.rows % 32 != 0) {
    throw Error(ErrorCategory::data, "infer: images must be square with a side divisible by 32");
  }
  Inference out;
  out.encoder = domain == synth::Domain::synthetic ? "F_S" : "F_R";
  auto encoder = checkpoint.encoder_for(domain);
  auto [depth, confidence] = predict(encoder, checkpoint.decoder(), image_to_tensor(color).unsqueeze(0));
  out.depth = tensor_to_mat(depth[0]);
  out.confidence = tensor_to_mat(confidence[0]);
  return out;
}

std::vector<metrics::ReportRow> evaluate_checkpoints(const std::vector<fs::path>& checkpoints,
                                                     const std::vector<std::string>& labels,
                                                     const data::LabeledDataset& dataset, const EvalOptions& options) {
  if (checkpoints.empty()) throw Error(ErrorCategory::config, "eval needs at least one checkpoint");
  require(labels.size() == checkpoints.size(), "evaluate_checkpoints: one label per checkpoint");
  if (dataset.empty()) throw Error(ErrorCategory::data, "cannot evaluate an empty dataset");
  const bool real_domain = dataset.manifest().domain == "real_like";
  const size_t vis_count = std::min(static_cast<size_t>(std::max(options.vis_frames, 0)), dataset.size());

  std::vector<metrics::ReportRow> rows;
  std::vector<std::vector<cv::Mat>> vis_predictions;
  for (size_t c = 0; c < checkpoints.size(); ++c) {
    const auto ckpt = Checkpoint::load(checkpoints[c]);
    const auto domain = real_domain && ckpt.adapted() ? synth::Domain::real_like : synth::Domain::synthetic;
    auto encoder = ckpt.encoder_for(domain);
    std::vector<metrics::FrameStats> stats;
    std::vector<cv::Mat> kept;
    const size_t batch = static_cast<size_t>(std::max(options.batch_size, 1));
    for (size_t begin = 0; begin < dataset.size(); begin += batch) {
      std::vector<torch::Tensor> images;
      std::vector<cv::Mat> truths;
      for (size_t i = begin; i < std::min(begin + batch, dataset.size()); ++i) {
        auto sample = dataset.load(i);
        images.push_back(image_to_tensor(sample.color));
        truths.push_back(sample.depth);
      }
      auto [depth, confidence] = predict(encoder, ckpt.decoder(), torch::stack(images));
      for (size_t k = 0; k < truths.size(); ++k) {
        cv::Mat pred = tensor_to_mat(depth[static_cast<int64_t>(k)]);
        if (options.median_scale) pred = metrics::median_scaled(truths[k], pred);
        stats.push_back(metrics::frame_stats(truths[k], pred, options.clamp_mm));
        if (begin + k < vis_count) kept.push_back(pred);
      }
    }
    rows.push_back({labels[c], domain == synth::Domain::synthetic ? "F_S" : "F_R",
                    metrics::aggregate(stats, options.median_scale)});
    vis_predictions.push_back(std::move(kept));
  }

  if (vis_count > 0 && !options.vis_dir.empty()) {
    ensure_dir(options.vis_dir);
    const auto range = dataset.manifest().depth_range_mm.value_or(
        std::make_pair(rows.front().metrics.depth_min_mm, rows.front().metrics.depth_max_mm));
    for (size_t f = 0; f < vis_count; ++f) {
      auto sample = dataset.load(f);
      std::vector<cv::Mat> panels{sample.color, metrics::colorize_depth(sample.depth, range.first, range.second)};
      for (const auto& preds : vis_predictions) {
        panels.push_back(metrics::colorize_depth(preds[f], range.first, range.second));
      }
      cv::Mat strip;
      cv::hconcat(panels, strip);
      data::write_png(options.vis_dir / data::frame_name(f, "png"), strip);
    }
  }
  return rows;
}

}  // namespace bronchodepth::pipeline
