#include "bronchodepth/config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <openssl/evp.h>

#include "bronchodepth/error.hpp"
#include "bronchodepth/schedule.hpp"

namespace bronchodepth {
namespace {

using nlohmann::json;

[[noreturn]] void bad(const std::string& message) { throw Error(ErrorCategory::config, message); }

// One field list per struct drives both serialisation and parsing.
template <class V> void visit_fields(V& v, synth::TreeOptions& c) {
  v("root_radius_mm", c.root_radius_mm);
  v("root_length_mm", c.root_length_mm);
  v("radius_decay", c.radius_decay);
  v("length_decay", c.length_decay);
  v("branch_angle_deg", c.branch_angle_deg);
  v("angle_jitter_deg", c.angle_jitter_deg);
}
template <class V> void visit_fields(V& v, synth::CameraIntrinsics& c) {
  v("fx", c.fx);
  v("fy", c.fy);
  v("cx", c.cx);
  v("cy", c.cy);
  v("width", c.width);
  v("height", c.height);
}
template <class V> void visit_fields(V& v, synth::ShadingOptions& c) {
  v("gain", c.gain);
  v("albedo_rgb", c.albedo_rgb);
  v("ambient", c.ambient);
  v("diffuse", c.diffuse);
  v("specular", c.specular);
  v("shininess", c.shininess);
  v("falloff_mm", c.falloff_mm);
  v("texture_strength", c.texture_strength);
  v("texture_seed", c.texture_seed);
}
template <class V> void visit_fields(V& v, synth::DegradationOptions& c) {
  v("strength", c.strength);
  v("blur_sigma_px", c.blur_sigma_px);
  v("vignette", c.vignette);
  v("highlight_gain", c.highlight_gain);
  v("color_cast_rgb", c.color_cast_rgb);
  v("noise_sigma", c.noise_sigma);
}
template <class V> void visit_fields(V& v, synth::PoseJitter& c) {
  v("max_offset_fraction", c.max_offset_fraction);
  v("max_tilt_deg", c.max_tilt_deg);
  v("min_axial_fraction", c.min_axial_fraction);
  v("max_axial_fraction", c.max_axial_fraction);
}
template <class V> void visit_fields(V& v, losses::LossWeights& c) {
  v("depth", c.depth);
  v("gradient", c.gradient);
  v("confidence", c.confidence);
}
template <class V> void visit_fields(V& v, AugmentConfig& c) {
  v("horizontal_flip", c.horizontal_flip);
  v("vertical_flip", c.vertical_flip);
  v("color_jitter", c.color_jitter);
  v("brightness", c.brightness);
  v("contrast", c.contrast);
  v("saturation", c.saturation);
  v("hue", c.hue);
}
template <class V> void visit_fields(V& v, ModelConfig& c) {
  v("image_size", c.image_size);
  v("disc_k3_stride", c.disc_k3_stride);
  v("scales", c.scales);
}
template <class V> void visit_fields(V& v, DataConfig& c) {
  v("seed", c.seed);
  v("trees", c.trees);
  v("tree_levels", c.tree_levels);
  v("tree", c.tree);
  v("camera", c.camera);
  v("shading", c.shading);
  v("degradation", c.degradation);
  v("pose_jitter", c.jitter);
  v("synthetic_frames", c.synthetic_frames);
  v("val_fraction", c.val_fraction);
  v("split_seed", c.split_seed);
  v("real_train_frames", c.real_train_frames);
  v("real_eval_frames", c.real_eval_frames);
}
template <class V> void visit_fields(V& v, SupervisedConfig& c) {
  v("epochs", c.epochs);
  v("batch_size", c.batch_size);
  v("lr", c.lr);
  v("beta1", c.beta1);
  v("beta2", c.beta2);
  v("loss_weights", c.weights);
  v("berhu_k", c.berhu_k);
  v("augment", c.augment);
  v("max_iterations", c.max_iterations);
  v("seed", c.seed);
}
template <class V> void visit_fields(V& v, AdaptConfig& c) {
  v("iterations", c.iterations);
  v("lr", c.lr);
  v("disc_lr", c.disc_lr);
  v("beta1", c.beta1);
  v("beta2", c.beta2);
  v("milestones", c.milestones);
  v("batch_size", c.batch_size);
  v("augment", c.augment);
  v("collapse_threshold", c.collapse_threshold);
  v("collapse_patience", c.collapse_patience);
  v("seed", c.seed);
}
template <class V> void visit_fields(V& v, EvalConfig& c) {
  v("median_scale", c.median_scale);
  v("clamp_mm", c.clamp_mm);
  v("vis_frames", c.vis_frames);
  v("batch_size", c.batch_size);
}
template <class V> void visit_fields(V& v, ExperimentConfig& c) {
  v("data", c.data);
  v("supervised", c.supervised);
  v("adapt", c.adapt);
  v("eval", c.eval);
  v("model", c.model);
}

template <class T, class V>
concept Visitable = requires(V& v, T& t) { visit_fields(v, t); };

struct JsonWriter {
  json& out;

  template <class T> void operator()(const char* key, T& value) {
    if constexpr (Visitable<T, JsonWriter>) {
      json child = json::object();
      JsonWriter w{child};
      visit_fields(w, value);
      out[key] = std::move(child);
    } else {
      out[key] = value;
    }
  }
};

struct JsonReader {
  const json& in;
  std::string path;
  std::set<std::string> seen{};

  template <class T> void operator()(const char* key, T& value) {
    seen.insert(key);
    if (!in.contains(key)) return;
    const std::string where = path.empty() ? key : path + "." + key;
    const json& node = in.at(key);
    if constexpr (Visitable<T, JsonReader>) {
      if (!node.is_object()) bad("config key '" + where + "' must be an object");
      JsonReader r{node, where};
      visit_fields(r, value);
      r.finish();
    } else {
      if constexpr (std::is_same_v<T, bool>) {
        if (!node.is_boolean()) bad("config key '" + where + "' must be a boolean");
      } else if constexpr (std::is_integral_v<T>) {
        if (!node.is_number_integer()) bad("config key '" + where + "' must be an integer");
        if constexpr (std::is_unsigned_v<T>) {
          if (node.is_number_integer() && !node.is_number_unsigned()) {
            bad("config key '" + where + "' must be non-negative");
          }
        }
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!node.is_number()) bad("config key '" + where + "' must be a number");
      }
      try {
        value = node.get<T>();
      } catch (const json::exception& e) {
        bad("config key '" + where + "' has the wrong type: " + e.what());
      }
    }
  }

  void finish() const {
    for (const auto& [key, _] : in.items()) {
      if (!seen.contains(key)) bad("unknown config key '" + (path.empty() ? key : path + "." + key) + "'");
    }
  }
};

void check(bool ok, const std::string& message) {
  if (!ok) bad(message);
}

void validate_augment(const AugmentConfig& a, const std::string& where) {
  check(a.brightness >= 0 && a.brightness < 1, where + ".brightness must be in [0, 1)");
  check(a.contrast >= 0 && a.contrast < 1, where + ".contrast must be in [0, 1)");
  check(a.saturation >= 0 && a.saturation < 1, where + ".saturation must be in [0, 1)");
  check(a.hue >= 0 && a.hue <= 0.5, where + ".hue must be in [0, 0.5]");
}

}  // namespace

void ExperimentConfig::validate() const {
  check(model.image_size >= 128 && model.image_size % 32 == 0, "model.image_size must be a multiple of 32, >= 128");
  check(model.disc_k3_stride == 1 || model.disc_k3_stride == 2, "model.disc_k3_stride must be 1 or 2");
  check(model.scales == kScales, "model.scales must be [1, 2, 4, 8]");

  check(data.trees >= 1, "data.trees must be >= 1");
  check(data.tree_levels >= 1 && data.tree_levels <= 6, "data.tree_levels must be in [1, 6]");
  check(data.tree.root_radius_mm > 0 && data.tree.root_length_mm > 0, "data.tree root size must be positive");
  check(data.tree.radius_decay > 0 && data.tree.radius_decay < 1, "data.tree.radius_decay must be in (0, 1)");
  check(data.tree.length_decay > 0, "data.tree.length_decay must be positive");
  try {
    data.camera.validate();
  } catch (const ContractViolation& e) {
    bad(std::string("data.camera: ") + e.what());
  }
  check(data.synthetic_frames >= 1, "data.synthetic_frames must be >= 1");
  check(data.val_fraction >= 0 && data.val_fraction < 1, "data.val_fraction must be in [0, 1)");
  check(data.real_train_frames >= 0 && data.real_eval_frames >= 0, "data real frame counts must be >= 0");
  check(data.degradation.strength >= 0, "data.degradation.strength must be >= 0");
  check(data.shading.falloff_mm > 0, "data.shading.falloff_mm must be positive");
  check(data.jitter.max_offset_fraction >= 0 && data.jitter.max_offset_fraction < 1,
        "data.pose_jitter.max_offset_fraction must be in [0, 1)");
  check(data.jitter.min_axial_fraction >= 0 && data.jitter.min_axial_fraction <= data.jitter.max_axial_fraction &&
            data.jitter.max_axial_fraction <= 1,
        "data.pose_jitter axial fractions must satisfy 0 <= min <= max <= 1");

  check(supervised.epochs >= 1, "supervised.epochs must be >= 1");
  check(supervised.batch_size >= 1, "supervised.batch_size must be >= 1");
  check(supervised.lr > 0, "supervised.lr must be positive");
  check(supervised.beta1 >= 0 && supervised.beta1 < 1 && supervised.beta2 >= 0 && supervised.beta2 < 1,
        "supervised betas must be in [0, 1)");
  try {
    supervised.weights.validate();
  } catch (const ContractViolation& e) {
    bad(std::string("supervised.loss_weights: ") + e.what());
  }
  check(supervised.berhu_k > 0, "supervised.berhu_k must be positive");
  check(supervised.max_iterations >= 0, "supervised.max_iterations must be >= 0");
  validate_augment(supervised.augment, "supervised.augment");

  check(adapt.iterations >= 1, "adapt.iterations must be >= 1");
  check(adapt.lr > 0 && adapt.disc_lr > 0, "adapt learning rates must be positive");
  check(adapt.beta1 >= 0 && adapt.beta1 < 1 && adapt.beta2 >= 0 && adapt.beta2 < 1, "adapt betas must be in [0, 1)");
  check(adapt.batch_size >= 1, "adapt.batch_size must be >= 1");
  check(adapt.milestones[0] > 0 && adapt.milestones[0] < adapt.milestones[1] && adapt.milestones[1] < 1,
        "adapt.milestones must satisfy 0 < first < second < 1");
  const auto marks = LrSchedule(adapt.lr, adapt.iterations, adapt.milestones).milestones();
  check(marks[0] > 0 && marks[0] < marks[1] && marks[1] < adapt.iterations,
        "adapt.milestones must fall strictly inside (0, iterations)");
  check(adapt.collapse_threshold > 0 && adapt.collapse_patience >= 1, "adapt collapse guard must be positive");
  validate_augment(adapt.augment, "adapt.augment");

  check(eval.clamp_mm > 0, "eval.clamp_mm must be positive");
  check(eval.vis_frames >= 0, "eval.vis_frames must be >= 0");
  check(eval.batch_size >= 1, "eval.batch_size must be >= 1");
}

nlohmann::json ExperimentConfig::to_json() const {
  json out = json::object();
  JsonWriter w{out};
  visit_fields(w, const_cast<ExperimentConfig&>(*this));
  return out;
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  ExperimentConfig cfg;
  if (j.is_null()) return cfg;
  if (!j.is_object()) bad("config root must be a JSON object");
  JsonReader r{j, ""};
  visit_fields(r, cfg);
  r.finish();
  return cfg;
}

std::string ExperimentConfig::canonical() const { return to_json().dump(); }

std::string ExperimentConfig::hash() const {
  const std::string text = canonical();
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(text.data(), text.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error(ErrorCategory::config, "SHA-256 digest failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string hex;
  for (unsigned int i = 0; i < len; ++i) {
    hex += kHex[digest[i] >> 4];
    hex += kHex[digest[i] & 0xf];
  }
  return hex;
}

ExperimentConfig parse_config(const std::string& text) {
  bool blank = text.find_first_not_of(" \t\r\n") == std::string::npos;
  json j;
  if (!blank) {
    try {
      j = json::parse(text);
    } catch (const json::exception& e) {
      bad(std::string("config is not valid JSON: ") + e.what());
    }
  }
  auto cfg = ExperimentConfig::from_json(j);
  cfg.validate();
  return cfg;
}

ExperimentConfig validate_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCategory::config, "cannot read config file " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_config(buffer.str());
}

}  // namespace bronchodepth
