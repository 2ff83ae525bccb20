#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>

#include "bronchodepth/render.hpp"

namespace bronchodepth::data {

namespace fs = std::filesystem;

/// Portable float map (Netpbm "Pf" greyscale): header "Pf\n<w> <h>\n-1.0\n",
/// little-endian float32 rows stored bottom-to-top.
void write_pfm(const fs::path& path, const cv::Mat& depth);
cv::Mat read_pfm(const fs::path& path);

void write_png(const fs::path& path, const cv::Mat& color);
cv::Mat read_png(const fs::path& path);

/// Deterministic disjoint split: round(n * val_fraction) frames go to "val".
struct Split {
  std::vector<size_t> train;
  std::vector<size_t> val;
};
Split random_split(size_t n, double val_fraction, uint64_t seed);

inline constexpr int kManifestVersion = 1;

struct DatasetManifest {
  std::string domain;  // "synthetic" | "real_like"
  bool labeled = true;
  int image_size = 0;
  synth::CameraIntrinsics camera;
  uint64_t seed = 0;
  /// split name -> source frame index of each stored frame, in storage order
  std::map<std::string, std::vector<size_t>> splits;
  std::optional<std::pair<double, double>> depth_range_mm;
  nlohmann::json extra = nlohmann::json::object();

  size_t count(const std::string& split) const;
  nlohmann::json to_json() const;
  static DatasetManifest from_json(const nlohmann::json& j);
};

/// Writes `{split}/color/%06d.png` and `{split}/depth/%06d.pfm` plus manifest.json.
/// `splits` maps split names to indices into `frames`.
DatasetManifest write_dataset(const std::vector<synth::RenderedFrame>& frames,
                              const std::map<std::string, std::vector<size_t>>& splits, const fs::path& dir,
                              uint64_t seed, const nlohmann::json& extra = nlohmann::json::object());

/// Colour-only dataset: `{split}/color/%06d.png` plus manifest.json.
DatasetManifest write_dataset(const std::vector<synth::UnlabeledFrame>& frames,
                              const std::map<std::string, std::vector<size_t>>& splits, const fs::path& dir,
                              uint64_t seed, const nlohmann::json& extra = nlohmann::json::object());

DatasetManifest read_manifest(const fs::path& dir);

std::string frame_name(size_t index, const char* extension);

struct LabeledSample {
  cv::Mat color;  // CV_8UC3 BGR
  cv::Mat depth;  // CV_32FC1 mm
};

/// Paired colour/depth split, loaded lazily from disk.
class LabeledDataset {
 public:
  static LabeledDataset open(const fs::path& dir, const std::string& split);

  size_t size() const { return count_; }
  bool empty() const { return count_ == 0; }
  LabeledSample load(size_t i) const;
  const DatasetManifest& manifest() const { return manifest_; }
  const fs::path& root() const { return root_; }
  const std::string& split() const { return split_; }

 private:
  fs::path root_;
  std::string split_;
  size_t count_ = 0;
  DatasetManifest manifest_;
};

/// Colour-only split. Opening it never touches depth, even when the directory
/// holds a labeled dataset.
class UnlabeledDataset {
 public:
  static UnlabeledDataset open(const fs::path& dir, const std::string& split);

  size_t size() const { return count_; }
  bool empty() const { return count_ == 0; }
  cv::Mat load(size_t i) const;
  const DatasetManifest& manifest() const { return manifest_; }

 private:
  fs::path root_;
  std::string split_;
  size_t count_ = 0;
  DatasetManifest manifest_;
};

}  // namespace bronchodepth::data
