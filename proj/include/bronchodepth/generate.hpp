#pragma once

#include <filesystem>

#include "bronchodepth/config.hpp"
#include "bronchodepth/dataset.hpp"

namespace bronchodepth::data {

/// Layout produced by generate_datasets under its output directory.
struct DatasetLayout {
  fs::path synthetic;       // labeled, splits train/val
  fs::path real_like;       // colour only, split train
  fs::path real_like_eval;  // degraded colour + archived depth, split eval

  static DatasetLayout under(const fs::path& root);
};

struct GeneratedDatasets {
  DatasetLayout layout;
  DatasetManifest synthetic;
  DatasetManifest real_like;
  DatasetManifest real_like_eval;
};

/// Renders the synthetic domain and the degraded real-like domain from the
/// same procedural airways. Deterministic for a fixed config.
GeneratedDatasets generate_datasets(const DataConfig& config, int image_size, const fs::path& out_dir);

}  // namespace bronchodepth::data
