#include "bronchodepth/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include <opencv2/imgcodecs.hpp>

#include "bronchodepth/error.hpp"

namespace bronchodepth::data {
namespace {

static_assert(std::endian::native == std::endian::little, "PFM IO assumes a little-endian host");

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorCategory::io, "cannot create directory " + dir.string() + ": " + ec.message());
}

std::string read_token(std::istream& in) {
  std::string token;
  in >> token;
  return token;
}

}  // namespace

void write_pfm(const fs::path& path, const cv::Mat& depth) {
  require(depth.type() == CV_32FC1, "write_pfm: expected a CV_32FC1 image");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCategory::io, "cannot open " + path.string() + " for writing");
  out << "Pf\n" << depth.cols << ' ' << depth.rows << "\n-1.0\n";
  for (int row = depth.rows - 1; row >= 0; --row) {
    out.write(reinterpret_cast<const char*>(depth.ptr<float>(row)),
              static_cast<std::streamsize>(depth.cols * sizeof(float)));
  }
  if (!out) throw Error(ErrorCategory::io, "failed writing " + path.string());
}

cv::Mat read_pfm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCategory::io, "cannot open " + path.string());
  if (read_token(in) != "Pf") throw Error(ErrorCategory::data, path.string() + ": not a greyscale PFM");
  int width = 0;
  int height = 0;
  double scale = 0.0;
  in >> width >> height >> scale;
  if (!in || width <= 0 || height <= 0 || scale == 0.0) {
    throw Error(ErrorCategory::data, path.string() + ": malformed PFM header");
  }
  if (scale > 0) throw Error(ErrorCategory::data, path.string() + ": big-endian PFM is not supported");
  in.get();  // single whitespace byte ends the header
  cv::Mat depth(height, width, CV_32FC1);
  for (int row = height - 1; row >= 0; --row) {
    in.read(reinterpret_cast<char*>(depth.ptr<float>(row)), static_cast<std::streamsize>(width * sizeof(float)));
  }
  if (!in) throw Error(ErrorCategory::data, path.string() + ": truncated PFM payload");
  if (std::abs(scale) != 1.0) depth *= std::abs(scale);
  return depth;
}

void write_png(const fs::path& path, const cv::Mat& color) {
  if (!cv::imwrite(path.string(), color)) throw Error(ErrorCategory::io, "cannot write " + path.string());
}

cv::Mat read_png(const fs::path& path) {
  cv::Mat img = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (img.empty()) throw Error(ErrorCategory::io, "cannot read image " + path.string());
  return img;
}

Split random_split(size_t n, double val_fraction, uint64_t seed) {
  require(val_fraction >= 0.0 && val_fraction < 1.0, "random_split: fraction must be in [0, 1)");
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_val = static_cast<size_t>(std::llround(static_cast<double>(n) * val_fraction));
  Split split;
  split.val.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  split.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  std::sort(split.val.begin(), split.val.end());
  std::sort(split.train.begin(), split.train.end());
  return split;
}

size_t DatasetManifest::count(const std::string& split) const {
  auto it = splits.find(split);
  return it == splits.end() ? 0 : it->second.size();
}

nlohmann::json DatasetManifest::to_json() const {
  nlohmann::json j;
  j["format_version"] = kManifestVersion;
  j["domain"] = domain;
  j["labeled"] = labeled;
  j["image_size"] = image_size;
  j["camera"] = {{"fx", camera.fx}, {"fy", camera.fy}, {"cx", camera.cx},
                 {"cy", camera.cy}, {"width", camera.width}, {"height", camera.height}};
  j["seed"] = seed;
  nlohmann::json counts = nlohmann::json::object();
  nlohmann::json split_ids = nlohmann::json::object();
  for (const auto& [name, ids] : splits) {
    counts[name] = ids.size();
    split_ids[name] = ids;
  }
  j["counts"] = counts;
  j["splits"] = split_ids;
  if (depth_range_mm) {
    j["depth_range_mm"] = {{"min", depth_range_mm->first}, {"max", depth_range_mm->second}};
  }
  j["extra"] = extra;
  return j;
}

DatasetManifest DatasetManifest::from_json(const nlohmann::json& j) {
  try {
    if (j.at("format_version").get<int>() != kManifestVersion) {
      throw Error(ErrorCategory::data, "unsupported dataset manifest version");
    }
    DatasetManifest m;
    m.domain = j.at("domain").get<std::string>();
    m.labeled = j.at("labeled").get<bool>();
    m.image_size = j.at("image_size").get<int>();
    const auto& cam = j.at("camera");
    m.camera = {cam.at("fx").get<double>(), cam.at("fy").get<double>(), cam.at("cx").get<double>(),
                cam.at("cy").get<double>(), cam.at("width").get<int>(), cam.at("height").get<int>()};
    m.seed = j.at("seed").get<uint64_t>();
    for (const auto& [name, ids] : j.at("splits").items()) m.splits[name] = ids.get<std::vector<size_t>>();
    if (j.contains("depth_range_mm")) {
      m.depth_range_mm = std::make_pair(j["depth_range_mm"].at("min").get<double>(),
                                        j["depth_range_mm"].at("max").get<double>());
    }
    if (j.contains("extra")) m.extra = j["extra"];
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCategory::data, std::string("malformed dataset manifest: ") + e.what());
  }
}

std::string frame_name(size_t index, const char* extension) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%06zu.%s", index, extension);
  return buf;
}

namespace {

void write_manifest(const fs::path& dir, const DatasetManifest& manifest) {
  std::ofstream out(dir / "manifest.json");
  if (!out) throw Error(ErrorCategory::io, "cannot write manifest in " + dir.string());
  out << manifest.to_json().dump(2) << '\n';
}

template <class Frame>
DatasetManifest begin_manifest(const std::vector<Frame>& frames,
                               const std::map<std::string, std::vector<size_t>>& splits, uint64_t seed,
                               const nlohmann::json& extra) {
  DatasetManifest m;
  m.seed = seed;
  m.splits = splits;
  m.extra = extra;
  if (!frames.empty()) {
    m.camera = frames.front().camera;
    m.image_size = frames.front().color.cols;
  }
  for (const auto& [name, ids] : splits) {
    for (size_t id : ids) require(id < frames.size(), "write_dataset: split index out of range");
  }
  return m;
}

}  // namespace

DatasetManifest write_dataset(const std::vector<synth::RenderedFrame>& frames,
                              const std::map<std::string, std::vector<size_t>>& splits, const fs::path& dir,
                              uint64_t seed, const nlohmann::json& extra) {
  auto manifest = begin_manifest(frames, splits, seed, extra);
  manifest.labeled = true;
  manifest.domain = frames.empty() || frames.front().domain == synth::Domain::synthetic ? "synthetic" : "real_like";
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (const auto& [name, ids] : splits) {
    ensure_dir(dir / name / "color");
    ensure_dir(dir / name / "depth");
    for (size_t k = 0; k < ids.size(); ++k) {
      const auto& frame = frames[ids[k]];
      write_png(dir / name / "color" / frame_name(k, "png"), frame.color);
      write_pfm(dir / name / "depth" / frame_name(k, "pfm"), frame.depth);
      double fmin = 0;
      double fmax = 0;
      cv::minMaxLoc(frame.depth, &fmin, &fmax);
      lo = std::min(lo, fmin);
      hi = std::max(hi, fmax);
    }
  }
  if (lo <= hi) manifest.depth_range_mm = std::make_pair(lo, hi);
  write_manifest(dir, manifest);
  return manifest;
}

DatasetManifest write_dataset(const std::vector<synth::UnlabeledFrame>& frames,
                              const std::map<std::string, std::vector<size_t>>& splits, const fs::path& dir,
                              uint64_t seed, const nlohmann::json& extra) {
  auto manifest = begin_manifest(frames, splits, seed, extra);
  manifest.labeled = false;
  manifest.domain = "real_like";
  for (const auto& [name, ids] : splits) {
    ensure_dir(dir / name / "color");
    for (size_t k = 0; k < ids.size(); ++k) {
      write_png(dir / name / "color" / frame_name(k, "png"), frames[ids[k]].color);
    }
  }
  write_manifest(dir, manifest);
  return manifest;
}

DatasetManifest read_manifest(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw Error(ErrorCategory::data, "no dataset manifest in " + dir.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCategory::data, "unreadable dataset manifest in " + dir.string() + ": " + e.what());
  }
  return DatasetManifest::from_json(j);
}

LabeledDataset LabeledDataset::open(const fs::path& dir, const std::string& split) {
  LabeledDataset ds;
  ds.manifest_ = read_manifest(dir);
  if (!ds.manifest_.labeled) throw Error(ErrorCategory::data, dir.string() + " holds no depth labels");
  if (!ds.manifest_.splits.contains(split)) {
    throw Error(ErrorCategory::data, dir.string() + " has no split '" + split + "'");
  }
  ds.root_ = dir;
  ds.split_ = split;
  ds.count_ = ds.manifest_.count(split);
  return ds;
}

LabeledSample LabeledDataset::load(size_t i) const {
  require(i < count_, "LabeledDataset: index out of range");
  return {read_png(root_ / split_ / "color" / frame_name(i, "png")),
          read_pfm(root_ / split_ / "depth" / frame_name(i, "pfm"))};
}

UnlabeledDataset UnlabeledDataset::open(const fs::path& dir, const std::string& split) {
  UnlabeledDataset ds;
  ds.manifest_ = read_manifest(dir);
  if (!ds.manifest_.splits.contains(split)) {
    throw Error(ErrorCategory::data, dir.string() + " has no split '" + split + "'");
  }
  ds.root_ = dir;
  ds.split_ = split;
  ds.count_ = ds.manifest_.count(split);
  return ds;
}

cv::Mat UnlabeledDataset::load(size_t i) const {
  require(i < count_, "UnlabeledDataset: index out of range");
  return read_png(root_ / split_ / "color" / frame_name(i, "png"));
}

}  // namespace bronchodepth::data
