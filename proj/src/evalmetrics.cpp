#include "bronchodepth/evalmetrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include <opencv2/imgproc.hpp>

#include "bronchodepth/error.hpp"

namespace bronchodepth::metrics {
namespace {

void check_maps(const cv::Mat& gt, const cv::Mat& pred) {
  require(gt.type() == CV_32FC1 && pred.type() == CV_32FC1, "metrics: depth maps must be CV_32FC1");
  require(gt.size() == pred.size(), "metrics: size mismatch");
  require(!gt.empty(), "metrics: empty depth map");
}

// Order-independent sum: the same multiset always adds up the same way.
double sorted_sum(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  double s = 0.0;
  for (double v : values) s += v;
  return s;
}

double median_of(const cv::Mat& m) {
  std::vector<float> v(m.begin<float>(), m.end<float>());
  auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  return *mid;
}

}  // namespace

FrameStats frame_stats(const cv::Mat& gt, const cv::Mat& pred, double floor_mm) {
  check_maps(gt, pred);
  FrameStats s;
  s.gt_min = std::numeric_limits<double>::infinity();
  s.gt_max = -std::numeric_limits<double>::infinity();
  for (int r = 0; r < gt.rows; ++r) {
    const float* g = gt.ptr<float>(r);
    const float* p = pred.ptr<float>(r);
    for (int c = 0; c < gt.cols; ++c) {
      const double truth = g[c];
      if (!(truth > 0.0) || !std::isfinite(truth)) {
        throw Error(ErrorCategory::data, "metrics: ground-truth depth must be finite and > 0");
      }
      const double guess = std::max(static_cast<double>(p[c]), floor_mm);
      const double err = truth - guess;
      s.abs_rel_sum += std::abs(err) / truth;
      s.squared_error_sum += err * err;
      const double ratio = std::max(truth / guess, guess / truth);
      for (size_t k = 0; k < kDeltaThresholds.size(); ++k) {
        if (ratio < kDeltaThresholds[k]) ++s.delta_hits[k];
      }
      s.gt_min = std::min(s.gt_min, truth);
      s.gt_max = std::max(s.gt_max, truth);
      ++s.pixels;
    }
  }
  return s;
}

double abs_rel(const cv::Mat& gt, const cv::Mat& pred, double floor_mm) {
  const auto s = frame_stats(gt, pred, floor_mm);
  return s.abs_rel_sum / static_cast<double>(s.pixels);
}

double rmse(const cv::Mat& gt, const cv::Mat& pred, double floor_mm) {
  const auto s = frame_stats(gt, pred, floor_mm);
  return std::sqrt(s.squared_error_sum / static_cast<double>(s.pixels));
}

double delta_accuracy(const cv::Mat& gt, const cv::Mat& pred, double tau, double floor_mm) {
  check_maps(gt, pred);
  require(tau > 1.0, "delta_accuracy: threshold must exceed 1");
  uint64_t hits = 0;
  for (int r = 0; r < gt.rows; ++r) {
    const float* g = gt.ptr<float>(r);
    const float* p = pred.ptr<float>(r);
    for (int c = 0; c < gt.cols; ++c) {
      const double truth = std::max(static_cast<double>(g[c]), floor_mm);
      const double guess = std::max(static_cast<double>(p[c]), floor_mm);
      if (std::max(truth / guess, guess / truth) < tau) ++hits;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(gt.total());
}

cv::Mat median_scaled(const cv::Mat& gt, const cv::Mat& pred) {
  check_maps(gt, pred);
  const double pm = median_of(pred);
  if (pm <= 0.0) return pred.clone();
  cv::Mat out;
  pred.convertTo(out, CV_32FC1, median_of(gt) / pm);
  return out;
}

nlohmann::json MetricReport::to_json() const {
  nlohmann::json deltas = nlohmann::json::object();
  for (size_t k = 0; k < kDeltaThresholds.size(); ++k) {
    char key[32];
    std::snprintf(key, sizeof(key), "%.7g", kDeltaThresholds[k]);
    deltas[key] = delta_acc[k];
  }
  return {{"abs_rel", abs_rel},
          {"rmse_mm", rmse_mm},
          {"delta_acc", deltas},
          {"n_frames", n_frames},
          {"n_pixels", n_pixels},
          {"depth_range_mm", {depth_min_mm, depth_max_mm}},
          {"median_scaled", median_scaled},
          {"aggregation", "pixel-weighted"}};
}

MetricReport aggregate(std::span<const FrameStats> frames, bool median_scaled) {
  if (frames.empty()) throw Error(ErrorCategory::data, "cannot evaluate an empty dataset");
  std::vector<double> abs_rel_sums;
  std::vector<double> sq_sums;
  uint64_t pixels = 0;
  std::array<uint64_t, 3> hits{};
  MetricReport r;
  r.depth_min_mm = std::numeric_limits<double>::infinity();
  r.depth_max_mm = -std::numeric_limits<double>::infinity();
  for (const auto& f : frames) {
    abs_rel_sums.push_back(f.abs_rel_sum);
    sq_sums.push_back(f.squared_error_sum);
    pixels += f.pixels;
    for (size_t k = 0; k < hits.size(); ++k) hits[k] += f.delta_hits[k];
    r.depth_min_mm = std::min(r.depth_min_mm, f.gt_min);
    r.depth_max_mm = std::max(r.depth_max_mm, f.gt_max);
  }
  if (pixels == 0) throw Error(ErrorCategory::data, "cannot evaluate frames without pixels");
  const auto n = static_cast<double>(pixels);
  r.abs_rel = sorted_sum(std::move(abs_rel_sums)) / n;
  r.rmse_mm = std::sqrt(sorted_sum(std::move(sq_sums)) / n);
  for (size_t k = 0; k < hits.size(); ++k) r.delta_acc[k] = static_cast<double>(hits[k]) / n;
  r.n_frames = frames.size();
  r.n_pixels = pixels;
  r.median_scaled = median_scaled;
  return r;
}

std::string csv_header() {
  return "schema_version,label,encoder,abs_rel,rmse_mm,delta_1.25,delta_1.5625,delta_1.953125,"
         "n_frames,n_pixels,depth_min_mm,depth_max_mm,median_scaled,aggregation";
}

std::string csv_row(const ReportRow& row) {
  const auto& m = row.metrics;
  char buf[512];
  std::snprintf(buf, sizeof(buf), "%d,%s,%s,%.9g,%.9g,%.9g,%.9g,%.9g,%zu,%llu,%.9g,%.9g,%d,pixel-weighted",
                kReportSchemaVersion, row.label.c_str(), row.encoder.c_str(), m.abs_rel, m.rmse_mm, m.delta_acc[0],
                m.delta_acc[1], m.delta_acc[2], m.n_frames, static_cast<unsigned long long>(m.n_pixels),
                m.depth_min_mm, m.depth_max_mm, m.median_scaled ? 1 : 0);
  return buf;
}

void write_reports(const std::filesystem::path& dir, const std::vector<ReportRow>& rows,
                   const nlohmann::json& metadata) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorCategory::io, "cannot create " + dir.string());

  nlohmann::json j;
  j["schema_version"] = kReportSchemaVersion;
  j["metadata"] = metadata;
  j["rows"] = nlohmann::json::array();
  for (const auto& row : rows) {
    auto entry = row.metrics.to_json();
    entry["label"] = row.label;
    entry["encoder"] = row.encoder;
    j["rows"].push_back(entry);
  }
  std::ofstream json_out(dir / "report.json");
  json_out << j.dump(2) << '\n';

  std::ofstream csv_out(dir / "report.csv");
  csv_out << csv_header() << '\n';
  for (const auto& row : rows) csv_out << csv_row(row) << '\n';
  if (!json_out || !csv_out) throw Error(ErrorCategory::io, "failed writing reports in " + dir.string());
}

cv::Mat colorize_depth(const cv::Mat& depth, double lo_mm, double hi_mm) {
  require(depth.type() == CV_32FC1, "colorize_depth: expected CV_32FC1");
  require(hi_mm > lo_mm, "colorize_depth: empty range");
  cv::Mat scaled;
  depth.convertTo(scaled, CV_8UC1, 255.0 / (hi_mm - lo_mm), -255.0 * lo_mm / (hi_mm - lo_mm));
  cv::Mat color;
  cv::applyColorMap(scaled, color, cv::COLORMAP_JET);
  return color;
}

}  // namespace bronchodepth::metrics
