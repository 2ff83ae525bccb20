#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>

// Depth accuracy metrics. Depth maps are CV_32FC1 in millimetres; ground truth
// must be strictly positive and predictions are clamped to a floor before any
// metric so a ReLU head's exact zeros cannot divide by zero.
namespace bronchodepth::metrics {

inline constexpr double kPredictionFloorMm = 1e-3;
inline constexpr std::array<double, 3> kDeltaThresholds{1.25, 1.25 * 1.25, 1.25 * 1.25 * 1.25};

double abs_rel(const cv::Mat& gt, const cv::Mat& pred, double floor_mm = kPredictionFloorMm);
double rmse(const cv::Mat& gt, const cv::Mat& pred, double floor_mm = kPredictionFloorMm);
double delta_accuracy(const cv::Mat& gt, const cv::Mat& pred, double tau, double floor_mm = kPredictionFloorMm);

/// Rescales pred by median(gt) / median(pred).
cv::Mat median_scaled(const cv::Mat& gt, const cv::Mat& pred);

/// Per-frame sufficient statistics for pixel-weighted aggregation.
struct FrameStats {
  double abs_rel_sum = 0.0;
  double squared_error_sum = 0.0;
  std::array<uint64_t, 3> delta_hits{};
  uint64_t pixels = 0;
  double gt_min = 0.0;
  double gt_max = 0.0;
};

FrameStats frame_stats(const cv::Mat& gt, const cv::Mat& pred, double floor_mm = kPredictionFloorMm);

struct MetricReport {
  double abs_rel = 0.0;
  double rmse_mm = 0.0;
  std::array<double, 3> delta_acc{};  // indexed like kDeltaThresholds
  size_t n_frames = 0;
  uint64_t n_pixels = 0;
  double depth_min_mm = 0.0;
  double depth_max_mm = 0.0;
  bool median_scaled = false;

  nlohmann::json to_json() const;
};

/// Pixel-weighted global means. The result does not depend on frame order.
/// Throws a data Error for an empty input.
MetricReport aggregate(std::span<const FrameStats> frames, bool median_scaled = false);

inline constexpr int kReportSchemaVersion = 1;

struct ReportRow {
  std::string label;
  std::string encoder;  // which encoder produced the predictions
  MetricReport metrics;
};

/// report.json and report.csv (fixed, versioned columns) in `dir`.
void write_reports(const std::filesystem::path& dir, const std::vector<ReportRow>& rows,
                   const nlohmann::json& metadata = nlohmann::json::object());

std::string csv_header();
std::string csv_row(const ReportRow& row);

/// Colour-mapped depth over a fixed [lo, hi] mm range, CV_8UC3.
cv::Mat colorize_depth(const cv::Mat& depth, double lo_mm, double hi_mm);

}  // namespace bronchodepth::metrics
