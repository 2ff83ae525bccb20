#pragma once

// Independent reference implementations used by the unit suites and the
// acceptance runner. Nothing here calls into the library code under test
// except for plain data types.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <opencv2/core.hpp>
#include <torch/torch.h>

#include "bronchodepth/losses.hpp"
#include "bronchodepth/multiscale.hpp"
#include "bronchodepth/render.hpp"

namespace testsupport {

namespace fs = std::filesystem;

/// Fresh, empty directory under the system temp dir.
inline fs::path scratch_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("bronchodepth_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// ------------------------------------------------------------------ losses

/// Plain row-major image stack: data[((b * H) + i) * W + j].
struct Stack {
  int batch = 0, rows = 0, cols = 0;
  std::vector<double> data;
  double& at(int b, int i, int j) { return data[(static_cast<size_t>(b) * rows + i) * cols + j]; }
  double at(int b, int i, int j) const { return data[(static_cast<size_t>(b) * rows + i) * cols + j]; }
};

inline Stack to_stack(const torch::Tensor& t) {
  auto c = t.detach().to(torch::kDouble).contiguous();
  Stack s{static_cast<int>(c.size(0)), static_cast<int>(c.size(2)), static_cast<int>(c.size(3)), {}};
  s.data.assign(c.data_ptr<double>(), c.data_ptr<double>() + c.numel());
  return s;
}

/// Bilinear resize with half-pixel centres and edge clamping.
inline Stack bilinear(const Stack& in, int side) {
  Stack out{in.batch, side, side, std::vector<double>(static_cast<size_t>(in.batch) * side * side)};
  const double sy = static_cast<double>(in.rows) / side;
  const double sx = static_cast<double>(in.cols) / side;
  for (int b = 0; b < in.batch; ++b) {
    for (int i = 0; i < side; ++i) {
      double y = std::max((i + 0.5) * sy - 0.5, 0.0);
      int y0 = std::min(static_cast<int>(y), in.rows - 1);
      int y1 = std::min(y0 + 1, in.rows - 1);
      double fy = y - y0;
      for (int j = 0; j < side; ++j) {
        double x = std::max((j + 0.5) * sx - 0.5, 0.0);
        int x0 = std::min(static_cast<int>(x), in.cols - 1);
        int x1 = std::min(x0 + 1, in.cols - 1);
        double fx = x - x0;
        out.at(b, i, j) = (1 - fy) * ((1 - fx) * in.at(b, y0, x0) + fx * in.at(b, y0, x1)) +
                          fy * ((1 - fx) * in.at(b, y1, x0) + fx * in.at(b, y1, x1));
      }
    }
  }
  return out;
}

inline double oracle_berhu(double x, double c) {
  if (c == 0.0 || x <= c) return x;
  return (x * x + c * c) / (2 * c);
}

/// g(I, h) at (b, i, j): {row step, column step}; zero past the border.
inline std::array<double, 2> oracle_g(const Stack& s, int b, int i, int j, int h) {
  std::array<double, 2> g{0.0, 0.0};
  const double here = s.at(b, i, j);
  if (i + h < s.rows) {
    const double n = s.at(b, i + h, j);
    g[0] = (n - here) / (std::abs(n) + std::abs(here) + 1e-8);
  }
  if (j + h < s.cols) {
    const double n = s.at(b, i, j + h);
    g[1] = (n - here) / (std::abs(n) + std::abs(here) + 1e-8);
  }
  return g;
}

struct OracleScale {
  double depth = 0, gradient = 0, confidence = 0, threshold = 0;
};

struct OracleLoss {
  double total = 0;
  std::array<OracleScale, 4> scales;
};

/// Straight-line multi-scale objective: per-image pixel sums, averaged over the batch.
inline OracleLoss oracle_supervised(const torch::Tensor& gt_t, const bronchodepth::MultiScaleOutput& out,
                                    double wd, double wg, double wc, double k) {
  const Stack gt = to_stack(gt_t);
  const int side = gt.rows;
  OracleLoss loss;
  for (int s = 0; s < 4; ++s) {
    const int h = bronchodepth::kScales[s];
    const Stack d = bilinear(to_stack(out.scales[s].depth), side);
    const Stack c = bilinear(to_stack(out.scales[s].confidence), side);
    double max_err = 0;
    for (size_t p = 0; p < gt.data.size(); ++p) max_err = std::max(max_err, std::abs(gt.data[p] - d.data[p]));
    const double thr = k * max_err;
    OracleScale& o = loss.scales[s];
    o.threshold = thr;
    for (int b = 0; b < gt.batch; ++b) {
      for (int i = 0; i < side; ++i) {
        for (int j = 0; j < side; ++j) {
          const double e = std::abs(gt.at(b, i, j) - d.at(b, i, j));
          o.depth += oracle_berhu(e, thr);
          const auto g1 = oracle_g(gt, b, i, j, h);
          const auto g2 = oracle_g(d, b, i, j, h);
          o.gradient += std::hypot(g1[0] - g2[0], g1[1] - g2[1]);
          o.confidence += std::abs(std::exp(-e) - c.at(b, i, j));
        }
      }
    }
    o.depth /= gt.batch;
    o.gradient /= gt.batch;
    o.confidence /= gt.batch;
    loss.total += wd * o.depth + wg * o.gradient + wc * o.confidence;
  }
  return loss;
}

/// Random multi-scale prediction for a [B,1,side,side] target.
inline bronchodepth::MultiScaleOutput random_outputs(int64_t batch, int64_t side, torch::Dtype dtype,
                                                     double lo = 1.0, double hi = 20.0) {
  bronchodepth::MultiScaleOutput out;
  for (size_t s = 0; s < 4; ++s) {
    const int64_t n = side / bronchodepth::kScales[s];
    auto opts = torch::TensorOptions().dtype(dtype);
    out.scales[s] = {bronchodepth::kScales[s], lo + (hi - lo) * torch::rand({batch, 1, n, n}, opts),
                     0.05 + 0.9 * torch::rand({batch, 1, n, n}, opts)};
  }
  return out;
}

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-12});
}

/// Norm-wise relative error between autograd and central differences of f at x.
/// f must be a pure function of x (double precision).
inline double fd_gradient_error(const std::function<torch::Tensor(const torch::Tensor&)>& f, torch::Tensor x,
                                double step = 1e-5, int64_t max_entries = -1, uint64_t seed = 0) {
  x = x.detach().clone().to(torch::kDouble).requires_grad_(true);
  auto y = f(x);
  auto analytic = torch::autograd::grad({y}, {x}, {}, false, false, true)[0];
  if (!analytic.defined()) analytic = torch::zeros_like(x);
  analytic = analytic.detach().flatten();

  auto flat = x.detach().clone().flatten();
  const int64_t n = flat.numel();
  std::vector<int64_t> entries(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) entries[static_cast<size_t>(i)] = i;
  if (max_entries > 0 && max_entries < n) {
    std::mt19937_64 rng(seed);
    std::shuffle(entries.begin(), entries.end(), rng);
    entries.resize(static_cast<size_t>(max_entries));
  }
  torch::NoGradGuard no_grad;
  double num = 0, den_a = 0, den_n = 0;
  for (int64_t idx : entries) {
    auto plus = flat.clone();
    auto minus = flat.clone();
    plus[idx] += step;
    minus[idx] -= step;
    const double fp = f(plus.view(x.sizes())).item<double>();
    const double fm = f(minus.view(x.sizes())).item<double>();
    const double numeric = (fp - fm) / (2 * step);
    const double a = analytic[idx].item<double>();
    num += (a - numeric) * (a - numeric);
    den_a += a * a;
    den_n += numeric * numeric;
  }
  return std::sqrt(num) / std::max({std::sqrt(den_a), std::sqrt(den_n), 1e-12});
}

// ----------------------------------------------------------------- metrics

struct OracleMetrics {
  double abs_rel = 0, rmse = 0;
  std::array<double, 3> delta{};
  size_t pixels = 0;
};

/// Pixel-weighted metrics over a list of frames with a per-pixel loop.
inline OracleMetrics oracle_metrics(const std::vector<cv::Mat>& gts, const std::vector<cv::Mat>& preds,
                                    double floor_mm = 1e-3) {
  OracleMetrics m;
  long double abs_sum = 0, sq_sum = 0;
  std::array<size_t, 3> hits{};
  const std::array<double, 3> taus{1.25, 1.25 * 1.25, 1.25 * 1.25 * 1.25};
  for (size_t f = 0; f < gts.size(); ++f) {
    for (int r = 0; r < gts[f].rows; ++r) {
      for (int c = 0; c < gts[f].cols; ++c) {
        const double g = gts[f].at<float>(r, c);
        const double p = std::max(static_cast<double>(preds[f].at<float>(r, c)), floor_mm);
        abs_sum += std::abs(g - p) / g;
        sq_sum += (g - p) * (g - p);
        const double ratio = std::max(g / p, p / g);
        for (int k = 0; k < 3; ++k) hits[k] += ratio < taus[k] ? 1 : 0;
        ++m.pixels;
      }
    }
  }
  m.abs_rel = static_cast<double>(abs_sum / m.pixels);
  m.rmse = std::sqrt(static_cast<double>(sq_sum / m.pixels));
  for (int k = 0; k < 3; ++k) m.delta[k] = static_cast<double>(hits[k]) / m.pixels;
  return m;
}

// ---------------------------------------------------------------- renderer

/// Ray exit distance found by marching the inside/outside predicate and
/// bisecting the first transition. Independent of the analytic intersectors.
inline std::optional<double> march_exit(const bronchodepth::synth::AirwayGeometry& g, const Eigen::Vector3d& origin,
                                        const Eigen::Vector3d& dir, double step = 0.02, double max_t = 2000.0) {
  if (!g.contains(origin)) return std::nullopt;
  double t = 0;
  while (t < max_t) {
    const double next = t + step;
    if (!g.contains(origin + next * dir)) {
      double lo = t, hi = next;
      for (int i = 0; i < 60; ++i) {
        const double mid = 0.5 * (lo + hi);
        (g.contains(origin + mid * dir) ? lo : hi) = mid;
      }
      return 0.5 * (lo + hi);
    }
    t = next;
  }
  return std::nullopt;
}

/// Pinhole ray through pixel (u, v) with centres at integer coordinates, in world space.
inline Eigen::Vector3d pixel_ray(const bronchodepth::synth::CameraIntrinsics& cam,
                                 const bronchodepth::synth::Pose& pose, int u, int v) {
  Eigen::Vector3d d((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0);
  return (pose.rotation * d).normalized();
}

}  // namespace testsupport
