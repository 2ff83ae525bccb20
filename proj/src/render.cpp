#include "bronchodepth/render.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include <opencv2/imgproc.hpp>

#include "bronchodepth/error.hpp"

namespace bronchodepth::synth {
namespace {

constexpr double kParallel = 1e-12;
constexpr double kTouch = 1e-9;

// Smooth pseudo-random albedo field: a handful of seeded plane waves.
class TissueTexture {
 public:
  explicit TissueTexture(uint64_t seed) {
    std::mt19937_64 rng(seed ^ 0x7e57u);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> phase(0.0, 2.0 * M_PI);
    std::uniform_real_distribution<double> freq(0.15, 0.9);
    for (auto& w : waves_) {
      w.dir = Eigen::Vector3d(gauss(rng), gauss(rng), gauss(rng)).normalized();
      w.freq = freq(rng);
      w.phase = phase(rng);
    }
  }

  // Roughly in [-1, 1].
  double operator()(const Eigen::Vector3d& p) const {
    double v = 0.0;
    for (const auto& w : waves_) v += std::sin(w.freq * w.dir.dot(p) + w.phase);
    return v / std::sqrt(static_cast<double>(waves_.size()) * 0.5) / 2.0;
  }

 private:
  struct Wave {
    Eigen::Vector3d dir;
    double freq;
    double phase;
  };
  std::array<Wave, 6> waves_;
};

}  // namespace

void CameraIntrinsics::validate() const {
  require(fx > 0 && fy > 0, "camera: focal lengths must be positive");
  require(width > 0 && height > 0, "camera: image size must be positive");
  require(cx >= 0 && cx < width && cy >= 0 && cy < height, "camera: principal point outside the image");
}

CameraIntrinsics CameraIntrinsics::resized(int side) const {
  const double sx = static_cast<double>(side) / width;
  const double sy = static_cast<double>(side) / height;
  return {fx * sx, fy * sy, cx * sx, cy * sy, side, side};
}

Eigen::Vector3d CameraIntrinsics::ray(double u, double v) const {
  return Eigen::Vector3d((u - cx) / fx, (v - cy) / fy, 1.0).normalized();
}

std::optional<RayInterval> intersect(const CappedCylinder& c, const Eigen::Vector3d& origin,
                                     const Eigen::Vector3d& dir) {
  const Eigen::Vector3d w = origin - c.base;
  const double w_axial = w.dot(c.axis);
  const double d_axial = dir.dot(c.axis);
  const Eigen::Vector3d w_perp = w - w_axial * c.axis;
  const Eigen::Vector3d d_perp = dir - d_axial * c.axis;

  // Radial constraint |w_perp + t d_perp| <= r.
  double r_enter = -std::numeric_limits<double>::infinity();
  double r_exit = std::numeric_limits<double>::infinity();
  const double a = d_perp.squaredNorm();
  const double c0 = w_perp.squaredNorm() - c.radius * c.radius;
  if (a < kParallel) {
    if (c0 > 0) return std::nullopt;
  } else {
    const double b = 2.0 * w_perp.dot(d_perp);
    const double disc = b * b - 4.0 * a * c0;
    if (disc < 0) return std::nullopt;
    const double root = std::sqrt(disc);
    const double q = -0.5 * (b + std::copysign(root, b));
    double t0 = q / a;
    double t1 = q != 0.0 ? c0 / q : -t0;
    if (t0 > t1) std::swap(t0, t1);
    r_enter = t0;
    r_exit = t1;
  }

  // Axial slab 0 <= s <= length.
  double s_enter = -std::numeric_limits<double>::infinity();
  double s_exit = std::numeric_limits<double>::infinity();
  bool exit_at_top = true;
  if (std::abs(d_axial) < kParallel) {
    if (w_axial < 0 || w_axial > c.length) return std::nullopt;
  } else {
    const double t_bottom = -w_axial / d_axial;
    const double t_top = (c.length - w_axial) / d_axial;
    s_enter = std::min(t_bottom, t_top);
    s_exit = std::max(t_bottom, t_top);
    exit_at_top = d_axial > 0;
  }

  const double enter = std::max(r_enter, s_enter);
  const double exit = std::min(r_exit, s_exit);
  if (enter > exit) return std::nullopt;

  Eigen::Vector3d normal;
  if (r_exit <= s_exit) {
    const Eigen::Vector3d radial = w_perp + r_exit * d_perp;
    normal = radial.normalized();
  } else {
    normal = exit_at_top ? c.axis : Eigen::Vector3d(-c.axis);
  }
  return RayInterval{enter, exit, normal};
}

std::optional<RayInterval> intersect(const Sphere& s, const Eigen::Vector3d& origin, const Eigen::Vector3d& dir) {
  const Eigen::Vector3d oc = origin - s.center;
  const double b = oc.dot(dir);
  const double c = oc.squaredNorm() - s.radius * s.radius;
  const double disc = b * b - c;
  if (disc < 0) return std::nullopt;
  const double root = std::sqrt(disc);
  const double enter = -b - root;
  const double exit = -b + root;
  return RayInterval{enter, exit, (oc + exit * dir).normalized()};
}

AirwayGeometry AirwayGeometry::from_tree(const AirwayTree& tree) {
  AirwayGeometry g;
  for (const Branch* b : tree.branches()) {
    g.cylinders.push_back({b->start, b->direction, b->length, b->radius});
    if (!b->children.empty()) g.spheres.push_back({b->end(), b->radius});
  }
  return g;
}

bool AirwayGeometry::contains(const Eigen::Vector3d& p) const {
  for (const auto& c : cylinders) {
    const Eigen::Vector3d w = p - c.base;
    const double s = w.dot(c.axis);
    if (s >= 0 && s <= c.length && (w - s * c.axis).squaredNorm() <= c.radius * c.radius) return true;
  }
  for (const auto& s : spheres) {
    if ((p - s.center).squaredNorm() <= s.radius * s.radius) return true;
  }
  return false;
}

std::optional<Hit> cast_ray(const AirwayGeometry& geometry, const Eigen::Vector3d& origin,
                            const Eigen::Vector3d& dir) {
  std::vector<RayInterval> spans;
  spans.reserve(geometry.cylinders.size() + geometry.spheres.size());
  bool inside = false;
  auto keep = [&](const std::optional<RayInterval>& span) {
    if (!span || span->exit <= 0) return;
    inside = inside || span->enter <= 0;
    spans.push_back(*span);
  };
  for (const auto& c : geometry.cylinders) keep(intersect(c, origin, dir));
  for (const auto& s : geometry.spheres) keep(intersect(s, origin, dir));
  if (!inside) return std::nullopt;

  std::sort(spans.begin(), spans.end(), [](const RayInterval& a, const RayInterval& b) { return a.enter < b.enter; });
  double reach = 0.0;
  Eigen::Vector3d normal = -dir;
  for (const auto& span : spans) {
    if (span.enter > reach + kTouch) break;
    if (span.exit > reach) {
      reach = span.exit;
      normal = span.exit_normal;
    }
  }
  return Hit{reach, -normal};
}

RenderedFrame render_frame(const AirwayGeometry& geometry, const Pose& pose, const CameraIntrinsics& camera,
                           const ShadingOptions& shading) {
  camera.validate();
  require(geometry.contains(pose.position), "render_frame: camera is outside the airway lumen");
  const TissueTexture texture(shading.texture_seed);

  RenderedFrame frame;
  frame.pose = pose;
  frame.camera = camera;
  frame.domain = Domain::synthetic;
  frame.color.create(camera.height, camera.width, CV_8UC3);
  frame.depth.create(camera.height, camera.width, CV_32FC1);

  auto to_byte = [](double v) { return static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); };
  for (int v = 0; v < camera.height; ++v) {
    auto* depth_row = frame.depth.ptr<float>(v);
    auto* color_row = frame.color.ptr<cv::Vec3b>(v);
    for (int u = 0; u < camera.width; ++u) {
      const Eigen::Vector3d dir = pose.rotation * camera.ray(u, v);
      const auto hit = cast_ray(geometry, pose.position, dir);
      if (!hit) throw ContractViolation("render_frame: ray origin left the lumen");
      depth_row[u] = static_cast<float>(hit->distance);

      const Eigen::Vector3d point = pose.position + hit->distance * dir;
      const double cosine = std::max(0.0, hit->normal.dot(-dir));
      const double attenuation = 1.0 / (1.0 + std::pow(hit->distance / shading.falloff_mm, 2));
      const double tex = 1.0 + shading.texture_strength * texture(point);
      const double spec = shading.specular * std::pow(cosine, shading.shininess);
      cv::Vec3b px;
      for (int ch = 0; ch < 3; ++ch) {
        const double diffuse = shading.albedo_rgb[ch] * tex * (shading.ambient + shading.diffuse * cosine);
        px[2 - ch] = to_byte(shading.gain * (diffuse + spec) * attenuation);
      }
      color_row[u] = px;
    }
  }
  return frame;
}

RenderedFrame render_frame(const AirwayTree& tree, const Pose& pose, const CameraIntrinsics& camera,
                           const ShadingOptions& shading) {
  return render_frame(AirwayGeometry::from_tree(tree), pose, camera, shading);
}

DegradedFrame degrade_to_real_like(const RenderedFrame& frame, uint64_t seed, const DegradationOptions& options) {
  require(frame.domain == Domain::synthetic, "degrade_to_real_like: expected a synthetic frame");
  require(options.strength >= 0.0, "degrade_to_real_like: strength must be >= 0");
  DegradedFrame out;
  out.frame.pose = frame.pose;
  out.frame.camera = frame.camera;
  out.archived_depth = frame.depth.clone();
  const double s = options.strength;
  if (s == 0.0) {
    out.frame.color = frame.color.clone();
    return out;
  }

  cv::Mat img;
  frame.color.convertTo(img, CV_64FC3, 1.0 / 255.0);
  const double gain = 1.0 + (options.highlight_gain - 1.0) * s;
  // BGR channel order
  const cv::Scalar cast(1.0 + (options.color_cast_rgb[2] - 1.0) * s, 1.0 + (options.color_cast_rgb[1] - 1.0) * s,
                        1.0 + (options.color_cast_rgb[0] - 1.0) * s);
  img = img.mul(cv::Scalar::all(gain));
  cv::multiply(img, cast, img);

  const double cx = (img.cols - 1) / 2.0;
  const double cy = (img.rows - 1) / 2.0;
  const double r2max = cx * cx + cy * cy;
  for (int v = 0; v < img.rows; ++v) {
    auto* row = img.ptr<cv::Vec3d>(v);
    for (int u = 0; u < img.cols; ++u) {
      const double r2 = ((u - cx) * (u - cx) + (v - cy) * (v - cy)) / r2max;
      row[u] *= 1.0 - options.vignette * s * r2;
    }
  }
  cv::min(img, 1.0, img);  // saturate highlights before the optics smear them

  const double sigma = options.blur_sigma_px * s;
  if (sigma > 0) cv::GaussianBlur(img, img, cv::Size(0, 0), sigma, sigma, cv::BORDER_REFLECT);

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, options.noise_sigma * s);
  out.frame.color.create(img.rows, img.cols, CV_8UC3);
  for (int v = 0; v < img.rows; ++v) {
    const auto* src = img.ptr<cv::Vec3d>(v);
    auto* dst = out.frame.color.ptr<cv::Vec3b>(v);
    for (int u = 0; u < img.cols; ++u) {
      for (int ch = 0; ch < 3; ++ch) {
        const double value = src[u][ch] + (options.noise_sigma > 0 ? noise(rng) : 0.0);
        dst[u][ch] = static_cast<uint8_t>(std::lround(std::clamp(value, 0.0, 1.0) * 255.0));
      }
    }
  }
  return out;
}

}  // namespace bronchodepth::synth
