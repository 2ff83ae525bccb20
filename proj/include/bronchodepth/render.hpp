#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include <Eigen/Core>
#include <opencv2/core.hpp>

#include "bronchodepth/airway.hpp"

namespace bronchodepth::synth {

/// Pinhole intrinsics; pixel (u, v) centres sit at integer coordinates.
struct CameraIntrinsics {
  double fx = 128.0;
  double fy = 128.0;
  double cx = 128.0;
  double cy = 128.0;
  int width = 256;
  int height = 256;

  void validate() const;
  /// Same field of view at a different square resolution.
  CameraIntrinsics resized(int side) const;
  /// Unit ray direction in camera coordinates.
  Eigen::Vector3d ray(double u, double v) const;
};

/// Closed convex solids whose union forms the airway lumen.
struct CappedCylinder {
  Eigen::Vector3d base;
  Eigen::Vector3d axis;  // unit
  double length;
  double radius;
};

struct Sphere {
  Eigen::Vector3d center;
  double radius;
};

/// Interval [enter, exit] of ray parameters inside a solid (enter may be
/// negative), with the outward surface normal where the ray leaves.
struct RayInterval {
  double enter;
  double exit;
  Eigen::Vector3d exit_normal;
};

std::optional<RayInterval> intersect(const CappedCylinder& c, const Eigen::Vector3d& origin,
                                     const Eigen::Vector3d& dir);
std::optional<RayInterval> intersect(const Sphere& s, const Eigen::Vector3d& origin, const Eigen::Vector3d& dir);

/// Lumen of a tree: one capped cylinder per branch plus a sphere of the parent
/// radius at every bifurcation.
struct AirwayGeometry {
  std::vector<CappedCylinder> cylinders;
  std::vector<Sphere> spheres;

  static AirwayGeometry from_tree(const AirwayTree& tree);
  bool contains(const Eigen::Vector3d& p) const;
};

struct Hit {
  double distance;          // along the unit ray, mm
  Eigen::Vector3d normal;   // unit, facing the ray origin
};

/// Distance at which a ray starting inside the lumen first leaves it. Returns
/// nullopt when the origin is outside every solid.
std::optional<Hit> cast_ray(const AirwayGeometry& geometry, const Eigen::Vector3d& origin,
                            const Eigen::Vector3d& dir);

struct ShadingOptions {
  double gain = 1.0;
  std::array<double, 3> albedo_rgb{0.86, 0.47, 0.42};
  double ambient = 0.08;
  double diffuse = 0.92;
  double specular = 0.35;
  double shininess = 24.0;
  double falloff_mm = 25.0;
  double texture_strength = 0.35;
  uint64_t texture_seed = 0;
};

enum class Domain { synthetic, real_like };

struct RenderedFrame {
  cv::Mat color;  // CV_8UC3, BGR
  cv::Mat depth;  // CV_32FC1, distance along the pixel ray in mm
  Pose pose;
  CameraIntrinsics camera;
  Domain domain = Domain::synthetic;
};

/// Real-domain record: colour only. Depth does not exist on this type.
struct UnlabeledFrame {
  cv::Mat color;
  Pose pose;
  CameraIntrinsics camera;
};

struct DegradedFrame {
  UnlabeledFrame frame;
  cv::Mat archived_depth;  // kept for desk-scale evaluation only
};

/// Ray-casts every pixel. Throws ContractViolation when the camera is outside the lumen.
RenderedFrame render_frame(const AirwayGeometry& geometry, const Pose& pose, const CameraIntrinsics& camera,
                           const ShadingOptions& shading = {});
RenderedFrame render_frame(const AirwayTree& tree, const Pose& pose, const CameraIntrinsics& camera,
                           const ShadingOptions& shading = {});

/// Real-like imaging model. `strength` scales every effect; 0 leaves colour untouched.
struct DegradationOptions {
  double strength = 1.0;
  double blur_sigma_px = 1.6;
  double vignette = 0.55;
  double highlight_gain = 1.45;
  std::array<double, 3> color_cast_rgb{1.08, 0.86, 0.74};
  double noise_sigma = 0.02;
};

DegradedFrame degrade_to_real_like(const RenderedFrame& frame, uint64_t seed,
                                   const DegradationOptions& options = {});

}  // namespace bronchodepth::synth
