#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Geometry>

namespace bronchodepth::synth {

struct Branch {
  Eigen::Vector3d start = Eigen::Vector3d::Zero();
  Eigen::Vector3d direction = Eigen::Vector3d::UnitZ();  // unit length
  double length = 0.0;                                   // mm
  double radius = 0.0;                                   // mm
  std::vector<Branch> children;

  Eigen::Vector3d end() const { return start + length * direction; }
};

struct TreeOptions {
  double root_radius_mm = 8.0;
  double root_length_mm = 50.0;
  double radius_decay = 0.75;
  double length_decay = 0.8;
  double branch_angle_deg = 35.0;
  double angle_jitter_deg = 8.0;
};

/// Bifurcating airway: every non-leaf branch has exactly two children.
struct AirwayTree {
  Branch root;
  uint64_t seed = 0;
  int levels = 1;

  size_t branch_count() const;
  /// Depth-first, parents before children.
  std::vector<const Branch*> branches() const;
};

/// Deterministic for a fixed (seed, levels, options). levels in [1, 6].
AirwayTree generate_tree(uint64_t seed, int levels, const TreeOptions& options = {});

/// Camera-to-world rigid transform. Camera axes follow the pinhole convention:
/// x right, y down, z along the viewing direction.
struct Pose {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d position = Eigen::Vector3d::Zero();
};

/// Orientation whose viewing axis is `forward`, rolled by `roll_rad` about it.
Eigen::Matrix3d look_along(const Eigen::Vector3d& forward, double roll_rad = 0.0);

struct PoseJitter {
  double max_offset_fraction = 0.35;  // radial camera offset, fraction of the branch radius
  double max_tilt_deg = 15.0;
  double min_axial_fraction = 0.05;
  double max_axial_fraction = 0.9;
};

/// Camera stations along the branch axes, branches chosen proportionally to
/// length, with jittered position and viewing direction. Every pose lies
/// strictly inside its branch.
std::vector<Pose> sample_poses(const AirwayTree& tree, size_t count, uint64_t seed,
                               const PoseJitter& jitter = {});

}  // namespace bronchodepth::synth
