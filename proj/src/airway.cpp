#include "bronchodepth/airway.hpp"

#include <cmath>
#include <numbers>
#include <random>

#include "bronchodepth/error.hpp"

namespace bronchodepth::synth {
namespace {

constexpr double kDegToRad = std::numbers::pi / 180.0;

Eigen::Vector3d any_perpendicular(const Eigen::Vector3d& v) {
  const Eigen::Vector3d helper = std::abs(v.x()) < 0.9 ? Eigen::Vector3d::UnitX() : Eigen::Vector3d::UnitY();
  return v.cross(helper).normalized();
}

void grow(Branch& parent, int remaining, std::mt19937_64& rng, const TreeOptions& options) {
  if (remaining <= 0) return;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> jitter(-options.angle_jitter_deg, options.angle_jitter_deg);

  // Bifurcation plane rotates randomly about the parent axis.
  const double plane_angle = 2.0 * std::numbers::pi * unit(rng);
  const Eigen::Vector3d axis =
      Eigen::AngleAxisd(plane_angle, parent.direction) * any_perpendicular(parent.direction);

  for (int side : {-1, 1}) {
    const double angle = (options.branch_angle_deg + jitter(rng)) * kDegToRad * side;
    Branch child;
    child.start = parent.end();
    child.direction = (Eigen::AngleAxisd(angle, axis) * parent.direction).normalized();
    child.radius = parent.radius * options.radius_decay * (0.95 + 0.05 * unit(rng));
    child.length = parent.length * options.length_decay * (0.85 + 0.3 * unit(rng));
    grow(child, remaining - 1, rng, options);
    parent.children.push_back(std::move(child));
  }
}

void collect(const Branch& b, std::vector<const Branch*>& out) {
  out.push_back(&b);
  for (const auto& c : b.children) collect(c, out);
}

}  // namespace

size_t AirwayTree::branch_count() const { return branches().size(); }

std::vector<const Branch*> AirwayTree::branches() const {
  std::vector<const Branch*> out;
  collect(root, out);
  return out;
}

AirwayTree generate_tree(uint64_t seed, int levels, const TreeOptions& options) {
  require(levels >= 1 && levels <= 6, "generate_tree: levels must be in [1, 6]");
  require(options.root_radius_mm > 0 && options.root_length_mm > 0, "generate_tree: root size must be positive");
  require(options.radius_decay > 0 && options.radius_decay < 1, "generate_tree: radius decay must be in (0, 1)");
  std::mt19937_64 rng(seed);
  AirwayTree tree;
  tree.seed = seed;
  tree.levels = levels;
  tree.root.radius = options.root_radius_mm;
  tree.root.length = options.root_length_mm;
  grow(tree.root, levels - 1, rng, options);
  return tree;
}

Eigen::Matrix3d look_along(const Eigen::Vector3d& forward, double roll_rad) {
  const Eigen::Vector3d z = forward.normalized();
  Eigen::Vector3d x = any_perpendicular(z);
  x = Eigen::AngleAxisd(roll_rad, z) * x;
  const Eigen::Vector3d y = z.cross(x);
  Eigen::Matrix3d r;
  r.col(0) = x;
  r.col(1) = y;
  r.col(2) = z;
  return r;
}

std::vector<Pose> sample_poses(const AirwayTree& tree, size_t count, uint64_t seed, const PoseJitter& jitter) {
  const auto branches = tree.branches();
  std::vector<double> lengths;
  for (const auto* b : branches) lengths.push_back(b->length);
  std::mt19937_64 rng(seed);
  std::discrete_distribution<size_t> pick(lengths.begin(), lengths.end());
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::vector<Pose> poses;
  poses.reserve(count);
  for (size_t n = 0; n < count; ++n) {
    const Branch& b = *branches[pick(rng)];
    const double axial =
        b.length * (jitter.min_axial_fraction + (jitter.max_axial_fraction - jitter.min_axial_fraction) * unit(rng));
    const double offset = b.radius * jitter.max_offset_fraction * std::sqrt(unit(rng));
    const Eigen::Vector3d radial =
        Eigen::AngleAxisd(2.0 * std::numbers::pi * unit(rng), b.direction) * any_perpendicular(b.direction);
    const double tilt = jitter.max_tilt_deg * kDegToRad * unit(rng);
    const Eigen::Vector3d tilt_axis =
        Eigen::AngleAxisd(2.0 * std::numbers::pi * unit(rng), b.direction) * any_perpendicular(b.direction);
    const Eigen::Vector3d forward = Eigen::AngleAxisd(tilt, tilt_axis) * b.direction;

    Pose pose;
    pose.position = b.start + axial * b.direction + offset * radial;
    pose.rotation = look_along(forward, 2.0 * std::numbers::pi * unit(rng));
    poses.push_back(pose);
  }
  return poses;
}

}  // namespace bronchodepth::synth
