#include <gtest/gtest.h>

#include <fstream>
#include <iterator>

#include "bronchodepth/airway.hpp"
#include "bronchodepth/config.hpp"
#include "bronchodepth/dataset.hpp"
#include "bronchodepth/error.hpp"
#include "bronchodepth/generate.hpp"
#include "bronchodepth/render.hpp"
#include "support.hpp"

using namespace bronchodepth;
using namespace bronchodepth::synth;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Single straight tube along +z: radius 5 mm, 100 mm long, starting at the origin.
AirwayTree straight_tube() {
  TreeOptions opts;
  opts.root_radius_mm = 5.0;
  opts.root_length_mm = 100.0;
  return generate_tree(0, 1, opts);
}

}  // namespace

TEST(Tree, BifurcatesWithShrinkingRadii) {
  const auto tree = generate_tree(5, 4);
  EXPECT_EQ(tree.branch_count(), 15u);
  const auto branches = tree.branches();
  ASSERT_EQ(branches.size(), 15u);
  EXPECT_EQ(branches.front(), &tree.root);
  for (const Branch* b : branches) {
    EXPECT_TRUE(b->children.empty() || b->children.size() == 2);
    EXPECT_NEAR(b->direction.norm(), 1.0, 1e-12);
    for (const auto& c : b->children) {
      EXPECT_LT(c.radius, b->radius);
      EXPECT_LT((c.start - b->end()).norm(), 1e-9);
    }
  }
  EXPECT_THROW(generate_tree(0, 0), ContractViolation);
  EXPECT_THROW(generate_tree(0, 7), ContractViolation);
}

TEST(Tree, DeterministicPerSeed) {
  const auto a = generate_tree(9, 3);
  const auto b = generate_tree(9, 3);
  const auto c = generate_tree(10, 3);
  const auto ba = a.branches(), bb = b.branches(), bc = c.branches();
  for (size_t i = 0; i < ba.size(); ++i) {
    EXPECT_EQ(ba[i]->end(), bb[i]->end());
    EXPECT_EQ(ba[i]->radius, bb[i]->radius);
  }
  EXPECT_NE(ba[1]->end(), bc[1]->end());
}

TEST(Poses, StrictlyInsideTheLumen) {
  const auto tree = generate_tree(3, 4);
  const auto geometry = AirwayGeometry::from_tree(tree);
  const auto poses = sample_poses(tree, 200, 77);
  ASSERT_EQ(poses.size(), 200u);
  for (const auto& p : poses) {
    EXPECT_TRUE(geometry.contains(p.position));
    EXPECT_NEAR((p.rotation.transpose() * p.rotation - Eigen::Matrix3d::Identity()).norm(), 0.0, 1e-12);
    EXPECT_NEAR(p.rotation.determinant(), 1.0, 1e-12);
  }
  const auto again = sample_poses(tree, 200, 77);
  EXPECT_EQ(poses[17].position, again[17].position);
}

TEST(Intersect, CylinderFromInside) {
  CappedCylinder c{Eigen::Vector3d::Zero(), Eigen::Vector3d::UnitZ(), 10.0, 2.0};
  const Eigen::Vector3d o(0, 0, 5);
  auto along = intersect(c, o, Eigen::Vector3d::UnitZ());
  ASSERT_TRUE(along);
  EXPECT_NEAR(along->exit, 5.0, 1e-12);
  EXPECT_NEAR(along->exit_normal.z(), 1.0, 1e-12);
  auto sideways = intersect(c, o, Eigen::Vector3d::UnitX());
  ASSERT_TRUE(sideways);
  EXPECT_NEAR(sideways->enter, -2.0, 1e-12);
  EXPECT_NEAR(sideways->exit, 2.0, 1e-12);
  EXPECT_FALSE(intersect(c, Eigen::Vector3d(5, 0, 5), Eigen::Vector3d::UnitZ()));
}

TEST(Intersect, Sphere) {
  Sphere s{Eigen::Vector3d(0, 0, 0), 3.0};
  auto span = intersect(s, Eigen::Vector3d(0, 0, -5), Eigen::Vector3d::UnitZ());
  ASSERT_TRUE(span);
  EXPECT_NEAR(span->enter, 2.0, 1e-12);
  EXPECT_NEAR(span->exit, 8.0, 1e-12);
}

TEST(Render, StraightTubeAnalyticDepth) {
  const auto tree = straight_tube();
  Pose pose;
  pose.position = Eigen::Vector3d(0, 0, 10);
  CameraIntrinsics cam;  // 256 px, principal point on pixel 128
  const auto frame = render_frame(tree, pose, cam);
  // on-axis pixel reaches the far cap
  EXPECT_NEAR(frame.depth.at<float>(128, 128), 90.0, 1e-4);
  // pixel (u, 128): hits the wall where the lateral offset reaches the radius
  for (int u : {0, 40, 100}) {
    const Eigen::Vector3d d = cam.ray(u, 128);
    const double t = std::min(5.0 / std::abs(d.x()), 90.0 / d.z());
    EXPECT_NEAR(frame.depth.at<float>(128, u), t, 1e-4) << "u=" << u;
  }
}

TEST(Render, MatchesMarchingOracleOnSampledPixels) {
  const auto tree = generate_tree(21, 4);
  const auto geometry = AirwayGeometry::from_tree(tree);
  const auto poses = sample_poses(tree, 4, 5);
  const auto cam = CameraIntrinsics{}.resized(64);
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> px(0, 63);
  double worst = 0;
  int checked = 0;
  for (const auto& pose : poses) {
    const auto frame = render_frame(geometry, pose, cam);
    for (int k = 0; k < 250; ++k) {
      const int u = px(rng), v = px(rng);
      const auto ref = testsupport::march_exit(geometry, pose.position, testsupport::pixel_ray(cam, pose, u, v));
      ASSERT_TRUE(ref);
      worst = std::max(worst, std::abs(*ref - frame.depth.at<float>(v, u)));
      ++checked;
    }
  }
  EXPECT_EQ(checked, 1000);
  EXPECT_LT(worst, 1e-4);
}

TEST(Render, CameraOutsideLumenRejected) {
  const auto tree = straight_tube();
  Pose pose;
  pose.position = Eigen::Vector3d(50, 0, 10);
  EXPECT_THROW(render_frame(tree, pose, CameraIntrinsics{}.resized(32)), ContractViolation);
}

TEST(Render, DepthIsPositiveAndFinite) {
  const auto tree = generate_tree(2, 3);
  const auto pose = sample_poses(tree, 1, 2).front();
  const auto frame = render_frame(tree, pose, CameraIntrinsics{}.resized(64));
  double lo, hi;
  cv::minMaxLoc(frame.depth, &lo, &hi);
  EXPECT_GT(lo, 0.0);
  EXPECT_TRUE(std::isfinite(hi));
  EXPECT_EQ(frame.color.type(), CV_8UC3);
}

TEST(Camera, ResizeKeepsFieldOfView) {
  const auto c = CameraIntrinsics{}.resized(128);
  EXPECT_DOUBLE_EQ(c.fx, 64.0);
  EXPECT_DOUBLE_EQ(c.cx, 64.0);
  EXPECT_EQ(c.width, 128);
  CameraIntrinsics bad;
  bad.fx = 0;
  EXPECT_THROW(bad.validate(), ContractViolation);
}

TEST(Degrade, ZeroStrengthIsIdentity) {
  const auto tree = generate_tree(4, 3);
  const auto frame = render_frame(tree, sample_poses(tree, 1, 1).front(), CameraIntrinsics{}.resized(64));
  DegradationOptions off;
  off.strength = 0.0;
  const auto same = degrade_to_real_like(frame, 3, off);
  EXPECT_EQ(cv::norm(same.frame.color, frame.color, cv::NORM_INF), 0.0);
  const auto changed = degrade_to_real_like(frame, 3);
  EXPECT_GT(cv::norm(changed.frame.color, frame.color, cv::NORM_L1), 0.0);
  EXPECT_EQ(changed.frame.color.size(), frame.color.size());
  EXPECT_EQ(changed.frame.camera.fx, frame.camera.fx);
  EXPECT_EQ(changed.frame.camera.width, frame.camera.width);
  EXPECT_EQ(cv::norm(changed.archived_depth, frame.depth, cv::NORM_INF), 0.0);
  const auto again = degrade_to_real_like(frame, 3);
  EXPECT_EQ(cv::norm(again.frame.color, changed.frame.color, cv::NORM_INF), 0.0);
}

TEST(Pfm, RoundTripIsBitExact) {
  const auto dir = testsupport::scratch_dir("pfm");
  cv::Mat depth(5, 7, CV_32FC1);
  cv::randu(depth, 0.001, 150.0);
  depth.at<float>(0, 0) = std::numeric_limits<float>::denorm_min();
  data::write_pfm(dir / "d.pfm", depth);
  const auto back = data::read_pfm(dir / "d.pfm");
  ASSERT_EQ(back.size(), depth.size());
  EXPECT_EQ(std::memcmp(back.data, depth.data, depth.total() * sizeof(float)), 0);
}

TEST(Pfm, HeaderAndBottomUpRowOrder) {
  const auto dir = testsupport::scratch_dir("pfm_layout");
  cv::Mat depth(2, 3, CV_32FC1);
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 3; ++c) depth.at<float>(r, c) = static_cast<float>(10 * r + c);
  data::write_pfm(dir / "d.pfm", depth);
  const auto bytes = slurp(dir / "d.pfm");
  const std::string header = "Pf\n3 2\n-1.0\n";
  ASSERT_EQ(bytes.substr(0, header.size()), header);
  ASSERT_EQ(bytes.size(), header.size() + 6 * sizeof(float));
  float first;
  std::memcpy(&first, bytes.data() + header.size(), sizeof(float));
  EXPECT_EQ(first, 10.0f);  // last image row comes first
}

TEST(Pfm, MalformedFileIsADataError) {
  const auto dir = testsupport::scratch_dir("pfm_bad");
  std::ofstream(dir / "bad.pfm") << "PF\n1 1\n-1.0\n";
  try {
    data::read_pfm(dir / "bad.pfm");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.category(), ErrorCategory::data);
  }
  try {
    data::read_pfm(dir / "missing.pfm");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.category(), ErrorCategory::io);
  }
}

TEST(Split, DeterministicDisjointAndSized) {
  const auto a = data::random_split(100, 0.2, 42);
  const auto b = data::random_split(100, 0.2, 42);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.val, b.val);
  EXPECT_EQ(a.val.size(), 20u);
  EXPECT_EQ(a.train.size(), 80u);
  std::vector<size_t> all = a.train;
  all.insert(all.end(), a.val.begin(), a.val.end());
  std::sort(all.begin(), all.end());
  for (size_t i = 0; i < all.size(); ++i) EXPECT_EQ(all[i], i);
  EXPECT_NE(data::random_split(100, 0.2, 43).val, a.val);
}

TEST(Datasets, GenerationIsByteIdenticalAndLabelFree) {
  DataConfig cfg;
  cfg.seed = 7;
  cfg.trees = 2;
  cfg.tree_levels = 3;
  cfg.synthetic_frames = 6;
  cfg.real_train_frames = 3;
  cfg.real_eval_frames = 2;
  const auto root = testsupport::scratch_dir("gen");
  const auto a = data::generate_datasets(cfg, 32, root / "a");
  data::generate_datasets(cfg, 32, root / "b");
  size_t files = 0;
  for (const auto& entry : fs::recursive_directory_iterator(root / "a")) {
    if (!entry.is_regular_file()) continue;
    const auto rel = fs::relative(entry.path(), root / "a");
    EXPECT_EQ(slurp(entry.path()), slurp(root / "b" / rel)) << rel;
    ++files;
  }
  EXPECT_GT(files, 20u);

  EXPECT_FALSE(fs::exists(a.layout.real_like / "train" / "depth"));
  EXPECT_FALSE(a.real_like.labeled);
  EXPECT_EQ(a.real_like.domain, "real_like");
  EXPECT_TRUE(a.real_like_eval.labeled);
  EXPECT_EQ(a.synthetic.count("val"), 1u);
  EXPECT_THROW(data::LabeledDataset::open(a.layout.real_like, "train"), Error);

  const auto synth = data::LabeledDataset::open(a.layout.synthetic, "train");
  const auto sample = synth.load(0);
  EXPECT_EQ(sample.color.size(), cv::Size(32, 32));
  EXPECT_EQ(sample.depth.type(), CV_32FC1);
  const auto real = data::UnlabeledDataset::open(a.layout.real_like, "train");
  EXPECT_EQ(real.size(), 3u);
  static_assert(std::is_same_v<decltype(real.load(0)), cv::Mat>, "colour-only loader");
}

TEST(Manifest, JsonRoundTrip) {
  data::DatasetManifest m;
  m.domain = "synthetic";
  m.image_size = 64;
  m.seed = 3;
  m.splits = {{"train", {0, 2}}, {"val", {1}}};
  m.depth_range_mm = std::make_pair(1.5, 99.0);
  const auto back = data::DatasetManifest::from_json(m.to_json());
  EXPECT_EQ(back.to_json(), m.to_json());
  EXPECT_EQ(back.count("train"), 2u);
}
