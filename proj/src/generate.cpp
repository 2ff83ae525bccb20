#include "bronchodepth/generate.hpp"

#include "bronchodepth/schedule.hpp"

namespace bronchodepth::data {
namespace {

enum StreamTag : uint64_t { kTree = 1, kSyntheticPose, kRealPose, kRealNoise, kEvalPose, kEvalNoise };

synth::Pose pose_for(const synth::AirwayTree& tree, uint64_t seed, const synth::PoseJitter& jitter) {
  return synth::sample_poses(tree, 1, seed, jitter).front();
}

}  // namespace

DatasetLayout DatasetLayout::under(const fs::path& root) {
  return {root / "synthetic", root / "real_like", root / "real_like_eval"};
}

GeneratedDatasets generate_datasets(const DataConfig& config, int image_size, const fs::path& out_dir) {
  std::vector<synth::AirwayTree> trees;
  std::vector<synth::AirwayGeometry> geometry;
  for (int t = 0; t < config.trees; ++t) {
    trees.push_back(synth::generate_tree(derive_seed(config.seed, kTree, t), config.tree_levels, config.tree));
    geometry.push_back(synth::AirwayGeometry::from_tree(trees.back()));
  }
  const auto camera = config.camera.resized(image_size);
  auto shading_for = [&](size_t tree) {
    auto s = config.shading;
    s.texture_seed = derive_seed(config.shading.texture_seed, kTree, tree);
    return s;
  };
  auto render = [&](size_t k, uint64_t pose_tag) {
    const size_t t = k % trees.size();
    const auto pose = pose_for(trees[t], derive_seed(config.seed, pose_tag, k), config.jitter);
    return synth::render_frame(geometry[t], pose, camera, shading_for(t));
  };

  GeneratedDatasets out;
  out.layout = DatasetLayout::under(out_dir);
  const nlohmann::json provenance = {{"trees", config.trees}, {"tree_levels", config.tree_levels}};

  std::vector<synth::RenderedFrame> synthetic;
  for (size_t k = 0; k < static_cast<size_t>(config.synthetic_frames); ++k) synthetic.push_back(render(k, kSyntheticPose));
  const auto split = random_split(synthetic.size(), config.val_fraction, config.split_seed);
  out.synthetic = write_dataset(synthetic, {{"train", split.train}, {"val", split.val}}, out.layout.synthetic,
                                config.seed, provenance);
  synthetic.clear();

  std::vector<synth::UnlabeledFrame> real;
  std::vector<size_t> real_ids;
  for (size_t k = 0; k < static_cast<size_t>(config.real_train_frames); ++k) {
    auto degraded = synth::degrade_to_real_like(render(k, kRealPose), derive_seed(config.seed, kRealNoise, k),
                                                config.degradation);
    real.push_back(std::move(degraded.frame));
    real_ids.push_back(k);
  }
  out.real_like = write_dataset(real, {{"train", real_ids}}, out.layout.real_like, config.seed, provenance);
  real.clear();

  // Evaluation frames keep their archived depth; the adaptation loader never reads this directory.
  std::vector<synth::RenderedFrame> archived;
  std::vector<size_t> eval_ids;
  for (size_t k = 0; k < static_cast<size_t>(config.real_eval_frames); ++k) {
    auto frame = render(k, kEvalPose);
    auto degraded = synth::degrade_to_real_like(frame, derive_seed(config.seed, kEvalNoise, k), config.degradation);
    frame.color = degraded.frame.color;
    frame.depth = degraded.archived_depth;
    frame.domain = synth::Domain::real_like;
    archived.push_back(std::move(frame));
    eval_ids.push_back(k);
  }
  auto eval_extra = provenance;
  eval_extra["purpose"] = "archived real-like ground truth for evaluation only";
  out.real_like_eval = write_dataset(archived, {{"eval", eval_ids}}, out.layout.real_like_eval, config.seed, eval_extra);
  return out;
}

}  // namespace bronchodepth::data
