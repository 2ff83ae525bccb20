#include "bronchodepth/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <opencv2/imgproc.hpp>

#include "bronchodepth/config.hpp"
#include "bronchodepth/dataset.hpp"
#include "bronchodepth/error.hpp"
#include "bronchodepth/evalmetrics.hpp"
#include "bronchodepth/generate.hpp"
#include "bronchodepth/pipeline.hpp"

namespace bronchodepth::cli {
namespace fs = std::filesystem;

namespace {

struct CommonOptions {
  std::string config_path;
  std::optional<uint64_t> seed;
  std::string out;
  bool deterministic = false;
};

struct Options {
  CommonOptions common;
  std::string data;
  std::string split;
  std::vector<std::string> ckpts;
  std::vector<std::string> labels;
  std::string image;
  std::string domain = "real";
  bool median_scale = false;
  std::string log;
  std::string resume;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config_path, "experiment config (JSON); defaults when omitted");
  cmd->add_option("--seed", o.seed, "overrides the seed of this stage");
  cmd->add_option("--out", o.out, "run name under the runs root");
  cmd->add_flag("--deterministic", o.deterministic, "single-threaded deterministic kernels");
}

ExperimentConfig load_config(const CommonOptions& o) {
  if (o.config_path.empty()) return ExperimentConfig{};
  if (!fs::exists(o.config_path)) throw Error(ErrorCategory::config, "config not found: " + o.config_path);
  return validate_config(o.config_path);
}

/// Creates a fresh run directory; never reuses one.
fs::path make_run_dir(const std::string& name, const std::string& command, const ExperimentConfig& config) {
  const std::string run_name = name.empty() ? command : name;
  if (run_name.find('/') != std::string::npos || run_name == "." || run_name == "..") {
    throw Error(ErrorCategory::config, "--out must be a plain run name, got " + run_name);
  }
  const fs::path dir = runs_root() / run_name;
  if (fs::exists(dir)) throw Error(ErrorCategory::io, "run directory already exists: " + dir.string());
  std::error_code ec;
  fs::create_directories(dir / "ckpts", ec);
  if (!ec) fs::create_directories(dir / "logs", ec);
  if (!ec) fs::create_directories(dir / "reports", ec);
  if (ec) throw Error(ErrorCategory::io, "cannot create " + dir.string() + ": " + ec.message());
  std::ofstream(dir / "config.json") << config.to_json().dump(2) << '\n';
  std::ofstream(dir / "run.json") << nlohmann::json{{"command", command}, {"config_hash", config.hash()}}.dump(2)
                                  << '\n';
  return dir;
}

/// Accepts a gen-data run directory or the data root inside it.
data::DatasetLayout resolve_layout(const std::string& path) {
  if (path.empty()) throw Error(ErrorCategory::config, "--data is required");
  fs::path root(path);
  if (fs::exists(root / "data" / "synthetic")) root /= "data";
  const auto layout = data::DatasetLayout::under(root);
  if (!fs::exists(layout.synthetic / "manifest.json")) {
    throw Error(ErrorCategory::data, "no generated datasets under " + path);
  }
  return layout;
}

/// Evaluation set: a dataset directory itself, or the held-out real-like set of a layout.
data::LabeledDataset resolve_eval_dataset(const std::string& path, const std::string& split) {
  if (path.empty()) throw Error(ErrorCategory::config, "--data is required");
  fs::path dir(path);
  if (!fs::exists(dir / "manifest.json")) dir = resolve_layout(path).real_like_eval;
  const auto manifest = data::read_manifest(dir);
  if (!manifest.labeled) throw Error(ErrorCategory::data, dir.string() + " has no depth to evaluate against");
  std::string chosen = split;
  if (chosen.empty()) {
    for (const char* candidate : {"eval", "val", "train"}) {
      if (manifest.splits.count(candidate)) {
        chosen = candidate;
        break;
      }
    }
  }
  return data::LabeledDataset::open(dir, chosen);
}

int gen_data(const Options& o, std::ostream& out) {
  auto config = load_config(o.common);
  if (o.common.seed) {
    config.data.seed = *o.common.seed;
    config.data.split_seed = *o.common.seed;
  }
  const auto run = make_run_dir(o.common.out, "gen-data", config);
  const auto result = data::generate_datasets(config.data, config.model.image_size, run / "data");
  out << "synthetic: " << result.synthetic.count("train") << " train / " << result.synthetic.count("val")
      << " val\nreal_like: " << result.real_like.count("train") << " train\nreal_like_eval: "
      << result.real_like_eval.count("eval") << " eval\n"
      << "wrote " << (run / "data").string() << '\n';
  return 0;
}

int train_sup(const Options& o, std::ostream& out) {
  auto config = load_config(o.common);
  if (o.common.seed) config.supervised.seed = *o.common.seed;
  const auto layout = resolve_layout(o.data);
  auto train = data::LabeledDataset::open(layout.synthetic, "train");
  auto val = data::LabeledDataset::open(layout.synthetic, "val");
  const auto run = make_run_dir(o.common.out, "train-sup", config);
  pipeline::SupervisedTrainer trainer(config, std::move(train), std::move(val), run / "logs" / "train.jsonl");
  if (!o.resume.empty()) trainer.load(o.resume);
  const auto result = trainer.train(run / "ckpts");
  out << "iterations: " << trainer.iteration() << "\nlast: " << result.last_checkpoint.string() << '\n';
  if (result.best_checkpoint) {
    out << "best: " << result.best_checkpoint->string() << " (val abs_rel " << result.best_val_abs_rel << ")\n";
  }
  return 0;
}

int adapt(const Options& o, std::ostream& out) {
  if (o.ckpts.empty()) throw Error(ErrorCategory::config, "adapt needs a supervised checkpoint (--ckpt)");
  auto config = load_config(o.common);
  if (o.common.seed) config.adapt.seed = *o.common.seed;
  const fs::path ckpt(o.ckpts.front());
  if (!fs::exists(ckpt / "manifest.json")) {
    throw Error(ErrorCategory::config, "no supervised checkpoint at " + ckpt.string());
  }
  const auto layout = resolve_layout(o.data);
  auto synthetic = data::UnlabeledDataset::open(layout.synthetic, "train");
  auto real = data::UnlabeledDataset::open(layout.real_like, "train");
  const auto run = make_run_dir(o.common.out, "adapt", config);
  pipeline::AdaptTrainer trainer(config, ckpt, std::move(synthetic), std::move(real), run / "logs" / "train.jsonl");
  if (!o.resume.empty()) trainer.load(o.resume);
  const auto last = trainer.train(run / "ckpts");
  out << "iterations: " << trainer.iteration() << "\nlast: " << last.string() << '\n';
  return 0;
}

synth::Domain parse_domain(const std::string& s) {
  if (s == "synthetic") return synth::Domain::synthetic;
  if (s == "real" || s == "real_like") return synth::Domain::real_like;
  throw Error(ErrorCategory::config, "--domain must be synthetic or real, got " + s);
}

int infer(const Options& o, std::ostream& out) {
  if (o.ckpts.size() != 1) throw Error(ErrorCategory::config, "infer takes exactly one --ckpt");
  if (o.image.empty()) throw Error(ErrorCategory::config, "--image is required");
  const auto config = load_config(o.common);
  const auto domain = parse_domain(o.domain);
  const auto ckpt = pipeline::Checkpoint::load(o.ckpts.front());
  const auto color = data::read_png(o.image);
  const auto result = pipeline::infer(ckpt, color, domain);
  const auto run = make_run_dir(o.common.out, "infer", config);
  data::write_pfm(run / "reports" / "depth.pfm", result.depth);
  data::write_pfm(run / "reports" / "confidence.pfm", result.confidence);
  double lo = 0.0, hi = 0.0;
  cv::minMaxLoc(result.depth, &lo, &hi);
  data::write_png(run / "reports" / "depth.png", metrics::colorize_depth(result.depth, lo, hi));
  std::ofstream(run / "reports" / "inference.json")
      << nlohmann::json{{"checkpoint", o.ckpts.front()},
                        {"step", ckpt.adapted() ? "adapted" : "supervised"},
                        {"encoder", result.encoder},
                        {"image", o.image},
                        {"depth_range_mm", {lo, hi}}}
             .dump(2)
      << '\n';
  out << "encoder " << result.encoder << ", depth " << lo << ".." << hi << " mm -> "
      << (run / "reports").string() << '\n';
  return 0;
}

int eval(const Options& o, std::ostream& out) {
  if (o.ckpts.empty()) throw Error(ErrorCategory::config, "eval needs at least one --ckpt");
  if (!o.labels.empty() && o.labels.size() != o.ckpts.size()) {
    throw Error(ErrorCategory::config, "--label must be given once per --ckpt");
  }
  auto config = load_config(o.common);
  if (o.median_scale) config.eval.median_scale = true;
  for (const auto& c : o.ckpts) {
    if (!fs::exists(fs::path(c) / "manifest.json")) throw Error(ErrorCategory::config, "no checkpoint at " + c);
  }
  const auto dataset = resolve_eval_dataset(o.data, o.split);
  std::vector<fs::path> ckpts(o.ckpts.begin(), o.ckpts.end());
  std::vector<std::string> labels = o.labels;
  if (labels.empty()) {
    for (const auto& c : ckpts) {
      const auto name = c.filename().empty() ? c.parent_path() : c;
      labels.push_back(name.parent_path().parent_path().filename().string() + "/" + name.filename().string());
    }
  }
  const auto run = make_run_dir(o.common.out, "eval", config);
  pipeline::EvalOptions options;
  options.median_scale = config.eval.median_scale;
  options.clamp_mm = config.eval.clamp_mm;
  options.batch_size = config.eval.batch_size;
  options.vis_frames = config.eval.vis_frames;
  options.vis_dir = run / "reports" / "depth_vis";
  const auto rows = pipeline::evaluate_checkpoints(ckpts, labels, dataset, options);
  const auto range = dataset.manifest().depth_range_mm.value_or(
      std::make_pair(rows.front().metrics.depth_min_mm, rows.front().metrics.depth_max_mm));
  nlohmann::json metadata = {{"dataset", dataset.root().string()},
                             {"split", dataset.split()},
                             {"aggregation", "pixel-weighted"},
                             {"median_scaled", options.median_scale},
                             {"prediction_floor_mm", options.clamp_mm},
                             {"depth_vis", {{"dir", "depth_vis"},
                                            {"panels", "color | ground truth | one per checkpoint"},
                                            {"colormap", "jet"},
                                            {"colorbar_mm", {range.first, range.second}}}}};
  metrics::write_reports(run / "reports", rows, metadata);
  out << metrics::csv_header() << '\n';
  for (const auto& row : rows) out << metrics::csv_row(row) << '\n';
  return 0;
}

/// Loss curves from a JSONL training log, drawn with OpenCV.
int plot(const Options& o, std::ostream& out) {
  if (o.log.empty()) throw Error(ErrorCategory::config, "--log is required");
  std::ifstream in(o.log);
  if (!in) throw Error(ErrorCategory::io, "cannot read " + o.log);
  std::map<std::string, std::vector<std::pair<double, double>>> series;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCategory::data, "malformed log line: " + std::string(e.what()));
    }
    const auto phase = rec.value("phase", std::string{});
    const double it = rec.value("iteration", 0.0);
    if (phase == "supervised") {
      series["loss"].emplace_back(it, rec["loss"]["total"].get<double>());
    } else if (phase == "validation") {
      series["val abs_rel"].emplace_back(it, rec["abs_rel"].get<double>());
    } else if (phase == "adapt") {
      double d = 0.0, e = 0.0, acc = 0.0;
      for (int i = 0; i < 3; ++i) {
        d += rec["loss"]["discriminator"][i].get<double>();
        e += rec["loss"]["encoder"][i].get<double>();
        acc += rec["discriminator_accuracy"][i].get<double>() / 3.0;
      }
      series["discriminator loss"].emplace_back(it, d);
      series["encoder loss"].emplace_back(it, e);
      series["discriminator accuracy"].emplace_back(it, acc);
    }
  }
  if (series.empty()) throw Error(ErrorCategory::data, "no plottable records in " + o.log);

  const auto config = load_config(o.common);
  const auto run = make_run_dir(o.common.out, "plot", config);
  const int W = 800, H = 240, margin = 40;
  for (const auto& [name, points] : series) {
    cv::Mat canvas(H, W, CV_8UC3, cv::Scalar(255, 255, 255));
    double x0 = points.front().first, x1 = points.back().first;
    double y0 = points.front().second, y1 = y0;
    for (const auto& p : points) {
      y0 = std::min(y0, p.second);
      y1 = std::max(y1, p.second);
    }
    if (x1 <= x0) x1 = x0 + 1;
    if (y1 <= y0) y1 = y0 + 1;
    auto to_px = [&](const std::pair<double, double>& p) {
      return cv::Point(margin + static_cast<int>((p.first - x0) / (x1 - x0) * (W - 2 * margin)),
                       H - margin - static_cast<int>((p.second - y0) / (y1 - y0) * (H - 2 * margin)));
    };
    cv::rectangle(canvas, {margin, margin}, {W - margin, H - margin}, cv::Scalar(180, 180, 180));
    for (size_t i = 1; i < points.size(); ++i) {
      cv::line(canvas, to_px(points[i - 1]), to_px(points[i]), cv::Scalar(160, 60, 20), 1, cv::LINE_AA);
    }
    std::ostringstream label;
    label << name << "  [" << y0 << ", " << y1 << "]";
    cv::putText(canvas, label.str(), {margin, margin - 12}, cv::FONT_HERSHEY_SIMPLEX, 0.5, cv::Scalar(0, 0, 0));
    std::string file = name;
    std::replace(file.begin(), file.end(), ' ', '_');
    data::write_png(run / "reports" / (file + ".png"), canvas);
    out << "wrote " << (run / "reports" / (file + ".png")).string() << '\n';
  }
  return 0;
}

}  // namespace

fs::path runs_root() {
  if (const char* env = std::getenv("BRONCHODEPTH_RUNS_DIR"); env && *env) return env;
  return "runs";
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Two-step domain-adaptive monocular depth for bronchoscopy"};
  app.require_subcommand(1);
  Options o;

  auto* gen = app.add_subcommand("gen-data", "render the synthetic and real-like datasets");
  add_common(gen, o.common);

  auto* sup = app.add_subcommand("train-sup", "supervised training of F_S and G_S");
  add_common(sup, o.common);
  sup->add_option("--data", o.data, "gen-data run directory")->required();
  sup->add_option("--resume", o.resume, "continue from a supervised checkpoint");

  auto* adp = app.add_subcommand("adapt", "adversarial training of F_R");
  add_common(adp, o.common);
  adp->add_option("--ckpt", o.ckpts, "supervised checkpoint");
  adp->add_option("--data", o.data, "gen-data run directory")->required();
  adp->add_option("--resume", o.resume, "continue from an adapted checkpoint");

  auto* inf = app.add_subcommand("infer", "depth and confidence for one image");
  add_common(inf, o.common);
  inf->add_option("--ckpt", o.ckpts, "checkpoint");
  inf->add_option("--image", o.image, "PNG image");
  inf->add_option("--domain", o.domain, "synthetic | real")->capture_default_str();

  auto* ev = app.add_subcommand("eval", "metrics for one or more checkpoints");
  add_common(ev, o.common);
  ev->add_option("--ckpt", o.ckpts, "checkpoint (repeatable)");
  ev->add_option("--label", o.labels, "row label per checkpoint");
  ev->add_option("--data", o.data, "dataset directory or gen-data run directory")->required();
  ev->add_option("--split", o.split, "split name (default: eval, val or train)");
  ev->add_flag("--median-scale", o.median_scale, "rescale each prediction to the ground-truth median");

  auto* plt = app.add_subcommand("plot", "loss curves from a training log");
  add_common(plt, o.common);
  plt->add_option("--log", o.log, "train.jsonl")->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "config error: " << e.what() << '\n';
    return exit_code(ErrorCategory::config);
  }

  try {
    if (o.common.deterministic) pipeline::use_deterministic_mode();
    if (gen->parsed()) return gen_data(o, out);
    if (sup->parsed()) return train_sup(o, out);
    if (adp->parsed()) return adapt(o, out);
    if (inf->parsed()) return infer(o, out);
    if (ev->parsed()) return eval(o, out);
    return plot(o, out);
  } catch (const Error& e) {
    err << to_string(e.category()) << " error: " << e.what() << '\n';
    return exit_code(e.category());
  } catch (const ContractViolation& e) {
    err << "internal error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace bronchodepth::cli
