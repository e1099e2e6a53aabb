// crashcast: desk-scale traffic-camera accident detection and forecasting.
//
// One binary, subcommand style. Every run writes a resolved-config snapshot
// into its output directory so results can be reproduced byte for byte.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "crashcast/config.hpp"
#include "crashcast/data.hpp"
#include "crashcast/detection.hpp"
#include "crashcast/evaluation.hpp"
#include "crashcast/forecasting.hpp"
#include "crashcast/plot.hpp"

namespace fs = std::filesystem;
using namespace crashcast;

namespace {

fs::path resolve_out(const std::string& flag_value) {
  if (!flag_value.empty()) return flag_value;
  if (const char* env = std::getenv("CRASHCAST_OUT"); env && *env) return env;
  throw std::runtime_error("no output directory: pass --out or set CRASHCAST_OUT");
}

void write_resolved_config(const fs::path& out, const std::string& command,
                           config::KeyValues kv) {
  kv["command"] = command;
  fs::create_directories(out);
  config::write_kv_file(out / "resolved_config.txt", kv);
}

/// Layering for module configs: config file < --set pairs < dedicated flags.
config::KeyValues merge_overrides(const std::string& config_file,
                                  const std::vector<std::string>& sets,
                                  const config::KeyValues& flag_kv) {
  config::KeyValues kv;
  if (!config_file.empty()) kv = config::load_kv_file(config_file);
  for (const auto& pair : sets) {
    const auto eq = pair.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("--set expects key=value, got '" + pair + "'");
    kv[config::trim(pair.substr(0, eq))] = config::trim(pair.substr(eq + 1));
  }
  for (const auto& [k, v] : flag_kv) kv[k] = v;
  return kv;
}

std::vector<data::VideoRecord> load_filtered_dataset(const std::string& data_dir,
                                                     const std::string& videos_csv) {
  auto records = data::load_dataset(data_dir);
  if (videos_csv.empty()) return records;
  std::vector<std::string> wanted;
  std::stringstream ss(videos_csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    tok = config::trim(tok);
    if (!tok.empty()) wanted.push_back(tok);
  }
  std::vector<data::VideoRecord> filtered;
  for (auto& r : records)
    if (std::find(wanted.begin(), wanted.end(), r.id) != wanted.end())
      filtered.push_back(std::move(r));
  if (filtered.empty())
    throw std::runtime_error("--videos matched nothing in " + data_dir);
  return filtered;
}

Image load_frame(const data::VideoRecord& rec, int frame) {
  if (rec.frames_dir.empty())
    throw std::runtime_error("video " + rec.id +
                             " has no rendered frames; generate the dataset with `crashcast "
                             "synth` (frames enabled)");
  return Image::load_ppm(rec.frame_path(frame));
}

std::vector<detection::TrainingFrame> frames_for_detector(
    const std::vector<data::VideoRecord>& records, int frame_step) {
  std::vector<detection::TrainingFrame> frames;
  for (const auto& rec : records)
    for (int f = 0; f < rec.frame_count; f += frame_step) {
      auto gt = rec.boxes_at(f);
      if (gt.empty()) continue;
      frames.push_back({load_frame(rec, f), std::move(gt)});
    }
  if (frames.empty()) throw std::runtime_error("no annotated frames found in the dataset");
  return frames;
}

// ---------------------------------------------------------------------------
// subcommand implementations

struct SynthArgs {
  std::string out;
  std::uint64_t seed = 1;
  int videos = 20;
  int frames = 360;
  int width = 128, height = 96;
  double fps = 10.0;
  double collision_prob = 0.6;
  int min_objects = 3, max_objects = 5;
  double object_scale = 1.0;
  double noise = 10.0;
  bool no_frames = false;
};

void cmd_synth(const SynthArgs& a) {
  const fs::path out = resolve_out(a.out);
  data::SynthConfig cfg;
  cfg.width = a.width;
  cfg.height = a.height;
  cfg.frame_count = a.frames;
  cfg.fps = a.fps;
  cfg.collision_probability = a.collision_prob;
  cfg.min_objects = a.min_objects;
  cfg.max_objects = a.max_objects;
  cfg.object_scale = a.object_scale;
  cfg.noise_level = a.noise;
  cfg.render_frames = !a.no_frames;
  const auto videos = data::synth_videos(a.videos, a.seed, cfg, out);
  int events = 0;
  for (const auto& v : videos) events += static_cast<int>(v.record.events.size());
  config::KeyValues kv;
  kv["seed"] = std::to_string(a.seed);
  kv["videos"] = std::to_string(a.videos);
  kv["frames"] = std::to_string(a.frames);
  kv["width"] = std::to_string(a.width);
  kv["height"] = std::to_string(a.height);
  kv["fps"] = config::format_double(a.fps);
  kv["collision_probability"] = config::format_double(a.collision_prob);
  kv["min_objects"] = std::to_string(a.min_objects);
  kv["max_objects"] = std::to_string(a.max_objects);
  kv["object_scale"] = config::format_double(a.object_scale);
  kv["noise_level"] = config::format_double(a.noise);
  kv["render_frames"] = cfg.render_frames ? "true" : "false";
  write_resolved_config(out, "synth", kv);
  std::cout << "synth: wrote " << a.videos << " videos (" << events << " accident events) to "
            << out.string() << "\n";
}

void cmd_stats(const std::string& data_dir, const std::string& out_flag, bool json) {
  const fs::path out = resolve_out(out_flag);
  const auto records = data::load_dataset(data_dir);
  const auto report = data::dataset_stats(records);
  fs::create_directories(out);
  const std::string text = data::stats_to_text(report);
  const auto kv = data::stats_to_kv(report);
  {
    std::ofstream tf(out / "stats.txt");
    tf << text;
  }
  config::write_kv_file(out / "stats.kv", kv);
  write_resolved_config(out, "stats", {{"data", data_dir}});
  if (json) {
    nlohmann::json j;
    for (const auto& [k, v] : kv) j[k] = v;
    std::cout << j.dump(2) << "\n";
  } else {
    std::cout << text;
  }
}

struct DetectorTrainArgs {
  std::string data, out, config_file, videos;
  std::vector<std::string> sets;
  config::KeyValues flag_kv;
  int frame_step = 10;
};

void cmd_train_detector(const DetectorTrainArgs& a) {
  const fs::path out = resolve_out(a.out);
  const auto kv = merge_overrides(a.config_file, a.sets, a.flag_kv);
  const auto cfg = detection::DetectorConfig::from_kv(kv);
  const auto records = load_filtered_dataset(a.data, a.videos);
  const auto frames = frames_for_detector(records, a.frame_step);
  std::cout << "train-detector: " << frames.size() << " frames, " << cfg.iterations
            << " iterations\n";
  detection::TrainTrace trace;
  const auto model = detection::train_detector(frames, cfg, &trace);
  detection::save_checkpoint(model, out / "detector");
  trace.save(out / "detector_loss.txt");
  auto resolved = cfg.to_kv();
  resolved["data"] = a.data;
  resolved["frame_step"] = std::to_string(a.frame_step);
  write_resolved_config(out, "train-detector", resolved);
  std::cout << "train-detector: final loss "
            << config::format_double(trace.steps.empty() ? 0.0 : trace.steps.back().total)
            << ", checkpoint at " << (out / "detector").string() << "\n";
}

struct DetectorEvalArgs {
  std::string data, detector, out, videos;
  std::vector<std::string> sets;
  config::KeyValues flag_kv;
  double iou = 0.5;
  int frame_step = 10;
  std::string multiscale;
};

void cmd_eval_detector(const DetectorEvalArgs& a) {
  const fs::path out = resolve_out(a.out);
  auto model = detection::load_checkpoint(a.detector);
  if (!a.sets.empty() || !a.flag_kv.empty()) {
    auto kv = model.cfg.to_kv();
    for (const auto& [k, v] : merge_overrides("", a.sets, a.flag_kv)) kv[k] = v;
    model.cfg = detection::DetectorConfig::from_kv(kv);
  }
  std::vector<double> scales;
  if (!a.multiscale.empty()) scales = config::parse_list(a.multiscale);

  const auto records = load_filtered_dataset(a.data, a.videos);
  std::vector<std::vector<geometry::Detection>> dets;
  std::vector<std::vector<evaluation::GroundTruthBox>> gts;
  for (const auto& rec : records)
    for (int f = 0; f < rec.frame_count; f += a.frame_step) {
      const auto gt = rec.boxes_at(f);
      if (gt.empty()) continue;
      const Image img = load_frame(rec, f);
      dets.push_back(scales.empty() ? detection::detect(model, img)
                                    : detection::detect_multiscale(model, img, scales));
      std::vector<evaluation::GroundTruthBox> g;
      for (const auto& [cat, box] : gt) g.push_back({static_cast<int>(cat), box});
      gts.push_back(std::move(g));
    }
  const auto report = evaluation::detection_map(dets, gts, a.iou);
  fs::create_directories(out);
  {
    std::ofstream tf(out / "detection_eval.txt");
    tf << report.to_text();
  }
  auto kv = report.to_kv();
  kv["iou_threshold"] = config::format_double(a.iou);
  kv["images"] = std::to_string(dets.size());
  config::write_kv_file(out / "detection_eval.kv", kv);
  auto resolved = model.cfg.to_kv();
  resolved["data"] = a.data;
  resolved["detector"] = a.detector;
  resolved["iou"] = config::format_double(a.iou);
  resolved["frame_step"] = std::to_string(a.frame_step);
  resolved["multiscale"] = a.multiscale;
  write_resolved_config(out, "eval-detector", resolved);
  std::cout << report.to_text();
}

struct MineArgs {
  std::string data, detector, out, videos;
  int max_objects = 10;
  std::uint64_t seed = 1;
};

void cmd_mine_segments(const MineArgs& a) {
  const fs::path out = resolve_out(a.out);
  const auto model = detection::load_checkpoint(a.detector);
  const auto records = load_filtered_dataset(a.data, a.videos);
  std::vector<forecasting::SegmentSample> all;
  std::vector<std::string> warnings;
  Rng master(a.seed);
  int skipped_no_events = 0;
  for (std::size_t vi = 0; vi < records.size(); ++vi) {
    const auto& rec = records[vi];
    if (rec.events.empty()) {
      ++skipped_no_events;
      continue;
    }
    std::vector<forecasting::FrameFeatures> feats;
    feats.reserve(static_cast<std::size_t>(rec.frame_count));
    for (int f = 0; f < rec.frame_count; ++f) {
      const auto obs = detection::observe_frame(model, load_frame(rec, f), a.max_objects);
      forecasting::FrameFeatures ff;
      ff.full = obs.full_frame;
      ff.objects = obs.object_features;
      feats.push_back(std::move(ff));
    }
    forecasting::MinerConfig mcfg;
    mcfg.max_objects = a.max_objects;
    mcfg.seed = master.child(vi + 1).next_u64();
    auto result = forecasting::mine_segments(rec, feats, mcfg);
    for (auto& s : result.samples) all.push_back(std::move(s));
    for (auto& w : result.warnings) warnings.push_back(std::move(w));
  }
  if (all.empty())
    throw std::runtime_error("no segments mined: dataset has no videos with accident events");
  fs::create_directories(out);
  forecasting::save_segments(out / "segments.bin", all);
  long positives = 0;
  for (const auto& s : all) positives += s.positive ? 1 : 0;
  {
    std::ofstream rf(out / "mining_report.txt");
    rf << "segments " << all.size() << "\npositives " << positives << "\nnegatives "
       << (static_cast<long>(all.size()) - positives) << "\nvideos_without_events "
       << skipped_no_events << "\n";
    for (const auto& w : warnings) rf << "warning " << w << "\n";
  }
  write_resolved_config(out, "mine-segments",
                        {{"data", a.data},
                         {"detector", a.detector},
                         {"max_objects", std::to_string(a.max_objects)},
                         {"seed", std::to_string(a.seed)}});
  std::cout << "mine-segments: " << positives << " positives, " << (all.size() - positives)
            << " negatives -> " << (out / "segments.bin").string() << "\n";
  for (const auto& w : warnings) std::cout << "  warning: " << w << "\n";
}

struct ForecastTrainArgs {
  std::string segments, out, config_file;
  std::vector<std::string> sets;
  config::KeyValues flag_kv;
};

void cmd_train_forecaster(const ForecastTrainArgs& a) {
  const fs::path out = resolve_out(a.out);
  auto samples = forecasting::load_segments(a.segments);
  auto kv = merge_overrides(a.config_file, a.sets, a.flag_kv);
  // Feature dimension and object count come from the mined data unless
  // explicitly overridden.
  if (!samples.empty()) {
    if (!config::has(kv, "feature_dim"))
      kv["feature_dim"] = std::to_string(samples[0].feature_dim());
    if (!config::has(kv, "max_objects"))
      kv["max_objects"] = std::to_string(samples[0].max_objects());
  }
  const auto cfg = forecasting::ForecasterConfig::from_kv(kv);
  std::cout << "train-forecaster: " << samples.size() << " segments, " << cfg.epochs
            << " epochs\n";
  forecasting::ForecastTrainTrace trace;
  const auto model = forecasting::train_forecaster(samples, cfg, &trace);
  forecasting::save_checkpoint(model, out / "forecaster");
  trace.save(out / "forecaster_loss.txt");
  auto resolved = cfg.to_kv();
  resolved["segments"] = a.segments;
  write_resolved_config(out, "train-forecaster", resolved);
  std::cout << "train-forecaster: final epoch loss "
            << config::format_double(trace.epoch_losses.empty() ? 0.0
                                                                : trace.epoch_losses.back())
            << ", checkpoint at " << (out / "forecaster").string() << "\n";
}

struct ForecastEvalArgs {
  std::string segments, forecaster, out;
  double recall_at = 0.8;
  double fps = 0.0;  // 0 = unset
  int thetas = 201;
};

void cmd_eval_forecaster(const ForecastEvalArgs& a) {
  const fs::path out = resolve_out(a.out);
  const auto model = forecasting::load_checkpoint(a.forecaster);
  const auto samples = forecasting::load_segments(a.segments);
  double fps = a.fps;
  if (fps <= 0.0) {
    fps = 10.0;
    std::cerr << "warning: no --fps given; defaulting to 10\n";
  }
  std::vector<evaluation::PositiveCurve> positives;
  std::vector<forecasting::ForecastCurve> negatives;
  for (const auto& s : samples) {
    auto curve = forecasting::forecast(model, s);
    if (s.positive)
      positives.push_back({std::move(curve), s.accident_index});
    else
      negatives.push_back(std::move(curve));
  }
  if (positives.empty())
    throw std::runtime_error("segment cache has no positive segments; re-run mine-segments");
  std::vector<double> grid;
  for (int i = 0; i < a.thetas; ++i)
    grid.push_back(static_cast<double>(i) / static_cast<double>(a.thetas - 1));
  const auto report = evaluation::forecast_curve_eval(positives, negatives, grid, fps, a.recall_at);
  fs::create_directories(out);
  {
    std::ofstream tf(out / "forecast_eval.txt");
    tf << report.to_text();
  }
  auto kv = report.to_kv();
  kv["positives"] = std::to_string(positives.size());
  kv["negatives"] = std::to_string(negatives.size());
  kv["fps"] = config::format_double(fps);
  config::write_kv_file(out / "forecast_eval.kv", kv);
  report.save_curve(out / "curve.txt");
  write_resolved_config(out, "eval-forecaster",
                        {{"segments", a.segments},
                         {"forecaster", a.forecaster},
                         {"recall_at", config::format_double(a.recall_at)},
                         {"fps", config::format_double(fps)},
                         {"thetas", std::to_string(a.thetas)}});
  std::cout << report.to_text();
}

void cmd_plot(const std::string& curve, const std::string& out_flag) {
  const fs::path out = resolve_out(out_flag);
  fs::create_directories(out);
  plot::plot_curves(curve, out / "pr_curve.ppm", out / "toa_vs_recall.ppm");
  write_resolved_config(out, "plot", {{"curve", curve}});
  std::cout << "plot: wrote " << (out / "pr_curve.ppm").string() << " and "
            << (out / "toa_vs_recall.ppm").string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"crashcast: context-mined small-object detection and accident forecasting "
               "on traffic-camera video"};
  app.require_subcommand(1);

  // synth ---------------------------------------------------------------
  SynthArgs synth_args;
  auto* synth = app.add_subcommand("synth", "generate a synthetic annotated video dataset");
  synth->add_option("--out", synth_args.out, "output dataset directory");
  synth->add_option("--seed", synth_args.seed, "generator seed");
  synth->add_option("--videos", synth_args.videos, "number of videos");
  synth->add_option("--frames", synth_args.frames, "frames per video");
  synth->add_option("--width", synth_args.width, "canvas width");
  synth->add_option("--height", synth_args.height, "canvas height");
  synth->add_option("--fps", synth_args.fps, "frames per second metadata");
  synth->add_option("--collision-prob", synth_args.collision_prob,
                    "per-video probability of a scripted collision");
  synth->add_option("--objects-min", synth_args.min_objects, "minimum objects per video");
  synth->add_option("--objects-max", synth_args.max_objects, "maximum objects per video");
  synth->add_option("--object-scale", synth_args.object_scale, "object size multiplier");
  synth->add_option("--noise", synth_args.noise, "background noise amplitude");
  synth->add_flag("--no-frames", synth_args.no_frames, "skip frame rasterization");
  synth->callback([&] { cmd_synth(synth_args); });

  // stats ---------------------------------------------------------------
  std::string stats_data, stats_out;
  bool stats_json = false;
  auto* stats = app.add_subcommand("stats", "dataset statistics report");
  stats->add_option("--data", stats_data, "dataset directory")->required();
  stats->add_option("--out", stats_out, "output directory");
  stats->add_flag("--json", stats_json, "print machine-readable JSON to stdout");
  stats->callback([&] { cmd_stats(stats_data, stats_out, stats_json); });

  // shared detector/forecaster hyperparameter flags --------------------
  auto add_context_flags = [](CLI::App* sub, config::KeyValues& kv) {
    auto opt = [&kv, sub](const char* flag, const char* key, const char* help) {
      auto* o = sub->add_option_function<std::string>(
          flag, [&kv, key](const std::string& v) { kv[key] = v; }, help);
      return o;
    };
    opt("--context", "context", "context mining mode: none|cm|acm");
    opt("--nc", "context_nc", "CM: number of contexts");
    opt("--m", "context_m", "ACM: horizontal steps");
    opt("--n", "context_n", "ACM: vertical steps");
    opt("--stride", "context_stride", "context step stride in pixels");
    opt("--alpha", "context_alpha", "small-object area-ratio gate");
    opt("--lr", "learning_rate", "learning rate");
    opt("--lambda", "lambda", "classification/regression loss balance");
    opt("--iterations", "iterations", "training iterations");
    opt("--seed", "seed", "training seed");
    opt("--anchor-scales", "anchor_scales", "anchor areas, comma separated");
    opt("--anchor-ratios", "anchor_ratios", "anchor aspect ratios, comma separated");
    opt("--score-threshold", "score_threshold", "detection confidence cutoff");
  };

  // train-detector -------------------------------------------------------
  DetectorTrainArgs dt;
  auto* train_det = app.add_subcommand("train-detector", "train the two-stage detector");
  train_det->add_option("--data", dt.data, "dataset directory")->required();
  train_det->add_option("--out", dt.out, "output directory");
  train_det->add_option("--config", dt.config_file, "detector config file (key = value)");
  train_det->add_option("--set", dt.sets, "override any config key (key=value, repeatable)");
  train_det->add_option("--videos", dt.videos, "comma-separated video id filter");
  train_det->add_option("--frame-step", dt.frame_step, "use every n-th frame");
  add_context_flags(train_det, dt.flag_kv);
  train_det->callback([&] { cmd_train_detector(dt); });

  // eval-detector ----------------------------------------------------------
  DetectorEvalArgs de;
  auto* eval_det = app.add_subcommand("eval-detector", "detection mAP over a dataset");
  eval_det->add_option("--data", de.data, "dataset directory")->required();
  eval_det->add_option("--detector", de.detector, "detector checkpoint directory")->required();
  eval_det->add_option("--out", de.out, "output directory");
  eval_det->add_option("--videos", de.videos, "comma-separated video id filter");
  eval_det->add_option("--iou", de.iou, "IoU threshold for matching (default 0.5)");
  eval_det->add_option("--frame-step", de.frame_step, "use every n-th frame");
  eval_det->add_option("--multiscale", de.multiscale,
                       "comma-separated short sides for multi-scale testing");
  eval_det->add_option("--set", de.sets, "override any config key (key=value, repeatable)");
  add_context_flags(eval_det, de.flag_kv);
  eval_det->callback([&] { cmd_eval_detector(de); });

  // mine-segments ---------------------------------------------------------
  MineArgs mine;
  auto* mine_cmd = app.add_subcommand("mine-segments",
                                      "extract 100-frame positive/negative feature segments");
  mine_cmd->add_option("--data", mine.data, "dataset directory")->required();
  mine_cmd->add_option("--detector", mine.detector, "detector checkpoint directory")->required();
  mine_cmd->add_option("--out", mine.out, "output directory");
  mine_cmd->add_option("--videos", mine.videos, "comma-separated video id filter");
  mine_cmd->add_option("--max-objects", mine.max_objects, "object slots per frame (K)");
  mine_cmd->add_option("--seed", mine.seed, "negative-window sampling seed");
  mine_cmd->callback([&] { cmd_mine_segments(mine); });

  // train-forecaster -------------------------------------------------------
  ForecastTrainArgs ft;
  auto* train_fc = app.add_subcommand("train-forecaster", "train the attention forecaster");
  train_fc->add_option("--segments", ft.segments, "segment cache file")->required();
  train_fc->add_option("--out", ft.out, "output directory");
  train_fc->add_option("--config", ft.config_file, "forecaster config file");
  train_fc->add_option("--set", ft.sets, "override any config key (key=value, repeatable)");
  {
    auto opt = [&](const char* flag, const char* key, const char* help) {
      train_fc->add_option_function<std::string>(
          flag, [&ft, key](const std::string& v) { ft.flag_kv[key] = v; }, help);
    };
    opt("--epochs", "epochs", "training epochs (default 40)");
    opt("--hidden", "hidden_size", "LSTM hidden size");
    opt("--attention", "attention_size", "attention projection size");
    opt("--lr", "learning_rate", "learning rate");
    opt("--clip", "grad_clip", "gradient norm clip");
    opt("--seed", "seed", "training seed");
  }
  train_fc->callback([&] { cmd_train_forecaster(ft); });

  // eval-forecaster ---------------------------------------------------------
  ForecastEvalArgs fe;
  auto* eval_fc = app.add_subcommand("eval-forecaster",
                                     "ToA / recall / precision / AP over segment curves");
  eval_fc->add_option("--segments", fe.segments, "segment cache file")->required();
  eval_fc->add_option("--forecaster", fe.forecaster, "forecaster checkpoint directory")
      ->required();
  eval_fc->add_option("--out", fe.out, "output directory");
  eval_fc->add_option("--recall-at", fe.recall_at, "recall level for the ToA@recall report");
  eval_fc->add_option("--fps", fe.fps, "frames per second (default 10 with a warning)");
  eval_fc->add_option("--thetas", fe.thetas, "number of thresholds in the sweep");
  eval_fc->callback([&] { cmd_eval_forecaster(fe); });

  // plot --------------------------------------------------------------------
  std::string plot_curve, plot_out;
  auto* plot_cmd = app.add_subcommand("plot", "render PR and ToA-vs-recall curve images");
  plot_cmd->add_option("--curve", plot_curve, "curve file from eval-forecaster")->required();
  plot_cmd->add_option("--out", plot_out, "output directory");
  plot_cmd->callback([&] { cmd_plot(plot_curve, plot_out); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);  // prints usage; nonzero on error
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
