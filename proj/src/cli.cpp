#include "vdet/cli.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include <cblas.h>
#include <CLI11.hpp>
#include <opencv2/imgproc.hpp>

#include "vdet/checkpoint.hpp"
#include "vdet/data.hpp"
#include "vdet/log.hpp"
#include "vdet/metrics.hpp"
#include "vdet/run_config.hpp"
#include "vdet/trainer.hpp"

namespace vdet::cli {

namespace fs = std::filesystem;

namespace {

std::vector<fs::path> list_files(const fs::path& dir, bool images) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    if (images ? is_image_file(e.path()) : e.path().extension() == ".txt") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

cv::Rect to_rect(const Box& normalized, int w, int h) {
  const Corners c = to_corners(to_pixel(normalized, w, h));
  return cv::Rect(cv::Point(static_cast<int>(std::lround(c.x1)), static_cast<int>(std::lround(c.y1))),
                  cv::Point(static_cast<int>(std::lround(c.x2)), static_cast<int>(std::lround(c.y2))));
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DatasetError("cannot write " + path.string());
  out << text;
}

}  // namespace

int cmd_train(const TrainOptions& opt) {
  RunConfig cfg;
  try {
    cfg = load_run_config(opt.config);
    apply_overrides(cfg, opt.overrides);
    if (opt.out) cfg.out_dir = *opt.out;
    if (opt.seed) cfg.train.seed = *opt.seed;
    if (opt.deterministic) cfg.train.deterministic = true;
    cfg.finalize();
    if (cfg.data_root.empty()) throw ConfigError("data_root is not set");
  } catch (const ConfigError& e) {
    log::error(e.what());
    return kExitConfig;
  }

  std::vector<AnnotationRecord> train_set, val_set;
  try {
    const std::vector<AnnotationRecord> records = load_dataset(cfg.data_root);
    std::map<std::string, Split> split = read_split(cfg.data_root);
    if (split.empty()) {
      std::vector<std::string> stems;
      for (const auto& r : records) stems.push_back(r.stem);
      split = make_split(stems, cfg.val_fraction, cfg.train.seed);
      log::info("no split.txt found; generated a split with val_fraction " +
                std::to_string(cfg.val_fraction));
    }
    for (const AnnotationRecord& r : records) {
      const auto it = split.find(r.stem);
      if (it == split.end()) log::warning("stem '" + r.stem + "' is not in the split; using it for training");
      (it != split.end() && it->second == Split::kVal ? val_set : train_set).push_back(r);
    }
    if (train_set.empty()) throw DatasetError("training split of " + cfg.data_root.string() + " is empty");
    fs::create_directories(cfg.out_dir);
    std::map<std::string, Split> used;
    for (const auto& r : train_set) used[r.stem] = Split::kTrain;
    for (const auto& r : val_set) used[r.stem] = Split::kVal;
    write_split(cfg.out_dir, used);
  } catch (const DatasetError& e) {
    log::error(e.what());
    return kExitDataset;
  } catch (const fs::filesystem_error& e) {
    log::error(e.what());
    return kExitDataset;
  }

  try {
    write_text(cfg.out_dir / "config.txt", to_text(cfg));
    const TrainResult result = train(cfg.model, cfg.train, train_set, val_set, cfg.out_dir);
    std::ostringstream msg;
    msg << "best validation F2 " << result.best.best_f2 << " at threshold "
        << result.best.best_threshold << " (epoch " << result.best.epoch + 1 << "); checkpoint "
        << result.best_checkpoint.string();
    log::info(msg.str());
  } catch (const NonFiniteLoss& e) {
    log::error(e.what());
    return kExitNonFinite;
  } catch (const ConfigError& e) {
    log::error(e.what());
    return kExitConfig;
  } catch (const DatasetError& e) {
    log::error(e.what());
    return kExitDataset;
  } catch (const std::exception& e) {
    log::error(e.what());
    return kExitRuntime;
  }
  return kExitOk;
}

int cmd_predict(const PredictOptions& opt) {
  if (opt.deterministic) openblas_set_num_threads(1);
  CheckpointMeta meta;
  std::optional<Model> model;
  try {
    model.emplace(load_checkpoint(opt.checkpoint, &meta));
  } catch (const std::exception& e) {
    log::error(e.what());
    return kExitConfig;
  }
  const double conf = opt.conf.value_or(meta.best_threshold);
  const double nms_iou = opt.nms_iou.value_or(meta.train.nms_iou);
  if (!(conf >= 0.0 && conf <= 1.0) || !(nms_iou > 0.0 && nms_iou < 1.0)) {
    log::error("--conf must lie in [0, 1] and --nms-iou in (0, 1)");
    return kExitConfig;
  }

  std::vector<fs::path> images;
  std::optional<std::map<std::string, Split>> split;
  try {
    if (!fs::is_directory(opt.images)) throw DatasetError("missing image directory " + opt.images.string());
    images = list_files(opt.images, true);
    if (opt.split) {
      if (*opt.split != "train" && *opt.split != "val") {
        log::error("--split must be 'train' or 'val'");
        return kExitConfig;
      }
      split = read_split(opt.images.parent_path());
      if (split->empty()) throw DatasetError("no split.txt next to " + opt.images.string());
    }
    fs::create_directories(opt.out);
    if (opt.overlay) fs::create_directories(opt.out / "overlays");
  } catch (const std::exception& e) {
    log::error(e.what());
    return kExitDataset;
  }

  int attempted = 0, failed = 0;
  for (const fs::path& path : images) {
    const std::string stem = path.stem().string();
    if (split) {
      const auto it = split->find(stem);
      const Split want = *opt.split == "val" ? Split::kVal : Split::kTrain;
      if (it == split->end() || it->second != want) continue;
    }
    ++attempted;
    cv::Mat rgb;
    try {
      rgb = load_image_rgb(path);
    } catch (const DatasetError& e) {
      log::warning(std::string(e.what()) + "; skipped");
      ++failed;
      continue;
    }
    const std::vector<Detection> dets = detect(*model, rgb, conf, nms_iou);
    std::vector<Box> boxes;
    std::vector<double> confs;
    for (const Detection& d : dets) {
      boxes.push_back(d.box);
      confs.push_back(d.confidence);
    }
    try {
      write_label_file(opt.out / (stem + ".txt"), boxes, confs);
      if (opt.overlay) {
        cv::Mat canvas = rgb.clone();
        for (const Detection& d : dets) {
          const cv::Rect r = to_rect(d.box, rgb.cols, rgb.rows);
          cv::rectangle(canvas, r, cv::Scalar(255, 200, 0), 2);
          char label[16];
          std::snprintf(label, sizeof(label), "%.2f", d.confidence);
          cv::putText(canvas, label, r.tl() + cv::Point(2, 14), cv::FONT_HERSHEY_SIMPLEX, 0.45,
                      cv::Scalar(255, 200, 0), 1);
        }
        save_image_rgb(opt.out / "overlays" / (stem + ".png"), canvas);
      }
    } catch (const DatasetError& e) {
      log::error(e.what());
      return kExitDataset;
    }
  }
  log::info("wrote detections for " + std::to_string(attempted - failed) + " of " +
            std::to_string(attempted) + " images");
  if (attempted > 0 && failed == attempted) return kExitDataset;
  return kExitOk;
}

int cmd_eval(const EvalOptions& opt) {
  if (!(opt.iou_thresh > 0.0 && opt.iou_thresh <= 1.0) || !(opt.conf >= 0.0 && opt.conf <= 1.0)) {
    log::error("--iou-thresh must lie in (0, 1] and --conf in [0, 1]");
    return kExitConfig;
  }
  PredictionSet predictions;
  AnnotationSet annotations;
  try {
    if (!fs::is_directory(opt.predictions))
      throw DatasetError("missing predictions directory " + opt.predictions.string());
    if (!fs::is_directory(opt.labels)) throw DatasetError("missing labels directory " + opt.labels.string());
    for (const fs::path& p : list_files(opt.predictions, false))
      predictions[p.stem().string()] = parse_prediction_file(p);
    int common = 0, missing = 0;
    for (const auto& [stem, _] : predictions) {
      const fs::path label = opt.labels / (stem + ".txt");
      if (fs::exists(label)) {
        annotations[stem] = parse_label_file(label);
        ++common;
      } else {
        annotations[stem] = {};
        ++missing;
      }
    }
    if (common == 0) throw DatasetError("predictions and labels share no stems");
    if (missing > 0)
      log::warning(std::to_string(missing) + " prediction files have no label file; treated as empty images");
  } catch (const DatasetError& e) {
    log::error(e.what());
    return kExitDataset;
  }

  const EvalReport report = evaluate_dataset(predictions, annotations, opt.iou_thresh, opt.conf);
  std::cout << report.to_key_value();
  try {
    if (opt.out) {
      fs::create_directories(*opt.out);
      write_text(*opt.out / "report.txt", report.to_key_value());
      write_text(*opt.out / "per_image.csv", report.to_table());
    }
    if (opt.images) {
      if (!opt.out) {
        log::error("--overlay needs --out");
        return kExitConfig;
      }
      fs::create_directories(*opt.out / "overlays");
      for (const ImageResult& r : report.per_image) {
        fs::path image;
        for (const char* ext : {".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp"})
          if (fs::exists(*opt.images / (r.id + ext))) {
            image = *opt.images / (r.id + ext);
            break;
          }
        if (image.empty()) {
          log::warning("no image for '" + r.id + "'; overlay skipped");
          continue;
        }
        cv::Mat canvas = load_image_rgb(image);
        std::vector<Detection> dets;
        for (const Detection& d : predictions[r.id])
          if (d.confidence >= opt.conf) dets.push_back(d);
        const std::vector<Box>& gts = annotations[r.id];
        std::vector<char> det_hit(dets.size(), 0), gt_hit(gts.size(), 0);
        for (const Match& m : r.match.matches) {
          det_hit[m.det] = 1;
          gt_hit[m.gt] = 1;
        }
        for (std::size_t g = 0; g < gts.size(); ++g)
          if (!gt_hit[g]) cv::rectangle(canvas, to_rect(gts[g], canvas.cols, canvas.rows), cv::Scalar(40, 120, 255), 2);
        for (std::size_t d = 0; d < dets.size(); ++d)
          cv::rectangle(canvas, to_rect(dets[d].box, canvas.cols, canvas.rows),
                        det_hit[d] ? cv::Scalar(0, 220, 0) : cv::Scalar(255, 0, 0), 2);
        save_image_rgb(*opt.out / "overlays" / (r.id + ".png"), canvas);
      }
    }
  } catch (const DatasetError& e) {
    log::error(e.what());
    return kExitDataset;
  }
  return kExitOk;
}

int cmd_synth(const SynthOptions& opt) {
  SyntheticDatasetSpec spec;
  try {
    if (opt.spec) {
      std::ifstream in(*opt.spec);
      if (!in) throw ConfigError("cannot open spec file " + opt.spec->string());
      std::stringstream ss;
      ss << in.rdbuf();
      spec = synthetic_spec_from_json(ss.str());
    }
    if (opt.seed) spec.scene.seed = *opt.seed;
    if (opt.n_images) spec.n_images = *opt.n_images;
    if (opt.val_fraction) spec.val_fraction = *opt.val_fraction;
    spec.scene.validate();
    if (spec.n_images < 0) throw ConfigError("n_images must be non-negative");
    if (!(spec.val_fraction >= 0.0 && spec.val_fraction <= 1.0))
      throw ConfigError("val_fraction must lie in [0, 1]");
  } catch (const std::invalid_argument& e) {
    log::error(e.what());
    return kExitConfig;
  }
  try {
    write_synthetic_dataset(spec, opt.out);
  } catch (const std::exception& e) {
    log::error(e.what());
    return kExitDataset;
  }
  log::info("wrote " + std::to_string(spec.n_images) + " synthetic scenes to " + opt.out.string());
  return kExitOk;
}

int run(int argc, char** argv) {
  CLI::App app{"vdet: single-class vessel element detector"};
  app.require_subcommand(1);
  bool verbose = false, quiet = false;
  app.add_flag("-v,--verbose", verbose, "debug logging");
  app.add_flag("-q,--quiet", quiet, "warnings and errors only");

  TrainOptions train_opt;
  std::string train_out;
  std::uint64_t train_seed = 0;
  auto* train_cmd = app.add_subcommand("train", "train a detector from a run configuration");
  train_cmd->add_option("--config", train_opt.config, "run configuration file")->required();
  train_cmd->add_option("--override", train_opt.overrides, "key=value, repeatable");
  auto* train_out_opt = train_cmd->add_option("--out", train_out, "output directory (overrides out_dir)");
  auto* train_seed_opt = train_cmd->add_option("--seed", train_seed, "random seed");
  train_cmd->add_flag("--deterministic", train_opt.deterministic, "single-threaded reproducible run");

  PredictOptions pred_opt;
  double pred_conf = 0.0, pred_nms = 0.0;
  std::string pred_split;
  auto* pred_cmd = app.add_subcommand("predict", "detect vessels in a directory of images");
  pred_cmd->add_option("--checkpoint", pred_opt.checkpoint, "checkpoint file")->required();
  pred_cmd->add_option("--images", pred_opt.images, "image directory")->required();
  pred_cmd->add_option("--out", pred_opt.out, "output directory")->required();
  auto* pred_conf_opt = pred_cmd->add_option("--conf", pred_conf, "confidence threshold (default: checkpoint's best)");
  auto* pred_nms_opt = pred_cmd->add_option("--nms-iou", pred_nms, "NMS IoU threshold");
  auto* pred_split_opt = pred_cmd->add_option("--split", pred_split, "only stems of this split (train|val)");
  pred_cmd->add_flag("--overlay", pred_opt.overlay, "also write images with drawn detections");
  pred_cmd->add_flag("--deterministic", pred_opt.deterministic, "single-threaded inference");

  EvalOptions eval_opt;
  std::string eval_out, eval_images;
  auto* eval_cmd = app.add_subcommand("eval", "score prediction files against labels");
  eval_cmd->add_option("--predictions", eval_opt.predictions, "prediction directory")->required();
  eval_cmd->add_option("--labels", eval_opt.labels, "label directory")->required();
  auto* eval_out_opt = eval_cmd->add_option("--out", eval_out, "write report.txt and per_image.csv here");
  eval_cmd->add_option("--iou-thresh", eval_opt.iou_thresh, "matching IoU threshold");
  eval_cmd->add_option("--conf", eval_opt.conf, "ignore detections below this confidence");
  auto* eval_overlay_opt =
      eval_cmd->add_option("--overlay", eval_images, "image directory; draws hits, false positives and misses");

  SynthOptions synth_opt;
  std::string synth_spec;
  std::uint64_t synth_seed = 0;
  int synth_n = 0;
  double synth_val = 0.0;
  auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic vessel dataset");
  auto* synth_spec_opt = synth_cmd->add_option("--spec", synth_spec, "JSON scene specification");
  synth_cmd->add_option("--out", synth_opt.out, "output dataset directory")->required();
  auto* synth_seed_opt = synth_cmd->add_option("--seed", synth_seed, "base seed");
  auto* synth_n_opt = synth_cmd->add_option("--n-images", synth_n, "number of scenes");
  auto* synth_val_opt = synth_cmd->add_option("--val-fraction", synth_val, "validation share");

  auto* ref_cmd = app.add_subcommand("config-reference", "print every run configuration key with its default");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }
  if (verbose) log::set_level(log::Level::kDebug);
  if (quiet) log::set_level(log::Level::kWarning);

  if (*train_cmd) {
    if (*train_out_opt) train_opt.out = train_out;
    if (*train_seed_opt) train_opt.seed = train_seed;
    return cmd_train(train_opt);
  }
  if (*pred_cmd) {
    if (*pred_conf_opt) pred_opt.conf = pred_conf;
    if (*pred_nms_opt) pred_opt.nms_iou = pred_nms;
    if (*pred_split_opt) pred_opt.split = pred_split;
    return cmd_predict(pred_opt);
  }
  if (*eval_cmd) {
    if (*eval_out_opt) eval_opt.out = eval_out;
    if (*eval_overlay_opt) eval_opt.images = eval_images;
    return cmd_eval(eval_opt);
  }
  if (*synth_cmd) {
    if (*synth_spec_opt) synth_opt.spec = synth_spec;
    if (*synth_seed_opt) synth_opt.seed = synth_seed;
    if (*synth_n_opt) synth_opt.n_images = synth_n;
    if (*synth_val_opt) synth_opt.val_fraction = synth_val;
    return cmd_synth(synth_opt);
  }
  if (*ref_cmd) {
    std::cout << config_reference();
    return kExitOk;
  }
  return kExitConfig;
}

}  // namespace vdet::cli
