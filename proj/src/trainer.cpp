#include "vdet/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include <cblas.h>
#include <nlohmann/json.hpp>

#include "vdet/checkpoint.hpp"
#include "vdet/log.hpp"

namespace vdet {

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (accumulation_steps < 1) throw ConfigError("accumulation_steps must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (!(final_lr_factor >= 0.0 && final_lr_factor <= 1.0))
    throw ConfigError("final_lr_factor must lie in [0, 1]");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  if (!(warmup_epochs >= 0.0)) throw ConfigError("warmup_epochs must be non-negative");
  if (input_size <= 0 || input_size % 32 != 0)
    throw ConfigError("input_size must be a positive multiple of 32");
  if (eval_conf_sweep.empty()) throw ConfigError("eval_conf_sweep must not be empty");
  for (double t : eval_conf_sweep)
    if (!(t >= 0.0 && t < 1.0)) throw ConfigError("eval_conf_sweep thresholds must lie in [0, 1)");
  if (!(match_iou > 0.0 && match_iou <= 1.0)) throw ConfigError("match_iou must lie in (0, 1]");
  if (!(nms_iou > 0.0 && nms_iou < 1.0)) throw ConfigError("nms_iou must lie in (0, 1)");
  if (bn_group < 1) throw ConfigError("bn_group must be >= 1");
  if (val_every < 1) throw ConfigError("val_every must be >= 1");
}

PreparedSample prepare_sample(const AnnotationRecord& rec, int input_size) {
  const cv::Mat rgb = load_image_rgb(rec.image_path);
  std::vector<Box> pixel;
  pixel.reserve(rec.boxes.size());
  for (const Box& b : rec.boxes) pixel.push_back(to_pixel(b, rgb.cols, rgb.rows));
  LetterboxResult lb = letterbox(rgb, pixel, input_size);
  return {rec.stem, std::move(lb.image), std::move(lb.boxes), lb.transform, rgb.cols, rgb.rows};
}

std::vector<Detection> to_original_normalized(std::span<const Detection> dets,
                                              const LetterboxTransform& transform, int orig_w,
                                              int orig_h) {
  std::vector<Detection> out;
  out.reserve(dets.size());
  for (const Detection& d : dets) {
    Corners c = to_corners(transform.inverse(d.box));
    c.x1 = std::clamp(c.x1, 0.0, static_cast<double>(orig_w));
    c.x2 = std::clamp(c.x2, 0.0, static_cast<double>(orig_w));
    c.y1 = std::clamp(c.y1, 0.0, static_cast<double>(orig_h));
    c.y2 = std::clamp(c.y2, 0.0, static_cast<double>(orig_h));
    out.push_back({to_normalized(from_corners(c, Space::kPixel), orig_w, orig_h), d.confidence});
  }
  return out;
}

std::vector<Detection> detect(Model& model, const cv::Mat& rgb, double conf_thresh,
                              double nms_iou_thresh) {
  const ModelConfig& cfg = model.config();
  if (cfg.input_w != cfg.input_h) throw ConfigError("detection expects a square model input");
  const LetterboxResult lb = letterbox(rgb, {}, cfg.input_w);
  const cv::Mat images[1] = {lb.image};
  const Tensor t = to_tensor(images);
  const std::vector<Detection> dets = predict(model, t, conf_thresh, nms_iou_thresh);
  return to_original_normalized(dets, lb.transform, rgb.cols, rgb.rows);
}

std::optional<std::pair<double, double>> derive_max_fractions(
    std::span<const AnnotationRecord> records) {
  double mw = 0.0, mh = 0.0;
  bool any = false;
  for (const AnnotationRecord& r : records)
    for (const Box& b : r.boxes) {
      mw = std::max(mw, b.w);
      mh = std::max(mh, b.h);
      any = true;
    }
  if (!any || !(mw > 0.0) || !(mh > 0.0)) return std::nullopt;
  return std::make_pair(std::min(1.0, 1.1 * mw), std::min(1.0, 1.1 * mh));
}

ValidationResult validate(Model& model, std::span<const AnnotationRecord> records,
                          const TrainConfig& cfg) {
  if (records.empty()) throw std::invalid_argument("validation split is empty");
  ValidationResult out;
  const double lowest = *std::min_element(cfg.eval_conf_sweep.begin(), cfg.eval_conf_sweep.end());
  for (const AnnotationRecord& rec : records) {
    const cv::Mat rgb = load_image_rgb(rec.image_path);
    out.predictions[rec.stem] = detect(model, rgb, lowest, cfg.nms_iou);
    out.annotations[rec.stem] = rec.boxes;
  }
  out.sweep = sweep_confidence(out.predictions, out.annotations, cfg.eval_conf_sweep, cfg.match_iou);
  return out;
}

Optimizer::Optimizer(const TrainConfig& cfg, long total_steps, long warmup_steps)
    : cfg_(cfg), total_steps_(std::max(1L, total_steps)), warmup_steps_(std::max(0L, warmup_steps)) {}

double Optimizer::learning_rate(long step) const {
  if (step < warmup_steps_)
    return cfg_.learning_rate * static_cast<double>(step + 1) / static_cast<double>(warmup_steps_);
  const long span = std::max(1L, total_steps_ - warmup_steps_);
  const double p = std::clamp(static_cast<double>(step - warmup_steps_) / span, 0.0, 1.0);
  const double f = cfg_.final_lr_factor;
  return cfg_.learning_rate * (f + (1.0 - f) * 0.5 * (1.0 + std::cos(std::numbers::pi * p)));
}

void Optimizer::step(nn::Network& net, long step) {
  const std::vector<nn::Param*> params = net.params();
  if (velocity_.empty())
    for (const nn::Param* p : params) velocity_.emplace_back(p->value.size(), 0.0f);
  if (velocity_.size() != params.size()) throw std::logic_error("optimizer bound to another network");
  const float lr = static_cast<float>(learning_rate(step));
  const float mu = static_cast<float>(cfg_.momentum);
  for (std::size_t i = 0; i < params.size(); ++i) {
    nn::Param& p = *params[i];
    std::vector<float>& v = velocity_[i];
    const float wd = p.decay ? static_cast<float>(cfg_.weight_decay) : 0.0f;
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      v[k] = mu * v[k] + p.grad[k] + wd * p.value[k];
      p.value[k] -= lr * v[k];
    }
  }
}

StepStats accumulate_gradients(Model& model, std::span<const PreparedSample> samples,
                               const TrainConfig& cfg, double normalizer) {
  StepStats stats;
  if (samples.empty()) return stats;
  std::vector<cv::Mat> images;
  for (const PreparedSample& s : samples) images.push_back(s.image);
  const Tensor batch = to_tensor(images);
  const std::vector<RawGridPrediction> raw = model.forward(batch, nn::Mode::kTrain);

  std::vector<RawGridPrediction> grads;
  for (const RawGridPrediction& g : raw) grads.emplace_back(g.level, g.batch, g.grid_h, g.grid_w);

  for (int b = 0; b < static_cast<int>(samples.size()); ++b) {
    std::vector<RawGridPrediction> one;
    for (const RawGridPrediction& g : raw) one.push_back(g.slice(b));
    const TargetAssignment asg = assign_targets(samples[b].boxes, model.config(), cfg.neighbor_mode);
    const LossWithGrad lg = loss_with_grad(one, model.config(), asg, cfg.iou_variant);
    if (!std::isfinite(lg.value.total())) {
      std::vector<std::string> ids;
      std::ostringstream msg;
      msg << "non-finite loss in batch [";
      for (std::size_t i = 0; i < samples.size(); ++i) {
        ids.push_back(samples[i].id);
        msg << (i ? ", " : "") << i << ":" << samples[i].id;
      }
      msg << "]; offending image " << samples[b].id << " (regression " << lg.value.regression
          << ", objectness " << lg.value.objectness << ")";
      throw NonFiniteLoss(msg.str(), std::move(ids));
    }
    stats.loss += lg.value.total();
    stats.regression += lg.value.regression;
    stats.objectness += lg.value.objectness;
    ++stats.images;
    for (int l = 0; l < kNumLevels; ++l) {
      const std::size_t n = raw[l].cells() * kOutputsPerCell;
      for (std::size_t k = 0; k < n; ++k)
        grads[l].values[b * n + k] = lg.d_logits[l].values[k] / normalizer;
    }
  }
  model.backward(grads);
  return stats;
}

StepStats train_step(Model& model, Optimizer& opt, long step,
                     std::span<const PreparedSample> samples, const TrainConfig& cfg) {
  model.network().zero_grad();
  StepStats total;
  const double normalizer = static_cast<double>(samples.size());
  for (std::size_t start = 0; start < samples.size(); start += cfg.batch_size) {
    const std::size_t n = std::min<std::size_t>(cfg.batch_size, samples.size() - start);
    const StepStats s = accumulate_gradients(model, samples.subspan(start, n), cfg, normalizer);
    total.loss += s.loss;
    total.regression += s.regression;
    total.objectness += s.objectness;
    total.images += s.images;
  }
  total.lr = opt.learning_rate(step);
  opt.step(model.network(), step);
  return total;
}

std::string to_json_line(const EpochRecord& r) {
  nlohmann::json j = {{"epoch", r.epoch},
                      {"mean_loss", r.mean_loss},
                      {"mean_regression", r.mean_regression},
                      {"mean_objectness", r.mean_objectness},
                      {"lr", r.lr},
                      {"validated", r.validated},
                      {"seconds", r.seconds}};
  if (r.validated) {
    j["precision"] = r.precision;
    j["recall"] = r.recall;
    j["f2"] = r.f2;
    j["best_threshold"] = r.threshold;
    j["best_f2_so_far"] = r.best_f2;
  }
  return j.dump();
}

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::seed_seq seq{static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

// Prepared training images, cached when they fit comfortably in memory.
class SampleSource {
 public:
  SampleSource(std::span<const AnnotationRecord> records, int input_size)
      : records_(records), input_size_(input_size) {
    const double bytes = 3.0 * input_size * input_size * records.size();
    cache_enabled_ = bytes < 1.5e9;
    if (cache_enabled_) cache_.resize(records.size());
  }

  PreparedSample get(std::size_t i) {
    if (!cache_enabled_) return prepare_sample(records_[i], input_size_);
    if (!cache_[i]) cache_[i] = prepare_sample(records_[i], input_size_);
    return *cache_[i];
  }
  std::size_t size() const { return records_.size(); }

 private:
  std::span<const AnnotationRecord> records_;
  int input_size_;
  bool cache_enabled_ = false;
  std::vector<std::optional<PreparedSample>> cache_;
};

PreparedSample make_mosaic(SampleSource& source, std::size_t index, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, source.size() - 1);
  std::vector<Sample> parts;
  PreparedSample first = source.get(index);
  parts.push_back({first.id, first.image, first.boxes});
  for (int k = 0; k < 3; ++k) {
    PreparedSample s = source.get(pick(rng));
    parts.push_back({s.id, s.image, s.boxes});
  }
  Sample m = mosaic_augment(parts, rng);
  PreparedSample out;
  out.id = m.id;
  out.image = m.image;
  out.boxes = std::move(m.boxes);
  out.orig_w = m.image.cols;
  out.orig_h = m.image.rows;
  return out;
}

}  // namespace

TrainResult train(ModelConfig model_cfg, const TrainConfig& cfg,
                  std::span<const AnnotationRecord> train_records,
                  std::span<const AnnotationRecord> val_records, const std::filesystem::path& out_dir,
                  const std::function<void(const EpochRecord&)>& on_epoch) {
  cfg.validate();
  if (train_records.empty()) throw std::invalid_argument("training split is empty");
  model_cfg.input_h = model_cfg.input_w = cfg.input_size;
  if (cfg.derive_max_size) {
    if (const auto fr = derive_max_fractions(train_records)) {
      model_cfg.max_w_frac = fr->first;
      model_cfg.max_h_frac = fr->second;
      std::ostringstream msg;
      msg << "max box fractions derived from training data: w " << fr->first << ", h " << fr->second;
      log::info(msg.str());
    }
  }
  model_cfg.validate();
  if (cfg.deterministic) openblas_set_num_threads(1);

  if (!out_dir.empty()) std::filesystem::create_directories(out_dir);
  std::ofstream log_file;
  if (!out_dir.empty()) log_file.open(out_dir / "train_log.jsonl", std::ios::binary);

  auto model = std::make_unique<Model>(model_cfg, cfg.seed);
  model->network().set_bn_group(cfg.bn_group);
  SampleSource source(train_records, cfg.input_size);

  const std::size_t per_step = static_cast<std::size_t>(cfg.batch_size) * cfg.accumulation_steps;
  const long steps_per_epoch = static_cast<long>((source.size() + per_step - 1) / per_step);
  const long total_steps = steps_per_epoch * cfg.epochs;
  const long warmup_steps = std::lround(cfg.warmup_epochs * steps_per_epoch);
  Optimizer opt(cfg, total_steps, std::min(warmup_steps, total_steps));

  TrainResult result;
  result.best.train = cfg;
  result.best.model = model_cfg;
  bool have_best = false;
  long step = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::size_t> order(source.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 shuffle_rng(mix(cfg.seed, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    EpochRecord rec;
    rec.epoch = epoch;
    int images = 0;
    for (std::size_t start = 0; start < order.size(); start += per_step, ++step) {
      const std::size_t n = std::min(per_step, order.size() - start);
      std::vector<PreparedSample> batch;
      for (std::size_t k = start; k < start + n; ++k) {
        if (cfg.mosaic)
          batch.push_back(make_mosaic(source, order[k],
                                      mix(mix(cfg.seed, epoch), static_cast<std::uint64_t>(k))));
        else
          batch.push_back(source.get(order[k]));
      }
      const StepStats s = train_step(*model, opt, step, batch, cfg);
      rec.mean_loss += s.loss;
      rec.mean_regression += s.regression;
      rec.mean_objectness += s.objectness;
      rec.lr = s.lr;
      images += s.images;
    }
    rec.mean_loss /= images;
    rec.mean_regression /= images;
    rec.mean_objectness /= images;

    const bool last = epoch + 1 == cfg.epochs;
    CheckpointMeta meta{model_cfg, cfg, epoch, 0.0, 0.0};
    if (!val_records.empty() && ((epoch + 1) % cfg.val_every == 0 || last)) {
      const ValidationResult v = validate(*model, val_records, cfg);
      rec.validated = true;
      rec.precision = v.sweep.best.precision;
      rec.recall = v.sweep.best.recall;
      rec.f2 = v.sweep.best.f2;
      rec.threshold = v.sweep.best_threshold;
      meta.best_f2 = rec.f2;
      meta.best_threshold = rec.threshold;
      if (!have_best || rec.f2 > result.best.best_f2) {
        have_best = true;
        result.best = meta;
        if (!out_dir.empty()) {
          result.best_checkpoint = out_dir / "best.ckpt";
          save_checkpoint(result.best_checkpoint, *model, meta);
        }
      }
    } else if (val_records.empty() && last) {
      log::warning("no validation split; the final weights are kept as the best checkpoint");
      result.best = meta;
      if (!out_dir.empty()) {
        result.best_checkpoint = out_dir / "best.ckpt";
        save_checkpoint(result.best_checkpoint, *model, meta);
      }
    }
    rec.best_f2 = result.best.best_f2;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!out_dir.empty()) {
      save_checkpoint(out_dir / "last.ckpt", *model, meta);
      log_file << to_json_line(rec) << '\n' << std::flush;
    }
    std::ostringstream msg;
    msg << "epoch " << epoch + 1 << "/" << cfg.epochs << " loss " << rec.mean_loss;
    if (rec.validated) msg << " val F2 " << rec.f2 << " @ " << rec.threshold;
    log::info(msg.str());
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  result.model = std::move(model);
  return result;
}

}  // namespace vdet
