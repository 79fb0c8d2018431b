#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "vdet/assignment_loss.hpp"
#include "vdet/data.hpp"
#include "vdet/metrics.hpp"
#include "vdet/model.hpp"

namespace vdet {

struct TrainConfig {
  int epochs = 100;
  int batch_size = 8;
  int accumulation_steps = 1;
  double learning_rate = 0.01;
  double final_lr_factor = 0.01;
  double momentum = 0.937;
  double weight_decay = 5e-4;
  double warmup_epochs = 3.0;
  NeighborMode neighbor_mode = NeighborMode::k0;
  IouVariant iou_variant = IouVariant::kGiou;
  int input_size = 2048;
  bool mosaic = false;
  std::uint64_t seed = 0;
  std::vector<double> eval_conf_sweep = {0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5,
                                         0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95};
  double match_iou = kDefaultMatchIou;
  double nms_iou = 0.5;
  // Derive max_w_frac / max_h_frac from the training boxes.
  bool derive_max_size = true;
  // Batch-norm statistics are taken over groups of this many images.
  int bn_group = 1;
  bool deterministic = true;
  int val_every = 1;

  /// Throws ConfigError describing the first violated invariant.
  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(const std::string& msg, std::vector<std::string> batch)
      : std::runtime_error(msg), batch_ids(std::move(batch)) {}
  std::vector<std::string> batch_ids;
};

/// An image letterboxed to the model input with its boxes in input pixels.
struct PreparedSample {
  std::string id;
  cv::Mat image;
  std::vector<Box> boxes;
  LetterboxTransform transform;
  int orig_w = 0;
  int orig_h = 0;
};

PreparedSample prepare_sample(const AnnotationRecord& rec, int input_size);

/// Maps letterboxed pixel detections back to normalized coordinates of the
/// original image, clipping them to its bounds.
std::vector<Detection> to_original_normalized(std::span<const Detection> dets,
                                              const LetterboxTransform& transform, int orig_w,
                                              int orig_h);

/// Detections for one original image: letterbox, forward, decode, filter,
/// NMS, and mapping back to normalized original coordinates.
std::vector<Detection> detect(Model& model, const cv::Mat& rgb, double conf_thresh,
                              double nms_iou_thresh);

/// 1.1 x the largest normalized box extent, capped at 1. Empty when there
/// are no boxes.
std::optional<std::pair<double, double>> derive_max_fractions(
    std::span<const AnnotationRecord> records);

struct ValidationResult {
  SweepResult sweep;
  PredictionSet predictions;  // at the lowest sweep threshold
  AnnotationSet annotations;
};

/// Evaluates `records` and reports at the F2-maximizing sweep threshold.
ValidationResult validate(Model& model, std::span<const AnnotationRecord> records,
                          const TrainConfig& cfg);

struct StepStats {
  double loss = 0.0;
  double regression = 0.0;
  double objectness = 0.0;
  int images = 0;
  double lr = 0.0;
};

/// Momentum SGD with linear warmup, cosine decay and weight decay on the
/// parameters flagged for it.
class Optimizer {
 public:
  Optimizer(const TrainConfig& cfg, long total_steps, long warmup_steps);
  double learning_rate(long step) const;
  void step(nn::Network& net, long step);

 private:
  TrainConfig cfg_;
  long total_steps_;
  long warmup_steps_;
  std::vector<std::vector<float>> velocity_;
};

/// Accumulates into the parameter gradients the loss of `samples`, each image
/// contributing loss / `normalizer`. Returns summed (unnormalized) losses.
StepStats accumulate_gradients(Model& model, std::span<const PreparedSample> samples,
                               const TrainConfig& cfg, double normalizer);

/// One optimizer update over `samples`, split into accumulation_steps
/// micro-batches of at most batch_size images.
StepStats train_step(Model& model, Optimizer& opt, long step,
                     std::span<const PreparedSample> samples, const TrainConfig& cfg);

struct EpochRecord {
  int epoch = 0;
  double mean_loss = 0.0;
  double mean_regression = 0.0;
  double mean_objectness = 0.0;
  double lr = 0.0;
  bool validated = false;
  double precision = 0.0;
  double recall = 0.0;
  double f2 = 0.0;
  double threshold = 0.0;
  double best_f2 = 0.0;
  double seconds = 0.0;
};

std::string to_json_line(const EpochRecord& rec);

struct CheckpointMeta {
  ModelConfig model;
  TrainConfig train;
  int epoch = 0;
  double best_f2 = 0.0;
  double best_threshold = 0.5;
};

struct TrainResult {
  CheckpointMeta best;
  std::vector<EpochRecord> history;
  std::filesystem::path best_checkpoint;
  std::unique_ptr<Model> model;  // weights after the final epoch
};

/// Full training run. With a non-empty `out_dir` it writes best.ckpt,
/// last.ckpt and train_log.jsonl there.
TrainResult train(ModelConfig model_cfg, const TrainConfig& train_cfg,
                  std::span<const AnnotationRecord> train_records,
                  std::span<const AnnotationRecord> val_records,
                  const std::filesystem::path& out_dir,
                  const std::function<void(const EpochRecord&)>& on_epoch = {});

}  // namespace vdet
