#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "vdet/geometry.hpp"

namespace vdet {

inline constexpr double kDefaultMatchIou = 0.3;

struct Match {
  int det = 0;  // index into the input detection list
  int gt = 0;
  double iou = 0.0;
};

struct MatchResult {
  int tp = 0;
  int fp = 0;
  int fn = 0;
  std::vector<Match> matches;
};

/// Greedy one-to-one matching. Detections are visited by descending
/// confidence (ties keep input order); each takes the unmatched ground truth
/// with the highest IoU if that IoU is at least `iou_thresh`.
MatchResult match_detections(std::span<const Detection> dets, std::span<const Box> gts,
                             double iou_thresh = kDefaultMatchIou);

/// (1 + b^2) P R / (b^2 P + R), or 0 when the denominator vanishes.
double fbeta(double precision, double recall, double beta = 2.0);

struct Counts {
  long tp = 0;
  long fp = 0;
  long fn = 0;

  double precision() const;
  double recall() const;
  double f2() const;
};

struct ImageResult {
  std::string id;
  MatchResult match;
};

struct EvalReport {
  double precision = 0.0;
  double recall = 0.0;
  double f2 = 0.0;
  Counts totals;
  double iou_threshold = kDefaultMatchIou;
  double conf_threshold = 0.0;
  std::vector<ImageResult> per_image;

  /// "key = value" lines.
  std::string to_key_value() const;
  /// CSV with header "image_id,tp,fp,fn".
  std::string to_table() const;
};

using PredictionSet = std::map<std::string, std::vector<Detection>>;
using AnnotationSet = std::map<std::string, std::vector<Box>>;

/// Micro-averaged evaluation: counts are summed over images before P, R and
/// F2 are formed. Annotated images missing from `predictions` count as
/// having no detections. Detections below `conf_thresh` are ignored.
EvalReport evaluate_dataset(const PredictionSet& predictions, const AnnotationSet& annotations,
                            double iou_thresh = kDefaultMatchIou, double conf_thresh = 0.0);

struct SweepResult {
  double best_threshold = 0.0;
  EvalReport best;
  std::vector<std::pair<double, Counts>> curve;
};

/// Evaluates at every threshold and keeps the F2-maximizing one (the lowest
/// threshold wins ties).
SweepResult sweep_confidence(const PredictionSet& predictions, const AnnotationSet& annotations,
                             std::span<const double> thresholds,
                             double iou_thresh = kDefaultMatchIou);

/// Area under the precision-recall curve with all-points interpolation.
/// Returns 0 (and logs a warning) when there is no ground truth.
double average_precision(std::span<const Detection> dets, std::span<const Box> gts,
                         double iou_thresh = kDefaultMatchIou);
double average_precision(const PredictionSet& predictions, const AnnotationSet& annotations,
                         double iou_thresh = kDefaultMatchIou);

}  // namespace vdet
