#include "vdet/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <set>
#include <sstream>

#include "vdet/log.hpp"

namespace vdet {

namespace {

std::vector<int> by_confidence(std::span<const Detection> dets) {
  std::vector<int> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return dets[a].confidence > dets[b].confidence; });
  return order;
}

}  // namespace

MatchResult match_detections(std::span<const Detection> dets, std::span<const Box> gts,
                             double iou_thresh) {
  MatchResult r;
  std::vector<char> taken(gts.size(), 0);
  for (int d : by_confidence(dets)) {
    int best = -1;
    double best_iou = -1.0;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (taken[g]) continue;
      const double v = iou(dets[d].box, gts[g]);
      if (v > best_iou) {
        best_iou = v;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0 && best_iou >= iou_thresh) {
      taken[best] = 1;
      r.matches.push_back({d, best, best_iou});
      ++r.tp;
    } else {
      ++r.fp;
    }
  }
  r.fn = static_cast<int>(gts.size()) - r.tp;
  return r;
}

double fbeta(double precision, double recall, double beta) {
  const double b2 = beta * beta;
  const double denom = b2 * precision + recall;
  if (!(denom > 0.0)) return 0.0;
  return (1.0 + b2) * precision * recall / denom;
}

double Counts::precision() const {
  return tp + fp > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
}
double Counts::recall() const {
  return tp + fn > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
}
double Counts::f2() const { return fbeta(precision(), recall(), 2.0); }

std::string EvalReport::to_key_value() const {
  std::ostringstream os;
  os.precision(10);
  os << "precision = " << precision << '\n'
     << "recall = " << recall << '\n'
     << "f2 = " << f2 << '\n'
     << "tp = " << totals.tp << '\n'
     << "fp = " << totals.fp << '\n'
     << "fn = " << totals.fn << '\n'
     << "iou_threshold = " << iou_threshold << '\n'
     << "conf_threshold = " << conf_threshold << '\n'
     << "images = " << per_image.size() << '\n';
  return os.str();
}

std::string EvalReport::to_table() const {
  std::ostringstream os;
  os << "image_id,tp,fp,fn\n";
  for (const ImageResult& r : per_image)
    os << r.id << ',' << r.match.tp << ',' << r.match.fp << ',' << r.match.fn << '\n';
  return os.str();
}

EvalReport evaluate_dataset(const PredictionSet& predictions, const AnnotationSet& annotations,
                            double iou_thresh, double conf_thresh) {
  EvalReport report;
  report.iou_threshold = iou_thresh;
  report.conf_threshold = conf_thresh;

  std::set<std::string> ids;
  for (const auto& [id, _] : annotations) ids.insert(id);
  for (const auto& [id, _] : predictions) ids.insert(id);

  static const std::vector<Detection> kNoDets;
  static const std::vector<Box> kNoBoxes;
  for (const std::string& id : ids) {
    const auto p = predictions.find(id);
    const auto a = annotations.find(id);
    const std::vector<Detection>& all = p == predictions.end() ? kNoDets : p->second;
    const std::vector<Box>& gts = a == annotations.end() ? kNoBoxes : a->second;
    std::vector<Detection> dets;
    for (const Detection& d : all)
      if (d.confidence >= conf_thresh) dets.push_back(d);
    MatchResult m = match_detections(dets, gts, iou_thresh);
    report.totals.tp += m.tp;
    report.totals.fp += m.fp;
    report.totals.fn += m.fn;
    report.per_image.push_back({id, std::move(m)});
  }
  report.precision = report.totals.precision();
  report.recall = report.totals.recall();
  report.f2 = report.totals.f2();
  return report;
}

SweepResult sweep_confidence(const PredictionSet& predictions, const AnnotationSet& annotations,
                             std::span<const double> thresholds, double iou_thresh) {
  if (thresholds.empty()) throw std::invalid_argument("sweep_confidence: no thresholds");
  SweepResult out;
  bool first = true;
  for (double t : thresholds) {
    EvalReport r = evaluate_dataset(predictions, annotations, iou_thresh, t);
    out.curve.emplace_back(t, r.totals);
    if (first || r.f2 > out.best.f2 || (r.f2 == out.best.f2 && t < out.best_threshold)) {
      out.best = std::move(r);
      out.best_threshold = t;
      first = false;
    }
  }
  return out;
}

namespace {

// flags: (confidence, is_true_positive) for every detection.
double integrate_pr(std::vector<std::pair<double, bool>> flags, long n_gt) {
  std::stable_sort(flags.begin(), flags.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<double> recall, precision;
  long tp = 0, fp = 0;
  for (const auto& [conf, hit] : flags) {
    (hit ? tp : fp) += 1;
    recall.push_back(static_cast<double>(tp) / n_gt);
    precision.push_back(static_cast<double>(tp) / (tp + fp));
  }
  // Precision envelope: p_interp(r) = max precision at recall >= r.
  for (int i = static_cast<int>(precision.size()) - 2; i >= 0; --i)
    precision[i] = std::max(precision[i], precision[i + 1]);
  double ap = 0.0;
  double prev_r = 0.0;
  for (std::size_t i = 0; i < recall.size(); ++i) {
    ap += (recall[i] - prev_r) * precision[i];
    prev_r = recall[i];
  }
  return ap;
}

void collect_flags(std::span<const Detection> dets, std::span<const Box> gts, double iou_thresh,
                   std::vector<std::pair<double, bool>>& flags) {
  const MatchResult m = match_detections(dets, gts, iou_thresh);
  std::vector<char> hit(dets.size(), 0);
  for (const Match& x : m.matches) hit[x.det] = 1;
  for (std::size_t i = 0; i < dets.size(); ++i) flags.emplace_back(dets[i].confidence, hit[i] != 0);
}

}  // namespace

double average_precision(std::span<const Detection> dets, std::span<const Box> gts,
                         double iou_thresh) {
  if (gts.empty()) {
    log::warning("average precision is undefined without ground truth; returning 0");
    return 0.0;
  }
  std::vector<std::pair<double, bool>> flags;
  collect_flags(dets, gts, iou_thresh, flags);
  return integrate_pr(std::move(flags), static_cast<long>(gts.size()));
}

double average_precision(const PredictionSet& predictions, const AnnotationSet& annotations,
                         double iou_thresh) {
  long n_gt = 0;
  for (const auto& [_, gts] : annotations) n_gt += static_cast<long>(gts.size());
  if (n_gt == 0) {
    log::warning("average precision is undefined without ground truth; returning 0");
    return 0.0;
  }
  static const std::vector<Box> kNoBoxes;
  std::vector<std::pair<double, bool>> flags;
  for (const auto& [id, dets] : predictions) {
    const auto a = annotations.find(id);
    collect_flags(dets, a == annotations.end() ? kNoBoxes : a->second, iou_thresh, flags);
  }
  return integrate_pr(std::move(flags), n_gt);
}

}  // namespace vdet
