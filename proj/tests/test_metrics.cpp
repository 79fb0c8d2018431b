#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "vdet/metrics.hpp"

namespace vdet {
namespace {

Box px(double cx, double cy, double w, double h) { return {cx, cy, w, h, Space::kPixel}; }

TEST(Match, Trivial) {
  const Box g = px(10, 10, 4, 4);
  auto r = match_detections(std::vector<Detection>{{g, 0.9}}, std::vector<Box>{g});
  EXPECT_EQ(r.tp, 1);
  EXPECT_EQ(r.fp, 0);
  EXPECT_EQ(r.fn, 0);
  r = match_detections({}, std::vector<Box>{g, g, g});
  EXPECT_EQ(r.tp, 0);
  EXPECT_EQ(r.fn, 3);
}

TEST(Match, ThresholdIsInclusive) {
  // iou = 1/3 against a 0.3 threshold, and exactly at threshold 1/3.
  const Box a = from_corners({0, 0, 2, 2}, Space::kPixel);
  const Box b = from_corners({1, 0, 3, 2}, Space::kPixel);
  const std::vector<Detection> d = {{a, 0.5}};
  const std::vector<Box> g = {b};
  EXPECT_EQ(match_detections(d, g, 0.3).tp, 1);
  EXPECT_EQ(match_detections(d, g, iou(a, b)).tp, 1);
  EXPECT_EQ(match_detections(d, g, 0.34).tp, 0);
}

TEST(Match, GreedyEqualsOptimalWithUniqueMaxima) {
  std::mt19937_64 rng(10);
  std::uniform_int_distribution<int> count(0, 6);
  std::uniform_real_distribution<double> conf(0, 1);
  int qualifying = 0;
  for (int t = 0; t < 3000; ++t) {
    std::vector<Detection> dets;
    std::vector<Box> gts;
    for (int i = count(rng); i > 0; --i) gts.push_back(oracle::random_box(rng, 40, 20));
    for (int i = count(rng); i > 0; --i) dets.push_back({oracle::random_box(rng, 40, 20), conf(rng)});
    const MatchResult r = match_detections(dets, gts);
    EXPECT_EQ(r.tp + r.fn, static_cast<int>(gts.size()));
    EXPECT_EQ(r.tp + r.fp, static_cast<int>(dets.size()));
    std::vector<std::vector<double>> m;
    for (const auto& d : dets) {
      m.emplace_back();
      for (const auto& g : gts) m.back().push_back(iou(d.box, g));
    }
    if (!oracle::unique_row_maxima(m)) continue;
    ++qualifying;
    EXPECT_EQ(r.tp, oracle::optimal_tp(m, kDefaultMatchIou));
  }
  EXPECT_GT(qualifying, 500);
}

TEST(Match, RaisingIouThresholdNeverAddsHits) {
  std::mt19937_64 rng(11);
  for (int t = 0; t < 300; ++t) {
    std::vector<Detection> dets;
    std::vector<Box> gts;
    for (int i = 0; i < 5; ++i) gts.push_back(oracle::random_box(rng, 40, 20));
    for (int i = 0; i < 5; ++i) dets.push_back({oracle::random_box(rng, 40, 20), 0.1 * i});
    int prev = 1 << 30;
    for (double th = 0.05; th < 1.0; th += 0.05) {
      const int tp = match_detections(dets, gts, th).tp;
      EXPECT_LE(tp, prev);
      prev = tp;
    }
  }
}

TEST(Fbeta, Values) {
  EXPECT_DOUBLE_EQ(fbeta(1, 1), 1.0);
  EXPECT_NEAR(fbeta(0.5, 1), 0.8333, 1e-4);
  EXPECT_NEAR(fbeta(1, 0.5), 0.5556, 1e-4);
  EXPECT_EQ(fbeta(0, 0), 0.0);
  double prev = -1;
  for (double r = 0.05; r <= 1.0; r += 0.05) {
    const double f = fbeta(0.4, r);
    EXPECT_GT(f, prev);
    prev = f;
  }
}

TEST(Evaluate, MicroAverage) {
  // Image a: tp 1, fn 1. Image b: tp 1, fp 1.
  const Box g1 = px(10, 10, 4, 4), g2 = px(30, 30, 4, 4), g3 = px(50, 50, 4, 4);
  PredictionSet p = {{"a", {{g1, 0.9}}}, {"b", {{g3, 0.9}, {px(80, 80, 4, 4), 0.8}}}};
  AnnotationSet a = {{"a", {g1, g2}}, {"b", {g3}}};
  const EvalReport r = evaluate_dataset(p, a);
  EXPECT_NEAR(r.precision, 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(r.recall, 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(r.f2, 2.0 / 3.0, 1e-12);
  EXPECT_NE(r.to_table().find("image_id,tp,fp,fn\na,1,0,1\nb,1,1,0\n"), std::string::npos);
  EXPECT_NE(r.to_key_value().find("f2 = "), std::string::npos);
}

TEST(Evaluate, PerfectAndEmpty) {
  const Box g = px(10, 10, 4, 4);
  AnnotationSet a = {{"x", {g}}, {"y", {g, px(40, 40, 4, 4)}}};
  PredictionSet perfect;
  for (const auto& [id, boxes] : a)
    for (const Box& b : boxes) perfect[id].push_back({b, 1.0});
  EXPECT_DOUBLE_EQ(evaluate_dataset(perfect, a).f2, 1.0);
  const EvalReport empty = evaluate_dataset({}, a);
  EXPECT_EQ(empty.f2, 0.0);
  EXPECT_EQ(empty.recall, 0.0);
  EXPECT_EQ(empty.totals.fn, 3);
}

TEST(Evaluate, ExtraFalsePositiveNeverRaisesF2) {
  const Box g = px(10, 10, 4, 4);
  AnnotationSet a = {{"x", {g, px(30, 10, 4, 4)}}};
  PredictionSet p = {{"x", {{g, 0.9}}}};
  const double before = evaluate_dataset(p, a).f2;
  p["x"].push_back({px(70, 70, 4, 4), 0.5});
  EXPECT_LE(evaluate_dataset(p, a).f2, before);
}

TEST(Sweep, PicksBestAndIsMonotone) {
  const Box g = px(10, 10, 4, 4);
  AnnotationSet a = {{"x", {g}}};
  PredictionSet p = {{"x", {{g, 0.6}, {px(50, 50, 4, 4), 0.3}}}};
  const std::vector<double> th = {0.1, 0.2, 0.4, 0.7};
  const SweepResult s = sweep_confidence(p, a, th);
  EXPECT_DOUBLE_EQ(s.best_threshold, 0.4);
  EXPECT_DOUBLE_EQ(s.best.f2, 1.0);
  for (std::size_t i = 1; i < s.curve.size(); ++i) EXPECT_LE(s.curve[i].second.tp, s.curve[i - 1].second.tp);
}

TEST(AveragePrecision, HandValues) {
  const Box g1 = px(10, 10, 4, 4), g2 = px(30, 30, 4, 4);
  const std::vector<Box> gts = {g1, g2};
  EXPECT_DOUBLE_EQ(average_precision(std::vector<Detection>{{g1, 0.9}}, std::vector<Box>{g1}), 1.0);
  EXPECT_DOUBLE_EQ(average_precision(std::vector<Detection>{{px(70, 70, 4, 4), 0.9}}, gts), 0.0);
  // 0.9 TP, 0.8 FP, 0.7 TP: recall steps 0.5 at precision 1 and 0.5 at 2/3.
  const std::vector<Detection> d = {{g1, 0.9}, {px(70, 70, 4, 4), 0.8}, {g2, 0.7}};
  EXPECT_NEAR(average_precision(d, gts), 0.5 * 1.0 + 0.5 * 2.0 / 3.0, 1e-12);
  EXPECT_EQ(average_precision(d, std::vector<Box>{}), 0.0);
}

}  // namespace
}  // namespace vdet
