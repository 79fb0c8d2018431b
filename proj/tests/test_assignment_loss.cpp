#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>
#include <tuple>

#include "oracles.hpp"
#include "vdet/assignment_loss.hpp"

namespace vdet {
namespace {

ModelConfig cfg512() {
  ModelConfig cfg;
  cfg.input_h = cfg.input_w = 512;
  cfg.max_w_frac = cfg.max_h_frac = 0.25;
  return cfg;
}

int count_on_level(const TargetAssignment& a, int level) {
  int n = 0;
  for (const auto& e : a.entries) n += e.level == level;
  return n;
}

TEST(Assign, InteriorCounts) {
  const ModelConfig cfg = cfg512();
  const std::vector<Box> gt = {{250, 260, 40, 30, Space::kPixel}};
  const int expected[3] = {1, 3, 5};
  const NeighborMode modes[3] = {NeighborMode::k0, NeighborMode::k2, NeighborMode::k4};
  for (int i = 0; i < 3; ++i) {
    const auto a = assign_targets(gt, cfg, modes[i]);
    EXPECT_EQ(a.m(), 3u * expected[i]);
    for (int l = 0; l < 3; ++l) EXPECT_EQ(count_on_level(a, l), expected[i]);
  }
}

TEST(Assign, PrimaryCell) {
  const ModelConfig cfg = cfg512();
  const std::vector<Box> gt = {{100, 40, 20, 20, Space::kPixel}};
  const auto a = assign_targets(gt, cfg, NeighborMode::k0);
  ASSERT_EQ(a.m(), 3u);
  EXPECT_EQ(a.entries[0].row, 5);
  EXPECT_EQ(a.entries[0].col, 12);
  EXPECT_EQ(a.entries[1].row, 2);
  EXPECT_EQ(a.entries[1].col, 6);
  EXPECT_EQ(a.entries[2].row, 1);
  EXPECT_EQ(a.entries[2].col, 3);
  EXPECT_TRUE(a.entries[0].is_primary);
}

TEST(Assign, CornerClipsUpAndLeft) {
  const ModelConfig cfg = cfg512();
  const std::vector<Box> gt = {{3, 3, 5, 5, Space::kPixel}};
  const auto a = assign_targets(gt, cfg, NeighborMode::k4);
  for (int l = 0; l < 3; ++l) EXPECT_EQ(count_on_level(a, l), 3);
  for (const auto& e : a.entries) {
    EXPECT_GE(e.row, 0);
    EXPECT_GE(e.col, 0);
  }
}

TEST(Assign, TwoNeighbourQuadrant) {
  const ModelConfig cfg = cfg512();
  // Upper-right quadrant of cell (row 10, col 10) on level 0: right and upper.
  const std::vector<Box> gt = {{10 * 8 + 6, 10 * 8 + 2, 10, 10, Space::kPixel}};
  const auto a = assign_targets(gt, cfg, NeighborMode::k2);
  std::set<std::pair<int, int>> cells;
  for (const auto& e : a.entries)
    if (e.level == 0) cells.insert({e.row, e.col});
  EXPECT_EQ(cells, (std::set<std::pair<int, int>>{{10, 10}, {10, 11}, {9, 10}}));
  // Lower-left quadrant: left and lower.
  const std::vector<Box> gt2 = {{10 * 8 + 2, 10 * 8 + 6, 10, 10, Space::kPixel}};
  cells.clear();
  for (const auto& e : assign_targets(gt2, cfg, NeighborMode::k2).entries)
    if (e.level == 0) cells.insert({e.row, e.col});
  EXPECT_EQ(cells, (std::set<std::pair<int, int>>{{10, 10}, {10, 9}, {11, 10}}));
}

TEST(Assign, ModesAreNested) {
  const ModelConfig cfg = cfg512();
  std::mt19937_64 rng(6);
  for (int i = 0; i < 200; ++i) {
    const std::vector<Box> gt = {oracle::random_box(rng, 512, 100)};
    std::set<std::tuple<int, int, int>> s[3];
    const NeighborMode modes[3] = {NeighborMode::k0, NeighborMode::k2, NeighborMode::k4};
    for (int k = 0; k < 3; ++k)
      for (const auto& e : assign_targets(gt, cfg, modes[k]).entries) s[k].insert({e.level, e.row, e.col});
    EXPECT_TRUE(std::includes(s[1].begin(), s[1].end(), s[0].begin(), s[0].end()));
    EXPECT_TRUE(std::includes(s[2].begin(), s[2].end(), s[1].begin(), s[1].end()));
  }
}

TEST(Assign, RejectsWrongSpace) {
  const std::vector<Box> gt = {{0.5, 0.5, 0.1, 0.1, Space::kNormalized}};
  EXPECT_THROW(assign_targets(gt, cfg512(), NeighborMode::k0), SpaceMismatch);
}

std::vector<RawGridPrediction> constant_raw(const ModelConfig& cfg, double value) {
  std::vector<RawGridPrediction> raw;
  for (int l = 0; l < 3; ++l) {
    RawGridPrediction g(l, 1, cfg.grid_h(l), cfg.grid_w(l));
    std::fill(g.values.begin(), g.values.end(), value);
    raw.push_back(g);
  }
  return raw;
}

TEST(Loss, NoGroundTruthAtHalfConfidence) {
  const ModelConfig cfg = oracle::toy_config();
  const auto decoded = decode_grids(constant_raw(cfg, 0.0), cfg);
  const TargetAssignment none;
  EXPECT_EQ(regression_loss(decoded, none, IouVariant::kGiou), 0.0);
  EXPECT_NEAR(objectness_loss(decoded, none), std::log(2.0), 1e-12);
  EXPECT_NEAR(total_loss(decoded, none, IouVariant::kGiou).total(), std::log(2.0), 1e-12);
}

TEST(Loss, NoGroundTruthIgnoresBoxChannels) {
  const ModelConfig cfg = oracle::toy_config();
  std::mt19937_64 rng(8);
  auto raw = oracle::random_raw(cfg, rng);
  const double before = objectness_loss(decode_grids(raw, cfg), TargetAssignment{});
  for (auto& g : raw)
    for (std::size_t k = 0; k < g.values.size(); ++k)
      if (k % kOutputsPerCell != 4) g.values[k] += 1.0;
  EXPECT_DOUBLE_EQ(objectness_loss(decode_grids(raw, cfg), TargetAssignment{}), before);
}

TEST(Loss, RegressionHandValues) {
  DecodedGrid g{0, 1, 1, {{1, 1, 2, 2, 0.5}}};  // corners (0,0,2,2)
  TargetAssignment asg;
  asg.entries.push_back({0, 0, 0, {2, 1, 2, 2, Space::kPixel}, true});  // corners (1,0,3,2)
  EXPECT_NEAR(regression_loss({g}, asg, IouVariant::kIou), 2.0 / 3.0, 1e-12);
  asg.entries[0].gt = {1, 1, 2, 2, Space::kPixel};
  EXPECT_NEAR(regression_loss({g}, asg, IouVariant::kIou), 0.0, 1e-12);
  asg.entries[0].gt = {10, 10, 2, 2, Space::kPixel};
  EXPECT_NEAR(regression_loss({g}, asg, IouVariant::kIou), 1.0, 1e-12);
}

TEST(Loss, ObjectnessEntropyAtMatchingTarget) {
  DecodedGrid g{0, 1, 1, {{1, 1, 2, 2, 1.0 / 3.0}}};
  TargetAssignment asg;
  asg.entries.push_back({0, 0, 0, {2, 1, 2, 2, Space::kPixel}, true});
  const double h = -(std::log(1.0 / 3.0) / 3.0 + 2.0 / 3.0 * std::log(2.0 / 3.0));
  EXPECT_NEAR(objectness_loss({g}, asg), h, 1e-9);
  EXPECT_NEAR(h, 0.6365, 1e-4);
}

TEST(Loss, NormalizationSplitsNegativesAndPositives) {
  // Two cells: one assigned (target 1), one empty.
  DecodedGrid g{0, 1, 2, {{1, 1, 2, 2, 0.8}, {5, 1, 2, 2, 0.1}}};
  TargetAssignment asg;
  asg.entries.push_back({0, 0, 0, {1, 1, 2, 2, Space::kPixel}, true});
  const double expected = bce(0.1, 0.0) / 2.0 + bce(0.8, 1.0) / 1.0;
  EXPECT_NEAR(objectness_loss({g}, asg), expected, 1e-12);
}

TEST(Loss, PerfectPredictionLimit) {
  const ModelConfig cfg = oracle::toy_config();
  auto raw = constant_raw(cfg, 0.0);
  for (auto& g : raw)
    for (int r = 0; r < g.grid_h; ++r)
      for (int c = 0; c < g.grid_w; ++c) g.at(0, r, c, 4) = -40;
  // Box decoded at level-2 cell (0,0) with logits 0 is (16,16,8,8).
  raw[2].at(0, 0, 0, 4) = 40;
  TargetAssignment asg;
  asg.entries.push_back({2, 0, 0, {16, 16, 8, 8, Space::kPixel}, true});
  const auto v = total_loss(decode_grids(raw, cfg), asg, IouVariant::kCiou);
  EXPECT_LT(v.total(), 1e-6);
}

TEST(Loss, GradientMatchesFiniteDifferences) {
  const ModelConfig cfg = oracle::toy_config();
  std::mt19937_64 rng(9);
  std::uniform_int_distribution<int> ngt(1, 3);
  for (int inst = 0; inst < 6; ++inst) {
    const auto raw = oracle::random_raw(cfg, rng);
    std::vector<Box> gts;
    for (int i = ngt(rng); i > 0; --i) gts.push_back(oracle::random_box(rng, 64, 30));
    for (NeighborMode mode : {NeighborMode::k0, NeighborMode::k2, NeighborMode::k4}) {
      const auto asg = assign_targets(gts, cfg, mode);
      for (IouVariant v : {IouVariant::kIou, IouVariant::kGiou, IouVariant::kDiou, IouVariant::kCiou}) {
        const auto gc = oracle::check_loss_gradient(raw, cfg, asg, v);
        EXPECT_LE(gc.max_rel_error, 1e-3) << to_string(v) << " mode " << to_int(mode);
      }
    }
  }
}

TEST(Loss, RequiresOrderedLevels) {
  const ModelConfig cfg = oracle::toy_config();
  auto raw = constant_raw(cfg, 0.0);
  std::swap(raw[0], raw[1]);
  EXPECT_THROW(loss_with_grad(raw, cfg, TargetAssignment{}, IouVariant::kIou), std::invalid_argument);
}

}  // namespace
}  // namespace vdet
