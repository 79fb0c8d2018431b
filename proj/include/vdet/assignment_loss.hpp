#pragma once

#include <span>
#include <string>
#include <vector>

#include "vdet/geometry.hpp"
#include "vdet/model.hpp"

namespace vdet {

/// Multi-positive pattern: the primary cell only, plus the two nearest
/// non-diagonal neighbours, or plus all four non-diagonal neighbours.
enum class NeighborMode { k0 = 0, k2 = 2, k4 = 4 };

NeighborMode parse_neighbor_mode(int count);
int to_int(NeighborMode mode);

struct AssignmentEntry {
  int level = 0;
  int row = 0;
  int col = 0;
  Box gt;  // pixel space
  bool is_primary = true;
};

struct TargetAssignment {
  std::vector<AssignmentEntry> entries;
  std::size_t m() const { return entries.size(); }
};

/// Assigns every ground-truth box (pixel space) to its center cell on all
/// three levels, duplicating it onto neighbour cells per `mode`. Neighbours
/// outside the grid are dropped. Boxes larger than the representable maximum
/// are kept and reported through the warning log.
TargetAssignment assign_targets(std::span<const Box> gts, const ModelConfig& cfg,
                                NeighborMode mode);

/// Decoded predictions of one level for a single image.
struct DecodedGrid {
  int level = 0;
  int grid_h = 0;
  int grid_w = 0;
  std::vector<DecodedCell> cells;  // row-major

  const DecodedCell& at(int row, int col) const { return cells[row * grid_w + col]; }
};

std::vector<DecodedGrid> decode_grids(const std::vector<RawGridPrediction>& raw,
                                      const ModelConfig& cfg, int image = 0);

inline constexpr double kBceEpsilon = 1e-7;

/// Binary cross-entropy with the prediction clamped to [eps, 1 - eps].
double bce(double p, double target);

/// L_r = (1/m) * sum over entries of (1 - IoU_variant(pred at cell, gt)); 0 when m = 0.
double regression_loss(const std::vector<DecodedGrid>& decoded, const TargetAssignment& asg,
                       IouVariant variant);

/// Objectness targets, one per assignment entry: plain IoU between the
/// decoded box at the entry's cell and its ground truth.
std::vector<double> objectness_targets(const std::vector<DecodedGrid>& decoded,
                                       const TargetAssignment& asg);

/// BCE over every cell of every level. Cells without an entry have target 0
/// and are averaged over the total cell count; entries use their IoU target
/// and are averaged over m. The two means are summed.
double objectness_loss(const std::vector<DecodedGrid>& decoded, const TargetAssignment& asg);
double objectness_loss(const std::vector<DecodedGrid>& decoded, const TargetAssignment& asg,
                       std::span<const double> targets);

struct LossValue {
  double regression = 0.0;
  double objectness = 0.0;
  double total() const { return regression + objectness; }
};

/// L = L_r + L_p.
LossValue total_loss(const std::vector<DecodedGrid>& decoded, const TargetAssignment& asg,
                     IouVariant variant);

struct LossWithGrad {
  LossValue value;
  std::vector<double> targets;              // objectness targets used
  std::vector<RawGridPrediction> d_logits;  // same layout as the raw input (batch 1)
};

/// Loss and its gradient with respect to the raw logits of a single image.
/// Objectness targets are treated as constants. When `frozen_targets` is
/// given those values are used instead of being recomputed, which makes the
/// returned value the exact function whose gradient is reported.
LossWithGrad loss_with_grad(const std::vector<RawGridPrediction>& raw, const ModelConfig& cfg,
                            const TargetAssignment& asg, IouVariant variant,
                            const std::vector<double>* frozen_targets = nullptr);

}  // namespace vdet
