#include "vdet/assignment_loss.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "vdet/log.hpp"

namespace vdet {

NeighborMode parse_neighbor_mode(int count) {
  switch (count) {
    case 0: return NeighborMode::k0;
    case 2: return NeighborMode::k2;
    case 4: return NeighborMode::k4;
    default: throw std::invalid_argument("neighbor mode must be 0, 2 or 4");
  }
}

int to_int(NeighborMode mode) { return static_cast<int>(mode); }

TargetAssignment assign_targets(std::span<const Box> gts, const ModelConfig& cfg,
                                NeighborMode mode) {
  TargetAssignment asg;
  for (const Box& gt : gts) {
    if (gt.space != Space::kPixel) throw SpaceMismatch(gt.space, Space::kPixel);
    if (gt.w > cfg.max_box_w() || gt.h > cfg.max_box_h()) {
      std::ostringstream msg;
      msg << "ground truth " << gt.w << "x" << gt.h << " px exceeds the representable maximum "
          << cfg.max_box_w() << "x" << cfg.max_box_h() << " px";
      log::warning(msg.str());
    }
    for (int level = 0; level < kNumLevels; ++level) {
      const int gh = cfg.grid_h(level);
      const int gw = cfg.grid_w(level);
      const double gx = gt.cx * gw / cfg.input_w;
      const double gy = gt.cy * gh / cfg.input_h;
      const int col = std::clamp(static_cast<int>(std::floor(gx)), 0, gw - 1);
      const int row = std::clamp(static_cast<int>(std::floor(gy)), 0, gh - 1);
      asg.entries.push_back({level, row, col, gt, true});

      std::vector<std::pair<int, int>> offsets;  // (d_row, d_col)
      if (mode == NeighborMode::k2) {
        // Nearest horizontal and vertical neighbour from the sub-cell offset.
        offsets.emplace_back(0, gx - col >= 0.5 ? 1 : -1);
        offsets.emplace_back(gy - row < 0.5 ? -1 : 1, 0);
      } else if (mode == NeighborMode::k4) {
        offsets = {{0, -1}, {0, 1}, {-1, 0}, {1, 0}};
      }
      for (auto [dr, dc] : offsets) {
        const int r = row + dr;
        const int c = col + dc;
        if (r < 0 || r >= gh || c < 0 || c >= gw) continue;
        asg.entries.push_back({level, r, c, gt, false});
      }
    }
  }
  return asg;
}

std::vector<DecodedGrid> decode_grids(const std::vector<RawGridPrediction>& raw,
                                      const ModelConfig& cfg, int image) {
  std::vector<DecodedGrid> out;
  out.reserve(raw.size());
  std::array<double, kOutputsPerCell> t{};
  for (const RawGridPrediction& g : raw) {
    DecodedGrid d{g.level, g.grid_h, g.grid_w, {}};
    d.cells.reserve(g.cells());
    for (int r = 0; r < g.grid_h; ++r)
      for (int c = 0; c < g.grid_w; ++c) {
        for (int k = 0; k < kOutputsPerCell; ++k) t[k] = g.at(image, r, c, k);
        d.cells.push_back(decode_cell(t, r, c, g.level, cfg));
      }
    out.push_back(std::move(d));
  }
  return out;
}

double bce(double p, double target) {
  const double q = std::clamp(p, kBceEpsilon, 1.0 - kBceEpsilon);
  return -(target * std::log(q) + (1.0 - target) * std::log(1.0 - q));
}

namespace {

const DecodedGrid& grid_for(const std::vector<DecodedGrid>& decoded, int level) {
  for (const DecodedGrid& g : decoded)
    if (g.level == level) return g;
  throw std::invalid_argument("decoded grids lack level " + std::to_string(level));
}

void check_entry(const DecodedGrid& g, const AssignmentEntry& e) {
  if (e.row < 0 || e.row >= g.grid_h || e.col < 0 || e.col >= g.grid_w)
    throw std::invalid_argument("assignment entry outside its grid");
}

std::size_t total_cells(const std::vector<DecodedGrid>& decoded) {
  std::size_t n = 0;
  for (const DecodedGrid& g : decoded) n += g.cells.size();
  return n;
}

}  // namespace

double regression_loss(const std::vector<DecodedGrid>& decoded, const TargetAssignment& asg,
                       IouVariant variant) {
  if (asg.m() == 0) return 0.0;
  double sum = 0.0;
  for (const AssignmentEntry& e : asg.entries) {
    const DecodedGrid& g = grid_for(decoded, e.level);
    check_entry(g, e);
    sum += 1.0 - iou_variant(g.at(e.row, e.col).box(), e.gt, variant);
  }
  return sum / static_cast<double>(asg.m());
}

std::vector<double> objectness_targets(const std::vector<DecodedGrid>& decoded,
                                       const TargetAssignment& asg) {
  std::vector<double> targets;
  targets.reserve(asg.m());
  for (const AssignmentEntry& e : asg.entries) {
    const DecodedGrid& g = grid_for(decoded, e.level);
    check_entry(g, e);
    targets.push_back(iou(g.at(e.row, e.col).box(), e.gt));
  }
  return targets;
}

double objectness_loss(const std::vector<DecodedGrid>& decoded, const TargetAssignment& asg) {
  const std::vector<double> targets = objectness_targets(decoded, asg);
  return objectness_loss(decoded, asg, targets);
}

double objectness_loss(const std::vector<DecodedGrid>& decoded, const TargetAssignment& asg,
                       std::span<const double> targets) {
  if (targets.size() != asg.m()) throw std::invalid_argument("objectness target count mismatch");
  const std::size_t n_cells = total_cells(decoded);
  if (n_cells == 0) return 0.0;

  std::vector<std::vector<char>> assigned;
  for (const DecodedGrid& g : decoded) assigned.emplace_back(g.cells.size(), 0);
  for (const AssignmentEntry& e : asg.entries) {
    for (std::size_t i = 0; i < decoded.size(); ++i)
      if (decoded[i].level == e.level) {
        check_entry(decoded[i], e);
        assigned[i][e.row * decoded[i].grid_w + e.col] = 1;
      }
  }

  double negative = 0.0;
  for (std::size_t i = 0; i < decoded.size(); ++i)
    for (std::size_t k = 0; k < decoded[i].cells.size(); ++k)
      if (!assigned[i][k]) negative += bce(decoded[i].cells[k].conf, 0.0);

  double positive = 0.0;
  for (std::size_t j = 0; j < asg.m(); ++j) {
    const AssignmentEntry& e = asg.entries[j];
    positive += bce(grid_for(decoded, e.level).at(e.row, e.col).conf, targets[j]);
  }
  const double pos_mean = asg.m() > 0 ? positive / static_cast<double>(asg.m()) : 0.0;
  return negative / static_cast<double>(n_cells) + pos_mean;
}

LossValue total_loss(const std::vector<DecodedGrid>& decoded, const TargetAssignment& asg,
                     IouVariant variant) {
  return {regression_loss(decoded, asg, variant), objectness_loss(decoded, asg)};
}

LossWithGrad loss_with_grad(const std::vector<RawGridPrediction>& raw, const ModelConfig& cfg,
                            const TargetAssignment& asg, IouVariant variant,
                            const std::vector<double>* frozen_targets) {
  if (raw.size() != static_cast<std::size_t>(kNumLevels))
    throw std::invalid_argument("loss expects three levels");
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const RawGridPrediction& g = raw[i];
    if (g.level != static_cast<int>(i)) throw std::invalid_argument("raw grids must be ordered by level");
    if (g.batch != 1) throw std::invalid_argument("loss expects a single image per call");
    if (g.grid_h != cfg.grid_h(g.level) || g.grid_w != cfg.grid_w(g.level))
      throw std::invalid_argument("raw grid dims disagree with the model config");
  }

  const std::vector<DecodedGrid> decoded = decode_grids(raw, cfg);
  LossWithGrad out;
  out.targets = frozen_targets ? *frozen_targets : objectness_targets(decoded, asg);
  if (out.targets.size() != asg.m()) throw std::invalid_argument("frozen target count mismatch");
  out.value.regression = regression_loss(decoded, asg, variant);
  out.value.objectness = objectness_loss(decoded, asg, out.targets);

  for (const RawGridPrediction& g : raw) out.d_logits.emplace_back(g.level, 1, g.grid_h, g.grid_w);

  std::size_t n_cells = 0;
  for (const RawGridPrediction& g : raw) n_cells += g.cells();
  const double inv_cells = 1.0 / static_cast<double>(n_cells);
  const double inv_m = asg.m() > 0 ? 1.0 / static_cast<double>(asg.m()) : 0.0;

  // d BCE(clamp(sigma(t)), y) / dt = sigma(t) - y inside the clamp, 0 outside.
  const auto d_bce = [](double p, double y) {
    if (p < kBceEpsilon || p > 1.0 - kBceEpsilon) return 0.0;
    return p - y;
  };

  std::vector<std::vector<char>> assigned;
  for (const RawGridPrediction& g : raw) assigned.emplace_back(g.cells(), 0);
  for (const AssignmentEntry& e : asg.entries) assigned[e.level][e.row * raw[e.level].grid_w + e.col] = 1;

  for (std::size_t i = 0; i < raw.size(); ++i) {
    const DecodedGrid& dg = decoded[i];
    RawGridPrediction& dl = out.d_logits[i];
    for (int r = 0; r < dg.grid_h; ++r)
      for (int c = 0; c < dg.grid_w; ++c)
        if (!assigned[i][r * dg.grid_w + c])
          dl.at(0, r, c, 4) += inv_cells * d_bce(dg.at(r, c).conf, 0.0);
  }

  for (std::size_t j = 0; j < asg.m(); ++j) {
    const AssignmentEntry& e = asg.entries[j];
    const RawGridPrediction& g = raw[e.level];
    const DecodedCell& cell = decoded[e.level].at(e.row, e.col);
    RawGridPrediction& dl = out.d_logits[e.level];

    dl.at(0, e.row, e.col, 4) += inv_m * d_bce(cell.conf, out.targets[j]);

    // d(1 - IoU)/d(box) chained through the decode.
    const IouWithGrad ig = iou_variant_with_grad(cell.box(), e.gt, variant);
    const double stride_x = static_cast<double>(cfg.input_w) / g.grid_w;
    const double stride_y = static_cast<double>(cfg.input_h) / g.grid_h;
    const double sx = sigmoid(g.at(0, e.row, e.col, 0));
    const double sy = sigmoid(g.at(0, e.row, e.col, 1));
    const double sw = sigmoid(g.at(0, e.row, e.col, 2));
    const double sh = sigmoid(g.at(0, e.row, e.col, 3));
    const double dcx = 2.0 * sx * (1.0 - sx) * stride_x;
    const double dcy = 2.0 * sy * (1.0 - sy) * stride_y;
    const double dw = 2.0 * sw * sw * (1.0 - sw) * cfg.max_box_w();
    const double dh = 2.0 * sh * sh * (1.0 - sh) * cfg.max_box_h();
    dl.at(0, e.row, e.col, 0) -= inv_m * ig.d_pred[0] * dcx;
    dl.at(0, e.row, e.col, 1) -= inv_m * ig.d_pred[1] * dcy;
    dl.at(0, e.row, e.col, 2) -= inv_m * ig.d_pred[2] * dw;
    dl.at(0, e.row, e.col, 3) -= inv_m * ig.d_pred[3] * dh;
  }
  return out;
}

}  // namespace vdet
