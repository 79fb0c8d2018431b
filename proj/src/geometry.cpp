#include "vdet/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace vdet {

const char* to_string(Space space) {
  switch (space) {
    case Space::kPixel: return "pixel";
    case Space::kNormalized: return "normalized";
    case Space::kGrid: return "grid";
  }
  return "unknown";
}

SpaceMismatch::SpaceMismatch(Space a, Space b)
    : std::invalid_argument(std::string("box coordinate spaces differ: ") + to_string(a) + " vs " +
                            to_string(b)) {}

const char* to_string(IouVariant variant) {
  switch (variant) {
    case IouVariant::kIou: return "iou";
    case IouVariant::kGiou: return "giou";
    case IouVariant::kDiou: return "diou";
    case IouVariant::kCiou: return "ciou";
  }
  return "unknown";
}

IouVariant parse_iou_variant(const std::string& name) {
  if (name == "iou") return IouVariant::kIou;
  if (name == "giou") return IouVariant::kGiou;
  if (name == "diou") return IouVariant::kDiou;
  if (name == "ciou") return IouVariant::kCiou;
  throw std::invalid_argument("unknown IoU variant '" + name + "' (expected iou|giou|diou|ciou)");
}

Corners to_corners(const Box& b) {
  return {b.cx - b.w / 2.0, b.cy - b.h / 2.0, b.cx + b.w / 2.0, b.cy + b.h / 2.0};
}

Box from_corners(const Corners& c, Space space) {
  return {(c.x1 + c.x2) / 2.0, (c.y1 + c.y2) / 2.0, c.x2 - c.x1, c.y2 - c.y1, space};
}

namespace {

// Derivatives of corner coordinates are expressed against (cx, cy, w, h):
// x1 = cx - w/2, x2 = cx + w/2.
using Grad4 = std::array<double, 4>;

Grad4 operator+(const Grad4& a, const Grad4& b) {
  return {a[0] + b[0], a[1] + b[1], a[2] + b[2], a[3] + b[3]};
}
Grad4 operator*(double s, const Grad4& a) { return {s * a[0], s * a[1], s * a[2], s * a[3]}; }

// Overlap length along one axis and its gradient against (center, extent) of
// the first interval. Ties pick the first interval's edge.
struct Span {
  double len;
  double d_center;
  double d_extent;
};

Span overlap(double p1, double p2, double g1, double g2) {
  const double lo = std::max(p1, g1);
  const double hi = std::min(p2, g2);
  if (hi <= lo) return {0.0, 0.0, 0.0};
  const double a2 = p2 <= g2 ? 1.0 : 0.0;
  const double a1 = p1 >= g1 ? 1.0 : 0.0;
  return {hi - lo, a2 - a1, (a2 + a1) / 2.0};
}

Span hull(double p1, double p2, double g1, double g2) {
  const double b2 = p2 >= g2 ? 1.0 : 0.0;
  const double b1 = p1 <= g1 ? 1.0 : 0.0;
  return {std::max(p2, g2) - std::min(p1, g1), b2 - b1, (b2 + b1) / 2.0};
}

void check_space(const Box& a, const Box& b) {
  if (a.space != b.space) throw SpaceMismatch(a.space, b.space);
}

IouWithGrad compute(const Box& p, const Box& g, IouVariant variant, bool want_grad) {
  IouWithGrad out;
  const Corners pc = to_corners(p);
  const Corners gc = to_corners(g);

  const Span ox = overlap(pc.x1, pc.x2, gc.x1, gc.x2);
  const Span oy = overlap(pc.y1, pc.y2, gc.y1, gc.y2);
  const double inter = ox.len * oy.len;
  const double uni = p.w * p.h + g.w * g.h - inter;
  if (!(uni > 0.0)) return out;

  const double iou_v = inter / uni;
  Grad4 d_inter{oy.len * ox.d_center, ox.len * oy.d_center, oy.len * ox.d_extent,
                ox.len * oy.d_extent};
  Grad4 d_uni{-d_inter[0], -d_inter[1], p.h - d_inter[2], p.w - d_inter[3]};
  Grad4 d_iou = (1.0 / uni) * (d_inter + (-iou_v) * d_uni);

  if (variant == IouVariant::kIou) {
    out.value = iou_v;
    if (want_grad) out.d_pred = d_iou;
    return out;
  }

  const Span hx = hull(pc.x1, pc.x2, gc.x1, gc.x2);
  const Span hy = hull(pc.y1, pc.y2, gc.y1, gc.y2);

  if (variant == IouVariant::kGiou) {
    const double c_area = hx.len * hy.len;
    if (!(c_area > 0.0)) {
      out.value = iou_v;
      if (want_grad) out.d_pred = d_iou;
      return out;
    }
    // giou = iou - (C - U) / C = iou - 1 + U / C
    out.value = iou_v - 1.0 + uni / c_area;
    if (want_grad) {
      Grad4 d_c{hy.len * hx.d_center, hx.len * hy.d_center, hy.len * hx.d_extent,
                hx.len * hy.d_extent};
      out.d_pred = d_iou + (1.0 / (c_area * c_area)) * (c_area * d_uni + (-uni) * d_c);
    }
    return out;
  }

  // Center-distance penalty rho^2 / c^2 shared by DIoU and CIoU.
  const double dx = p.cx - g.cx;
  const double dy = p.cy - g.cy;
  const double rho2 = dx * dx + dy * dy;
  const double c2 = hx.len * hx.len + hy.len * hy.len;
  double penalty = 0.0;
  Grad4 d_penalty{};
  if (c2 > 0.0) {
    penalty = rho2 / c2;
    if (want_grad) {
      Grad4 d_rho2{2.0 * dx, 2.0 * dy, 0.0, 0.0};
      Grad4 d_c2{2.0 * hx.len * hx.d_center, 2.0 * hy.len * hy.d_center,
                 2.0 * hx.len * hx.d_extent, 2.0 * hy.len * hy.d_extent};
      d_penalty = (1.0 / (c2 * c2)) * (c2 * d_rho2 + (-rho2) * d_c2);
    }
  }
  const double diou_v = iou_v - penalty;
  const Grad4 d_diou = d_iou + (-1.0) * d_penalty;

  if (variant == IouVariant::kDiou) {
    out.value = diou_v;
    if (want_grad) out.d_pred = d_diou;
    return out;
  }

  // CIoU aspect term. alpha = v / (1 - iou + v) is differentiated along
  // with v, so the gradient is the exact derivative of the returned value.
  constexpr double k = 4.0 / (std::numbers::pi * std::numbers::pi);
  const double phi_p = std::atan2(p.w, p.h);
  const double phi_g = std::atan2(g.w, g.h);
  const double diff = phi_g - phi_p;
  const double v = k * diff * diff;
  const double denom = 1.0 - iou_v + v;
  double aspect = 0.0;
  Grad4 d_aspect{};
  if (denom > 0.0 && v > 0.0) {
    aspect = v * v / denom;
    if (want_grad) {
      const double r2 = p.w * p.w + p.h * p.h;
      Grad4 d_v{};
      if (r2 > 0.0) {
        // d(phi_p)/dw = h / r2, d(phi_p)/dh = -w / r2
        d_v[2] = -2.0 * k * diff * (p.h / r2);
        d_v[3] = -2.0 * k * diff * (-p.w / r2);
      }
      // d(v^2 / D) = (2 v dv D - v^2 (dv - d_iou)) / D^2
      d_aspect = (1.0 / (denom * denom)) *
                 ((2.0 * v * denom) * d_v + (-v * v) * (d_v + (-1.0) * d_iou));
    }
  }
  out.value = diou_v - aspect;
  if (want_grad) out.d_pred = d_diou + (-1.0) * d_aspect;
  return out;
}

}  // namespace

double iou(const Box& a, const Box& b) {
  check_space(a, b);
  return compute(a, b, IouVariant::kIou, false).value;
}

double giou(const Box& a, const Box& b) {
  check_space(a, b);
  return compute(a, b, IouVariant::kGiou, false).value;
}

double diou(const Box& a, const Box& b) {
  check_space(a, b);
  return compute(a, b, IouVariant::kDiou, false).value;
}

double ciou(const Box& a, const Box& b) {
  check_space(a, b);
  return compute(a, b, IouVariant::kCiou, false).value;
}

double iou_variant(const Box& a, const Box& b, IouVariant variant) {
  check_space(a, b);
  return compute(a, b, variant, false).value;
}

IouWithGrad iou_variant_with_grad(const Box& pred, const Box& target, IouVariant variant) {
  check_space(pred, target);
  return compute(pred, target, variant, true);
}

std::vector<Detection> nms(std::vector<Detection> dets, double iou_thresh, double conf_thresh) {
  if (!(iou_thresh > 0.0 && iou_thresh < 1.0))
    throw std::invalid_argument("nms: iou_thresh must lie in (0, 1)");
  if (!(conf_thresh >= 0.0 && conf_thresh < 1.0))
    throw std::invalid_argument("nms: conf_thresh must lie in [0, 1)");

  std::erase_if(dets, [&](const Detection& d) { return d.confidence < conf_thresh; });
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
    return a.confidence > b.confidence;
  });

  std::vector<Detection> kept;
  kept.reserve(dets.size());
  for (const Detection& d : dets) {
    bool suppressed = false;
    for (const Detection& k : kept) {
      if (iou(k.box, d.box) > iou_thresh) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

}  // namespace vdet
