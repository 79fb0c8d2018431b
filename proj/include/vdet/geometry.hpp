#pragma once

#include <array>
#include <stdexcept>
#include <string>
#include <vector>

namespace vdet {

enum class Space { kPixel, kNormalized, kGrid };

const char* to_string(Space space);

/// Axis-aligned box in center/extent form, tagged with its coordinate space.
struct Box {
  double cx = 0.0;
  double cy = 0.0;
  double w = 0.0;
  double h = 0.0;
  Space space = Space::kPixel;

  double area() const { return w * h; }
  bool operator==(const Box&) const = default;
};

struct Corners {
  double x1, y1, x2, y2;
};

struct Detection {
  Box box;
  double confidence = 0.0;
};

/// Thrown when two boxes from different coordinate spaces meet in one operation.
class SpaceMismatch : public std::invalid_argument {
 public:
  SpaceMismatch(Space a, Space b);
};

enum class IouVariant { kIou, kGiou, kDiou, kCiou };

const char* to_string(IouVariant variant);
IouVariant parse_iou_variant(const std::string& name);

Corners to_corners(const Box& b);
Box from_corners(const Corners& c, Space space);

double iou(const Box& a, const Box& b);
double giou(const Box& a, const Box& b);
double diou(const Box& a, const Box& b);
double ciou(const Box& a, const Box& b);
double iou_variant(const Box& a, const Box& b, IouVariant variant);

/// IoU-family value together with its gradient with respect to the first
/// box's (cx, cy, w, h). The second box is treated as a constant.
struct IouWithGrad {
  double value = 0.0;
  std::array<double, 4> d_pred{};
};

IouWithGrad iou_variant_with_grad(const Box& pred, const Box& target, IouVariant variant);

/// Greedy non-maximum suppression. Detections below `conf_thresh` are dropped,
/// the rest visited in descending confidence (ties keep input order) and kept
/// unless they overlap an already kept detection with IoU > `iou_thresh`.
std::vector<Detection> nms(std::vector<Detection> dets, double iou_thresh, double conf_thresh);

}  // namespace vdet
