#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "vdet/geometry.hpp"
#include "vdet/nn.hpp"
#include "vdet/tensor.hpp"

namespace vdet {

enum class BackboneId { kVgg11Bn, kYolov7Tiny, kResnet18 };
enum class UpsampleMode { kNearest, kBilinear };

const char* to_string(BackboneId id);
BackboneId parse_backbone(const std::string& name);
const char* to_string(UpsampleMode mode);
UpsampleMode parse_upsample(const std::string& name);

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline constexpr int kNumLevels = 3;
inline constexpr int kOutputsPerCell = 5;  // x, y, w, h, confidence

struct ModelConfig {
  int input_h = 2048;
  int input_w = 2048;
  // Largest representable box as a fraction of the input extent.
  double max_w_frac = 0.1;
  double max_h_frac = 0.1;
  // When false, decoded extents are bounded by the full input instead of the
  // fractions above.
  bool max_size_constraint = true;
  BackboneId backbone = BackboneId::kVgg11Bn;
  std::array<int, kNumLevels> level_strides{8, 16, 32};
  double neck_width_multiplier = 1.45;
  double backbone_width_multiplier = 1.0;
  int num_levels = kNumLevels;
  UpsampleMode upsample = UpsampleMode::kNearest;

  /// Throws ConfigError describing the first violated invariant.
  void validate() const;
  int grid_h(int level) const { return input_h / level_strides[level]; }
  int grid_w(int level) const { return input_w / level_strides[level]; }
  /// Upper bound on decoded width/height in pixels.
  double max_box_w() const { return (max_size_constraint ? max_w_frac : 1.0) * input_w; }
  double max_box_h() const { return (max_size_constraint ? max_h_frac : 1.0) * input_h; }
  bool operator==(const ModelConfig&) const = default;
};

/// Raw head output of one pyramid level, laid out (batch, grid_h, grid_w, 5).
struct RawGridPrediction {
  int level = 0;
  int batch = 1;
  int grid_h = 0;
  int grid_w = 0;
  std::vector<double> values;

  RawGridPrediction() = default;
  RawGridPrediction(int level, int batch, int grid_h, int grid_w);

  std::size_t index(int b, int row, int col, int ch) const {
    return ((static_cast<std::size_t>(b) * grid_h + row) * grid_w + col) * kOutputsPerCell + ch;
  }
  double& at(int b, int row, int col, int ch) { return values[index(b, row, col, ch)]; }
  double at(int b, int row, int col, int ch) const { return values[index(b, row, col, ch)]; }
  std::size_t cells() const { return static_cast<std::size_t>(grid_h) * grid_w; }

  /// Copy of a single batch element (batch = 1).
  RawGridPrediction slice(int b) const;
};

/// Numerically safe logistic that never returns exactly 0 or 1.
double sigmoid(double t);

struct DecodedCell {
  double cx = 0.0;  // pixels
  double cy = 0.0;
  double w = 0.0;
  double h = 0.0;
  double conf = 0.0;

  Box box() const { return {cx, cy, w, h, Space::kPixel}; }
};

/// Maps the five logits of one cell to a pixel-space box and confidence.
DecodedCell decode_cell(const std::array<double, kOutputsPerCell>& logits, int row, int col,
                        int level, const ModelConfig& cfg);

/// Decodes every cell of one batch element of `raw` into pixel space.
std::vector<Detection> decode(const RawGridPrediction& raw, const ModelConfig& cfg, int image = 0);

/// Cell index and center logits that decode back to a pixel-space center.
struct EncodedCenter {
  int row = 0;
  int col = 0;
  double tx = 0.0;
  double ty = 0.0;
};
EncodedCenter encode_center(double cx, double cy, int level, const ModelConfig& cfg);

class Model {
 public:
  /// Builds the backbone, neck and head for `cfg` and initializes weights.
  explicit Model(ModelConfig cfg, std::uint64_t seed = 0);

  const ModelConfig& config() const { return cfg_; }
  nn::Network& network() { return net_; }
  const nn::Network& network() const { return net_; }
  std::size_t parameter_count() const { return net_.parameter_count(); }

  /// Neck outputs fed to the head, one per level (exposed for shape checks).
  const std::array<int, kNumLevels>& neck_outputs() const { return neck_out_; }

  /// `images` is (batch, 3, input_h, input_w) with values in [0, 1].
  std::vector<RawGridPrediction> forward(const Tensor& images, nn::Mode mode);

  /// Back-propagates logit gradients laid out like the forward output.
  void backward(const std::vector<RawGridPrediction>& grads);

 private:
  ModelConfig cfg_;
  nn::Network net_;
  std::array<int, kNumLevels> neck_out_{};
};

/// forward + decode of all levels + confidence filter + NMS for a single image.
std::vector<Detection> predict(Model& model, const Tensor& image, double conf_thresh,
                               double nms_iou_thresh);

/// Decodes and merges raw grids of one batch element, then applies NMS.
std::vector<Detection> postprocess(const std::vector<RawGridPrediction>& raw,
                                   const ModelConfig& cfg, int image, double conf_thresh,
                                   double nms_iou_thresh);

}  // namespace vdet
