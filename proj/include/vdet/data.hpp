#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "vdet/geometry.hpp"
#include "vdet/tensor.hpp"

namespace vdet {

namespace fs = std::filesystem;

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AnnotationRecord {
  fs::path image_path;
  std::string stem;
  std::vector<Box> boxes;  // normalized space
  int image_w = 0;
  int image_h = 0;
};

Box to_pixel(const Box& normalized, int image_w, int image_h);
Box to_normalized(const Box& pixel, int image_w, int image_h);

/// Parses "cx cy w h" lines (optionally prefixed by class index 0). Boxes are
/// clamped to the unit square. Throws DatasetError naming file and line.
std::vector<Box> parse_label_file(const fs::path& path);

/// Writes boxes (normalized) as "cx cy w h" lines, with a trailing confidence
/// column when `confidences` is non-empty.
void write_label_file(const fs::path& path, std::span<const Box> boxes,
                      std::span<const double> confidences = {});

/// Parses a prediction file: "cx cy w h confidence" per line.
std::vector<Detection> parse_prediction_file(const fs::path& path);

bool is_image_file(const fs::path& path);

/// Reads root/images and root/labels. Records are sorted by stem. Images
/// without a label file yield zero boxes and a warning.
std::vector<AnnotationRecord> load_dataset(const fs::path& root);

enum class Split { kTrain, kVal };

/// root/split.txt lines "stem train|val"; empty map if the file is absent.
std::map<std::string, Split> read_split(const fs::path& root);
void write_split(const fs::path& root, const std::map<std::string, Split>& split);

/// Deterministic split that depends only on the stems and the seed.
std::map<std::string, Split> make_split(std::span<const std::string> stems, double val_fraction,
                                        std::uint64_t seed);

/// Reads a raster as 8-bit RGB. Throws DatasetError if unreadable.
cv::Mat load_image_rgb(const fs::path& path);
void save_image_rgb(const fs::path& path, const cv::Mat& rgb);

/// Aspect-preserving resize plus symmetric padding into a square canvas.
struct LetterboxTransform {
  double scale_x = 1.0;
  double scale_y = 1.0;
  double pad_x = 0.0;
  double pad_y = 0.0;

  Box forward(const Box& pixel) const;
  Box inverse(const Box& letterboxed) const;
};

struct LetterboxResult {
  cv::Mat image;
  std::vector<Box> boxes;  // pixel space of the letterboxed image
  LetterboxTransform transform;
};

inline constexpr std::uint8_t kPadGray = 128;

LetterboxResult letterbox(const cv::Mat& image, std::span<const Box> pixel_boxes, int target);

/// An image at training resolution with pixel-space boxes.
struct Sample {
  std::string id;
  cv::Mat image;  // CV_8UC3, RGB
  std::vector<Box> boxes;
};

inline constexpr double kMinMosaicArea = 4.0;

/// 2x2 composite of four equally sized samples around a random center. Each
/// source is placed with one corner at the center; boxes are shifted, clipped
/// to their quadrant and dropped when less than 4 px^2 remains.
Sample mosaic_augment(std::span<const Sample> samples, std::mt19937_64& rng);
Sample mosaic_augment(std::span<const Sample> samples, int center_x, int center_y);

/// Packs RGB 8-bit images into a (N, 3, H, W) tensor scaled to [0, 1].
Tensor to_tensor(std::span<const cv::Mat> images);

// --- synthetic scenes --------------------------------------------------

template <typename T>
struct Range {
  T lo{};
  T hi{};
  bool operator==(const Range&) const = default;
};

struct SyntheticSceneSpec {
  int canvas_w = 512;
  int canvas_h = 512;
  Range<int> n_vessels{2, 8};
  Range<double> vessel_length{40.0, 120.0};
  Range<double> vessel_width{14.0, 32.0};
  Range<int> n_distractor_fibers{3, 10};
  double noise_level = 0.3;
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument on an empty range or oversize vessel.
  void validate() const;
  bool operator==(const SyntheticSceneSpec&) const = default;
};

struct VesselShape {
  double cx, cy;
  double semi_x, semi_y;  // ellipse semi-axes
};

struct SyntheticScene {
  cv::Mat image;            // CV_8UC3, RGB
  std::vector<Box> boxes;   // pixel space, one per vessel
  std::vector<VesselShape> vessels;
};

SyntheticScene generate_synthetic_scene(const SyntheticSceneSpec& spec);

struct SyntheticDatasetSpec {
  SyntheticSceneSpec scene;
  int n_images = 100;
  double val_fraction = 0.2;
  bool operator==(const SyntheticDatasetSpec&) const = default;
};

std::string to_json(const SyntheticDatasetSpec& spec);
SyntheticDatasetSpec synthetic_spec_from_json(const std::string& text);

/// Writes images/, labels/, split.txt and manifest.json under `out`.
/// Scene i uses seed (spec.scene.seed, i).
void write_synthetic_dataset(const SyntheticDatasetSpec& spec, const fs::path& out);

/// Seed of the i-th scene in a synthetic dataset.
std::uint64_t scene_seed(std::uint64_t base, int index);

}  // namespace vdet
