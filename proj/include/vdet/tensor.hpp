#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace vdet {

/// NCHW extent of a dense float tensor.
struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  std::size_t sample_size() const { return static_cast<std::size_t>(c) * h * w; }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  bool operator==(const Shape&) const = default;
};

std::string to_string(const Shape& s);

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);

  const Shape& shape() const { return shape_; }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::span<float> values() { return data_; }
  std::span<const float> values() const { return data_; }

  float* sample(int n) { return data_.data() + n * shape_.sample_size(); }
  const float* sample(int n) const { return data_.data() + n * shape_.sample_size(); }

  float& at(int n, int c, int y, int x) {
    return data_[((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + y) * shape_.w + x];
  }
  float at(int n, int c, int y, int x) const {
    return data_[((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + y) * shape_.w + x];
  }

  void reset(Shape shape, float fill = 0.0f);
  void fill(float v);
  /// Releases storage; the shape is kept for introspection.
  void release();

 private:
  Shape shape_;
  std::vector<float> data_;
};

}  // namespace vdet
