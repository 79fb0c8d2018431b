#include "vdet/tensor.hpp"

#include <algorithm>

namespace vdet {

std::string to_string(const Shape& s) {
  return "(" + std::to_string(s.n) + ", " + std::to_string(s.c) + ", " + std::to_string(s.h) +
         ", " + std::to_string(s.w) + ")";
}

Tensor::Tensor(Shape shape, float fill) : shape_(shape), data_(shape.numel(), fill) {}

void Tensor::reset(Shape shape, float fill) {
  shape_ = shape;
  data_.assign(shape.numel(), fill);
}

void Tensor::fill(float v) { std::fill(data_.begin(), data_.end(), v); }

void Tensor::release() {
  data_.clear();
  data_.shrink_to_fit();
}

}  // namespace vdet
