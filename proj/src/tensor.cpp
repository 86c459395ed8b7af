#include "simprop/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace simprop {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw ValidationError("non-positive dimension in shape " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

Tensor::Tensor(Shape shape, float fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, const std::vector<float>& data)
    : Tensor(std::move(shape), FloatBuffer(data.begin(), data.end())) {}

Tensor::Tensor(Shape shape, FloatBuffer data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size()) {
    throw ValidationError("tensor data length " + std::to_string(data_.size()) +
                          " does not match shape " + shape_str(shape_));
  }
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

void Tensor::fill(float value) { std::fill(data_.begin(), data_.end(), value); }

Tensor Tensor::reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

void require_rank(const Tensor& t, int rank, const char* what) {
  if (t.rank() != rank) {
    throw ValidationError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got shape " +
                          shape_str(t.shape()));
  }
}

}  // namespace simprop
