#include "hypo/tensor.hpp"

#include <algorithm>
#include <cstring>
#include <numeric>

#include "hypo/error.hpp"

namespace hypo {
namespace {

std::pair<Eigen::Index, Eigen::Index> fold(const std::vector<std::int64_t>& shape) {
  for (auto e : shape) {
    if (e <= 0) throw ShapeError("tensor extents must be positive");
  }
  if (shape.empty()) return {1, 1};
  if (shape.size() == 1) return {1, shape[0]};
  std::int64_t cols = 1;
  for (std::size_t i = 1; i < shape.size(); ++i) cols *= shape[i];
  return {shape[0], cols};
}

}  // namespace

Tensor::Tensor(std::vector<std::int64_t> shape) : shape_(std::move(shape)) {
  auto [r, c] = fold(shape_);
  data_ = Matrix::Zero(r, c);
}

Tensor::Tensor(std::vector<std::int64_t> shape, std::span<const double> values) : Tensor(std::move(shape)) {
  if (values.size() != size()) {
    throw ShapeError("tensor " + shape_string() + " needs " + std::to_string(size()) + " values, got " +
                     std::to_string(values.size()));
  }
  std::copy(values.begin(), values.end(), data_.data());
}

std::string Tensor::shape_string() const {
  std::string s = "[";
  for (std::size_t i = 0; i < shape_.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape_[i]);
  }
  return s + "]";
}

bool all_finite(const Matrix& m) { return m.allFinite(); }

}  // namespace hypo
