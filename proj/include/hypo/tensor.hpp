#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace hypo {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Dense row-major tensor of doubles. Rank 1 and 2 are stored as a 1×n or
// r×c matrix; higher ranks fold trailing extents into the column count.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::int64_t> shape);
  Tensor(std::vector<std::int64_t> shape, std::span<const double> values);

  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

  const std::vector<std::int64_t>& shape() const { return shape_; }
  std::size_t size() const { return static_cast<std::size_t>(data_.size()); }
  std::span<double> data() { return {data_.data(), size()}; }
  std::span<const double> data() const { return {data_.data(), size()}; }

  Matrix& matrix() { return data_; }
  const Matrix& matrix() const { return data_; }

  std::string shape_string() const;
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

 private:
  std::vector<std::int64_t> shape_;
  Matrix data_;
};

bool all_finite(const Matrix& m);

}  // namespace hypo
