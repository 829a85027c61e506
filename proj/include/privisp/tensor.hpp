#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace privisp {

/// Dense row-major array of doubles. Images use NCHW order.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape, double fill = 0.0);
  Tensor(std::vector<int> shape, std::vector<double> values);

  const std::vector<int>& shape() const noexcept { return shape_; }
  int rank() const noexcept { return static_cast<int>(shape_.size()); }
  int dim(int axis) const;
  std::size_t numel() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double* ptr() noexcept { return data_.data(); }
  const double* ptr() const noexcept { return data_.data(); }
  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  std::vector<double>& storage() noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  double& at(int n, int c, int h, int w);
  double at(int n, int c, int h, int w) const;
  double& at(int r, int c);
  double at(int r, int c) const;

  /// Same storage viewed under a new shape of equal element count.
  Tensor reshaped(std::vector<int> shape) const;
  bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }
  std::string shape_string() const;

  void fill(double v);
  /// this += other (shapes must match).
  void accumulate(const Tensor& other);

  /// Copies item `n` of a batched tensor (outer axis) into a tensor with leading dim 1.
  Tensor slice_batch(int n) const;
  /// Copies items [begin, end) of the outer axis.
  Tensor slice_batch(int begin, int end) const;
  /// Concatenates tensors shaped [b_i, ...] along the outer axis.
  static Tensor stack(std::span<const Tensor> items);

  bool operator==(const Tensor& other) const = default;

 private:
  std::vector<int> shape_;
  std::vector<double> data_;
};

std::size_t shape_numel(const std::vector<int>& shape);

}  // namespace privisp
