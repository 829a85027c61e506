#include "privisp/tensor.hpp"

#include <sstream>

#include "privisp/error.hpp"

namespace privisp {

std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ValidationError("negative tensor dimension");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

Tensor::Tensor(std::vector<int> shape, double fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(std::vector<int> shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  if (data_.size() != shape_numel(shape_))
    throw ValidationError("tensor data size does not match shape " + shape_string());
}

int Tensor::dim(int axis) const {
  if (axis < 0) axis += rank();
  if (axis < 0 || axis >= rank()) throw ValidationError("axis out of range for shape " + shape_string());
  return shape_[static_cast<std::size_t>(axis)];
}

double& Tensor::at(int n, int c, int h, int w) {
  return data_[((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
}
double Tensor::at(int n, int c, int h, int w) const {
  return data_[((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
}
double& Tensor::at(int r, int c) { return data_[static_cast<std::size_t>(r) * shape_[1] + c]; }
double Tensor::at(int r, int c) const { return data_[static_cast<std::size_t>(r) * shape_[1] + c]; }

Tensor Tensor::reshaped(std::vector<int> shape) const {
  if (shape_numel(shape) != data_.size())
    throw ValidationError("cannot reshape " + shape_string());
  return Tensor(std::move(shape), data_);
}

std::string Tensor::shape_string() const {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
  os << ']';
  return os.str();
}

void Tensor::fill(double v) {
  for (double& x : data_) x = v;
}

void Tensor::accumulate(const Tensor& other) {
  if (other.data_.size() != data_.size())
    throw ValidationError("accumulate shape mismatch " + shape_string() + " vs " + other.shape_string());
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
}

Tensor Tensor::slice_batch(int n) const { return slice_batch(n, n + 1); }

Tensor Tensor::slice_batch(int begin, int end) const {
  if (rank() == 0 || begin < 0 || end > shape_[0] || begin > end)
    throw ValidationError("batch slice out of range for " + shape_string());
  std::vector<int> shape = shape_;
  shape[0] = end - begin;
  const std::size_t item = data_.size() / static_cast<std::size_t>(shape_[0] == 0 ? 1 : shape_[0]);
  std::vector<double> out(data_.begin() + static_cast<std::ptrdiff_t>(item * begin),
                          data_.begin() + static_cast<std::ptrdiff_t>(item * end));
  return Tensor(std::move(shape), std::move(out));
}

Tensor Tensor::stack(std::span<const Tensor> items) {
  if (items.empty()) throw ValidationError("stack of zero tensors");
  if (items[0].rank() == 0) throw ValidationError("stack of rank-0 tensors");
  // Items shaped [b, ...] are concatenated along b; inner dims must match.
  std::vector<int> tail(items[0].shape().begin() + 1, items[0].shape().end());
  int outer = 0;
  std::vector<double> data;
  for (const Tensor& t : items) {
    std::vector<int> t_tail(t.shape().begin() + 1, t.shape().end());
    if (t_tail != tail) throw ValidationError("stack shape mismatch");
    outer += t.shape()[0];
    data.insert(data.end(), t.storage().begin(), t.storage().end());
  }
  std::vector<int> shape{outer};
  shape.insert(shape.end(), tail.begin(), tail.end());
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace privisp
