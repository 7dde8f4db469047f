#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace advalign {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major float64 tensor. Every dimension is positive and every
// entry is finite; both are checked on construction.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape);
  static Tensor filled(Shape shape, double value);
  static Tensor scalar(double value) { return filled({1}, value); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double item() const;

  Tensor reshaped(Shape shape) const;

  bool operator==(const Tensor& other) const = default;

 private:
  friend class TensorAccess;
  Shape shape_;
  std::vector<double> data_;
};

// Unchecked construction for kernels that validate finiteness themselves.
class TensorAccess {
 public:
  static Tensor make_unchecked(Shape shape, std::vector<double> data) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(data);
    return t;
  }
};

double l2_norm(std::span<const double> v);
double linf_norm(std::span<const double> v);
bool all_finite(std::span<const double> v);
inline double l2_norm(const Tensor& t) { return l2_norm(t.data()); }
inline double linf_norm(const Tensor& t) { return linf_norm(t.data()); }

}  // namespace advalign
