#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "flowvocoder/errors.hpp"

namespace flowvocoder {

// Dense row-major array of 64-bit reals. Rank is dynamic; the flow code uses
// rank 3 ([channels, h, w]) almost everywhere, conv kernels are rank 4.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(numel_of(shape_), 0.0);
  }

  Tensor(std::vector<int> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (numel_of(shape_) != data_.size())
      throw ConfigError("tensor: shape does not match data length");
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int> shape, double v) {
    Tensor t(std::move(shape));
    for (double& x : t.data_) x = v;
    return t;
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  int rank() const { return static_cast<int>(shape_.size()); }
  int extent(int d) const { return shape_[static_cast<size_t>(d)]; }
  const std::vector<int>& shape() const { return shape_; }
  size_t numel() const { return data_.size(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](size_t i) { return data_[i]; }
  double operator[](size_t i) const { return data_[i]; }

  // Row-major element access; rank must match the overload.
  double& operator()(int i, int j) {
    assert(rank() == 2);
    return data_[static_cast<size_t>(i) * shape_[1] + j];
  }
  double operator()(int i, int j) const {
    assert(rank() == 2);
    return data_[static_cast<size_t>(i) * shape_[1] + j];
  }
  double& operator()(int c, int i, int j) {
    assert(rank() == 3);
    return data_[(static_cast<size_t>(c) * shape_[1] + i) * shape_[2] + j];
  }
  double operator()(int c, int i, int j) const {
    assert(rank() == 3);
    return data_[(static_cast<size_t>(c) * shape_[1] + i) * shape_[2] + j];
  }
  double& operator()(int o, int c, int i, int j) {
    assert(rank() == 4);
    return data_[((static_cast<size_t>(o) * shape_[1] + c) * shape_[2] + i) * shape_[3] + j];
  }
  double operator()(int o, int c, int i, int j) const {
    assert(rank() == 4);
    return data_[((static_cast<size_t>(o) * shape_[1] + c) * shape_[2] + i) * shape_[3] + j];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  std::string shape_str() const {
    std::string s = "[";
    for (size_t d = 0; d < shape_.size(); ++d) {
      if (d) s += "x";
      s += std::to_string(shape_[d]);
    }
    return s + "]";
  }

  static size_t numel_of(const std::vector<int>& shape) {
    size_t n = 1;
    for (int e : shape) {
      if (e < 0) throw ConfigError("tensor: negative extent");
      n *= static_cast<size_t>(e);
    }
    return n;
  }

 private:
  std::vector<int> shape_;
  std::vector<double> data_;
};

}  // namespace flowvocoder
