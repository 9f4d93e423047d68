#pragma once

// Dense row-major tensor of doubles. The carrier type for activations,
// weights and gradients throughout the library. Activations follow the
// N x C x H x W convention; fully-connected data is rank 1 or 2.

#include <cblas.h>

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace dfu {

class Tensor {
public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0)
      : shape_(std::move(shape)) {
    data_.assign(checked_size(shape_), fill);
  }

  Tensor(std::vector<std::size_t> shape, std::vector<double> values)
      : shape_(std::move(shape)), data_(std::move(values)) {
    if (data_.size() != checked_size(shape_))
      throw std::invalid_argument("tensor: value list length " +
                                  std::to_string(data_.size()) +
                                  " does not match shape product " +
                                  std::to_string(checked_size(shape_)));
  }

  Tensor(std::vector<std::size_t> shape, std::initializer_list<double> values)
      : Tensor(std::move(shape), std::vector<double>(values)) {}

  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t extent(std::size_t dim) const { return shape_.at(dim); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // Rank-specific accessors; bounds are the caller's responsibility.
  double& at2(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double at2(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

  double& at4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  double at4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

private:
  static std::size_t checked_size(const std::vector<std::size_t>& shape) {
    if (shape.empty())
      throw std::invalid_argument("tensor: shape must have rank >= 1");
    std::size_t n = 1;
    for (std::size_t e : shape) {
      if (e == 0)
        throw std::invalid_argument("tensor: every extent must be >= 1");
      n *= e;
    }
    return n;
  }

  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

inline std::string shape_string(const std::vector<std::size_t>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// result[i][j] = sum_t a[i][t] * b[t][j]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw std::invalid_argument("matmul: both operands must be rank 2");
  if (a.extent(1) != b.extent(0))
    throw std::invalid_argument("matmul: inner dimensions disagree: " +
                                shape_string(a.shape()) + " x " + shape_string(b.shape()));
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  Tensor out({m, n});
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(m),
              static_cast<int>(n), static_cast<int>(k), 1.0, a.data(),
              static_cast<int>(k), b.data(), static_cast<int>(n), 0.0, out.data(),
              static_cast<int>(n));
  return out;
}

namespace detail {
inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}
}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
  return out;
}

inline Tensor scale(const Tensor& a, double s) {
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= s;
  return out;
}

inline Tensor map(const Tensor& a, const std::function<double(double)>& f) {
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(out[i]);
  return out;
}

}  // namespace dfu
