#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "vralign/error.hpp"

namespace vralign {

/// Dense n-dimensional array of 64-bit floats, row-major. The universal value
/// type of the library: representations, attention maps, volumes and masks
/// are all NdArray.
struct NdArray {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  NdArray() = default;

  explicit NdArray(std::vector<std::size_t> s) : shape(std::move(s)) {
    data.assign(numel_of(shape), 0.0);
  }

  NdArray(std::vector<std::size_t> s, std::vector<double> d)
      : shape(std::move(s)), data(std::move(d)) {
    if (numel_of(shape) != data.size()) {
      throw ShapeError("NdArray: shape " + shape_str(shape) + " does not match " +
                       std::to_string(data.size()) + " elements");
    }
  }

  static NdArray zeros(std::vector<std::size_t> s) { return NdArray(std::move(s)); }

  static NdArray full(std::vector<std::size_t> s, double v) {
    NdArray a(std::move(s));
    for (auto& x : a.data) x = v;
    return a;
  }

  static NdArray scalar(double v) { return NdArray({1}, {v}); }

  /// Square identity matrix.
  static NdArray identity(std::size_t n) {
    NdArray a({n, n});
    for (std::size_t i = 0; i < n; ++i) a.data[i * n + i] = 1.0;
    return a;
  }

  static std::size_t numel_of(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
  }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }

  std::size_t rows() const { return shape.at(0); }
  std::size_t cols() const { return shape.at(1); }

  double& at(std::size_t i) { return data[i]; }
  double at(std::size_t i) const { return data[i]; }
  double& at(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
  double at(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }
  double& at(std::size_t i, std::size_t j, std::size_t k) {
    return data[(i * shape[1] + j) * shape[2] + k];
  }
  double at(std::size_t i, std::size_t j, std::size_t k) const {
    return data[(i * shape[1] + j) * shape[2] + k];
  }

  bool same_shape(const NdArray& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  static std::string shape_str(const std::vector<std::size_t>& s) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i) os << 'x';
      os << s[i];
    }
    os << ')';
    return os.str();
  }

  std::string shape_str() const { return shape_str(shape); }
};

inline void require_same_shape(const NdArray& a, const NdArray& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
                     b.shape_str());
  }
}

inline void require_rank(const NdArray& a, std::size_t r, const char* op) {
  if (a.rank() != r) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) +
                     ", got shape " + a.shape_str());
  }
}

}  // namespace vralign
