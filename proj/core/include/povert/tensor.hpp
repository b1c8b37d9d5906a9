#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "povert/errors.hpp"
#include "povert/rng.hpp"

namespace povert::ad {

/// Dense row-major tensor of rank 0..3. Rank 0 is a scalar with shape {}.
template <class T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> data;

  Tensor() = default;

  static Tensor zeros(std::vector<int> s) {
    Tensor t;
    t.shape = std::move(s);
    t.data.assign(t.count(), T(0));
    return t;
  }

  static Tensor full(std::vector<int> s, T v) {
    Tensor t = zeros(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }

  static Tensor scalar(T v) {
    Tensor t;
    t.data.assign(1, v);
    return t;
  }

  static Tensor from(std::vector<int> s, std::vector<T> v) {
    Tensor t;
    t.shape = std::move(s);
    t.data = std::move(v);
    if (t.data.size() != t.count())
      throw ShapeMismatch("tensor data size does not match shape");
    return t;
  }

  static Tensor gaussian(std::vector<int> s, Rng& rng, T stddev = T(1)) {
    Tensor t = zeros(std::move(s));
    for (auto& x : t.data) x = static_cast<T>(rng.gaussian()) * stddev;
    return t;
  }

  std::size_t count() const {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    return n;
  }

  int rank() const { return static_cast<int>(shape.size()); }
  int rows() const { return rank() >= 1 ? shape[0] : 1; }
  int cols() const { return rank() >= 2 ? shape[1] : 1; }

  T& at(int i) { return data[static_cast<std::size_t>(i)]; }
  const T& at(int i) const { return data[static_cast<std::size_t>(i)]; }
  T& at(int i, int j) { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
  const T& at(int i, int j) const { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
  // rank-3 (c, y, x)
  T& at(int c, int y, int x) {
    return data[(static_cast<std::size_t>(c) * shape[1] + y) * shape[2] + x];
  }
  const T& at(int c, int y, int x) const {
    return data[(static_cast<std::size_t>(c) * shape[1] + y) * shape[2] + x];
  }

  T value() const {
    if (data.size() != 1) throw ShapeMismatch("value() on non-scalar tensor");
    return data[0];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (const T& x : data)
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  }

  Tensor<T> reshaped(std::vector<int> s) const {
    Tensor t;
    t.shape = std::move(s);
    t.data = data;
    if (t.count() != count()) throw ShapeMismatch("reshape changes element count");
    return t;
  }

  double squared_norm() const {
    double s = 0;
    for (const T& x : data) s += static_cast<double>(x) * static_cast<double>(x);
    return s;
  }

  double norm() const { return std::sqrt(squared_norm()); }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> t;
    t.shape = shape;
    t.data.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) t.data[i] = static_cast<U>(data[i]);
    return t;
  }
};

inline std::string shape_str(const std::vector<int>& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    out += std::to_string(s[i]);
    if (i + 1 < s.size()) out += ",";
  }
  return out + ")";
}

}  // namespace povert::ad
