#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "pfedhr/errors.hpp"

namespace pfedhr {

inline long long numel_of(const std::vector<int>& shape) {
  long long n = 1;
  for (int d : shape) n *= d;
  return n;
}

inline std::string shape_string(const std::vector<int>& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

// Dense row-major tensor. Rank 2 (batch, features) for vector data and
// rank 4 (batch, channels, height, width) for images cover everything here.
template <typename S = float>
struct Tensor {
  std::vector<int> shape;
  std::vector<S> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> shp)
      : shape(std::move(shp)), data(static_cast<std::size_t>(numel_of(shape)), S{0}) {}
  Tensor(std::vector<int> shp, std::vector<S> values) : shape(std::move(shp)), data(std::move(values)) {
    if (numel_of(shape) != static_cast<long long>(data.size()))
      throw ShapeMismatch("tensor data does not match shape " + shape_string(shape));
  }

  long long numel() const { return static_cast<long long>(data.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
  int rank() const { return static_cast<int>(shape.size()); }

  S& at(int i, int j) { return data[static_cast<std::size_t>(i) * dim(1) + j]; }
  S at(int i, int j) const { return data[static_cast<std::size_t>(i) * dim(1) + j]; }

  S& at(int n, int c, int y, int x) {
    return data[((static_cast<std::size_t>(n) * dim(1) + c) * dim(2) + y) * dim(3) + x];
  }
  S at(int n, int c, int y, int x) const {
    return data[((static_cast<std::size_t>(n) * dim(1) + c) * dim(2) + y) * dim(3) + x];
  }

  Tensor<S> reshaped(std::vector<int> new_shape) const {
    if (numel_of(new_shape) != numel())
      throw ShapeMismatch("cannot reshape " + shape_string(shape) + " to " + shape_string(new_shape));
    Tensor<S> out;
    out.shape = std::move(new_shape);
    out.data = data;
    return out;
  }

  bool all_finite() const {
    for (S v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }
};

// Per-sample feature dimensions, i.e. the shape without the batch axis.
inline std::vector<int> sample_dims(const std::vector<int>& batch_shape) {
  return std::vector<int>(batch_shape.begin() + 1, batch_shape.end());
}

template <typename S>
Tensor<S> flatten_batch(const Tensor<S>& t) {
  const int n = t.dim(0);
  const int features = static_cast<int>(t.numel() / n);
  return t.reshaped({n, features});
}

// Rows `rows` of `src` gathered into a new batch tensor.
template <typename S>
Tensor<S> gather_rows(const Tensor<S>& src, const std::vector<int>& rows) {
  std::vector<int> shp = src.shape;
  shp[0] = static_cast<int>(rows.size());
  Tensor<S> out(shp);
  const long long stride = src.numel() / src.dim(0);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const S* from = src.data.data() + stride * rows[r];
    S* to = out.data.data() + stride * static_cast<long long>(r);
    for (long long i = 0; i < stride; ++i) to[i] = from[i];
  }
  return out;
}

}  // namespace pfedhr
