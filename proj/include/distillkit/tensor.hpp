#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "distillkit/common.hpp"

namespace dk {

template <class S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using ColVec = Eigen::Matrix<S, Eigen::Dynamic, 1>;
template <class S>
using SquareMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

inline long shape_numel(const std::vector<int>& shape) {
  long n = 1;
  for (int e : shape) n *= e;
  return n;
}

inline std::string shape_string(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major tensor. Rank and extents live in `shape`; storage is flat.
template <class S>
struct Tensor {
  std::vector<int> shape;
  AlignedVector<S> data;  // fixed 64-byte alignment keeps kernels reproducible

  Tensor() = default;

  explicit Tensor(std::vector<int> shape_in) : shape(std::move(shape_in)) {
    for (int e : shape)
      if (e <= 0) throw ShapeError("tensor extent must be positive, got " + shape_string(shape));
    data.assign(static_cast<std::size_t>(shape_numel(shape)), S(0));
  }

  static Tensor from(std::vector<int> shape_in, std::vector<S> values) {
    Tensor t(std::move(shape_in));
    if (values.size() != t.data.size())
      throw ShapeError("value count " + std::to_string(values.size()) +
                       " does not fill shape " + shape_string(t.shape));
    t.data.assign(values.begin(), values.end());
    return t;
  }

  int rank() const { return static_cast<int>(shape.size()); }
  long numel() const { return static_cast<long>(data.size()); }
  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  S& operator[](long i) { return data[static_cast<std::size_t>(i)]; }
  const S& operator[](long i) const { return data[static_cast<std::size_t>(i)]; }

  /// Flat view as an Eigen column vector.
  Eigen::Map<ColVec<S>> vec() { return Eigen::Map<ColVec<S>>(data.data(), numel()); }
  Eigen::Map<const ColVec<S>> vec() const {
    return Eigen::Map<const ColVec<S>>(data.data(), numel());
  }

  /// View as a rows x cols row-major matrix; must tile the storage exactly.
  Eigen::Map<RowMat<S>> mat(long rows, long cols) {
    if (rows * cols != numel())
      throw ShapeError("matrix view " + std::to_string(rows) + "x" + std::to_string(cols) +
                       " does not cover tensor " + shape_string(shape));
    return Eigen::Map<RowMat<S>>(data.data(), rows, cols);
  }
  Eigen::Map<const RowMat<S>> mat(long rows, long cols) const {
    if (rows * cols != numel())
      throw ShapeError("matrix view " + std::to_string(rows) + "x" + std::to_string(cols) +
                       " does not cover tensor " + shape_string(shape));
    return Eigen::Map<const RowMat<S>>(data.data(), rows, cols);
  }

  bool all_finite() const {
    for (const S& v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <class T>
  Tensor<T> cast() const {
    Tensor<T> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<T>(data[i]);
    return out;
  }
};

template <class S>
void require_finite(const Tensor<S>& t, const std::string& context) {
  if (!t.all_finite()) throw NumericError("non-finite values in " + context);
}

template <class S>
void require_shape(const Tensor<S>& t, const std::vector<int>& shape, const std::string& context) {
  if (t.shape != shape)
    throw ShapeError(context + ": expected shape " + shape_string(shape) + ", got " +
                     shape_string(t.shape));
}

}  // namespace dk
