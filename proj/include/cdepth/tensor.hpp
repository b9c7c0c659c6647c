#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cdepth/errors.hpp"

namespace cdepth {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1},
                         [](Index a, Index b) { return a * b; });
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major array with an explicit shape. Storage is an Eigen column
/// vector so whole-array arithmetic stays in Eigen expressions.
template <typename Scalar>
struct Tensor {
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  Shape shape;
  Vector data;

  Tensor() = default;

  explicit Tensor(Shape s) : shape(std::move(s)), data(Vector::Zero(numel(shape))) {
    check_shape();
  }

  Tensor(Shape s, Vector values) : shape(std::move(s)), data(std::move(values)) {
    check_shape();
    if (data.size() != numel(shape)) {
      throw ContractError("tensor data length " + std::to_string(data.size()) +
                          " does not match shape " + to_string(shape));
    }
  }

  Tensor(Shape s, std::initializer_list<Scalar> values)
      : Tensor(std::move(s), Eigen::Map<const Vector>(values.begin(),
                                                      static_cast<Index>(values.size()))) {}

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }

  static Tensor filled(Shape s, Scalar value) {
    Tensor t(std::move(s));
    t.data.setConstant(value);
    return t;
  }

  Index size() const { return data.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  Index dim(int axis) const { return shape.at(static_cast<std::size_t>(axis)); }

  Scalar* ptr() { return data.data(); }
  const Scalar* ptr() const { return data.data(); }

  Scalar& operator[](Index i) { return data[i]; }
  Scalar operator[](Index i) const { return data[i]; }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape, data.template cast<Other>());
  }

  bool bit_equal(const Tensor& other) const {
    if (shape != other.shape) return false;
    for (Index i = 0; i < size(); ++i) {
      // NaN never appears in a valid tensor, so value equality is bitwise
      // except for signed zeros; compare those too.
      if (data[i] != other.data[i] || std::signbit(data[i]) != std::signbit(other.data[i])) {
        return false;
      }
    }
    return true;
  }

 private:
  void check_shape() const {
    for (Index d : shape) {
      if (d <= 0) throw ContractError("tensor dimensions must be positive, got " + to_string(shape));
    }
  }
};

}  // namespace cdepth
