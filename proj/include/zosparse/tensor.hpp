// Copyright 2026 The zosparse Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "zosparse/errors.hpp"

namespace zosparse {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_string(const Shape& shape);

// Dense row-major array carrying its shape. Rank-2 tensors expose an Eigen
// row-major matrix view; every tensor exposes a flat vector view.
template <typename Scalar>
class BasicTensor {
 public:
  using value_type = Scalar;
  using FlatMap = Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>;
  using ConstFlatMap =
      Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>;
  using MatrixType =
      Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<MatrixType>;
  using ConstMatrixMap = Eigen::Map<const MatrixType>;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, Scalar fill = Scalar(0))
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
    check_dims();
  }

  BasicTensor(Shape shape, std::vector<Scalar> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_dims();
    if (data_.size() != shape_size(shape_)) {
      throw StructuralError("tensor data length " +
                            std::to_string(data_.size()) +
                            " does not match shape " + shape_string(shape_));
    }
  }

  static BasicTensor vector(std::initializer_list<Scalar> values) {
    return BasicTensor({values.size()}, std::vector<Scalar>(values));
  }

  static BasicTensor from_matrix(const MatrixType& m) {
    BasicTensor t({static_cast<std::size_t>(m.rows()),
                   static_cast<std::size_t>(m.cols())});
    t.matrix() = m;
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // Rank-1 tensors are a single row; higher ranks fold trailing dims.
  std::size_t rows() const { return shape_.size() <= 1 ? 1 : shape_[0]; }
  std::size_t cols() const { return rows() == 0 ? 0 : size() / rows(); }

  std::span<Scalar> data() { return data_; }
  std::span<const Scalar> data() const { return data_; }
  Scalar& operator[](std::size_t i) { return data_[i]; }
  const Scalar& operator[](std::size_t i) const { return data_[i]; }

  FlatMap flat() { return FlatMap(data_.data(), Eigen::Index(data_.size())); }
  ConstFlatMap flat() const {
    return ConstFlatMap(data_.data(), Eigen::Index(data_.size()));
  }

  MatrixMap matrix() {
    return MatrixMap(data_.data(), Eigen::Index(rows()), Eigen::Index(cols()));
  }
  ConstMatrixMap matrix() const {
    return ConstMatrixMap(data_.data(), Eigen::Index(rows()),
                          Eigen::Index(cols()));
  }

  bool same_shape(const BasicTensor& other) const {
    return shape_ == other.shape_;
  }

  // Bit-for-bit equality of shape and payload (distinguishes -0.0 and NaNs).
  bool bitwise_equal(const BasicTensor& other) const {
    return shape_ == other.shape_ &&
           (data_.empty() || std::memcmp(data_.data(), other.data_.data(),
                                         data_.size() * sizeof(Scalar)) == 0);
  }

  friend bool operator==(const BasicTensor&, const BasicTensor&) = default;

 private:
  void check_dims() const {
    if (std::any_of(shape_.begin(), shape_.end(),
                    [](std::size_t d) { return d == 0; })) {
      if (!(shape_.size() == 1 && shape_[0] == 0)) {
        throw StructuralError("tensor dimensions must be positive, got " +
                              shape_string(shape_));
      }
    }
  }

  Shape shape_;
  std::vector<Scalar> data_;
};

using Tensor = BasicTensor<double>;

bool all_finite(const Tensor& t);

}  // namespace zosparse
