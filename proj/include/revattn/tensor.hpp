#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <string>

#include "revattn/error.hpp"

namespace revattn {

// Row-major throughout: rows are token positions, and the byte layout of a
// matrix is the byte layout of its on-disk payload.
template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;

using MatrixD = Matrix<double>;
using RowVectorD = RowVector<double>;

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      if (!std::isfinite(static_cast<double>(m(i, j)))) return false;
    }
  }
  return true;
}

template <typename Derived>
MatrixD to_double(const Eigen::MatrixBase<Derived>& m) {
  return m.template cast<double>();
}

inline void require_shape(const std::string& what, Eigen::Index rows, Eigen::Index cols,
                          Eigen::Index want_rows, Eigen::Index want_cols) {
  if (rows != want_rows || cols != want_cols) {
    throw Error(ErrorKind::kShapeMismatch,
                what + " is " + std::to_string(rows) + "x" + std::to_string(cols) + ", expected " +
                    std::to_string(want_rows) + "x" + std::to_string(want_cols));
  }
}

template <typename Derived>
void require_shape(const std::string& what, const Eigen::DenseBase<Derived>& m,
                   Eigen::Index want_rows, Eigen::Index want_cols) {
  require_shape(what, m.rows(), m.cols(), want_rows, want_cols);
}

// Row-wise softmax with per-row max subtraction.
template <typename T>
void softmax_rows_inplace(Matrix<T>& s) {
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const T mx = s.row(i).maxCoeff();
    s.row(i) = (s.row(i).array() - mx).exp().matrix();
    const T sum = s.row(i).sum();
    s.row(i) /= sum;
  }
}

}  // namespace revattn
