#pragma once

#include "ms2tan/parameters.hpp"

namespace ms2tan {

/// y = x * W (+ b), one token per row.
template <typename Scalar>
Mat<Scalar> linear_forward(const Mat<Scalar>& x, const Parameter<Scalar>& weight,
                           const Parameter<Scalar>* bias = nullptr) {
  if (x.cols() != weight.rows())
    throw ShapeMismatch(weight.name + ": input width " + std::to_string(x.cols()) + " vs " +
                        std::to_string(weight.rows()));
  Mat<Scalar> y = x * weight.value;
  if (bias) y.rowwise() += bias->value.row(0);
  return y;
}

/// Accumulates dW, db and returns dx.
template <typename Scalar>
Mat<Scalar> linear_backward(const Mat<Scalar>& x, const Mat<Scalar>& dy, Parameter<Scalar>& weight,
                            Parameter<Scalar>* bias = nullptr) {
  weight.grad.noalias() += x.transpose() * dy;
  if (bias) bias->grad.row(0) += dy.colwise().sum();
  return dy * weight.value.transpose();
}

}  // namespace ms2tan
