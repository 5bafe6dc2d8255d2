#pragma once

// Convolution kernels. The top-level namespace holds the OpenMP/GEMM path used
// everywhere; `reference` keeps a direct serial implementation that the tests
// and the benchmark compare against.

#include "dfsar/tensor.hpp"

namespace dfsar::kernels {

struct ConvGeometry {
  int stride = 1;
  int pad = 0;
  int dilation = 1;
};

int conv_out_size(int in, int kernel, const ConvGeometry& g);

/// x: N×Cin×H×W, w: Cout×Cin×k×k → N×Cout×Ho×Wo. Zero padding.
Tensor conv2d_forward(const Tensor& x, const Tensor& w, const ConvGeometry& g);
/// Gradient w.r.t. the input given the output gradient.
Tensor conv2d_backward_input(const Tensor& grad_out, const Tensor& w, const Shape& x_shape,
                             const ConvGeometry& g);
/// Gradient w.r.t. the weights given the output gradient.
Tensor conv2d_backward_weight(const Tensor& grad_out, const Tensor& x, const Shape& w_shape,
                              const ConvGeometry& g);

/// C = op(A)·op(B) for row-major matrices; a_rows×a_cols is the stored shape of A.
void gemm(const double* a, int a_rows, int a_cols, bool trans_a, const double* b, int b_rows, int b_cols,
          bool trans_b, double* c, bool accumulate);

namespace reference {

Tensor conv2d_forward(const Tensor& x, const Tensor& w, const ConvGeometry& g);
Tensor conv2d_backward_input(const Tensor& grad_out, const Tensor& w, const Shape& x_shape,
                             const ConvGeometry& g);
Tensor conv2d_backward_weight(const Tensor& grad_out, const Tensor& x, const Shape& w_shape,
                              const ConvGeometry& g);

}  // namespace reference

}  // namespace dfsar::kernels
