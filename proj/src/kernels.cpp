#include "dfsar/kernels.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <vector>

#include "dfsar/error.hpp"

namespace dfsar::kernels {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

struct ConvDims {
  int n, cin, h, w, cout, k, ho, wo;
};

ConvDims check_dims(const Shape& x, const Shape& w, const ConvGeometry& g) {
  DFSAR_REQUIRE(x.size() == 4, "conv2d: input must be NCHW, got " + shape_str(x));
  DFSAR_REQUIRE(w.size() == 4 && w[2] == w[3], "conv2d: weight must be Cout×Cin×k×k, got " + shape_str(w));
  DFSAR_REQUIRE(x[1] == w[1], "conv2d: channel mismatch " + shape_str(x) + " vs " + shape_str(w));
  DFSAR_REQUIRE(g.stride >= 1 && g.dilation >= 1 && g.pad >= 0, "conv2d: invalid geometry");
  ConvDims d{x[0], x[1], x[2], x[3], w[0], w[2], 0, 0};
  d.ho = conv_out_size(d.h, d.k, g);
  d.wo = conv_out_size(d.w, d.k, g);
  DFSAR_REQUIRE(d.ho > 0 && d.wo > 0, "conv2d: empty output for input " + shape_str(x));
  return d;
}

// col[(c*k + i)*k + j][oh*wo + ow] = x[c][oh*s - p + i*dil][ow*s - p + j*dil]
void im2col(const double* x, const ConvDims& d, const ConvGeometry& g, double* col) {
  const int rows = d.cin * d.k * d.k;
  const std::size_t plane = static_cast<std::size_t>(d.ho) * d.wo;
#pragma omp parallel for schedule(static) if (rows * plane > 32768)
  for (int r = 0; r < rows; ++r) {
    const int c = r / (d.k * d.k);
    const int i = (r / d.k) % d.k;
    const int j = r % d.k;
    const double* xc = x + static_cast<std::size_t>(c) * d.h * d.w;
    double* out = col + r * plane;
    // Output columns [lo, hi) read inside the input row.
    const int offset = j * g.dilation - g.pad;
    int lo = 0, hi = d.wo;
    while (lo < d.wo && lo * g.stride + offset < 0) ++lo;
    while (hi > lo && (hi - 1) * g.stride + offset >= d.w) --hi;
    for (int oh = 0; oh < d.ho; ++oh) {
      const int ih = oh * g.stride - g.pad + i * g.dilation;
      double* orow = out + static_cast<std::size_t>(oh) * d.wo;
      if (ih < 0 || ih >= d.h) {
        for (int ow = 0; ow < d.wo; ++ow) orow[ow] = 0.0;
        continue;
      }
      const double* xrow = xc + static_cast<std::size_t>(ih) * d.w;
      for (int ow = 0; ow < lo; ++ow) orow[ow] = 0.0;
      if (g.stride == 1) {
        std::copy(xrow + lo + offset, xrow + hi + offset, orow + lo);
      } else {
        for (int ow = lo; ow < hi; ++ow) orow[ow] = xrow[ow * g.stride + offset];
      }
      for (int ow = hi; ow < d.wo; ++ow) orow[ow] = 0.0;
    }
  }
}

// Adjoint of im2col. Each channel is owned by one thread, so no write races.
void col2im(const double* col, const ConvDims& d, const ConvGeometry& g, double* x) {
  const std::size_t plane = static_cast<std::size_t>(d.ho) * d.wo;
#pragma omp parallel for schedule(static) if (static_cast<std::size_t>(d.cin) * d.k * d.k * plane > 32768)
  for (int c = 0; c < d.cin; ++c) {
    double* xc = x + static_cast<std::size_t>(c) * d.h * d.w;
    for (int i = 0; i < d.k; ++i) {
      for (int j = 0; j < d.k; ++j) {
        const double* src = col + ((static_cast<std::size_t>(c) * d.k + i) * d.k + j) * plane;
        const int offset = j * g.dilation - g.pad;
        int lo = 0, hi = d.wo;
        while (lo < d.wo && lo * g.stride + offset < 0) ++lo;
        while (hi > lo && (hi - 1) * g.stride + offset >= d.w) --hi;
        for (int oh = 0; oh < d.ho; ++oh) {
          const int ih = oh * g.stride - g.pad + i * g.dilation;
          if (ih < 0 || ih >= d.h) continue;
          double* xrow = xc + static_cast<std::size_t>(ih) * d.w;
          const double* srow = src + static_cast<std::size_t>(oh) * d.wo;
          for (int ow = lo; ow < hi; ++ow) xrow[ow * g.stride + offset] += srow[ow];
        }
      }
    }
  }
}

bool is_pointwise(const ConvDims& d, const ConvGeometry& g) {
  return d.k == 1 && g.stride == 1 && g.pad == 0;
}

}  // namespace

int conv_out_size(int in, int kernel, const ConvGeometry& g) {
  return (in + 2 * g.pad - g.dilation * (kernel - 1) - 1) / g.stride + 1;
}

void gemm(const double* a, int a_rows, int a_cols, bool trans_a, const double* b, int b_rows, int b_cols,
          bool trans_b, double* c, bool accumulate) {
  ConstMap A(a, a_rows, a_cols);
  ConstMap B(b, b_rows, b_cols);
  const int m = trans_a ? a_cols : a_rows;
  const int n = trans_b ? b_rows : b_cols;
  MutMap C(c, m, n);
  if (!accumulate) C.setZero();
  if (!trans_a && !trans_b) C.noalias() += A * B;
  else if (trans_a && !trans_b) C.noalias() += A.transpose() * B;
  else if (!trans_a && trans_b) C.noalias() += A * B.transpose();
  else C.noalias() += A.transpose() * B.transpose();
}

Tensor conv2d_forward(const Tensor& x, const Tensor& w, const ConvGeometry& g) {
  const ConvDims d = check_dims(x.shape(), w.shape(), g);
  Tensor y({d.n, d.cout, d.ho, d.wo});
  const int rows = d.cin * d.k * d.k;
  const int plane = d.ho * d.wo;
  const bool pointwise = is_pointwise(d, g);
  std::vector<double> col(pointwise ? 0 : static_cast<std::size_t>(rows) * plane);
  for (int n = 0; n < d.n; ++n) {
    const double* xn = x.data() + static_cast<std::size_t>(n) * d.cin * d.h * d.w;
    const double* src = xn;
    if (!pointwise) {
      im2col(xn, d, g, col.data());
      src = col.data();
    }
    gemm(w.data(), d.cout, rows, false, src, rows, plane, false,
         y.data() + static_cast<std::size_t>(n) * d.cout * plane, false);
  }
  return y;
}

Tensor conv2d_backward_input(const Tensor& grad_out, const Tensor& w, const Shape& x_shape,
                             const ConvGeometry& g) {
  const ConvDims d = check_dims(x_shape, w.shape(), g);
  DFSAR_REQUIRE(grad_out.shape() == Shape({d.n, d.cout, d.ho, d.wo}), "conv2d backward: grad shape mismatch");
  Tensor gx(x_shape);
  const int rows = d.cin * d.k * d.k;
  const int plane = d.ho * d.wo;
  const bool pointwise = is_pointwise(d, g);
  std::vector<double> col(pointwise ? 0 : static_cast<std::size_t>(rows) * plane);
  for (int n = 0; n < d.n; ++n) {
    const double* gy = grad_out.data() + static_cast<std::size_t>(n) * d.cout * plane;
    double* gxn = gx.data() + static_cast<std::size_t>(n) * d.cin * d.h * d.w;
    if (pointwise) {
      gemm(w.data(), d.cout, rows, true, gy, d.cout, plane, false, gxn, false);
      continue;
    }
    gemm(w.data(), d.cout, rows, true, gy, d.cout, plane, false, col.data(), false);
    col2im(col.data(), d, g, gxn);
  }
  return gx;
}

Tensor conv2d_backward_weight(const Tensor& grad_out, const Tensor& x, const Shape& w_shape,
                              const ConvGeometry& g) {
  const ConvDims d = check_dims(x.shape(), w_shape, g);
  DFSAR_REQUIRE(grad_out.shape() == Shape({d.n, d.cout, d.ho, d.wo}), "conv2d backward: grad shape mismatch");
  Tensor gw(w_shape);
  const int rows = d.cin * d.k * d.k;
  const int plane = d.ho * d.wo;
  const bool pointwise = is_pointwise(d, g);
  std::vector<double> col(pointwise ? 0 : static_cast<std::size_t>(rows) * plane);
  for (int n = 0; n < d.n; ++n) {
    const double* xn = x.data() + static_cast<std::size_t>(n) * d.cin * d.h * d.w;
    const double* src = xn;
    if (!pointwise) {
      im2col(xn, d, g, col.data());
      src = col.data();
    }
    gemm(grad_out.data() + static_cast<std::size_t>(n) * d.cout * plane, d.cout, plane, false, src, rows, plane,
         true, gw.data(), true);
  }
  return gw;
}

namespace reference {

Tensor conv2d_forward(const Tensor& x, const Tensor& w, const ConvGeometry& g) {
  const ConvDims d = check_dims(x.shape(), w.shape(), g);
  Tensor y({d.n, d.cout, d.ho, d.wo});
  for (int n = 0; n < d.n; ++n)
    for (int co = 0; co < d.cout; ++co)
      for (int oh = 0; oh < d.ho; ++oh)
        for (int ow = 0; ow < d.wo; ++ow) {
          double acc = 0.0;
          for (int ci = 0; ci < d.cin; ++ci)
            for (int i = 0; i < d.k; ++i) {
              const int ih = oh * g.stride - g.pad + i * g.dilation;
              if (ih < 0 || ih >= d.h) continue;
              for (int j = 0; j < d.k; ++j) {
                const int iw = ow * g.stride - g.pad + j * g.dilation;
                if (iw < 0 || iw >= d.w) continue;
                acc += w.at(co, ci, i, j) * x.at(n, ci, ih, iw);
              }
            }
          y.at(n, co, oh, ow) = acc;
        }
  return y;
}

Tensor conv2d_backward_input(const Tensor& grad_out, const Tensor& w, const Shape& x_shape,
                             const ConvGeometry& g) {
  const ConvDims d = check_dims(x_shape, w.shape(), g);
  Tensor gx(x_shape);
  for (int n = 0; n < d.n; ++n)
    for (int co = 0; co < d.cout; ++co)
      for (int oh = 0; oh < d.ho; ++oh)
        for (int ow = 0; ow < d.wo; ++ow) {
          const double go = grad_out.at(n, co, oh, ow);
          for (int ci = 0; ci < d.cin; ++ci)
            for (int i = 0; i < d.k; ++i) {
              const int ih = oh * g.stride - g.pad + i * g.dilation;
              if (ih < 0 || ih >= d.h) continue;
              for (int j = 0; j < d.k; ++j) {
                const int iw = ow * g.stride - g.pad + j * g.dilation;
                if (iw < 0 || iw >= d.w) continue;
                gx.at(n, ci, ih, iw) += w.at(co, ci, i, j) * go;
              }
            }
        }
  return gx;
}

Tensor conv2d_backward_weight(const Tensor& grad_out, const Tensor& x, const Shape& w_shape,
                              const ConvGeometry& g) {
  const ConvDims d = check_dims(x.shape(), w_shape, g);
  Tensor gw(w_shape);
  for (int n = 0; n < d.n; ++n)
    for (int co = 0; co < d.cout; ++co)
      for (int oh = 0; oh < d.ho; ++oh)
        for (int ow = 0; ow < d.wo; ++ow) {
          const double go = grad_out.at(n, co, oh, ow);
          for (int ci = 0; ci < d.cin; ++ci)
            for (int i = 0; i < d.k; ++i) {
              const int ih = oh * g.stride - g.pad + i * g.dilation;
              if (ih < 0 || ih >= d.h) continue;
              for (int j = 0; j < d.k; ++j) {
                const int iw = ow * g.stride - g.pad + j * g.dilation;
                if (iw < 0 || iw >= d.w) continue;
                gw.at(co, ci, i, j) += x.at(n, ci, ih, iw) * go;
              }
            }
        }
  return gw;
}

}  // namespace reference

}  // namespace dfsar::kernels
