#pragma once

#include <cstddef>

#include "mtml/tape.hpp"
#include "mtml/tensor.hpp"

namespace mtml::ops {

// Spatial ops take volumes shaped {C, nz, ny, nx}; weights are
// {C_out, C_in, k, k, k}.
struct ConvOptions {
  int stride = 1;
  int dilation = 1;
  // Negative selects "same" padding, d * (k - 1) / 2.
  int padding = -1;
};

struct ConvTransposeOptions {
  int stride = 1;
  int dilation = 1;
  int padding = 0;
  int output_padding = 0;
};

// Output extent of a convolution along one axis.
int conv_out_extent(int in, int kernel, int stride, int dilation, int padding);
// Output extent of a transposed convolution along one axis.
int conv_transpose_out_extent(int in, int kernel, int stride, int dilation, int padding, int output_padding);

template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> mul_scalar(Var<T> x, T c);
template <typename T> Var<T> relu(Var<T> x);
template <typename T> Var<T> sum(Var<T> x);
// Scalar <x, weights> against a constant tensor of the same shape.
template <typename T> Var<T> weighted_sum(Var<T> x, const Tensor<T>& weights);
template <typename T> Var<T> concat(Var<T> a, Var<T> b, std::size_t axis);
// x / max(||x||, eps) along `axis`.
template <typename T> Var<T> l2_normalize(Var<T> x, std::size_t axis, T eps = T(1e-8));

// `bias` may be an invalid Var for no bias.
template <typename T> Var<T> conv3d(Var<T> x, Var<T> weights, Var<T> bias, ConvOptions opt = {});
// Adjoint of conv3d with the same weights: weights are {C_x, C_out, k, k, k}
// where C_x is the channel count of `x`.
template <typename T> Var<T> conv_transpose3d(Var<T> x, Var<T> weights, Var<T> bias, ConvTransposeOptions opt = {});
// 2x2x2 window, stride 2. Ties route the gradient to the first element in scan order.
template <typename T> Var<T> maxpool3d(Var<T> x);

// Raw kernels shared by the tape ops, exposed for tests and inference-only paths.
namespace kernels {

struct ConvGeometry {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  int in[3] = {0, 0, 0};   // z, y, x
  int out[3] = {0, 0, 0};  // z, y, x
  int kernel = 1;
  int stride = 1;
  int dilation = 1;
  int padding = 0;
};

template <typename T>
void conv_forward(const ConvGeometry& g, const T* x, const T* w, T* y);
// Accumulates into dx and dw when non-null.
template <typename T>
void conv_backward(const ConvGeometry& g, const T* x, const T* w, const T* dy, T* dx, T* dw);

}  // namespace kernels

}  // namespace mtml::ops
