#pragma once

#include <array>
#include <cstdint>

#include "vseg/tensor.hpp"

// OpenMP-parallel compute kernels. All kernels are deterministic for a fixed
// input regardless of thread count: parallel loops write disjoint outputs, and
// reductions accumulate fixed-size chunks that are combined in index order.
//
// Layout conventions:
//   features  (N, Z, H, W, C)   channels innermost
//   weights   (Kz, Ky, Kx, Ci, Co)
//   bias      (Co)
//
// Serial reference implementations of the same contracts live in
// vseg/reference.hpp (namespace vseg::refk) and are compared against these in
// the test suite and the kernel benchmark.

namespace vseg::kernels {

// out = conv(in, w) + bias; cubic kernel K^3, stride s, zero padding p.
// Output spatial dim = (d + 2p - K)/s + 1.
template <typename T>
void conv3d_forward(const Tensor<T>& in, const Tensor<T>& w, const Tensor<T>* bias,
                    int stride, int pad, Tensor<T>& out);

// gin += dL/din given gout = dL/dout.
template <typename T>
void conv3d_backward_data(const Tensor<T>& gout, const Tensor<T>& w, int stride, int pad,
                          Tensor<T>& gin);

// gw += dL/dw, gb += dL/dbias (gb optional).
template <typename T>
void conv3d_backward_weights(const Tensor<T>& in, const Tensor<T>& gout, int stride, int pad,
                             Tensor<T>& gw, Tensor<T>* gb);

// Max pooling, kernel k, stride s, padding p (padded voxels never win).
// argmax holds the linear spatial index (z*H + h)*W + w of each winner.
template <typename T>
void maxpool3d_forward(const Tensor<T>& in, int k, int stride, int pad, Tensor<T>& out,
                       Tensor<int32_t>& argmax);

template <typename T>
void maxpool3d_backward(const Tensor<T>& gout, const Tensor<int32_t>& argmax, Tensor<T>& gin,
                        int k, int stride, int pad);

// Non-overlapping box average over integer factors (fz, fy, fx); dims must divide.
template <typename T>
void avgpool3d_forward(const Tensor<T>& in, std::array<int, 3> f, Tensor<T>& out);

template <typename T>
void avgpool3d_backward(const Tensor<T>& gout, std::array<int, 3> f, Tensor<T>& gin);

// Trilinear upsampling by integer factors (half-voxel aligned, borders clamped).
template <typename T>
void upsample3d_forward(const Tensor<T>& in, std::array<int, 3> f, Tensor<T>& out);

template <typename T>
void upsample3d_backward(const Tensor<T>& gout, std::array<int, 3> f, Tensor<T>& gin);

// Per-(n,c) spatial mean and (biased) variance: out shapes (N, C).
template <typename T>
void moments_nc(const Tensor<T>& in, Tensor<T>& mean, Tensor<T>& var);

// Per-(n,c) spatial sums of a and a*b: out shapes (N, C).
template <typename T>
void reduce_sum_nc(const Tensor<T>& a, Tensor<T>& out);
template <typename T>
void reduce_dot_nc(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& out);

// Softmax over the innermost (channel) axis.
template <typename T>
void softmax_channels_forward(const Tensor<T>& in, Tensor<T>& out);

// gin += y * (gout - sum_c(gout * y)) given y = softmax output.
template <typename T>
void softmax_channels_backward(const Tensor<T>& y, const Tensor<T>& gout, Tensor<T>& gin);

// Elementwise.
template <typename T>
void relu_forward(const Tensor<T>& in, Tensor<T>& out);
template <typename T>
void relu_backward(const Tensor<T>& in, const Tensor<T>& gout, Tensor<T>& gin);
template <typename T>
void leaky_relu_forward(const Tensor<T>& in, T slope, Tensor<T>& out);
template <typename T>
void leaky_relu_backward(const Tensor<T>& in, T slope, const Tensor<T>& gout, Tensor<T>& gin);
template <typename T>
void sigmoid_forward(const Tensor<T>& in, Tensor<T>& out);
template <typename T>
void sigmoid_backward(const Tensor<T>& y, const Tensor<T>& gout, Tensor<T>& gin);

// y += alpha * x
template <typename T>
void axpy(T alpha, const Tensor<T>& x, Tensor<T>& y);

// Deterministic full-tensor sum (fixed-chunk partials combined in order).
template <typename T>
T reduce_sum_all(const Tensor<T>& in);

// One Adam step over a flat parameter tensor.
template <typename T>
void adam_step(Tensor<T>& param, const Tensor<T>& grad, Tensor<T>& m, Tensor<T>& v, T lr,
               T beta1, T beta2, T eps, int64_t t);

}  // namespace vseg::kernels
