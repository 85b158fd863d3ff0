#pragma once

#include <array>
#include <cstdint>

#include "vseg/tensor.hpp"

// Serial reference implementations of the compute kernels: naive loops written
// directly from the operator definitions, no parallelism, no blocking. The
// test suite checks the OpenMP kernels against these, and tools/bench_kernels
// reports the speedup.

namespace vseg::refk {

template <typename T>
void conv3d_forward(const Tensor<T>& in, const Tensor<T>& w, const Tensor<T>* bias, int stride,
                    int pad, Tensor<T>& out);

template <typename T>
void conv3d_backward_data(const Tensor<T>& gout, const Tensor<T>& w, int stride, int pad,
                          Tensor<T>& gin);

template <typename T>
void conv3d_backward_weights(const Tensor<T>& in, const Tensor<T>& gout, int stride, int pad,
                             Tensor<T>& gw, Tensor<T>* gb);

template <typename T>
void maxpool3d_forward(const Tensor<T>& in, int k, int stride, int pad, Tensor<T>& out,
                       Tensor<int32_t>& argmax);

template <typename T>
void avgpool3d_forward(const Tensor<T>& in, std::array<int, 3> f, Tensor<T>& out);

template <typename T>
void upsample3d_forward(const Tensor<T>& in, std::array<int, 3> f, Tensor<T>& out);

template <typename T>
void softmax_channels_forward(const Tensor<T>& in, Tensor<T>& out);

template <typename T>
T reduce_sum_all(const Tensor<T>& in);

}  // namespace vseg::refk
