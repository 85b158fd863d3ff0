// Benchmark of the OpenMP kernels against their serial reference
// implementations on the shapes the networks actually run.

#include <chrono>
#include <cstdio>
#include <functional>

#include "vseg/kernels.hpp"
#include "vseg/reference.hpp"
#include "vseg/rng.hpp"

using namespace vseg;

namespace {

double time_ms(const std::function<void()>& f, int iters) {
  f();  // warm-up
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < iters; ++i) f();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count() / iters;
}

Tensor<float> randn(std::vector<int64_t> shape, Rng& rng) {
  Tensor<float> t(std::move(shape));
  for (int64_t i = 0; i < t.size(); ++i) t[i] = float(rng.normal());
  return t;
}

struct ConvCase {
  const char* name;
  int64_t n, z, h, w, ci, co;
  int k, stride, pad;
  int iters;
};

}  // namespace

int main() {
  Rng rng(1);
  std::printf("%-34s %10s %10s %8s %9s\n", "kernel", "serial ms", "openmp ms", "speedup",
              "GFLOP/s");

  const ConvCase conv_cases[] = {
      {"conv3d 8->8 k3 16x32x32", 2, 16, 32, 32, 8, 8, 3, 1, 1, 10},
      {"conv3d 24->8 k3 16x32x32", 2, 16, 32, 32, 24, 8, 3, 1, 1, 10},
      {"conv3d 16->16 k3 8x16x16", 2, 8, 16, 16, 16, 16, 3, 1, 1, 20},
      {"conv3d 6->8 k4 s2 16x32x32", 2, 16, 32, 32, 6, 8, 4, 2, 1, 20},
      {"conv3d 96->32 k1 4x8x8", 2, 4, 8, 8, 96, 32, 1, 1, 0, 50},
  };
  for (const auto& c : conv_cases) {
    auto in = randn({c.n, c.z, c.h, c.w, c.ci}, rng);
    auto w = randn({c.k, c.k, c.k, c.ci, c.co}, rng);
    auto b = randn({c.co}, rng);
    std::vector<int64_t> os = {c.n, 0, 0, 0, c.co};
    const int64_t dims[3] = {c.z, c.h, c.w};
    for (int ax = 0; ax < 3; ++ax)
      os[size_t(1 + ax)] = (dims[ax] + 2 * c.pad - c.k) / c.stride + 1;
    Tensor<float> out(os), out_ref(os);
    const double serial =
        time_ms([&] { refk::conv3d_forward(in, w, &b, c.stride, c.pad, out_ref); }, 2);
    const double par =
        time_ms([&] { kernels::conv3d_forward(in, w, &b, c.stride, c.pad, out); }, c.iters);
    const double flops = 2.0 * out.size() * c.ci * c.k * c.k * c.k;
    std::printf("%-34s %10.2f %10.2f %7.1fx %9.2f\n", c.name, serial, par, serial / par,
                flops / par / 1e6);
  }

  {
    auto in = randn({2, 16, 32, 32, 8}, rng);
    std::vector<int64_t> os = {2, 8, 16, 16, 8};
    Tensor<float> out(os), out_ref(os);
    Tensor<int32_t> am(os), am_ref(os);
    const double serial = time_ms([&] { refk::maxpool3d_forward(in, 3, 2, 1, out_ref, am_ref); }, 5);
    const double par = time_ms([&] { kernels::maxpool3d_forward(in, 3, 2, 1, out, am); }, 50);
    std::printf("%-34s %10.2f %10.2f %7.1fx %9s\n", "maxpool3d k3 s2 16x32x32", serial, par,
                serial / par, "-");
  }
  {
    auto in = randn({2, 8, 16, 16, 16}, rng);
    Tensor<float> out({2, 16, 32, 32, 16}), out_ref({2, 16, 32, 32, 16});
    const double serial = time_ms([&] { refk::upsample3d_forward(in, {2, 2, 2}, out_ref); }, 5);
    const double par = time_ms([&] { kernels::upsample3d_forward(in, {2, 2, 2}, out); }, 50);
    std::printf("%-34s %10.2f %10.2f %7.1fx %9s\n", "upsample3d x2 trilinear", serial, par,
                serial / par, "-");
  }
  {
    auto in = randn({2, 16, 32, 32, 6}, rng);
    Tensor<float> out(in.shape()), out_ref(in.shape());
    const double serial = time_ms([&] { refk::softmax_channels_forward(in, out_ref); }, 10);
    const double par = time_ms([&] { kernels::softmax_channels_forward(in, out); }, 100);
    std::printf("%-34s %10.2f %10.2f %7.1fx %9s\n", "softmax C=6 16x32x32", serial, par,
                serial / par, "-");
  }
  {
    auto in = randn({1, 64, 128, 128, 1}, rng);
    const double serial = time_ms([&] { (void)refk::reduce_sum_all(in); }, 10);
    const double par = time_ms([&] { (void)kernels::reduce_sum_all(in); }, 100);
    std::printf("%-34s %10.2f %10.2f %7.1fx %9s\n", "reduce_sum 64x128x128", serial, par,
                serial / par, "-");
  }
  return 0;
}
