#include <array>

#include "doctest.h"
#include "test_helpers.hpp"
#include "vseg/kernels.hpp"
#include "vseg/reference.hpp"

using namespace vseg;
using vseg::testing::max_abs_diff;
using vseg::testing::random_tensor;

namespace {

template <typename T>
Tensor<T> conv_out_shape(const Tensor<T>& in, const Tensor<T>& w, int stride, int pad) {
  const int64_t k = w.dim(0);
  std::vector<int64_t> s = {in.dim(0), 0, 0, 0, w.dim(4)};
  for (int ax = 0; ax < 3; ++ax) s[size_t(1 + ax)] = (in.dim(1 + ax) + 2 * pad - k) / stride + 1;
  return Tensor<T>(s);
}

}  // namespace

TEST_CASE("conv3d forward matches serial reference across shapes") {
  Rng rng(1);
  struct Case {
    std::vector<int64_t> in;
    int64_t co;
    int k, stride, pad;
  };
  const Case cases[] = {
      {{2, 6, 8, 10, 3}, 5, 3, 1, 1}, {{1, 8, 8, 8, 4}, 8, 4, 2, 1},  {{2, 4, 6, 6, 2}, 3, 1, 1, 0},
      {{1, 5, 7, 9, 1}, 2, 3, 1, 1},  {{1, 8, 12, 12, 6}, 4, 5, 2, 2}, {{2, 4, 4, 4, 7}, 9, 4, 2, 1},
  };
  for (const auto& c : cases) {
    auto in = random_tensor<double>(c.in, rng);
    auto w = random_tensor<double>({c.k, c.k, c.k, c.in[4], c.co}, rng);
    auto b = random_tensor<double>({c.co}, rng);
    auto out = conv_out_shape(in, w, c.stride, c.pad);
    auto ref = conv_out_shape(in, w, c.stride, c.pad);
    kernels::conv3d_forward(in, w, &b, c.stride, c.pad, out);
    refk::conv3d_forward(in, w, &b, c.stride, c.pad, ref);
    CHECK(max_abs_diff(out, ref) < 1e-12);
  }
}

TEST_CASE("conv3d float fast path (8 output channels) matches reference") {
  Rng rng(19);
  for (int64_t ci : {1, 8, 24}) {
    auto in = random_tensor<float>({2, 6, 10, 11, ci}, rng);  // odd width hits the tail path
    auto w = random_tensor<float>({3, 3, 3, ci, 8}, rng);
    auto b = random_tensor<float>({8}, rng);
    Tensor<float> out({2, 6, 10, 11, 8}), ref({2, 6, 10, 11, 8});
    kernels::conv3d_forward(in, w, &b, 1, 1, out);
    refk::conv3d_forward(in, w, &b, 1, 1, ref);
    double worst = 0;
    for (int64_t i = 0; i < out.size(); ++i)
      worst = std::max(worst, std::abs(double(out[i]) - double(ref[i])));
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("conv3d backward matches serial reference") {
  Rng rng(2);
  for (const auto& [stride, pad, k] : {std::array<int, 3>{1, 1, 3}, {2, 1, 4}, {1, 0, 1}}) {
    auto in = random_tensor<double>({2, 6, 8, 8, 3}, rng);
    auto w = random_tensor<double>({k, k, k, 3, 4}, rng);
    auto out = conv_out_shape(in, w, stride, pad);
    auto gout = random_tensor<double>(out.shape(), rng);

    Tensor<double> gin(in.shape()), gin_ref(in.shape());
    kernels::conv3d_backward_data(gout, w, stride, pad, gin);
    refk::conv3d_backward_data(gout, w, stride, pad, gin_ref);
    CHECK(max_abs_diff(gin, gin_ref) < 1e-12);

    Tensor<double> gw(w.shape()), gw_ref(w.shape()), gb({4}), gb_ref({4});
    kernels::conv3d_backward_weights(in, gout, stride, pad, gw, &gb);
    refk::conv3d_backward_weights(in, gout, stride, pad, gw_ref, &gb_ref);
    CHECK(max_abs_diff(gw, gw_ref) < 1e-12);
    CHECK(max_abs_diff(gb, gb_ref) < 1e-12);
  }
}

TEST_CASE("maxpool matches reference for multiscale kernel set") {
  Rng rng(3);
  auto in = random_tensor<double>({2, 6, 8, 10, 5}, rng);
  for (const auto& [k, pad] : {std::pair<int, int>{2, 0}, {3, 1}, {5, 2}}) {
    const int stride = 2;
    std::vector<int64_t> os = {2, 0, 0, 0, 5};
    for (int ax = 0; ax < 3; ++ax) os[size_t(1 + ax)] = (in.dim(1 + ax) + 2 * pad - k) / stride + 1;
    Tensor<double> out(os), ref(os);
    Tensor<int32_t> am(os), am_ref(os);
    kernels::maxpool3d_forward(in, k, stride, pad, out, am);
    refk::maxpool3d_forward(in, k, stride, pad, ref, am_ref);
    CHECK(max_abs_diff(out, ref) == 0.0);
    CHECK(max_abs_diff(am, am_ref) == 0);
  }
}

TEST_CASE("maxpool backward is the exact adjoint scatter") {
  // <pool_bwd(g), x> accumulated via argmax must equal <g, pool_fwd(x)> for
  // the max positions: check the subgradient identity sum(gin * in_at_argmax).
  Rng rng(4);
  auto in = random_tensor<double>({1, 4, 6, 6, 3}, rng);
  std::vector<int64_t> os = {1, 2, 3, 3, 3};
  Tensor<double> out(os);
  Tensor<int32_t> am(os);
  kernels::maxpool3d_forward(in, 2, 2, 0, out, am);
  auto gout = random_tensor<double>(os, rng);
  Tensor<double> gin(in.shape());
  kernels::maxpool3d_backward(gout, am, gin, 2, 2, 0);
  // Every gradient entry lands exactly on its argmax voxel.
  double total_g = 0, total_gin = 0;
  for (int64_t i = 0; i < gout.size(); ++i) total_g += gout[i];
  for (int64_t i = 0; i < gin.size(); ++i) total_gin += gin[i];
  CHECK(total_g == doctest::Approx(total_gin).epsilon(1e-12));
}

TEST_CASE("avgpool and upsample match reference") {
  Rng rng(5);
  auto in = random_tensor<double>({2, 4, 6, 8, 3}, rng);
  Tensor<double> down({2, 2, 3, 4, 3}), down_ref({2, 2, 3, 4, 3});
  kernels::avgpool3d_forward(in, {2, 2, 2}, down);
  refk::avgpool3d_forward(in, {2, 2, 2}, down_ref);
  CHECK(max_abs_diff(down, down_ref) < 1e-12);

  Tensor<double> up({2, 8, 12, 16, 3}), up_ref({2, 8, 12, 16, 3});
  kernels::upsample3d_forward(in, {2, 2, 2}, up);
  refk::upsample3d_forward(in, {2, 2, 2}, up_ref);
  CHECK(max_abs_diff(up, up_ref) < 1e-12);

  // Anisotropic factors (PGGAN final stage).
  Tensor<double> upa({2, 4, 12, 16, 3}), upa_ref({2, 4, 12, 16, 3});
  kernels::upsample3d_forward(in, {1, 2, 2}, upa);
  refk::upsample3d_forward(in, {1, 2, 2}, upa_ref);
  CHECK(max_abs_diff(upa, upa_ref) < 1e-12);
}

TEST_CASE("upsample/avgpool backward satisfy the adjoint identity") {
  // <A x, y> == <x, A^T y> over random x, y.
  Rng rng(6);
  auto x = random_tensor<double>({1, 4, 4, 6, 2}, rng);
  for (std::array<int, 3> f : {std::array<int, 3>{2, 2, 2}, {1, 2, 2}}) {
    Tensor<double> ax({1, 4 * f[0], 4 * f[1], 6 * f[2], 2});
    kernels::upsample3d_forward(x, f, ax);
    auto y = random_tensor<double>(ax.shape(), rng);
    Tensor<double> aty(x.shape());
    kernels::upsample3d_backward(y, f, aty);
    double lhs = 0, rhs = 0;
    for (int64_t i = 0; i < ax.size(); ++i) lhs += ax[i] * y[i];
    for (int64_t i = 0; i < x.size(); ++i) rhs += x[i] * aty[i];
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-10));

    Tensor<double> px({1, 4 / f[0], 4 / f[1], 6 / f[2], 2});
    kernels::avgpool3d_forward(x, f, px);
    auto py = random_tensor<double>(px.shape(), rng);
    Tensor<double> paty(x.shape());
    kernels::avgpool3d_backward(py, f, paty);
    lhs = rhs = 0;
    for (int64_t i = 0; i < px.size(); ++i) lhs += px[i] * py[i];
    for (int64_t i = 0; i < x.size(); ++i) rhs += x[i] * paty[i];
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-10));
  }
}

TEST_CASE("softmax matches reference and sums to one") {
  Rng rng(7);
  auto in = random_tensor<double>({2, 2, 3, 3, 6}, rng, -5.0, 5.0);
  Tensor<double> out(in.shape()), ref(in.shape());
  kernels::softmax_channels_forward(in, out);
  refk::softmax_channels_forward(in, ref);
  CHECK(max_abs_diff(out, ref) < 1e-12);
  for (int64_t r = 0; r < in.size() / 6; ++r) {
    double s = 0;
    for (int64_t c = 0; c < 6; ++c) s += out[r * 6 + c];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("deterministic reductions match reference exactly") {
  Rng rng(8);
  auto in = random_tensor<float>({1, 10, 33, 17, 3}, rng);
  CHECK(kernels::reduce_sum_all(in) == refk::reduce_sum_all(in));

  auto big = random_tensor<double>({2, 16, 32, 32, 8}, rng);
  CHECK(kernels::reduce_sum_all(big) == refk::reduce_sum_all(big));
}

TEST_CASE("moments_nc computes per-sample per-channel statistics") {
  Rng rng(9);
  auto in = random_tensor<double>({2, 3, 4, 5, 6}, rng);
  Tensor<double> mean({2, 6}), var({2, 6});
  kernels::moments_nc(in, mean, var);
  const int64_t vox = 3 * 4 * 5;
  for (int64_t n = 0; n < 2; ++n)
    for (int64_t c = 0; c < 6; ++c) {
      double s = 0, s2 = 0;
      for (int64_t z = 0; z < 3; ++z)
        for (int64_t h = 0; h < 4; ++h)
          for (int64_t w = 0; w < 5; ++w) {
            const double v = in.at(n, z, h, w, c);
            s += v;
            s2 += v * v;
          }
      const double mu = s / vox;
      CHECK(mean.at(n, c) == doctest::Approx(mu).epsilon(1e-10));
      CHECK(var.at(n, c) == doctest::Approx(s2 / vox - mu * mu).epsilon(1e-8));
    }
}
