#include "vseg/reference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace vseg::refk {

template <typename T>
void conv3d_forward(const Tensor<T>& in, const Tensor<T>& w, const Tensor<T>* bias, int stride,
                    int pad, Tensor<T>& out) {
  const int64_t n = in.dim(0), zi = in.dim(1), hi = in.dim(2), wi = in.dim(3), ci = in.dim(4);
  const int64_t k = w.dim(0), co = w.dim(4);
  for (int64_t ni = 0; ni < n; ++ni)
    for (int64_t zo = 0; zo < out.dim(1); ++zo)
      for (int64_t ho = 0; ho < out.dim(2); ++ho)
        for (int64_t wo = 0; wo < out.dim(3); ++wo)
          for (int64_t oc = 0; oc < co; ++oc) {
            T acc = bias ? (*bias)[oc] : T(0);
            for (int64_t kz = 0; kz < k; ++kz)
              for (int64_t ky = 0; ky < k; ++ky)
                for (int64_t kx = 0; kx < k; ++kx) {
                  const int64_t z = zo * stride + kz - pad;
                  const int64_t h = ho * stride + ky - pad;
                  const int64_t x = wo * stride + kx - pad;
                  if (z < 0 || z >= zi || h < 0 || h >= hi || x < 0 || x >= wi) continue;
                  for (int64_t c = 0; c < ci; ++c)
                    acc += in.at(ni, z, h, x, c) * w.at(kz, ky, kx, c, oc);
                }
            out.at(ni, zo, ho, wo, oc) = acc;
          }
}

template <typename T>
void conv3d_backward_data(const Tensor<T>& gout, const Tensor<T>& w, int stride, int pad,
                          Tensor<T>& gin) {
  const int64_t k = w.dim(0), ci = w.dim(3), co = w.dim(4);
  for (int64_t ni = 0; ni < gout.dim(0); ++ni)
    for (int64_t zo = 0; zo < gout.dim(1); ++zo)
      for (int64_t ho = 0; ho < gout.dim(2); ++ho)
        for (int64_t wo = 0; wo < gout.dim(3); ++wo)
          for (int64_t kz = 0; kz < k; ++kz)
            for (int64_t ky = 0; ky < k; ++ky)
              for (int64_t kx = 0; kx < k; ++kx) {
                const int64_t z = zo * stride + kz - pad;
                const int64_t h = ho * stride + ky - pad;
                const int64_t x = wo * stride + kx - pad;
                if (z < 0 || z >= gin.dim(1) || h < 0 || h >= gin.dim(2) || x < 0 ||
                    x >= gin.dim(3))
                  continue;
                for (int64_t c = 0; c < ci; ++c)
                  for (int64_t oc = 0; oc < co; ++oc)
                    gin.at(ni, z, h, x, c) += gout.at(ni, zo, ho, wo, oc) * w.at(kz, ky, kx, c, oc);
              }
}

template <typename T>
void conv3d_backward_weights(const Tensor<T>& in, const Tensor<T>& gout, int stride, int pad,
                             Tensor<T>& gw, Tensor<T>* gb) {
  const int64_t k = gw.dim(0), ci = gw.dim(3), co = gw.dim(4);
  for (int64_t ni = 0; ni < gout.dim(0); ++ni)
    for (int64_t zo = 0; zo < gout.dim(1); ++zo)
      for (int64_t ho = 0; ho < gout.dim(2); ++ho)
        for (int64_t wo = 0; wo < gout.dim(3); ++wo) {
          for (int64_t oc = 0; oc < co; ++oc) {
            const T g = gout.at(ni, zo, ho, wo, oc);
            if (gb) (*gb)[oc] += g;
            for (int64_t kz = 0; kz < k; ++kz)
              for (int64_t ky = 0; ky < k; ++ky)
                for (int64_t kx = 0; kx < k; ++kx) {
                  const int64_t z = zo * stride + kz - pad;
                  const int64_t h = ho * stride + ky - pad;
                  const int64_t x = wo * stride + kx - pad;
                  if (z < 0 || z >= in.dim(1) || h < 0 || h >= in.dim(2) || x < 0 ||
                      x >= in.dim(3))
                    continue;
                  for (int64_t c = 0; c < ci; ++c)
                    gw.at(kz, ky, kx, c, oc) += in.at(ni, z, h, x, c) * g;
                }
          }
        }
}

template <typename T>
void maxpool3d_forward(const Tensor<T>& in, int k, int stride, int pad, Tensor<T>& out,
                       Tensor<int32_t>& argmax) {
  const int64_t zi = in.dim(1), hi = in.dim(2), wi = in.dim(3), c = in.dim(4);
  for (int64_t ni = 0; ni < in.dim(0); ++ni)
    for (int64_t zo = 0; zo < out.dim(1); ++zo)
      for (int64_t ho = 0; ho < out.dim(2); ++ho)
        for (int64_t wo = 0; wo < out.dim(3); ++wo)
          for (int64_t cc = 0; cc < c; ++cc) {
            T best = std::numeric_limits<T>::lowest();
            int32_t bi = -1;
            for (int64_t kz = 0; kz < k; ++kz)
              for (int64_t ky = 0; ky < k; ++ky)
                for (int64_t kx = 0; kx < k; ++kx) {
                  const int64_t z = zo * stride + kz - pad;
                  const int64_t h = ho * stride + ky - pad;
                  const int64_t x = wo * stride + kx - pad;
                  if (z < 0 || z >= zi || h < 0 || h >= hi || x < 0 || x >= wi) continue;
                  const T v = in.at(ni, z, h, x, cc);
                  if (v > best) {
                    best = v;
                    bi = int32_t((z * hi + h) * wi + x);
                  }
                }
            out.at(ni, zo, ho, wo, cc) = best;
            argmax.at(ni, zo, ho, wo, cc) = bi;
          }
}

template <typename T>
void avgpool3d_forward(const Tensor<T>& in, std::array<int, 3> f, Tensor<T>& out) {
  const T scale = T(1) / T(f[0] * f[1] * f[2]);
  for (int64_t ni = 0; ni < in.dim(0); ++ni)
    for (int64_t zo = 0; zo < out.dim(1); ++zo)
      for (int64_t ho = 0; ho < out.dim(2); ++ho)
        for (int64_t wo = 0; wo < out.dim(3); ++wo)
          for (int64_t cc = 0; cc < in.dim(4); ++cc) {
            T acc = T(0);
            for (int64_t kz = 0; kz < f[0]; ++kz)
              for (int64_t ky = 0; ky < f[1]; ++ky)
                for (int64_t kx = 0; kx < f[2]; ++kx)
                  acc += in.at(ni, zo * f[0] + kz, ho * f[1] + ky, wo * f[2] + kx, cc);
            out.at(ni, zo, ho, wo, cc) = acc * scale;
          }
}

template <typename T>
void upsample3d_forward(const Tensor<T>& in, std::array<int, 3> f, Tensor<T>& out) {
  const int64_t zi = in.dim(1), hi = in.dim(2), wi = in.dim(3), c = in.dim(4);
  auto sample = [&](int64_t ni, double z, double h, double w, int64_t cc) {
    auto clampi = [](int64_t v, int64_t n) { return std::min(std::max<int64_t>(v, 0), n - 1); };
    const int64_t z0 = clampi(int64_t(std::floor(z)), zi), z1 = clampi(z0 + 1, zi);
    const int64_t h0 = clampi(int64_t(std::floor(h)), hi), h1 = clampi(h0 + 1, hi);
    const int64_t w0 = clampi(int64_t(std::floor(w)), wi), w1 = clampi(w0 + 1, wi);
    const double tz = std::min(std::max(z - double(std::floor(z)), 0.0), 1.0);
    const double th = std::min(std::max(h - double(std::floor(h)), 0.0), 1.0);
    const double tw = std::min(std::max(w - double(std::floor(w)), 0.0), 1.0);
    double acc = 0.0;
    for (int a = 0; a < 2; ++a)
      for (int b = 0; b < 2; ++b)
        for (int e = 0; e < 2; ++e) {
          const double wgt = (a ? tz : 1 - tz) * (b ? th : 1 - th) * (e ? tw : 1 - tw);
          acc += wgt * double(in.at(ni, a ? z1 : z0, b ? h1 : h0, e ? w1 : w0, cc));
        }
    return T(acc);
  };
  for (int64_t ni = 0; ni < in.dim(0); ++ni)
    for (int64_t zo = 0; zo < out.dim(1); ++zo)
      for (int64_t ho = 0; ho < out.dim(2); ++ho)
        for (int64_t wo = 0; wo < out.dim(3); ++wo)
          for (int64_t cc = 0; cc < c; ++cc) {
            const double z = (double(zo) + 0.5) / f[0] - 0.5;
            const double h = (double(ho) + 0.5) / f[1] - 0.5;
            const double w = (double(wo) + 0.5) / f[2] - 0.5;
            // Clamp the source coordinate to the grid before interpolating.
            out.at(ni, zo, ho, wo, cc) =
                sample(ni, std::min(std::max(z, 0.0), double(zi - 1)),
                       std::min(std::max(h, 0.0), double(hi - 1)),
                       std::min(std::max(w, 0.0), double(wi - 1)), cc);
          }
}

template <typename T>
void softmax_channels_forward(const Tensor<T>& in, Tensor<T>& out) {
  const int64_t c = in.dim(in.rank() - 1);
  const int64_t rows = in.size() / c;
  for (int64_t r = 0; r < rows; ++r) {
    T mx = in[r * c];
    for (int64_t cc = 1; cc < c; ++cc) mx = std::max(mx, in[r * c + cc]);
    T s = T(0);
    for (int64_t cc = 0; cc < c; ++cc) {
      out[r * c + cc] = std::exp(in[r * c + cc] - mx);
      s += out[r * c + cc];
    }
    for (int64_t cc = 0; cc < c; ++cc) out[r * c + cc] /= s;
  }
}

template <typename T>
T reduce_sum_all(const Tensor<T>& in) {
  // Same fixed-chunk order as the parallel kernel so sums agree bit-for-bit.
  constexpr int64_t kChunk = 4096;
  T total = T(0);
  for (int64_t i0 = 0; i0 < in.size(); i0 += kChunk) {
    T s = T(0);
    const int64_t i1 = std::min(in.size(), i0 + kChunk);
    for (int64_t i = i0; i < i1; ++i) s += in[i];
    total += s;
  }
  return total;
}

#define VSEG_INSTANTIATE(T)                                                                      \
  template void conv3d_forward<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*, int,    \
                                  int, Tensor<T>&);                                             \
  template void conv3d_backward_data<T>(const Tensor<T>&, const Tensor<T>&, int, int,           \
                                        Tensor<T>&);                                            \
  template void conv3d_backward_weights<T>(const Tensor<T>&, const Tensor<T>&, int, int,        \
                                           Tensor<T>&, Tensor<T>*);                             \
  template void maxpool3d_forward<T>(const Tensor<T>&, int, int, int, Tensor<T>&,               \
                                     Tensor<int32_t>&);                                         \
  template void avgpool3d_forward<T>(const Tensor<T>&, std::array<int, 3>, Tensor<T>&);         \
  template void upsample3d_forward<T>(const Tensor<T>&, std::array<int, 3>, Tensor<T>&);        \
  template void softmax_channels_forward<T>(const Tensor<T>&, Tensor<T>&);                      \
  template T reduce_sum_all<T>(const Tensor<T>&);

VSEG_INSTANTIATE(float)
VSEG_INSTANTIATE(double)
#undef VSEG_INSTANTIATE

}  // namespace vseg::refk
