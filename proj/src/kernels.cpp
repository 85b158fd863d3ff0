#include "vseg/kernels.hpp"

#ifdef __AVX512F__
#include <immintrin.h>
#endif

#include <algorithm>
#include <cmath>
#include <cstring>
#include <type_traits>
#include <limits>
#include <vector>

#include "vseg/common.hpp"

namespace vseg::kernels {

namespace {

// Fixed chunk size for deterministic reductions. Partial sums are produced per
// chunk and combined in chunk order, so results do not depend on thread count.
constexpr int64_t kReduceChunk = 4096;

// Fixed partition count for weight-gradient accumulation.
constexpr int kWgradPartitions = 8;

struct ConvDims {
  int64_t n, zi, hi, wi, ci;
  int64_t k, co;
  int64_t zo, ho, wo;
};

template <typename T>
ConvDims conv_dims(const Tensor<T>& in, const Tensor<T>& w, int stride, int pad,
                   const Tensor<T>& out) {
  ConvDims d;
  d.n = in.dim(0), d.zi = in.dim(1), d.hi = in.dim(2), d.wi = in.dim(3), d.ci = in.dim(4);
  d.k = w.dim(0);
  d.co = w.dim(4);
  d.zo = out.dim(1), d.ho = out.dim(2), d.wo = out.dim(3);
  check_arg(w.dim(1) == d.k && w.dim(2) == d.k, "conv3d: kernel must be cubic");
  check_arg(w.dim(3) == d.ci, "conv3d: weight Ci mismatch");
  check_arg(out.dim(0) == d.n && out.dim(4) == d.co, "conv3d: output shape mismatch");
  for (int ax = 0; ax < 3; ++ax) {
    const int64_t din = in.dim(1 + ax), dout = out.dim(1 + ax);
    check_arg((din + 2 * pad - d.k) / stride + 1 == dout, "conv3d: spatial shape mismatch");
  }
  return d;
}

// Trilinear interpolation table for one axis: out index -> (i0, i1, t).
struct LerpTap {
  int64_t i0, i1;
  double t;  // out = (1-t)*in[i0] + t*in[i1]
};

std::vector<LerpTap> lerp_table(int64_t n_in, int f) {
  std::vector<LerpTap> tab(static_cast<size_t>(n_in) * f);
  for (int64_t o = 0; o < n_in * f; ++o) {
    const double x = (double(o) + 0.5) / f - 0.5;
    double fl = std::floor(x);
    int64_t i0 = int64_t(fl);
    double t = x - fl;
    if (i0 < 0) {
      i0 = 0;
      t = 0.0;
    }
    int64_t i1 = i0 + 1;
    if (i1 > n_in - 1) {
      i1 = n_in - 1;
      t = 0.0;
    }
    tab[size_t(o)] = {i0, i1, t};
  }
  return tab;
}

// Inverse of lerp_table: for each input index, the (out index, weight) pairs.
std::vector<std::vector<std::pair<int64_t, double>>> lerp_adjoint(
    const std::vector<LerpTap>& tab, int64_t n_in) {
  std::vector<std::vector<std::pair<int64_t, double>>> inv(static_cast<size_t>(n_in));
  for (int64_t o = 0; o < int64_t(tab.size()); ++o) {
    const auto& tp = tab[size_t(o)];
    if (1.0 - tp.t != 0.0) inv[size_t(tp.i0)].emplace_back(o, 1.0 - tp.t);
    if (tp.t != 0.0) inv[size_t(tp.i1)].emplace_back(o, tp.t);
  }
  return inv;
}

}  // namespace

#ifdef __AVX512F__
namespace {

// Stride-1 forward for exactly 8 output channels: two adjacent output voxels
// share each weight row inside one 16-lane accumulator.
void conv3d_forward_pair8(const Tensor<float>& in, const Tensor<float>& w,
                          const Tensor<float>* bias, int pad, Tensor<float>& out) {
  const int64_t N = in.dim(0), Zi = in.dim(1), Hi = in.dim(2), Wi = in.dim(3), Ci = in.dim(4);
  const int64_t K = w.dim(0);
  const int64_t Zo = out.dim(1), Ho = out.dim(2), Wo = out.dim(3);
  const float* __restrict ip = in.data();
  const float* __restrict wp = w.data();
  const float* __restrict bp = bias ? bias->data() : nullptr;
  float* __restrict op = out.data();

#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t zo = 0; zo < Zo; ++zo) {
      for (int64_t ho = 0; ho < Ho; ++ho) {
        int64_t wo = 0;
        for (; wo + 2 <= Wo; wo += 2) {
          __m512 acc;
          if (bp) {
            const __m256 b8 = _mm256_loadu_ps(bp);
            acc = _mm512_insertf32x8(_mm512_castps256_ps512(b8), b8, 1);
          } else {
            acc = _mm512_setzero_ps();
          }
          for (int64_t kz = 0; kz < K; ++kz) {
            const int64_t z = zo + kz - pad;
            if (z < 0 || z >= Zi) continue;
            for (int64_t ky = 0; ky < K; ++ky) {
              const int64_t h = ho + ky - pad;
              if (h < 0 || h >= Hi) continue;
              const float* __restrict plane = ip + ((n * Zi + z) * Hi + h) * Wi * Ci;
              for (int64_t kx = 0; kx < K; ++kx) {
                const int64_t x0 = wo + kx - pad, x1 = x0 + 1;
                const float* __restrict wrow = wp + (((kz * K + ky) * K + kx) * Ci) * 8;
                const bool v0 = x0 >= 0 && x0 < Wi, v1 = x1 >= 0 && x1 < Wi;
                if (v0 && v1) {
                  const float* __restrict r0 = plane + x0 * Ci;
                  const float* __restrict r1 = plane + x1 * Ci;
                  for (int64_t c = 0; c < Ci; ++c) {
                    const __m512 wv = _mm512_broadcast_f32x8(_mm256_loadu_ps(wrow + c * 8));
                    const __m512 av = _mm512_insertf32x8(
                        _mm512_castps256_ps512(_mm256_set1_ps(r0[c])), _mm256_set1_ps(r1[c]), 1);
                    acc = _mm512_fmadd_ps(av, wv, acc);
                  }
                } else if (v0 || v1) {
                  const float* __restrict r = plane + (v0 ? x0 : x1) * Ci;
                  __m256 a8 = _mm256_setzero_ps();
                  for (int64_t c = 0; c < Ci; ++c)
                    a8 = _mm256_fmadd_ps(_mm256_set1_ps(r[c]), _mm256_loadu_ps(wrow + c * 8), a8);
                  acc = _mm512_add_ps(acc, v0 ? _mm512_insertf32x8(_mm512_setzero_ps(), a8, 0)
                                              : _mm512_insertf32x8(_mm512_setzero_ps(), a8, 1));
                }
              }
            }
          }
          _mm512_storeu_ps(op + (((n * Zo + zo) * Ho + ho) * Wo + wo) * 8, acc);
        }
        for (; wo < Wo; ++wo) {
          float acc[8];
          if (bp) std::memcpy(acc, bp, 32);
          else std::memset(acc, 0, 32);
          for (int64_t kz = 0; kz < K; ++kz) {
            const int64_t z = zo + kz - pad;
            if (z < 0 || z >= Zi) continue;
            for (int64_t ky = 0; ky < K; ++ky) {
              const int64_t h = ho + ky - pad;
              if (h < 0 || h >= Hi) continue;
              const float* __restrict plane = ip + ((n * Zi + z) * Hi + h) * Wi * Ci;
              for (int64_t kx = 0; kx < K; ++kx) {
                const int64_t x = wo + kx - pad;
                if (x < 0 || x >= Wi) continue;
                const float* __restrict irow = plane + x * Ci;
                const float* __restrict wrow = wp + (((kz * K + ky) * K + kx) * Ci) * 8;
                for (int64_t c = 0; c < Ci; ++c) {
                  const float a = irow[c];
#pragma omp simd
                  for (int oc = 0; oc < 8; ++oc) acc[oc] += a * wrow[c * 8 + oc];
                }
              }
            }
          }
          std::memcpy(op + (((n * Zo + zo) * Ho + ho) * Wo + wo) * 8, acc, 32);
        }
      }
    }
  }
}

}  // namespace
#endif  // __AVX512F__

template <typename T>
void conv3d_forward(const Tensor<T>& in, const Tensor<T>& w, const Tensor<T>* bias, int stride,
                    int pad, Tensor<T>& out) {
  const ConvDims d = conv_dims(in, w, stride, pad, out);
#ifdef __AVX512F__
  if constexpr (std::is_same_v<T, float>) {
    if (d.co == 8 && stride == 1) {
      conv3d_forward_pair8(in, w, bias, pad, out);
      return;
    }
  }
#endif
  const T* __restrict ip = in.data();
  const T* __restrict wp = w.data();
  const T* __restrict bp = bias ? bias->data() : nullptr;
  T* __restrict op = out.data();
  const int64_t ci = d.ci, co = d.co, k = d.k;

#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t n = 0; n < d.n; ++n) {
    for (int64_t zo = 0; zo < d.zo; ++zo) {
      std::vector<T> acc(static_cast<size_t>(d.wo * co));
      for (int64_t ho = 0; ho < d.ho; ++ho) {
        if (bp) {
          for (int64_t woi = 0; woi < d.wo; ++woi)
            std::memcpy(acc.data() + woi * co, bp, size_t(co) * sizeof(T));
        } else {
          std::fill(acc.begin(), acc.end(), T(0));
        }
        for (int64_t kz = 0; kz < k; ++kz) {
          const int64_t z = zo * stride + kz - pad;
          if (z < 0 || z >= d.zi) continue;
          for (int64_t ky = 0; ky < k; ++ky) {
            const int64_t h = ho * stride + ky - pad;
            if (h < 0 || h >= d.hi) continue;
            const T* __restrict irow_base = ip + ((n * d.zi + z) * d.hi + h) * d.wi * ci;
            for (int64_t kx = 0; kx < k; ++kx) {
              const T* __restrict wbase = wp + (((kz * k + ky) * k + kx) * ci) * co;
              const int64_t w0 = std::max<int64_t>(0, (pad - kx + stride - 1) / stride);
              for (int64_t wo_i = w0; wo_i < d.wo; ++wo_i) {
                const int64_t x = wo_i * stride + kx - pad;
                if (x >= d.wi) break;
                const T* __restrict irow = irow_base + x * ci;
                T* __restrict arow = acc.data() + wo_i * co;
                for (int64_t c = 0; c < ci; ++c) {
                  const T a = irow[c];
                  const T* __restrict wrow = wbase + c * co;
#pragma omp simd
                  for (int64_t oc = 0; oc < co; ++oc) arow[oc] += a * wrow[oc];
                }
              }
            }
          }
        }
        std::memcpy(op + ((n * d.zo + zo) * d.ho + ho) * d.wo * co, acc.data(),
                    size_t(d.wo * co) * sizeof(T));
      }
    }
  }
}

namespace {

template <typename T, int kStride>
void conv3d_backward_data_impl(const Tensor<T>& gout, const std::vector<T>& wt,
                               const ConvDims& d, int pad, Tensor<T>& gin) {
  const int64_t ci = d.ci, co = d.co, k = d.k;
  const T* __restrict gp = gout.data();
  T* __restrict xp = gin.data();

#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t n = 0; n < d.n; ++n) {
    for (int64_t zi = 0; zi < d.zi; ++zi) {
      std::vector<T> acc(static_cast<size_t>(d.wi * ci));
      for (int64_t hi = 0; hi < d.hi; ++hi) {
        std::fill(acc.begin(), acc.end(), T(0));
        for (int64_t kz = 0; kz < k; ++kz) {
          const int64_t zn = zi + pad - kz;
          if (zn < 0 || zn % kStride) continue;
          const int64_t zo = zn / kStride;
          if (zo >= d.zo) continue;
          for (int64_t ky = 0; ky < k; ++ky) {
            const int64_t hn = hi + pad - ky;
            if (hn < 0 || hn % kStride) continue;
            const int64_t ho = hn / kStride;
            if (ho >= d.ho) continue;
            const T* __restrict grow_base = gp + ((n * d.zo + zo) * d.ho + ho) * d.wo * co;
            for (int64_t kx = 0; kx < k; ++kx) {
              const T* __restrict wbase = wt.data() + ((kz * k + ky) * k + kx) * co * ci;
              const int64_t w_first = std::max<int64_t>(0, kx - pad);
              for (int64_t wi_i = w_first; wi_i < d.wi; ++wi_i) {
                const int64_t wn = wi_i + pad - kx;
                if (kStride > 1 && wn % kStride) continue;
                const int64_t wo_i = wn / kStride;
                if (wo_i >= d.wo) break;
                const T* __restrict grow = grow_base + wo_i * co;
                T* __restrict arow = acc.data() + wi_i * ci;
                for (int64_t oc = 0; oc < co; ++oc) {
                  const T g = grow[oc];
                  const T* __restrict wrow = wbase + oc * ci;
#pragma omp simd
                  for (int64_t c = 0; c < ci; ++c) arow[c] += g * wrow[c];
                }
              }
            }
          }
        }
        T* __restrict dst = xp + ((n * d.zi + zi) * d.hi + hi) * d.wi * ci;
#pragma omp simd
        for (int64_t i = 0; i < d.wi * ci; ++i) dst[i] += acc[size_t(i)];
      }
    }
  }
}

}  // namespace

template <typename T>
void conv3d_backward_data(const Tensor<T>& gout, const Tensor<T>& w, int stride, int pad,
                          Tensor<T>& gin) {
  const ConvDims d = conv_dims(gin, w, stride, pad, gout);
  const int64_t ci = d.ci, co = d.co, k = d.k;
  // Transposed weights (kz,ky,kx,Co,Ci) so the inner loop runs over contiguous Ci.
  std::vector<T> wt(static_cast<size_t>(w.size()));
  {
    const T* wp = w.data();
#pragma omp parallel for schedule(static)
    for (int64_t tap = 0; tap < k * k * k; ++tap)
      for (int64_t c = 0; c < ci; ++c)
        for (int64_t oc = 0; oc < co; ++oc)
          wt[size_t((tap * co + oc) * ci + c)] = wp[(tap * ci + c) * co + oc];
  }
  if (stride == 1) {
    conv3d_backward_data_impl<T, 1>(gout, wt, d, pad, gin);
  } else if (stride == 2) {
    conv3d_backward_data_impl<T, 2>(gout, wt, d, pad, gin);
  } else {
    check_arg(false, "conv3d_backward_data: unsupported stride");
  }
}

template <typename T>
void conv3d_backward_weights(const Tensor<T>& in, const Tensor<T>& gout, int stride, int pad,
                             Tensor<T>& gw, Tensor<T>* gb) {
  const ConvDims d = conv_dims(in, gw, stride, pad, gout);
  const int64_t ci = d.ci, co = d.co, k = d.k;
  const int64_t wsize = gw.size();
  const int64_t rows = d.n * d.zo;  // partitioned work space
  const int parts = int(std::min<int64_t>(kWgradPartitions, rows));

  std::vector<std::vector<T>> wpart(static_cast<size_t>(parts));
  std::vector<std::vector<T>> bpart(static_cast<size_t>(parts));
  const T* __restrict ip = in.data();
  const T* __restrict gp = gout.data();

  // Narrow output channels underuse the SIMD lanes; accumulate transposed
  // (tap, co, ci) in that case and swap back while combining.
  const bool transposed = co < 16 && ci > co;

#pragma omp parallel for schedule(static)
  for (int p = 0; p < parts; ++p) {
    auto& lw = wpart[size_t(p)];
    lw.assign(size_t(wsize), T(0));
    auto& lb = bpart[size_t(p)];
    lb.assign(size_t(co), T(0));
    const int64_t r0 = rows * p / parts, r1 = rows * (p + 1) / parts;
    for (int64_t r = r0; r < r1; ++r) {
      const int64_t n = r / d.zo, zo = r % d.zo;
      for (int64_t ho = 0; ho < d.ho; ++ho) {
        const T* __restrict grow_base = gp + ((n * d.zo + zo) * d.ho + ho) * d.wo * co;
        if (gb) {
          for (int64_t wo_i = 0; wo_i < d.wo; ++wo_i) {
            const T* __restrict grow = grow_base + wo_i * co;
#pragma omp simd
            for (int64_t oc = 0; oc < co; ++oc) lb[size_t(oc)] += grow[oc];
          }
        }
        for (int64_t kz = 0; kz < k; ++kz) {
          const int64_t z = zo * stride + kz - pad;
          if (z < 0 || z >= d.zi) continue;
          for (int64_t ky = 0; ky < k; ++ky) {
            const int64_t h = ho * stride + ky - pad;
            if (h < 0 || h >= d.hi) continue;
            const T* __restrict irow_base = ip + ((n * d.zi + z) * d.hi + h) * d.wi * ci;
            for (int64_t kx = 0; kx < k; ++kx) {
              T* __restrict wbase = lw.data() + (((kz * k + ky) * k + kx) * ci) * co;
              for (int64_t wo_i = 0; wo_i < d.wo; ++wo_i) {
                const int64_t x = wo_i * stride + kx - pad;
                if (x < 0 || x >= d.wi) continue;
                const T* __restrict irow = irow_base + x * ci;
                const T* __restrict grow = grow_base + wo_i * co;
                if (transposed) {
                  for (int64_t oc = 0; oc < co; ++oc) {
                    const T g = grow[oc];
                    T* __restrict wrow = wbase + oc * ci;
#pragma omp simd
                    for (int64_t c = 0; c < ci; ++c) wrow[c] += g * irow[c];
                  }
                } else {
                  for (int64_t c = 0; c < ci; ++c) {
                    const T a = irow[c];
                    T* __restrict wrow = wbase + c * co;
#pragma omp simd
                    for (int64_t oc = 0; oc < co; ++oc) wrow[oc] += a * grow[oc];
                  }
                }
              }
            }
          }
        }
      }
    }
  }
  // Combine partials in fixed partition order.
  T* __restrict gwp = gw.data();
  for (int p = 0; p < parts; ++p) {
    const T* __restrict lw = wpart[size_t(p)].data();
    if (transposed) {
#pragma omp parallel for schedule(static)
      for (int64_t tap = 0; tap < k * k * k; ++tap)
        for (int64_t oc = 0; oc < co; ++oc)
          for (int64_t c = 0; c < ci; ++c)
            gwp[(tap * ci + c) * co + oc] += lw[(tap * co + oc) * ci + c];
    } else {
#pragma omp parallel for schedule(static)
      for (int64_t i = 0; i < wsize; ++i) gwp[i] += lw[i];
    }
  }
  if (gb) {
    T* gbp = gb->data();
    for (int p = 0; p < parts; ++p)
      for (int64_t oc = 0; oc < co; ++oc) gbp[oc] += bpart[size_t(p)][size_t(oc)];
  }
}

template <typename T>
void maxpool3d_forward(const Tensor<T>& in, int k, int stride, int pad, Tensor<T>& out,
                       Tensor<int32_t>& argmax) {
  const int64_t n = in.dim(0), zi = in.dim(1), hi = in.dim(2), wi = in.dim(3), c = in.dim(4);
  const int64_t zo = out.dim(1), ho = out.dim(2), wo = out.dim(3);
  const T* __restrict ip = in.data();
  T* __restrict op = out.data();
  int32_t* __restrict ap = argmax.data();

#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t ni = 0; ni < n; ++ni) {
    for (int64_t z = 0; z < zo; ++z) {
      std::vector<T> best(static_cast<size_t>(c));
      std::vector<int32_t> bidx(static_cast<size_t>(c));
      for (int64_t h = 0; h < ho; ++h) {
        for (int64_t w = 0; w < wo; ++w) {
          std::fill(best.begin(), best.end(), std::numeric_limits<T>::lowest());
          std::fill(bidx.begin(), bidx.end(), -1);
          for (int64_t kz = 0; kz < k; ++kz) {
            const int64_t iz = z * stride + kz - pad;
            if (iz < 0 || iz >= zi) continue;
            for (int64_t ky = 0; ky < k; ++ky) {
              const int64_t iy = h * stride + ky - pad;
              if (iy < 0 || iy >= hi) continue;
              for (int64_t kx = 0; kx < k; ++kx) {
                const int64_t ix = w * stride + kx - pad;
                if (ix < 0 || ix >= wi) continue;
                const int32_t lin = int32_t((iz * hi + iy) * wi + ix);
                const T* __restrict irow = ip + (((ni * zi + iz) * hi + iy) * wi + ix) * c;
                for (int64_t cc = 0; cc < c; ++cc) {
                  if (irow[cc] > best[size_t(cc)]) {
                    best[size_t(cc)] = irow[cc];
                    bidx[size_t(cc)] = lin;
                  }
                }
              }
            }
          }
          const int64_t off = (((ni * zo + z) * ho + h) * wo + w) * c;
          for (int64_t cc = 0; cc < c; ++cc) {
            op[off + cc] = best[size_t(cc)];
            ap[off + cc] = bidx[size_t(cc)];
          }
        }
      }
    }
  }
}

template <typename T>
void maxpool3d_backward(const Tensor<T>& gout, const Tensor<int32_t>& argmax, Tensor<T>& gin,
                        int k, int stride, int pad) {
  const int64_t n = gin.dim(0), zi = gin.dim(1), hi = gin.dim(2), wi = gin.dim(3), c = gin.dim(4);
  const int64_t zo = gout.dim(1), ho = gout.dim(2), wo = gout.dim(3);
  const T* __restrict gp = gout.data();
  const int32_t* __restrict ap = argmax.data();
  T* __restrict xp = gin.data();

  // Gather form: each input voxel scans only the output cells whose window
  // covers it, so writes are disjoint and the result is thread-invariant.
  auto cell_range = [&](int64_t v, int64_t no, int64_t& lo, int64_t& hi_excl) {
    // smallest o with o*stride - pad + k > v, largest o with o*stride - pad <= v
    int64_t first = (v + pad - k + stride) / stride;  // ceil((v+pad-k+1)/stride)
    if (v + pad - k + 1 < 0) first = 0;
    lo = std::max<int64_t>(0, first);
    hi_excl = std::min(no, (v + pad) / stride + 1);
  };

#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t ni = 0; ni < n; ++ni) {
    for (int64_t z = 0; z < zi; ++z) {
      int64_t z0, z1;
      cell_range(z, zo, z0, z1);
      for (int64_t h = 0; h < hi; ++h) {
        int64_t h0, h1;
        cell_range(h, ho, h0, h1);
        for (int64_t w = 0; w < wi; ++w) {
          int64_t w0, w1;
          cell_range(w, wo, w0, w1);
          const int32_t lin = int32_t((z * hi + h) * wi + w);
          T* __restrict dst = xp + (((ni * zi + z) * hi + h) * wi + w) * c;
          for (int64_t oz = z0; oz < z1; ++oz) {
            for (int64_t oh = h0; oh < h1; ++oh) {
              for (int64_t ow = w0; ow < w1; ++ow) {
                const int64_t off = (((ni * zo + oz) * ho + oh) * wo + ow) * c;
                for (int64_t cc = 0; cc < c; ++cc)
                  if (ap[off + cc] == lin) dst[cc] += gp[off + cc];
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void avgpool3d_forward(const Tensor<T>& in, std::array<int, 3> f, Tensor<T>& out) {
  const int64_t n = in.dim(0), zi = in.dim(1), hi = in.dim(2), wi = in.dim(3), c = in.dim(4);
  const int64_t zo = zi / f[0], ho = hi / f[1], wo = wi / f[2];
  const T scale = T(1) / T(f[0] * f[1] * f[2]);
  const T* __restrict ip = in.data();
  T* __restrict op = out.data();

#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t ni = 0; ni < n; ++ni) {
    for (int64_t z = 0; z < zo; ++z) {
      std::vector<T> acc(static_cast<size_t>(c));
      for (int64_t h = 0; h < ho; ++h) {
        for (int64_t w = 0; w < wo; ++w) {
          std::fill(acc.begin(), acc.end(), T(0));
          for (int64_t kz = 0; kz < f[0]; ++kz)
            for (int64_t ky = 0; ky < f[1]; ++ky)
              for (int64_t kx = 0; kx < f[2]; ++kx) {
                const int64_t iz = z * f[0] + kz, iy = h * f[1] + ky, ix = w * f[2] + kx;
                const T* __restrict irow = ip + (((ni * zi + iz) * hi + iy) * wi + ix) * c;
#pragma omp simd
                for (int64_t cc = 0; cc < c; ++cc) acc[size_t(cc)] += irow[cc];
              }
          T* __restrict dst = op + (((ni * zo + z) * ho + h) * wo + w) * c;
#pragma omp simd
          for (int64_t cc = 0; cc < c; ++cc) dst[cc] = acc[size_t(cc)] * scale;
        }
      }
    }
  }
}

template <typename T>
void avgpool3d_backward(const Tensor<T>& gout, std::array<int, 3> f, Tensor<T>& gin) {
  const int64_t n = gin.dim(0), zi = gin.dim(1), hi = gin.dim(2), wi = gin.dim(3), c = gin.dim(4);
  const int64_t zo = zi / f[0], ho = hi / f[1], wo = wi / f[2];
  const T scale = T(1) / T(f[0] * f[1] * f[2]);
  const T* __restrict gp = gout.data();
  T* __restrict xp = gin.data();

#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t ni = 0; ni < n; ++ni) {
    for (int64_t z = 0; z < zi; ++z) {
      for (int64_t h = 0; h < hi; ++h) {
        for (int64_t w = 0; w < wi; ++w) {
          const int64_t off = (((ni * zo + z / f[0]) * ho + h / f[1]) * wo + w / f[2]) * c;
          T* __restrict dst = xp + (((ni * zi + z) * hi + h) * wi + w) * c;
#pragma omp simd
          for (int64_t cc = 0; cc < c; ++cc) dst[cc] += gp[off + cc] * scale;
        }
      }
    }
  }
}

template <typename T>
void upsample3d_forward(const Tensor<T>& in, std::array<int, 3> f, Tensor<T>& out) {
  const int64_t n = in.dim(0), zi = in.dim(1), hi = in.dim(2), wi = in.dim(3), c = in.dim(4);
  const int64_t zo = zi * f[0], ho = hi * f[1], wo = wi * f[2];
  const auto tz = lerp_table(zi, f[0]), ty = lerp_table(hi, f[1]), tx = lerp_table(wi, f[2]);
  const T* __restrict ip = in.data();
  T* __restrict op = out.data();

#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t ni = 0; ni < n; ++ni) {
    for (int64_t z = 0; z < zo; ++z) {
      const auto& az = tz[size_t(z)];
      for (int64_t h = 0; h < ho; ++h) {
        const auto& ay = ty[size_t(h)];
        for (int64_t w = 0; w < wo; ++w) {
          const auto& ax = tx[size_t(w)];
          T* __restrict dst = op + (((ni * zo + z) * ho + h) * wo + w) * c;
          const double wz[2] = {1.0 - az.t, az.t};
          const double wy[2] = {1.0 - ay.t, ay.t};
          const double wx[2] = {1.0 - ax.t, ax.t};
          const int64_t iz[2] = {az.i0, az.i1}, iy[2] = {ay.i0, ay.i1}, ix[2] = {ax.i0, ax.i1};
#pragma omp simd
          for (int64_t cc = 0; cc < c; ++cc) dst[cc] = T(0);
          for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b)
              for (int e = 0; e < 2; ++e) {
                const T wgt = T(wz[a] * wy[b] * wx[e]);
                if (wgt == T(0)) continue;
                const T* __restrict src =
                    ip + (((ni * zi + iz[a]) * hi + iy[b]) * wi + ix[e]) * c;
#pragma omp simd
                for (int64_t cc = 0; cc < c; ++cc) dst[cc] += wgt * src[cc];
              }
        }
      }
    }
  }
}

template <typename T>
void upsample3d_backward(const Tensor<T>& gout, std::array<int, 3> f, Tensor<T>& gin) {
  const int64_t n = gin.dim(0), zi = gin.dim(1), hi = gin.dim(2), wi = gin.dim(3), c = gin.dim(4);
  const auto tz = lerp_table(zi, f[0]), ty = lerp_table(hi, f[1]), tx = lerp_table(wi, f[2]);
  const auto az = lerp_adjoint(tz, zi), ay = lerp_adjoint(ty, hi), ax = lerp_adjoint(tx, wi);
  const int64_t zo = zi * f[0], ho = hi * f[1], wo = wi * f[2];
  const T* __restrict gp = gout.data();
  T* __restrict xp = gin.data();

#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t ni = 0; ni < n; ++ni) {
    for (int64_t z = 0; z < zi; ++z) {
      for (int64_t h = 0; h < hi; ++h) {
        for (int64_t w = 0; w < wi; ++w) {
          T* __restrict dst = xp + (((ni * zi + z) * hi + h) * wi + w) * c;
          for (const auto& [oz, wgtz] : az[size_t(z)])
            for (const auto& [oh, wgty] : ay[size_t(h)])
              for (const auto& [ow, wgtx] : ax[size_t(w)]) {
                const T wgt = T(wgtz * wgty * wgtx);
                const T* __restrict src = gp + (((ni * zo + oz) * ho + oh) * wo + ow) * c;
#pragma omp simd
                for (int64_t cc = 0; cc < c; ++cc) dst[cc] += wgt * src[cc];
              }
        }
      }
    }
  }
}

namespace {

// Chunked per-(n,c) reduction: op(acc[c], a_row, b_row) over spatial voxels.
template <typename T, typename F>
void reduce_nc_impl(const Tensor<T>& a, const T* b, Tensor<T>& out, F&& accum) {
  const int64_t n = a.dim(0), c = a.dim(4);
  const int64_t vox = a.dim(1) * a.dim(2) * a.dim(3);
  const int64_t nchunks = (vox + kReduceChunk - 1) / kReduceChunk;
  std::vector<T> partial(static_cast<size_t>(n * nchunks * c), T(0));
  const T* __restrict ap = a.data();

#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t ni = 0; ni < n; ++ni) {
    for (int64_t ch = 0; ch < nchunks; ++ch) {
      T* __restrict acc = partial.data() + (ni * nchunks + ch) * c;
      const int64_t v0 = ch * kReduceChunk, v1 = std::min(vox, v0 + kReduceChunk);
      for (int64_t v = v0; v < v1; ++v) {
        const T* __restrict arow = ap + (ni * vox + v) * c;
        const T* __restrict brow = b ? b + (ni * vox + v) * c : nullptr;
        accum(acc, arow, brow, c);
      }
    }
  }
  out.fill(T(0));
  T* op = out.data();
  for (int64_t ni = 0; ni < n; ++ni)
    for (int64_t ch = 0; ch < nchunks; ++ch)
      for (int64_t cc = 0; cc < c; ++cc)
        op[ni * c + cc] += partial[size_t((ni * nchunks + ch) * c + cc)];
}

}  // namespace

template <typename T>
void reduce_sum_nc(const Tensor<T>& a, Tensor<T>& out) {
  reduce_nc_impl(a, (const T*)nullptr, out,
                 [](T* __restrict acc, const T* __restrict arow, const T*, int64_t c) {
#pragma omp simd
                   for (int64_t cc = 0; cc < c; ++cc) acc[cc] += arow[cc];
                 });
}

template <typename T>
void reduce_dot_nc(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& out) {
  reduce_nc_impl(a, b.data(), out,
                 [](T* __restrict acc, const T* __restrict arow, const T* __restrict brow,
                    int64_t c) {
#pragma omp simd
                   for (int64_t cc = 0; cc < c; ++cc) acc[cc] += arow[cc] * brow[cc];
                 });
}

template <typename T>
void moments_nc(const Tensor<T>& in, Tensor<T>& mean, Tensor<T>& var) {
  const int64_t n = in.dim(0), c = in.dim(4);
  const int64_t vox = in.dim(1) * in.dim(2) * in.dim(3);
  Tensor<T> sum({n, c}), sumsq({n, c});
  reduce_sum_nc(in, sum);
  reduce_dot_nc(in, in, sumsq);
  for (int64_t i = 0; i < n * c; ++i) {
    const T mu = sum[i] / T(vox);
    mean[i] = mu;
    var[i] = sumsq[i] / T(vox) - mu * mu;
  }
}

template <typename T>
void softmax_channels_forward(const Tensor<T>& in, Tensor<T>& out) {
  const int64_t c = in.dim(in.rank() - 1);
  const int64_t rows = in.size() / c;
  const T* __restrict ip = in.data();
  T* __restrict op = out.data();
#pragma omp parallel for schedule(static)
  for (int64_t r = 0; r < rows; ++r) {
    const T* __restrict x = ip + r * c;
    T* __restrict y = op + r * c;
    T mx = x[0];
    for (int64_t cc = 1; cc < c; ++cc) mx = std::max(mx, x[cc]);
    T s = T(0);
    for (int64_t cc = 0; cc < c; ++cc) {
      y[cc] = std::exp(x[cc] - mx);
      s += y[cc];
    }
    const T inv = T(1) / s;
#pragma omp simd
    for (int64_t cc = 0; cc < c; ++cc) y[cc] *= inv;
  }
}

template <typename T>
void softmax_channels_backward(const Tensor<T>& y, const Tensor<T>& gout, Tensor<T>& gin) {
  const int64_t c = y.dim(y.rank() - 1);
  const int64_t rows = y.size() / c;
  const T* __restrict yp = y.data();
  const T* __restrict gp = gout.data();
  T* __restrict xp = gin.data();
#pragma omp parallel for schedule(static)
  for (int64_t r = 0; r < rows; ++r) {
    const T* __restrict yr = yp + r * c;
    const T* __restrict gr = gp + r * c;
    T dot = T(0);
    for (int64_t cc = 0; cc < c; ++cc) dot += yr[cc] * gr[cc];
    T* __restrict xr = xp + r * c;
#pragma omp simd
    for (int64_t cc = 0; cc < c; ++cc) xr[cc] += yr[cc] * (gr[cc] - dot);
  }
}

template <typename T>
void relu_forward(const Tensor<T>& in, Tensor<T>& out) {
  const T* __restrict ip = in.data();
  T* __restrict op = out.data();
  const int64_t nn = in.size();
#pragma omp parallel for simd schedule(static)
  for (int64_t i = 0; i < nn; ++i) op[i] = ip[i] > T(0) ? ip[i] : T(0);
}

template <typename T>
void relu_backward(const Tensor<T>& in, const Tensor<T>& gout, Tensor<T>& gin) {
  const T* __restrict ip = in.data();
  const T* __restrict gp = gout.data();
  T* __restrict xp = gin.data();
  const int64_t nn = in.size();
#pragma omp parallel for simd schedule(static)
  for (int64_t i = 0; i < nn; ++i) xp[i] += ip[i] > T(0) ? gp[i] : T(0);
}

template <typename T>
void leaky_relu_forward(const Tensor<T>& in, T slope, Tensor<T>& out) {
  const T* __restrict ip = in.data();
  T* __restrict op = out.data();
  const int64_t nn = in.size();
#pragma omp parallel for simd schedule(static)
  for (int64_t i = 0; i < nn; ++i) op[i] = ip[i] > T(0) ? ip[i] : slope * ip[i];
}

template <typename T>
void leaky_relu_backward(const Tensor<T>& in, T slope, const Tensor<T>& gout, Tensor<T>& gin) {
  const T* __restrict ip = in.data();
  const T* __restrict gp = gout.data();
  T* __restrict xp = gin.data();
  const int64_t nn = in.size();
#pragma omp parallel for simd schedule(static)
  for (int64_t i = 0; i < nn; ++i) xp[i] += ip[i] > T(0) ? gp[i] : slope * gp[i];
}

template <typename T>
void sigmoid_forward(const Tensor<T>& in, Tensor<T>& out) {
  const T* __restrict ip = in.data();
  T* __restrict op = out.data();
  const int64_t nn = in.size();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < nn; ++i) op[i] = T(1) / (T(1) + std::exp(-ip[i]));
}

template <typename T>
void sigmoid_backward(const Tensor<T>& y, const Tensor<T>& gout, Tensor<T>& gin) {
  const T* __restrict yp = y.data();
  const T* __restrict gp = gout.data();
  T* __restrict xp = gin.data();
  const int64_t nn = y.size();
#pragma omp parallel for simd schedule(static)
  for (int64_t i = 0; i < nn; ++i) xp[i] += gp[i] * yp[i] * (T(1) - yp[i]);
}

template <typename T>
void axpy(T alpha, const Tensor<T>& x, Tensor<T>& y) {
  const T* __restrict xp = x.data();
  T* __restrict yp = y.data();
  const int64_t nn = x.size();
#pragma omp parallel for simd schedule(static)
  for (int64_t i = 0; i < nn; ++i) yp[i] += alpha * xp[i];
}

template <typename T>
T reduce_sum_all(const Tensor<T>& in) {
  const int64_t nn = in.size();
  const int64_t nchunks = (nn + kReduceChunk - 1) / kReduceChunk;
  std::vector<T> partial(static_cast<size_t>(nchunks), T(0));
  const T* __restrict ip = in.data();
#pragma omp parallel for schedule(static)
  for (int64_t ch = 0; ch < nchunks; ++ch) {
    const int64_t i0 = ch * kReduceChunk, i1 = std::min(nn, i0 + kReduceChunk);
    // Sequential within the chunk so the result is bit-identical to the
    // serial reference and independent of thread count.
    T s = T(0);
    for (int64_t i = i0; i < i1; ++i) s += ip[i];
    partial[size_t(ch)] = s;
  }
  T total = T(0);
  for (int64_t ch = 0; ch < nchunks; ++ch) total += partial[size_t(ch)];
  return total;
}

template <typename T>
void adam_step(Tensor<T>& param, const Tensor<T>& grad, Tensor<T>& m, Tensor<T>& v, T lr, T beta1,
               T beta2, T eps, int64_t t) {
  const int64_t nn = param.size();
  const T bc1 = T(1) - std::pow(beta1, T(t));
  const T bc2 = T(1) - std::pow(beta2, T(t));
  T* __restrict pp = param.data();
  const T* __restrict gp = grad.data();
  T* __restrict mp = m.data();
  T* __restrict vp = v.data();
#pragma omp parallel for simd schedule(static)
  for (int64_t i = 0; i < nn; ++i) {
    mp[i] = beta1 * mp[i] + (T(1) - beta1) * gp[i];
    vp[i] = beta2 * vp[i] + (T(1) - beta2) * gp[i] * gp[i];
    const T mh = mp[i] / bc1;
    const T vh = vp[i] / bc2;
    pp[i] -= lr * mh / (std::sqrt(vh) + eps);
  }
}

#define VSEG_INSTANTIATE(T)                                                                       \
  template void conv3d_forward<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*, int,     \
                                  int, Tensor<T>&);                                              \
  template void conv3d_backward_data<T>(const Tensor<T>&, const Tensor<T>&, int, int,            \
                                        Tensor<T>&);                                             \
  template void conv3d_backward_weights<T>(const Tensor<T>&, const Tensor<T>&, int, int,         \
                                           Tensor<T>&, Tensor<T>*);                              \
  template void maxpool3d_forward<T>(const Tensor<T>&, int, int, int, Tensor<T>&,                \
                                     Tensor<int32_t>&);                                          \
  template void maxpool3d_backward<T>(const Tensor<T>&, const Tensor<int32_t>&, Tensor<T>&,      \
                                      int, int, int);                                             \
  template void avgpool3d_forward<T>(const Tensor<T>&, std::array<int, 3>, Tensor<T>&);          \
  template void avgpool3d_backward<T>(const Tensor<T>&, std::array<int, 3>, Tensor<T>&);         \
  template void upsample3d_forward<T>(const Tensor<T>&, std::array<int, 3>, Tensor<T>&);         \
  template void upsample3d_backward<T>(const Tensor<T>&, std::array<int, 3>, Tensor<T>&);        \
  template void moments_nc<T>(const Tensor<T>&, Tensor<T>&, Tensor<T>&);                         \
  template void reduce_sum_nc<T>(const Tensor<T>&, Tensor<T>&);                                  \
  template void reduce_dot_nc<T>(const Tensor<T>&, const Tensor<T>&, Tensor<T>&);                \
  template void softmax_channels_forward<T>(const Tensor<T>&, Tensor<T>&);                       \
  template void softmax_channels_backward<T>(const Tensor<T>&, const Tensor<T>&, Tensor<T>&);    \
  template void relu_forward<T>(const Tensor<T>&, Tensor<T>&);                                   \
  template void relu_backward<T>(const Tensor<T>&, const Tensor<T>&, Tensor<T>&);                \
  template void leaky_relu_forward<T>(const Tensor<T>&, T, Tensor<T>&);                          \
  template void leaky_relu_backward<T>(const Tensor<T>&, T, const Tensor<T>&, Tensor<T>&);       \
  template void sigmoid_forward<T>(const Tensor<T>&, Tensor<T>&);                                \
  template void sigmoid_backward<T>(const Tensor<T>&, const Tensor<T>&, Tensor<T>&);             \
  template void axpy<T>(T, const Tensor<T>&, Tensor<T>&);                                        \
  template T reduce_sum_all<T>(const Tensor<T>&);                                                \
  template void adam_step<T>(Tensor<T>&, const Tensor<T>&, Tensor<T>&, Tensor<T>&, T, T, T, T,   \
                             int64_t);

VSEG_INSTANTIATE(float)
VSEG_INSTANTIATE(double)
#undef VSEG_INSTANTIATE

}  // namespace vseg::kernels
