#include "vseg/autodiff.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>

#include <algorithm>
#include <cmath>

#include "vseg/common.hpp"
#include "vseg/kernels.hpp"

namespace vseg::ad {

namespace k = vseg::kernels;

template <typename T>
void Tape<T>::backward(Var<T> root) {
  check_arg(root.value().size() == 1, "backward: root must be scalar");
  Tensor<T> seed({1});
  seed[0] = T(1);
  backward(root, seed);
}

template <typename T>
void Tape<T>::backward(Var<T> root, const Tensor<T>& seed) {
  check_arg(root.tape == this, "backward: foreign var");
  check_arg(seed.same_shape(root.value()), "backward: seed shape mismatch");
  grad(root.id) = seed;
  const bool prof = getenv("VSEG_PROF") != nullptr;
  for (int id = root.id; id >= 0; --id) {
    Node& n = nodes_[size_t(id)];
    if (!n.has_grad || !n.needs_grad) continue;
    if (n.backward) {
      if (prof) {
        auto t0 = std::chrono::steady_clock::now();
        n.backward();
        auto t1 = std::chrono::steady_clock::now();
        double msx = std::chrono::duration<double, std::milli>(t1 - t0).count();
        if (msx > 1.0) {
          fprintf(stderr, "node %d shape(", id);
          for (auto d : n.value.shape()) fprintf(stderr, "%ld,", long(d));
          fprintf(stderr, ") %.2f ms\n", msx);
        }
      } else {
        n.backward();
      }
    }
    if (n.bound && n.bound->trainable) k::axpy(T(1), n.grad, n.bound->grad);
  }
}

template <typename T>
Tensor<T> Tape<T>::grad_of(Var<T> v) const {
  const Node& n = nodes_[size_t(v.id)];
  if (n.has_grad) return n.grad;
  return Tensor<T>(n.value.shape());
}

template <typename T>
Var<T> conv3d(Var<T> x, Var<T> w, Var<T> b, int stride, int pad) {
  Tape<T>& tape = *x.tape;
  const Tensor<T>& in = x.value();
  const Tensor<T>& wt = w.value();
  const int64_t K = wt.dim(0);
  std::vector<int64_t> oshape = {in.dim(0), 0, 0, 0, wt.dim(4)};
  for (int ax = 0; ax < 3; ++ax) {
    const int64_t d = (in.dim(1 + ax) + 2 * pad - K) / stride + 1;
    check_arg(d >= 1, "conv3d: output dim collapsed");
    oshape[size_t(1 + ax)] = d;
  }
  Tensor<T> out(oshape, typename Tensor<T>::Uninitialized{});
  k::conv3d_forward(in, wt, b.valid() ? &b.value() : nullptr, stride, pad, out);

  const bool needs = tape.needs(x.id) || tape.needs(w.id) || (b.valid() && tape.needs(b.id));
  Tape<T>* tp = &tape;
  const int xid = x.id, wid = w.id, bid = b.valid() ? b.id : -1;
  const int id = tape.make_node(std::move(out), needs, nullptr);
  if (needs) {
    tape.set_backward(id, [tp, id, xid, wid, bid, stride, pad]() {
      const Tensor<T>& g = tp->grad(id);
      if (tp->needs(xid)) k::conv3d_backward_data(g, tp->value(wid), stride, pad, tp->grad(xid));
      if (tp->needs(wid) || (bid >= 0 && tp->needs(bid))) {
        Tensor<T>* gb = (bid >= 0 && tp->needs(bid)) ? &tp->grad(bid) : nullptr;
        if (tp->needs(wid)) {
          k::conv3d_backward_weights(tp->value(xid), g, stride, pad, tp->grad(wid), gb);
        } else if (gb) {
          Tensor<T> dummy(tp->value(wid).shape());
          k::conv3d_backward_weights(tp->value(xid), g, stride, pad, dummy, gb);
        }
      }
    });
  }
  return Var<T>{tp, id};
}

template <typename T>
Var<T> instance_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
  Tape<T>& tape = *x.tape;
  const Tensor<T>& in = x.value();
  const int64_t n = in.dim(0), c = in.dim(4);
  const int64_t vox = in.dim(1) * in.dim(2) * in.dim(3);

  Tensor<T> mean({n, c}), var({n, c});
  k::moments_nc(in, mean, var);
  auto istd = std::make_shared<Tensor<T>>(Tensor<T>({n, c}));
  for (int64_t i = 0; i < n * c; ++i) (*istd)[i] = T(1) / std::sqrt(var[i] + eps);

  auto xhat = std::make_shared<Tensor<T>>(Tensor<T>::uninit(in.shape()));
  Tensor<T> out = Tensor<T>::uninit(in.shape());
  {
    const T* __restrict ip = in.data();
    const T* __restrict gp = gamma.value().data();
    const T* __restrict bp = beta.value().data();
    T* __restrict xh = xhat->data();
    T* __restrict op = out.data();
    const T* mp = mean.data();
    const T* sp = istd->data();
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t ni = 0; ni < n; ++ni) {
      for (int64_t v = 0; v < vox; ++v) {
        const int64_t off = (ni * vox + v) * c;
#pragma omp simd
        for (int64_t cc = 0; cc < c; ++cc) {
          const T h = (ip[off + cc] - mp[ni * c + cc]) * sp[ni * c + cc];
          xh[off + cc] = h;
          op[off + cc] = h * gp[cc] + bp[cc];
        }
      }
    }
  }

  const bool needs = tape.needs(x.id) || tape.needs(gamma.id) || tape.needs(beta.id);
  Tape<T>* tp = &tape;
  const int xid = x.id, gid = gamma.id, bid = beta.id;
  const int id = tape.make_node(std::move(out), needs, nullptr);
  if (needs) {
    tape.set_backward(id, [tp, id, xid, gid, bid, xhat, istd, n, c, vox]() {
      const Tensor<T>& g = tp->grad(id);
      Tensor<T> sum_g({n, c}), dot_gx({n, c});
      k::reduce_sum_nc(g, sum_g);
      k::reduce_dot_nc(g, *xhat, dot_gx);
      if (tp->needs(bid)) {
        Tensor<T>& gb = tp->grad(bid);
        for (int64_t ni = 0; ni < n; ++ni)
          for (int64_t cc = 0; cc < c; ++cc) gb[cc] += sum_g[ni * c + cc];
      }
      if (tp->needs(gid)) {
        Tensor<T>& gg = tp->grad(gid);
        for (int64_t ni = 0; ni < n; ++ni)
          for (int64_t cc = 0; cc < c; ++cc) gg[cc] += dot_gx[ni * c + cc];
      }
      if (tp->needs(xid)) {
        Tensor<T>& gx = tp->grad(xid);
        const T* __restrict gp = g.data();
        const T* __restrict xh = xhat->data();
        const T* __restrict gam = tp->value(gid).data();
        T* __restrict dst = gx.data();
        const T* sp = istd->data();
#pragma omp parallel for collapse(2) schedule(static)
        for (int64_t ni = 0; ni < n; ++ni) {
          for (int64_t v = 0; v < vox; ++v) {
            const int64_t off = (ni * vox + v) * c;
#pragma omp simd
            for (int64_t cc = 0; cc < c; ++cc) {
              const T mg = sum_g[ni * c + cc] / T(vox);
              const T mgx = dot_gx[ni * c + cc] / T(vox);
              dst[off + cc] +=
                  gam[cc] * sp[ni * c + cc] * (gp[off + cc] - mg - xh[off + cc] * mgx);
            }
          }
        }
      }
    });
  }
  return Var<T>{tp, id};
}

namespace {

// Shared shape for elementwise ops.
template <typename T>
Var<T> elementwise(Var<T> x, Tensor<T> value, std::function<void(Tape<T>&, int, int)> bwd) {
  Tape<T>* tp = x.tape;
  const int xid = x.id;
  const bool needs = tp->needs(xid);
  const int id = tp->make_node(std::move(value), needs, nullptr);
  if (needs)
    tp->set_backward(id, [tp, id, xid, bwd]() { bwd(*tp, id, xid); });
  return Var<T>{tp, id};
}

}  // namespace

template <typename T>
Var<T> relu(Var<T> x) {
  Tensor<T> out = Tensor<T>::uninit(x.value().shape());
  k::relu_forward(x.value(), out);
  return elementwise<T>(x, std::move(out), [](Tape<T>& t, int id, int xid) {
    k::relu_backward(t.value(xid), t.grad(id), t.grad(xid));
  });
}

template <typename T>
Var<T> leaky_relu(Var<T> x, T slope) {
  Tensor<T> out = Tensor<T>::uninit(x.value().shape());
  k::leaky_relu_forward(x.value(), slope, out);
  return elementwise<T>(x, std::move(out), [slope](Tape<T>& t, int id, int xid) {
    k::leaky_relu_backward(t.value(xid), slope, t.grad(id), t.grad(xid));
  });
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
  Tensor<T> out = Tensor<T>::uninit(x.value().shape());
  k::sigmoid_forward(x.value(), out);
  return elementwise<T>(x, std::move(out), [](Tape<T>& t, int id, int xid) {
    k::sigmoid_backward(t.value(id), t.grad(id), t.grad(xid));
  });
}

template <typename T>
Var<T> clamp(Var<T> x, T lo, T hi) {
  const Tensor<T>& in = x.value();
  Tensor<T> out = Tensor<T>::uninit(in.shape());
  const int64_t nn = in.size();
  const T* __restrict ip = in.data();
  T* __restrict op = out.data();
#pragma omp parallel for simd schedule(static)
  for (int64_t i = 0; i < nn; ++i) op[i] = std::min(std::max(ip[i], lo), hi);
  return elementwise<T>(x, std::move(out), [lo, hi](Tape<T>& t, int id, int xid) {
    const Tensor<T>& in = t.value(xid);
    const Tensor<T>& g = t.grad(id);
    Tensor<T>& gx = t.grad(xid);
    const int64_t nn = in.size();
    const T* __restrict ip = in.data();
    const T* __restrict gp = g.data();
    T* __restrict xp = gx.data();
#pragma omp parallel for simd schedule(static)
    for (int64_t i = 0; i < nn; ++i) xp[i] += (ip[i] > lo && ip[i] < hi) ? gp[i] : T(0);
  });
}

template <typename T>
Var<T> softmax_channels(Var<T> x) {
  Tensor<T> out = Tensor<T>::uninit(x.value().shape());
  k::softmax_channels_forward(x.value(), out);
  return elementwise<T>(x, std::move(out), [](Tape<T>& t, int id, int xid) {
    k::softmax_channels_backward(t.value(id), t.grad(id), t.grad(xid));
  });
}

template <typename T>
Var<T> maxpool3d(Var<T> x, int kk, int stride, int pad) {
  const Tensor<T>& in = x.value();
  std::vector<int64_t> oshape = {in.dim(0), 0, 0, 0, in.dim(4)};
  for (int ax = 0; ax < 3; ++ax)
    oshape[size_t(1 + ax)] = (in.dim(1 + ax) + 2 * pad - kk) / stride + 1;
  Tensor<T> out = Tensor<T>::uninit(oshape);
  auto argmax = std::make_shared<Tensor<int32_t>>(Tensor<int32_t>::uninit(oshape));
  k::maxpool3d_forward(in, kk, stride, pad, out, *argmax);
  return elementwise<T>(x, std::move(out), [argmax, kk, stride, pad](Tape<T>& t, int id, int xid) {
    k::maxpool3d_backward(t.grad(id), *argmax, t.grad(xid), kk, stride, pad);
  });
}

template <typename T>
Var<T> avgpool3d(Var<T> x, std::array<int, 3> f) {
  const Tensor<T>& in = x.value();
  for (int ax = 0; ax < 3; ++ax)
    check_arg(in.dim(1 + ax) % f[size_t(ax)] == 0, "avgpool3d: dims must divide factors");
  Tensor<T> out = Tensor<T>::uninit({in.dim(0), in.dim(1) / f[0], in.dim(2) / f[1], in.dim(3) / f[2], in.dim(4)});
  k::avgpool3d_forward(in, f, out);
  return elementwise<T>(x, std::move(out), [f](Tape<T>& t, int id, int xid) {
    k::avgpool3d_backward(t.grad(id), f, t.grad(xid));
  });
}

template <typename T>
Var<T> upsample3d(Var<T> x, std::array<int, 3> f) {
  const Tensor<T>& in = x.value();
  Tensor<T> out = Tensor<T>::uninit({in.dim(0), in.dim(1) * f[0], in.dim(2) * f[1], in.dim(3) * f[2], in.dim(4)});
  k::upsample3d_forward(in, f, out);
  return elementwise<T>(x, std::move(out), [f](Tape<T>& t, int id, int xid) {
    k::upsample3d_backward(t.grad(id), f, t.grad(xid));
  });
}

template <typename T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
  Tape<T>& tape = *a.tape;
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  for (int ax = 0; ax < 4; ++ax)
    check_arg(av.dim(ax) == bv.dim(ax), "concat_channels: leading dims mismatch");
  const int64_t ca = av.dim(4), cb = bv.dim(4);
  const int64_t rows = av.size() / ca;
  Tensor<T> out = Tensor<T>::uninit({av.dim(0), av.dim(1), av.dim(2), av.dim(3), ca + cb});
  {
    const T* __restrict ap = av.data();
    const T* __restrict bp = bv.data();
    T* __restrict op = out.data();
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < rows; ++r) {
      std::copy(ap + r * ca, ap + (r + 1) * ca, op + r * (ca + cb));
      std::copy(bp + r * cb, bp + (r + 1) * cb, op + r * (ca + cb) + ca);
    }
  }
  const bool needs = tape.needs(a.id) || tape.needs(b.id);
  Tape<T>* tp = &tape;
  const int aid = a.id, bid = b.id;
  const int id = tape.make_node(std::move(out), needs, nullptr);
  if (needs) {
    tape.set_backward(id, [tp, id, aid, bid, ca, cb, rows]() {
      const T* __restrict gp = tp->grad(id).data();
      if (tp->needs(aid)) {
        T* __restrict ga = tp->grad(aid).data();
#pragma omp parallel for schedule(static)
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t c = 0; c < ca; ++c) ga[r * ca + c] += gp[r * (ca + cb) + c];
      }
      if (tp->needs(bid)) {
        T* __restrict gb = tp->grad(bid).data();
#pragma omp parallel for schedule(static)
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t c = 0; c < cb; ++c) gb[r * cb + c] += gp[r * (ca + cb) + ca + c];
      }
    });
  }
  return Var<T>{tp, id};
}

template <typename T>
Var<T> linear_comb(T alpha, Var<T> a, T beta, Var<T> b) {
  Tape<T>& tape = *a.tape;
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  check_arg(av.same_shape(bv), "linear_comb: shape mismatch");
  Tensor<T> out = Tensor<T>::uninit(av.shape());
  {
    const T* __restrict ap = av.data();
    const T* __restrict bp = bv.data();
    T* __restrict op = out.data();
    const int64_t nn = av.size();
#pragma omp parallel for simd schedule(static)
    for (int64_t i = 0; i < nn; ++i) op[i] = alpha * ap[i] + beta * bp[i];
  }
  const bool needs = tape.needs(a.id) || tape.needs(b.id);
  Tape<T>* tp = &tape;
  const int aid = a.id, bid = b.id;
  const int id = tape.make_node(std::move(out), needs, nullptr);
  if (needs) {
    tape.set_backward(id, [tp, id, aid, bid, alpha, beta]() {
      if (tp->needs(aid)) k::axpy(alpha, tp->grad(id), tp->grad(aid));
      if (tp->needs(bid)) k::axpy(beta, tp->grad(id), tp->grad(bid));
    });
  }
  return Var<T>{tp, id};
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  return linear_comb(T(1), a, T(1), b);
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  Tape<T>& tape = *a.tape;
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  check_arg(av.same_shape(bv), "mul: shape mismatch");
  Tensor<T> out = Tensor<T>::uninit(av.shape());
  {
    const T* __restrict ap = av.data();
    const T* __restrict bp = bv.data();
    T* __restrict op = out.data();
    const int64_t nn = av.size();
#pragma omp parallel for simd schedule(static)
    for (int64_t i = 0; i < nn; ++i) op[i] = ap[i] * bp[i];
  }
  const bool needs = tape.needs(a.id) || tape.needs(b.id);
  Tape<T>* tp = &tape;
  const int aid = a.id, bid = b.id;
  const int id = tape.make_node(std::move(out), needs, nullptr);
  if (needs) {
    tape.set_backward(id, [tp, id, aid, bid]() {
      const Tensor<T>& g = tp->grad(id);
      const int64_t nn = g.size();
      const T* __restrict gp = g.data();
      if (tp->needs(aid)) {
        const T* __restrict bp = tp->value(bid).data();
        T* __restrict ga = tp->grad(aid).data();
#pragma omp parallel for simd schedule(static)
        for (int64_t i = 0; i < nn; ++i) ga[i] += gp[i] * bp[i];
      }
      if (tp->needs(bid)) {
        const T* __restrict ap = tp->value(aid).data();
        T* __restrict gb = tp->grad(bid).data();
#pragma omp parallel for simd schedule(static)
        for (int64_t i = 0; i < nn; ++i) gb[i] += gp[i] * ap[i];
      }
    });
  }
  return Var<T>{tp, id};
}

template <typename T>
Var<T> scale(Var<T> x, T alpha) {
  Tensor<T> out = Tensor<T>::uninit(x.value().shape());
  const T* __restrict ip = x.value().data();
  T* __restrict op = out.data();
  const int64_t nn = out.size();
#pragma omp parallel for simd schedule(static)
  for (int64_t i = 0; i < nn; ++i) op[i] = alpha * ip[i];
  return elementwise<T>(x, std::move(out), [alpha](Tape<T>& t, int id, int xid) {
    k::axpy(alpha, t.grad(id), t.grad(xid));
  });
}

template <typename T>
Var<T> channel_scale(Var<T> x_1ch, Var<T> y) {
  Tape<T>& tape = *y.tape;
  const Tensor<T>& xv = x_1ch.value();
  const Tensor<T>& yv = y.value();
  check_arg(xv.dim(4) == 1, "channel_scale: x must have one channel");
  for (int ax = 0; ax < 4; ++ax)
    check_arg(xv.dim(ax) == yv.dim(ax), "channel_scale: leading dims mismatch");
  const int64_t c = yv.dim(4);
  const int64_t rows = yv.size() / c;
  Tensor<T> out = Tensor<T>::uninit(yv.shape());
  {
    const T* __restrict xp = xv.data();
    const T* __restrict yp = yv.data();
    T* __restrict op = out.data();
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < rows; ++r) {
      const T a = xp[r];
#pragma omp simd
      for (int64_t cc = 0; cc < c; ++cc) op[r * c + cc] = a * yp[r * c + cc];
    }
  }
  const bool needs = tape.needs(x_1ch.id) || tape.needs(y.id);
  Tape<T>* tp = &tape;
  const int xid = x_1ch.id, yid = y.id;
  const int id = tape.make_node(std::move(out), needs, nullptr);
  if (needs) {
    tape.set_backward(id, [tp, id, xid, yid, c, rows]() {
      const T* __restrict gp = tp->grad(id).data();
      const T* __restrict xp = tp->value(xid).data();
      const T* __restrict yp = tp->value(yid).data();
      if (tp->needs(xid)) {
        T* __restrict gx = tp->grad(xid).data();
#pragma omp parallel for schedule(static)
        for (int64_t r = 0; r < rows; ++r) {
          T s = T(0);
#pragma omp simd reduction(+ : s)
          for (int64_t cc = 0; cc < c; ++cc) s += gp[r * c + cc] * yp[r * c + cc];
          gx[r] += s;
        }
      }
      if (tp->needs(yid)) {
        T* __restrict gy = tp->grad(yid).data();
#pragma omp parallel for schedule(static)
        for (int64_t r = 0; r < rows; ++r) {
          const T a = xp[r];
#pragma omp simd
          for (int64_t cc = 0; cc < c; ++cc) gy[r * c + cc] += a * gp[r * c + cc];
        }
      }
    });
  }
  return Var<T>{tp, id};
}

template <typename T>
Var<T> straight_through_onehot(Var<T> probs) {
  const Tensor<T>& p = probs.value();
  const int64_t c = p.dim(4);
  const int64_t rows = p.size() / c;
  Tensor<T> out = Tensor<T>::uninit(p.shape());
  {
    const T* __restrict pp = p.data();
    T* __restrict op = out.data();
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < rows; ++r) {
      int64_t best = 0;
      for (int64_t cc = 1; cc < c; ++cc)
        if (pp[r * c + cc] > pp[r * c + best]) best = cc;
      for (int64_t cc = 0; cc < c; ++cc) op[r * c + cc] = (cc == best) ? T(1) : T(0);
    }
  }
  return elementwise<T>(probs, std::move(out), [](Tape<T>& t, int id, int xid) {
    k::axpy(T(1), t.grad(id), t.grad(xid));
  });
}

template <typename T>
Var<T> detach(Var<T> x) {
  return x.tape->constant(x.value());
}

template <typename T>
Var<T> sum_all(Var<T> x) {
  Tensor<T> out({1});
  out[0] = k::reduce_sum_all(x.value());
  return elementwise<T>(x, std::move(out), [](Tape<T>& t, int id, int xid) {
    const T g = t.grad(id)[0];
    Tensor<T>& gx = t.grad(xid);
    T* __restrict xp = gx.data();
    const int64_t nn = gx.size();
#pragma omp parallel for simd schedule(static)
    for (int64_t i = 0; i < nn; ++i) xp[i] += g;
  });
}

template <typename T>
Tensor<uint8_t> argmax_channels(const Tensor<T>& probs) {
  const int64_t c = probs.dim(probs.rank() - 1);
  const int64_t rows = probs.size() / c;
  std::vector<int64_t> shape(probs.shape().begin(), probs.shape().end() - 1);
  Tensor<uint8_t> out = Tensor<uint8_t>::uninit(shape);
  const T* __restrict pp = probs.data();
  uint8_t* __restrict op = out.data();
#pragma omp parallel for schedule(static)
  for (int64_t r = 0; r < rows; ++r) {
    int64_t best = 0;
    for (int64_t cc = 1; cc < c; ++cc)
      if (pp[r * c + cc] > pp[r * c + best]) best = cc;
    op[r] = uint8_t(best);
  }
  return out;
}

template <typename T>
Tensor<T> onehot_channels(const Tensor<uint8_t>& labels, int num_classes) {
  std::vector<int64_t> shape(labels.shape());
  shape.push_back(num_classes);
  Tensor<T> out(shape);
  const uint8_t* __restrict lp = labels.data();
  T* __restrict op = out.data();
  const int64_t rows = labels.size();
#pragma omp parallel for schedule(static)
  for (int64_t r = 0; r < rows; ++r) op[r * num_classes + lp[r]] = T(1);
  return out;
}

#define VSEG_AD_INSTANTIATE(T)                                                  \
  template class Tape<T>;                                                       \
  template Var<T> conv3d<T>(Var<T>, Var<T>, Var<T>, int, int);                  \
  template Var<T> instance_norm<T>(Var<T>, Var<T>, Var<T>, T);                  \
  template Var<T> relu<T>(Var<T>);                                              \
  template Var<T> leaky_relu<T>(Var<T>, T);                                     \
  template Var<T> sigmoid<T>(Var<T>);                                           \
  template Var<T> clamp<T>(Var<T>, T, T);                                       \
  template Var<T> softmax_channels<T>(Var<T>);                                  \
  template Var<T> maxpool3d<T>(Var<T>, int, int, int);                          \
  template Var<T> avgpool3d<T>(Var<T>, std::array<int, 3>);                     \
  template Var<T> upsample3d<T>(Var<T>, std::array<int, 3>);                    \
  template Var<T> concat_channels<T>(Var<T>, Var<T>);                           \
  template Var<T> add<T>(Var<T>, Var<T>);                                       \
  template Var<T> mul<T>(Var<T>, Var<T>);                                       \
  template Var<T> linear_comb<T>(T, Var<T>, T, Var<T>);                         \
  template Var<T> scale<T>(Var<T>, T);                                          \
  template Var<T> channel_scale<T>(Var<T>, Var<T>);                             \
  template Var<T> straight_through_onehot<T>(Var<T>);                           \
  template Var<T> detach<T>(Var<T>);                                            \
  template Var<T> sum_all<T>(Var<T>);                                           \
  template Tensor<uint8_t> argmax_channels<T>(const Tensor<T>&);                \
  template Tensor<T> onehot_channels<T>(const Tensor<uint8_t>&, int);

VSEG_AD_INSTANTIATE(float)
VSEG_AD_INSTANTIATE(double)
#undef VSEG_AD_INSTANTIATE

}  // namespace vseg::ad
