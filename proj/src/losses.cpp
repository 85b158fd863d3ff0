#include "vseg/losses.hpp"

#include <cmath>

#include "vseg/common.hpp"
#include "vseg/kernels.hpp"

namespace vseg::losses {

namespace k = vseg::kernels;

ClassWeights adaptive_weights(const std::vector<double>& dsc_per_class,
                              const std::vector<int64_t>& counts) {
  check_arg(dsc_per_class.size() == counts.size(), "adaptive_weights: size mismatch");
  int64_t total = 0;
  for (int64_t c : counts) {
    check_arg(c >= 0, "adaptive_weights: negative count");
    total += c;
  }
  check_arg(total > 0, "adaptive_weights: all counts are zero");
  ClassWeights out;
  out.dsc_snapshot = dsc_per_class;
  out.counts = counts;
  for (size_t c = 0; c < counts.size(); ++c) {
    const double dscc = dsc_per_class[c];
    check_arg(dscc >= 0.0 && dscc <= 1.0, "adaptive_weights: DSC outside [0,1]");
    const int64_t floored = std::max<int64_t>(counts[c], 1);
    out.w.push_back(2.0 - dscc + std::log(double(total) / double(floored)));
  }
  return out;
}

template <typename T>
Var<T> weighted_mce(Var<T> probs, const Tensor<uint8_t>& gt, const ClassWeights& w) {
  Tape<T>& tape = *probs.tape;
  const Tensor<T>& p = probs.value();
  const int64_t c = p.dim(4);
  const int64_t rows = p.size() / c;
  check_arg(gt.size() == rows, "weighted_mce: label shape mismatch");
  check_arg(int64_t(w.w.size()) == c, "weighted_mce: weight count mismatch");
  const T eps = T(kLogEps);

  const T* __restrict pp = p.data();
  const uint8_t* __restrict lp = gt.data();
  // deterministic chunked reduction (fixed chunk size, combined in order)
  constexpr int64_t kChunk = 4096;
  const int64_t nchunks = (rows + kChunk - 1) / kChunk;
  std::vector<double> partial(static_cast<size_t>(nchunks), 0.0);
  std::vector<uint8_t> bad(static_cast<size_t>(nchunks), 0);
#pragma omp parallel for schedule(static)
  for (int64_t ch = 0; ch < nchunks; ++ch) {
    double acc = 0.0;
    const int64_t r1 = std::min(rows, (ch + 1) * kChunk);
    for (int64_t r = ch * kChunk; r < r1; ++r) {
      const uint8_t y = lp[r];
      if (y >= c) {
        bad[size_t(ch)] = 1;
        break;
      }
      const T py = pp[r * c + y];
      if (std::isnan(double(py))) {
        bad[size_t(ch)] = 2;
        break;
      }
      acc -= w.w[y] * std::log(double(std::max(py, eps)));
    }
    partial[size_t(ch)] = acc;
  }
  double loss = 0.0;
  for (int64_t ch = 0; ch < nchunks; ++ch) {
    check_arg(bad[size_t(ch)] != 1, "weighted_mce: label out of range");
    check_arg(bad[size_t(ch)] != 2, "weighted_mce: NaN in prediction");
    loss += partial[size_t(ch)];
  }
  Tensor<T> out({1});
  out[0] = T(loss);

  const bool needs = tape.needs(probs.id);
  Tape<T>* tp = &tape;
  const int pid = probs.id;
  // Copies kept alive by the closure.
  auto wts = std::make_shared<std::vector<double>>(w.w);
  auto labels = std::make_shared<Tensor<uint8_t>>(gt);
  const int id = tape.make_node(std::move(out), needs, nullptr);
  if (needs) {
    tape.set_backward(id, [tp, id, pid, wts, labels, c, rows, eps]() {
      const T g = tp->grad(id)[0];
      const T* __restrict pp = tp->value(pid).data();
      T* __restrict gp = tp->grad(pid).data();
      const uint8_t* __restrict lp = labels->data();
#pragma omp parallel for schedule(static)
      for (int64_t r = 0; r < rows; ++r) {
        const uint8_t y = lp[r];
        const T py = pp[r * c + y];
        if (py > eps) gp[r * c + y] -= g * T((*wts)[y]) / py;
      }
    });
  }
  return Var<T>{tp, id};
}

template <typename T>
Var<T> bce_confidence(Var<T> conf, int target) {
  check_arg(target == 0 || target == 1, "bce_confidence: target must be 0 or 1");
  Tape<T>& tape = *conf.tape;
  const Tensor<T>& cv = conf.value();
  const T eps = T(kLogEps);
  const int64_t nn = cv.size();

  const T* __restrict cp = cv.data();
  constexpr int64_t kChunk = 4096;
  const int64_t nchunks = (nn + kChunk - 1) / kChunk;
  std::vector<double> partial(static_cast<size_t>(nchunks), 0.0);
#pragma omp parallel for schedule(static)
  for (int64_t ch = 0; ch < nchunks; ++ch) {
    double acc = 0.0;
    const int64_t i1 = std::min(nn, (ch + 1) * kChunk);
    for (int64_t i = ch * kChunk; i < i1; ++i) {
      const T v = target == 1 ? cp[i] : T(1) - cp[i];
      acc -= std::log(double(std::max(v, eps)));
    }
    partial[size_t(ch)] = acc;
  }
  double loss = 0.0;
  for (int64_t ch = 0; ch < nchunks; ++ch) loss += partial[size_t(ch)];
  Tensor<T> out({1});
  out[0] = T(loss);

  const bool needs = tape.needs(conf.id);
  Tape<T>* tp = &tape;
  const int cid = conf.id;
  const int id = tape.make_node(std::move(out), needs, nullptr);
  if (needs) {
    tape.set_backward(id, [tp, id, cid, target, eps, nn]() {
      const T g = tp->grad(id)[0];
      const T* __restrict cp = tp->value(cid).data();
      T* __restrict gp = tp->grad(cid).data();
#pragma omp parallel for schedule(static)
      for (int64_t i = 0; i < nn; ++i) {
        if (target == 1) {
          if (cp[i] > eps) gp[i] -= g / cp[i];
        } else {
          if (T(1) - cp[i] > eps) gp[i] += g / (T(1) - cp[i]);
        }
      }
    });
  }
  return Var<T>{tp, id};
}

template <typename T>
Var<T> adversarial_loss(Var<T> conf_fake) {
  return bce_confidence(conf_fake, 1);
}

template <typename T>
Var<T> semi_loss(Var<T> probs, const Tensor<T>& conf_detached, const LossWeights& lw,
                 SemiMask* mask_out) {
  Tape<T>& tape = *probs.tape;
  const Tensor<T>& p = probs.value();
  const int64_t c = p.dim(4);
  const int64_t rows = p.size() / c;
  check_arg(conf_detached.size() == rows, "semi_loss: confidence shape mismatch");
  const T eps = T(kLogEps);
  const T thresh = T(lw.t_semi);

  auto indicator = std::make_shared<Tensor<uint8_t>>(
      Tensor<uint8_t>({p.dim(0), p.dim(1), p.dim(2), p.dim(3)}));
  auto pseudo = std::make_shared<Tensor<uint8_t>>(
      Tensor<uint8_t>({p.dim(0), p.dim(1), p.dim(2), p.dim(3)}));

  const T* __restrict pp = p.data();
  const T* __restrict cp = conf_detached.data();
  uint8_t* __restrict ind = indicator->data();
  uint8_t* __restrict ps = pseudo->data();
  constexpr int64_t kChunk = 4096;
  const int64_t nchunks = (rows + kChunk - 1) / kChunk;
  std::vector<double> partial(static_cast<size_t>(nchunks), 0.0);
  std::vector<int64_t> trusted_part(static_cast<size_t>(nchunks), 0);
#pragma omp parallel for schedule(static)
  for (int64_t ch = 0; ch < nchunks; ++ch) {
    double acc = 0.0;
    int64_t tcount = 0;
    const int64_t r1 = std::min(rows, (ch + 1) * kChunk);
    for (int64_t r = ch * kChunk; r < r1; ++r) {
      int64_t best = 0;
      for (int64_t cc = 1; cc < c; ++cc)
        if (pp[r * c + cc] > pp[r * c + best]) best = cc;
      ps[r] = uint8_t(best);
      const bool in = cp[r] > thresh;
      ind[r] = in ? 1 : 0;
      if (in) {
        ++tcount;
        acc -= std::log(double(std::max(pp[r * c + best], eps)));
      }
    }
    partial[size_t(ch)] = acc;
    trusted_part[size_t(ch)] = tcount;
  }
  double loss = 0.0;
  int64_t trusted = 0;
  for (int64_t ch = 0; ch < nchunks; ++ch) {
    loss += partial[size_t(ch)];
    trusted += trusted_part[size_t(ch)];
  }
  Tensor<T> out({1});
  out[0] = T(loss);
  if (mask_out) {
    mask_out->indicator = *indicator;
    mask_out->pseudo_labels = *pseudo;
    mask_out->trusted_fraction = rows ? double(trusted) / double(rows) : 0.0;
  }

  const bool needs = tape.needs(probs.id);
  Tape<T>* tp = &tape;
  const int pid = probs.id;
  const int id = tape.make_node(std::move(out), needs, nullptr);
  if (needs) {
    tape.set_backward(id, [tp, id, pid, indicator, pseudo, c, rows, eps]() {
      const T g = tp->grad(id)[0];
      const T* __restrict pp = tp->value(pid).data();
      T* __restrict gp = tp->grad(pid).data();
#pragma omp parallel for schedule(static)
      for (int64_t r = 0; r < rows; ++r) {
        if (!(*indicator)[r]) continue;
        const int64_t y = (*pseudo)[r];
        const T py = pp[r * c + y];
        if (py > eps) gp[r * c + y] -= g / py;
      }
    });
  }
  return Var<T>{tp, id};
}

template <typename T>
Var<T> total_s_loss(std::optional<Var<T>> l_vox, std::optional<Var<T>> l_adv,
                    std::optional<Var<T>> l_semi, const LossWeights& lw, Branch branch) {
  check_arg(l_vox || l_adv || l_semi, "total_s_loss: no components");
  auto nonzero = [](const std::optional<Var<T>>& v) {
    return v && v->value()[0] != T(0);
  };
  if (branch == Branch::kLabeled) {
    check_arg(!nonzero(l_semi),
              "total_s_loss: labeled branch must not carry a semi-supervised term");
  } else {
    check_arg(!nonzero(l_vox), "total_s_loss: unlabeled branch has no ground truth");
  }
  const T ladv = T(branch == Branch::kLabeled ? lw.lambda_adv_labeled : lw.lambda_adv_unlabeled);

  Tape<T>* tape = l_vox ? l_vox->tape : (l_adv ? l_adv->tape : l_semi->tape);
  Var<T> total = tape->constant(Tensor<T>({1}));
  if (l_vox) total = ad::add(total, *l_vox);
  if (l_adv) total = ad::add(total, ad::scale(*l_adv, ladv));
  if (l_semi) total = ad::add(total, ad::scale(*l_semi, T(lw.lambda_semi)));
  return total;
}

template <typename T>
Var<T> d_loss(Var<T> conf_real, Var<T> conf_fake) {
  return ad::add(bce_confidence(conf_real, 1), bce_confidence(conf_fake, 0));
}

#define VSEG_LOSS_INSTANTIATE(T)                                                            \
  template Var<T> weighted_mce<T>(Var<T>, const Tensor<uint8_t>&, const ClassWeights&);     \
  template Var<T> bce_confidence<T>(Var<T>, int);                                           \
  template Var<T> adversarial_loss<T>(Var<T>);                                              \
  template Var<T> semi_loss<T>(Var<T>, const Tensor<T>&, const LossWeights&, SemiMask*);    \
  template Var<T> total_s_loss<T>(std::optional<Var<T>>, std::optional<Var<T>>,             \
                                  std::optional<Var<T>>, const LossWeights&, Branch);       \
  template Var<T> d_loss<T>(Var<T>, Var<T>);

VSEG_LOSS_INSTANTIATE(float)
VSEG_LOSS_INSTANTIATE(double)
#undef VSEG_LOSS_INSTANTIATE

}  // namespace vseg::losses
