#pragma once

#include <memory>
#include <string>
#include <vector>

#include "vseg/autodiff.hpp"
#include "vseg/kernels.hpp"
#include "vseg/rng.hpp"

namespace vseg::nn {

using ad::Param;
using ad::Tape;
using ad::Var;

// Owns the named parameters of one network; iteration order is creation order
// and is part of the checkpoint contract.
template <typename T>
class ParamSet {
 public:
  Param<T>& create(const std::string& name, std::vector<int64_t> shape) {
    owned_.push_back(std::make_unique<Param<T>>(name, Tensor<T>(std::move(shape))));
    return *owned_.back();
  }

  std::vector<Param<T>*> all() const {
    std::vector<Param<T>*> out;
    out.reserve(owned_.size());
    for (const auto& p : owned_) out.push_back(p.get());
    return out;
  }

  Param<T>* find(const std::string& name) const {
    for (const auto& p : owned_)
      if (p->name == name) return p.get();
    return nullptr;
  }

  void zero_grads() {
    for (auto& p : owned_) p->zero_grad();
  }

  int64_t count() const {
    int64_t n = 0;
    for (const auto& p : owned_) n += p->value.size();
    return n;
  }

 private:
  std::vector<std::unique_ptr<Param<T>>> owned_;
};

template <typename T>
void he_normal_init(Param<T>& w, int64_t fan_in, Rng& rng) {
  const double std = std::sqrt(2.0 / double(fan_in));
  for (int64_t i = 0; i < w.value.size(); ++i) w.value[i] = T(rng.normal() * std);
}

// 3D convolution layer; weight (K,K,K,Ci,Co), bias (Co).
template <typename T>
struct Conv3dLayer {
  Param<T>* w = nullptr;
  Param<T>* b = nullptr;
  int stride = 1, pad = 0;

  Conv3dLayer() = default;
  Conv3dLayer(ParamSet<T>& ps, const std::string& name, int64_t ci, int64_t co, int k, int stride_,
              int pad_, Rng& rng)
      : stride(stride_), pad(pad_) {
    w = &ps.create(name + ".w", {k, k, k, ci, co});
    b = &ps.create(name + ".b", {co});
    he_normal_init(*w, ci * k * k * k, rng);
  }

  Var<T> forward(Tape<T>& t, Var<T> x) const {
    return ad::conv3d(x, t.param(*w), t.param(*b), stride, pad);
  }
};

template <typename T>
struct InstanceNormLayer {
  Param<T>* gamma = nullptr;
  Param<T>* beta = nullptr;
  T eps = T(1e-5);

  InstanceNormLayer() = default;
  InstanceNormLayer(ParamSet<T>& ps, const std::string& name, int64_t c) {
    gamma = &ps.create(name + ".gamma", {c});
    beta = &ps.create(name + ".beta", {c});
    gamma->value.fill(T(1));
  }

  Var<T> forward(Tape<T>& t, Var<T> x) const {
    return ad::instance_norm(x, t.param(*gamma), t.param(*beta), eps);
  }
};

// Two 3x3x3 convolutions with identity shortcut; 1x1x1 projection (normalized,
// so shortcut magnitudes stay bounded) when the channel count changes.
template <typename T>
struct ResBlock {
  Conv3dLayer<T> conv1, conv2, proj;
  InstanceNormLayer<T> norm1, norm2, norm_proj;
  bool has_proj = false;

  ResBlock() = default;
  ResBlock(ParamSet<T>& ps, const std::string& name, int64_t ci, int64_t co, Rng& rng)
      : conv1(ps, name + ".conv1", ci, co, 3, 1, 1, rng),
        conv2(ps, name + ".conv2", co, co, 3, 1, 1, rng),
        norm1(ps, name + ".norm1", co),
        norm2(ps, name + ".norm2", co),
        has_proj(ci != co) {
    if (has_proj) {
      proj = Conv3dLayer<T>(ps, name + ".proj", ci, co, 1, 1, 0, rng);
      norm_proj = InstanceNormLayer<T>(ps, name + ".norm_proj", co);
    }
  }

  Var<T> forward(Tape<T>& t, Var<T> x) const {
    Var<T> h = ad::relu(norm1.forward(t, conv1.forward(t, x)));
    h = norm2.forward(t, conv2.forward(t, h));
    Var<T> sc = has_proj ? norm_proj.forward(t, proj.forward(t, x)) : x;
    return ad::relu(ad::add(h, sc));
  }
};

// Parallel max-pool branches (kernel 2/3/5, stride 2, pad 0/1/2) concatenated
// and reduced back to the input channel count by a learned 1x1x1 convolution.
template <typename T>
struct MultiscalePool {
  static constexpr int kKernels[3] = {2, 3, 5};
  static constexpr int kPads[3] = {0, 1, 2};
  Conv3dLayer<T> reduce;

  MultiscalePool() = default;
  MultiscalePool(ParamSet<T>& ps, const std::string& name, int64_t c, Rng& rng)
      : reduce(ps, name + ".reduce", 3 * c, c, 1, 1, 0, rng) {}

  static Var<T> branch(Tape<T>& t, Var<T> x, int i) {
    (void)t;
    return ad::maxpool3d(x, kKernels[i], 2, kPads[i]);
  }

  Var<T> forward(Tape<T>& t, Var<T> x) const {
    for (int ax = 1; ax <= 3; ++ax)
      check_arg(x.value().dim(ax) % 2 == 0, "multiscale_pool: spatial dims must be even");
    Var<T> cat = ad::concat_channels(ad::concat_channels(branch(t, x, 0), branch(t, x, 1)),
                                     branch(t, x, 2));
    return reduce.forward(t, cat);
  }
};

// Adam with bias correction; keeps one slot pair per parameter.
template <typename T>
class Adam {
 public:
  Adam() = default;
  explicit Adam(std::vector<Param<T>*> params, T beta1 = T(0.9), T beta2 = T(0.999),
                T eps = T(1e-8))
      : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (auto* p : params_) slots_.push_back({Tensor<T>(p->value.shape()),
                                              Tensor<T>(p->value.shape())});
  }

  void step(T lr) {
    ++t_;
    for (size_t i = 0; i < params_.size(); ++i)
      kernels::adam_step(params_[i]->value, params_[i]->grad, slots_[i].m, slots_[i].v, lr,
                         beta1_, beta2_, eps_, t_);
  }

  int64_t iterations() const { return t_; }
  void set_iterations(int64_t t) { t_ = t; }
  const std::vector<Param<T>*>& params() const { return params_; }
  Tensor<T>& slot_m(size_t i) { return slots_[i].m; }
  Tensor<T>& slot_v(size_t i) { return slots_[i].v; }

 private:
  struct Slot {
    Tensor<T> m, v;
  };
  std::vector<Param<T>*> params_;
  std::vector<Slot> slots_;
  T beta1_ = T(0.9), beta2_ = T(0.999), eps_ = T(1e-8);
  int64_t t_ = 0;
};

}  // namespace vseg::nn
