#include "vseg/disc.hpp"

#include "vseg/common.hpp"

namespace vseg::disc {

void DiscConfig::validate() const {
  check_arg(num_classes >= 2, "disc: need at least two classes");
  check_arg(base_channels >= 1, "disc: base_channels must be positive");
  check_arg(in_depth % 16 == 0 && in_height % 16 == 0 && in_width % 16 == 0,
            "disc: spatial dims must be divisible by 16");
}

template <typename T>
Var<T> make_disc_input(Var<T> x, Var<T> labels, DiscInputMode mode) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& lv = labels.value();
  check_arg(xv.dim(4) == 1, "make_disc_input: x must be single-channel");
  for (int ax = 0; ax < 4; ++ax)
    check_arg(xv.dim(ax) == lv.dim(ax), "make_disc_input: shape mismatch");
  for (int64_t i = 0; i < xv.size(); ++i)
    check_arg(xv[i] >= T(0) && xv[i] <= T(1),
              "make_disc_input: intensity volume must be normalized to [0,1]");

  switch (mode) {
    case DiscInputMode::kSoft:
      return ad::channel_scale(x, labels);
    case DiscInputMode::kStraightThrough:
      return ad::channel_scale(x, ad::straight_through_onehot(labels));
    case DiscInputMode::kHard: {
      // Hard one-hot as a constant: no gradient path into the labels.
      const auto arg = ad::argmax_channels(lv);
      Var<T> hard = x.tape->constant(ad::onehot_channels<T>(arg, int(lv.dim(4))));
      return ad::channel_scale(x, hard);
    }
  }
  throw InvalidArgument("make_disc_input: bad mode");
}

template <typename T>
DiscNet<T>::DiscNet(const DiscConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(Rng::derive(cfg.init_seed, 0xd15c));
  int64_t ci = cfg.num_classes;
  for (int i = 0; i < 4; ++i) {
    const int64_t co = cfg.base_channels << i;
    blocks_[i] = nn::Conv3dLayer<T>(params_, "block" + std::to_string(i), ci, co, 4, 2, 1, rng);
    if (cfg.use_instance_norm && i > 0)
      norms_[i] = nn::InstanceNormLayer<T>(params_, "norm" + std::to_string(i), co);
    ci = co;
  }
  proj_ = nn::Conv3dLayer<T>(params_, "proj", ci, 1, 1, 1, 0, rng);
}

template <typename T>
Var<T> DiscNet<T>::forward(Tape<T>& tape, Var<T> inp) const {
  const Tensor<T>& iv = inp.value();
  check_arg(iv.rank() == 5 && iv.dim(4) == cfg_.num_classes,
            "disc: input channel count must equal num_classes");
  check_arg(iv.dim(1) % 16 == 0 && iv.dim(2) % 16 == 0 && iv.dim(3) % 16 == 0,
            "disc: input spatial dims must be divisible by 16");
  Var<T> h = inp;
  for (int i = 0; i < 4; ++i) {
    h = blocks_[i].forward(tape, h);
    if (cfg_.use_instance_norm && i > 0) h = norms_[i].forward(tape, h);
    h = ad::leaky_relu(h, T(0.2));
  }
  h = proj_.forward(tape, h);
  h = ad::upsample3d(h, {16, 16, 16});
  return ad::clamp(ad::sigmoid(h), kConfEps, T(1) - kConfEps);
}

template Var<float> make_disc_input<float>(Var<float>, Var<float>, DiscInputMode);
template Var<double> make_disc_input<double>(Var<double>, Var<double>, DiscInputMode);
template class DiscNet<float>;
template class DiscNet<double>;

}  // namespace vseg::disc
