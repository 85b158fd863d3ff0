#include "vseg/segnet.hpp"

#include "vseg/common.hpp"

namespace vseg::segnet {

void SegNetConfig::validate() const {
  check_arg(num_classes >= 2, "segnet: need at least two classes");
  check_arg(base_channels >= 1, "segnet: base_channels must be positive");
  check_arg(depth_levels == 3, "segnet: this architecture is defined for 3 encoder levels");
  const int64_t div = int64_t(1) << depth_levels;
  check_arg(in_depth % div == 0 && in_height % div == 0 && in_width % div == 0,
            "segnet: spatial dims must be divisible by 2^depth_levels");
  const double wsum = aux_weights[0] + aux_weights[1] + aux_weights[2];
  check_arg(wsum > 0.0, "segnet: head weight sum must be positive");
}

SegNetPlan plan_segnet(const SegNetConfig& cfg) {
  cfg.validate();
  SegNetPlan p;
  p.input_shape = {cfg.in_depth, cfg.in_height, cfg.in_width};
  p.aux2_shape = {cfg.in_depth / 2, cfg.in_height / 2, cfg.in_width / 2};
  p.aux4_shape = {cfg.in_depth / 4, cfg.in_height / 4, cfg.in_width / 4};
  p.bottleneck_shape = {cfg.in_depth / 8, cfg.in_height / 8, cfg.in_width / 8};
  p.aux2_channels = 2 * cfg.base_channels;
  p.aux4_channels = 4 * cfg.base_channels;
  p.bottleneck_channels = 8 * cfg.base_channels;
  return p;
}

template <typename T>
SegNet<T>::SegNet(const SegNetConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(Rng::derive(cfg.init_seed, 0x5e6));
  const int64_t b = cfg.base_channels;
  const int64_t c = cfg.num_classes;
  stem_ = nn::Conv3dLayer<T>(params_, "stem", 1, b, 3, 1, 1, rng);
  stem_norm_ = nn::InstanceNormLayer<T>(params_, "stem_norm", b);
  enc0_ = nn::ResBlock<T>(params_, "enc0", b, b, rng);
  pool0_ = nn::MultiscalePool<T>(params_, "pool0", b, rng);
  enc1_ = nn::ResBlock<T>(params_, "enc1", b, 2 * b, rng);
  pool1_ = nn::MultiscalePool<T>(params_, "pool1", 2 * b, rng);
  enc2_ = nn::ResBlock<T>(params_, "enc2", 2 * b, 4 * b, rng);
  pool2_ = nn::MultiscalePool<T>(params_, "pool2", 4 * b, rng);
  bottleneck_ = nn::ResBlock<T>(params_, "bottleneck", 4 * b, 8 * b, rng);
  dec2_ = nn::ResBlock<T>(params_, "dec2", 8 * b + 4 * b, 4 * b, rng);
  dec1_ = nn::ResBlock<T>(params_, "dec1", 4 * b + 2 * b, 2 * b, rng);
  dec0_ = nn::ResBlock<T>(params_, "dec0", 2 * b + b, b, rng);
  head_main_ = nn::Conv3dLayer<T>(params_, "head_main", b, c, 1, 1, 0, rng);
  if (cfg.use_aux) {
    head_aux2_ = nn::Conv3dLayer<T>(params_, "head_aux2", 2 * b, c, 1, 1, 0, rng);
    head_aux4_ = nn::Conv3dLayer<T>(params_, "head_aux4", 4 * b, c, 1, 1, 0, rng);
  }
}

template <typename T>
Var<T> SegNet<T>::fuse_heads(Var<T> main, Var<T> aux2, Var<T> aux4,
                             const std::array<double, 3>& weights) {
  const double wsum = weights[0] + weights[1] + weights[2];
  check_arg(wsum > 0.0, "fuse_heads: weight sum must be positive");
  Var<T> up2 = ad::upsample3d(aux2, {2, 2, 2});
  Var<T> up4 = ad::upsample3d(aux4, {4, 4, 4});
  Var<T> acc = ad::linear_comb(T(weights[0] / wsum), main, T(weights[1] / wsum), up2);
  return ad::linear_comb(T(1), acc, T(weights[2] / wsum), up4);
}

template <typename T>
SegForward<T> SegNet<T>::forward(Tape<T>& tape, Var<T> x) const {
  const Tensor<T>& xv = x.value();
  check_arg(xv.rank() == 5 && xv.dim(4) == 1, "segnet: input must be (N,Z,H,W,1)");
  check_arg(xv.dim(1) == cfg_.in_depth && xv.dim(2) == cfg_.in_height &&
                xv.dim(3) == cfg_.in_width,
            "segnet: input spatial shape does not match config");

  Var<T> s = ad::relu(stem_norm_.forward(tape, stem_.forward(tape, x)));
  Var<T> e0 = enc0_.forward(tape, s);                       // b   @ full
  Var<T> e1 = enc1_.forward(tape, pool0_.forward(tape, e0));  // 2b  @ 1/2
  Var<T> e2 = enc2_.forward(tape, pool1_.forward(tape, e1));  // 4b  @ 1/4
  Var<T> bt = bottleneck_.forward(tape, pool2_.forward(tape, e2));  // 8b @ 1/8

  Var<T> d2 = dec2_.forward(tape, ad::concat_channels(ad::upsample3d(bt, {2, 2, 2}), e2));
  Var<T> d1 = dec1_.forward(tape, ad::concat_channels(ad::upsample3d(d2, {2, 2, 2}), e1));
  Var<T> d0 = dec0_.forward(tape, ad::concat_channels(ad::upsample3d(d1, {2, 2, 2}), e0));

  SegForward<T> out;
  out.logits_main = head_main_.forward(tape, d0);
  out.prob_main = ad::softmax_channels(out.logits_main);
  out.has_aux = cfg_.use_aux;
  if (cfg_.use_aux) {
    out.logits_aux2 = head_aux2_.forward(tape, d1);
    out.logits_aux4 = head_aux4_.forward(tape, d2);
    out.prob_aux2 = ad::softmax_channels(out.logits_aux2);
    out.prob_aux4 = ad::softmax_channels(out.logits_aux4);
    out.fused = fuse_heads(out.prob_main, out.prob_aux2, out.prob_aux4, cfg_.aux_weights);
  } else {
    out.fused = out.prob_main;
  }
  return out;
}

template class SegNet<float>;
template class SegNet<double>;

}  // namespace vseg::segnet
