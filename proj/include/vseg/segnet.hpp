#pragma once

#include <array>
#include <cstdint>

#include "vseg/nn.hpp"

namespace vseg::segnet {

using ad::Tape;
using ad::Var;

struct SegNetConfig {
  int64_t in_depth = 16, in_height = 32, in_width = 32;
  int num_classes = 6;
  int64_t base_channels = 8;  // 64 at full scale
  int depth_levels = 3;       // encoder downsamplings; bottleneck at 1/8
  std::array<double, 3> aux_weights{1.0, 0.5, 0.25};  // (main, aux_2, aux_4)
  bool use_aux = true;  // false = plain residual U-net (single classifier)
  uint64_t init_seed = 0;

  void validate() const;
};

// Static resolution/channel plan derived from a config; single source of truth
// for the encoder ladder and the auxiliary head taps.
struct SegNetPlan {
  std::array<int64_t, 3> input_shape;
  std::array<int64_t, 3> aux2_shape;  // 1/2 resolution
  std::array<int64_t, 3> aux4_shape;  // 1/4 resolution
  std::array<int64_t, 3> bottleneck_shape;
  int64_t aux2_channels = 0;  // 2*base
  int64_t aux4_channels = 0;  // 4*base
  int64_t bottleneck_channels = 0;  // 8*base
};

SegNetPlan plan_segnet(const SegNetConfig& cfg);

// One forward pass; soft maps are per-voxel softmax outputs, fused is their
// weighted probability-space combination at full resolution.
template <typename T>
struct SegForward {
  Var<T> logits_main, logits_aux2, logits_aux4;
  Var<T> prob_main, prob_aux2, prob_aux4;
  Var<T> fused;  // (N,Z,H,W,C)
  bool has_aux = false;
};

template <typename T>
class SegNet {
 public:
  explicit SegNet(const SegNetConfig& cfg);

  // x: (N,Z,H,W,1) normalized intensities.
  SegForward<T> forward(Tape<T>& tape, Var<T> x) const;

  nn::ParamSet<T>& params() { return params_; }
  const nn::ParamSet<T>& params() const { return params_; }
  const SegNetConfig& config() const { return cfg_; }

  // Upsamples aux soft maps to full resolution and combines all heads in
  // probability space with the configured weights (normalized to sum 1).
  static Var<T> fuse_heads(Var<T> main, Var<T> aux2, Var<T> aux4,
                           const std::array<double, 3>& weights);

 private:
  SegNetConfig cfg_;
  nn::ParamSet<T> params_;
  nn::Conv3dLayer<T> stem_;
  nn::InstanceNormLayer<T> stem_norm_;
  nn::ResBlock<T> enc0_, enc1_, enc2_, bottleneck_;
  nn::MultiscalePool<T> pool0_, pool1_, pool2_;
  nn::ResBlock<T> dec2_, dec1_, dec0_;
  nn::Conv3dLayer<T> head_main_, head_aux2_, head_aux4_;
};

}  // namespace vseg::segnet
