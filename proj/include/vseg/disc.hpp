#pragma once

#include <cstdint>

#include "vseg/nn.hpp"

namespace vseg::disc {

using ad::Tape;
using ad::Var;

struct DiscConfig {
  int64_t in_depth = 16, in_height = 32, in_width = 32;
  int num_classes = 6;
  int64_t base_channels = 8;  // channel ladder base, 2, 4, 8; 64 at full scale
  bool use_instance_norm = false;  // batch-independent either way
  uint64_t init_seed = 0;

  void validate() const;
};

enum class DiscInputMode { kHard, kSoft, kStraightThrough };

// Voxel-wise product of the intensity volume against every label channel.
// hard: argmax one-hot before the product (no gradient to the labels);
// soft: probabilities used directly;
// straight_through: forward equals hard, gradient flows as if soft.
template <typename T>
Var<T> make_disc_input(Var<T> x, Var<T> labels, DiscInputMode mode);

// Hung-style fully convolutional discriminator: four stride-2 blocks, leaky
// activations, single-channel projection, trilinear upsampling back to input
// resolution, sigmoid clamped away from {0,1}.
template <typename T>
class DiscNet {
 public:
  static constexpr T kConfEps = T(1e-7);

  explicit DiscNet(const DiscConfig& cfg);

  // inp: (N,Z,H,W,C) product input; returns (N,Z,H,W,1) confidence in (0,1).
  Var<T> forward(Tape<T>& tape, Var<T> inp) const;

  nn::ParamSet<T>& params() { return params_; }
  const nn::ParamSet<T>& params() const { return params_; }
  const DiscConfig& config() const { return cfg_; }

  void set_trainable(bool trainable) {
    for (auto* p : params_.all()) p->trainable = trainable;
  }

 private:
  DiscConfig cfg_;
  nn::ParamSet<T> params_;
  nn::Conv3dLayer<T> blocks_[4];
  nn::InstanceNormLayer<T> norms_[4];
  nn::Conv3dLayer<T> proj_;
};

}  // namespace vseg::disc
