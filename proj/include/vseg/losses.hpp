#pragma once

#include <optional>
#include <vector>

#include "vseg/autodiff.hpp"
#include "vseg/tensor.hpp"

namespace vseg::losses {

using ad::Tape;
using ad::Var;

// Numerical floor applied before every logarithm.
inline constexpr double kLogEps = 1e-7;

// Adaptive class weights: w_c = 2 - DSC_c + ln(total voxels / voxels of c).
struct ClassWeights {
  std::vector<double> w;
  std::vector<double> dsc_snapshot;
  std::vector<int64_t> counts;
};

struct LossWeights {
  double lambda_adv_labeled = 0.01;
  double lambda_adv_unlabeled = 0.001;
  double lambda_semi = 0.1;
  double t_semi = 0.2;
};

// Trust indicator and self-taught labels produced by the semi-supervised loss.
struct SemiMask {
  Tensor<uint8_t> indicator;      // (N,Z,H,W), 1 = confidence above threshold
  Tensor<uint8_t> pseudo_labels;  // (N,Z,H,W), per-voxel argmax of the prediction
  double trusted_fraction = 0.0;
};

// Classes with count 0 get the count floored to 1 voxel; DSC carry-over across
// batches is the trainer's responsibility.
ClassWeights adaptive_weights(const std::vector<double>& dsc_per_class,
                              const std::vector<int64_t>& counts);

// Weighted multi-class cross-entropy over soft probabilities, summed over all
// voxels and the batch: -sum_n sum_vox w_y * ln p_y.
template <typename T>
Var<T> weighted_mce(Var<T> probs, const Tensor<uint8_t>& gt, const ClassWeights& w);

// BCE of a confidence map against a constant 0/1 target, summed over voxels
// and batch. conf has shape (N,Z,H,W,1).
template <typename T>
Var<T> bce_confidence(Var<T> conf, int target);

// The adversarial generator loss: BCE against the all-ones target.
template <typename T>
Var<T> adversarial_loss(Var<T> conf_fake);

// Self-taught loss over voxels whose (detached) confidence exceeds t_semi.
// No gradient flows through the pseudo-labels or the indicator.
template <typename T>
Var<T> semi_loss(Var<T> probs, const Tensor<T>& conf_detached, const LossWeights& lw,
                 SemiMask* mask_out);

enum class Branch { kLabeled, kUnlabeled };

// L_S = L_vox + lambda_adv(branch) * L_adv + lambda_semi * L_semi.
// The labeled branch must not carry a semi term; the unlabeled branch must not
// carry a voxel term.
template <typename T>
Var<T> total_s_loss(std::optional<Var<T>> l_vox, std::optional<Var<T>> l_adv,
                    std::optional<Var<T>> l_semi, const LossWeights& lw, Branch branch);

// Discriminator loss: bce(conf_real, 1) + bce(conf_fake, 0).
template <typename T>
Var<T> d_loss(Var<T> conf_real, Var<T> conf_fake);

}  // namespace vseg::losses
