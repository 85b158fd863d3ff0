#pragma once

#include <array>
#include <filesystem>
#include <memory>
#include <vector>

#include "vseg/nn.hpp"
#include "vseg/voldata.hpp"

namespace vseg::pggan {

using ad::Tape;
using ad::Var;

// Stage resolutions plus iteration bookkeeping. Every stage doubles all three
// dims of its predecessor except the final stage, which may hold depth and
// double only the in-plane dims (the 64^3 -> 64x128x128 step at full scale).
struct GrowthSchedule {
  std::vector<std::array<int64_t, 3>> stages;
  int64_t iterations_per_stage = 2000;
  int64_t fade_iterations = 1000;

  void validate() const;
  int num_stages() const { return int(stages.size()); }
  // Upsampling factors taking stage s-1 to stage s.
  std::array<int, 3> factors(int stage) const;

  static GrowthSchedule desk_default();
  static GrowthSchedule full_default();
};

struct FadeState {
  double alpha = 1.0;
  int stage_index = 0;

  // Linear ramp over the fade window, pinned at 1 afterwards; stage 0 never fades.
  static FadeState at_iteration(const GrowthSchedule& s, int stage, int64_t iteration);
};

struct PgganConfig {
  GrowthSchedule schedule = GrowthSchedule::desk_default();
  int64_t latent_channels = 64;
  std::vector<int64_t> stage_channels;  // feature width per stage; defaulted if empty
  int64_t batch_size = 4;
  double g_lr = 1e-3;
  double d_lr = 1e-3;
  double adam_beta1 = 0.0;
  double adam_beta2 = 0.99;
  double gp_weight = 10.0;
  uint64_t seed = 0;

  void finalize();  // fills stage_channels, validates
};

// ---- Generator (tape-based) --------------------------------------------------

template <typename T>
class Generator {
 public:
  explicit Generator(const PgganConfig& cfg);

  // z: (N,2,2,2,latent). Output (N,Z,H,W,1) in [0,1] at the fade's stage shape.
  Var<T> forward(Tape<T>& tape, Var<T> z, const FadeState& fade) const;

  // Appends the next stage's block and head; existing parameters untouched.
  void grow();

  int built_stages() const { return int(blocks_.size()); }
  nn::ParamSet<T>& params() { return params_; }
  const nn::ParamSet<T>& params() const { return params_; }
  const PgganConfig& config() const { return cfg_; }

 private:
  struct Block {
    std::array<int, 3> up_factors;
    nn::Conv3dLayer<T> conv1, conv2;
    nn::InstanceNormLayer<T> norm1, norm2;
  };
  struct Head {
    nn::Conv3dLayer<T> to_vol;
  };

  Var<T> stage_features(Tape<T>& tape, Var<T> z, int stage, std::vector<Var<T>>* all) const;

  PgganConfig cfg_;
  nn::ParamSet<T> params_;
  std::vector<Block> blocks_;
  std::vector<Head> heads_;
  Rng init_rng_;
};

// ---- Critic (hand-rolled backprop so the gradient penalty can differentiate
//      through its own input gradient) ----------------------------------------

template <typename T>
class Critic {
 public:
  explicit Critic(const PgganConfig& cfg);
  ~Critic();

  void grow();
  int built_stages() const { return stages_built_; }

  // Per-sample scores, shape (N). Saves activations for backward().
  Tensor<T> forward(const Tensor<T>& x, const FadeState& fade);

  // Backpropagates d(sum_n seed_n * score_n); returns the input gradient.
  // accum_params: accumulate parameter gradients of the main loss.
  // save_adjoint: record the adjoint stream so gp_second_pass can run.
  Tensor<T> backward(const Tensor<T>& seed, bool accum_params, bool save_adjoint);

  // Second pass of the gradient penalty: given dGP/d(input gradient), walks the
  // adjoint chain forward, accumulating dGP/d(params). Requires a preceding
  // backward(..., save_adjoint=true) on the same forward.
  void gp_second_pass(const Tensor<T>& s0);

  nn::ParamSet<T>& params() { return params_; }
  const nn::ParamSet<T>& params() const { return params_; }

  struct Layer;  // polymorphic kernel-level layer (conv / leaky / downsample)

 private:
  struct Pipeline;

  // Assembles the layer sequence for (stage, alpha); layers are shared, the
  // pipeline is a view.
  std::unique_ptr<Pipeline> assemble(const FadeState& fade);

  PgganConfig cfg_;
  nn::ParamSet<T> params_;
  int stages_built_ = 0;
  Rng init_rng_;

  struct StageLayers {
    std::vector<std::shared_ptr<Layer>> from_vol;  // 1x1 conv + leaky
    std::vector<std::shared_ptr<Layer>> block;     // conv,leaky,conv,leaky,down
  };
  std::vector<StageLayers> stage_layers_;
  std::vector<std::shared_ptr<Layer>> head_;  // conv3,leaky,conv4(valid),leaky,conv1
  std::unique_ptr<Pipeline> live_;            // pipeline of the last forward
};

// ---- Training ----------------------------------------------------------------

struct PgganLogRow {
  int64_t iteration = 0;  // global, across stages
  int stage = 0;
  double alpha = 1.0;
  double critic_loss = 0.0;  // W-loss + gp term
  double gen_loss = 0.0;
  double gp = 0.0;
  double real_score = 0.0;
  double fake_score = 0.0;
};

template <typename T>
struct TrainedPggan {
  std::unique_ptr<Generator<T>> generator;
  std::unique_ptr<Critic<T>> critic;
  std::vector<PgganLogRow> log;
};

// WGAN-GP training over the growth schedule; checkpoints per stage plus a
// final generator checkpoint are written under out_dir (empty = no files).
template <typename T>
TrainedPggan<T> train_pggan(const std::vector<voldata::CtVolume>& dataset,
                            const PgganConfig& cfg, const std::filesystem::path& out_dir = {});

// n volumes from the final stage (requires alpha = 1), deterministic in seed.
template <typename T>
std::vector<voldata::CtVolume> synthesize(const Generator<T>& g, int n, uint64_t seed,
                                          const std::array<double, 3>& spacing_mm = {1.5, 0.97,
                                                                                     0.97});

}  // namespace vseg::pggan
