#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "vseg/disc.hpp"
#include "vseg/losses.hpp"
#include "vseg/metrics.hpp"
#include "vseg/segnet.hpp"
#include "vseg/voldata.hpp"

namespace vseg::trainer {

enum class Variant { kResUnet, kResUnetAux, kResUnetAuxAdv, kResUnetAuxAdvSemi };

Variant variant_from_string(const std::string& s);
std::string variant_to_string(Variant v);
bool variant_has_aux(Variant v);
bool variant_has_adv(Variant v);
bool variant_has_semi(Variant v);

struct ExperimentSpec {
  std::vector<std::string> labeled_cases;
  std::vector<std::string> unlabeled_cases;
  std::vector<std::string> val_cases;
  Variant variant = Variant::kResUnetAux;

  void validate() const;
};

struct TrainConfig {
  double s_lr = 5e-4;
  double d_lr = 1e-4;
  double poly_power = 0.9;
  int64_t max_iterations = 2000;      // 40000 at full scale
  int64_t batch_size = 2;
  int64_t pretrain_iterations = 200;  // 5000 at full scale
  int64_t crop_depth = 16;
  int64_t base_channels = 8;
  int64_t disc_base_channels = 8;
  int64_t validation_every = 0;  // 0 = max_iterations/20
  losses::LossWeights loss_weights;
  uint64_t seed = 0;
  ExperimentSpec experiment;

  void validate() const;
  int64_t validation_interval() const;
};

// base_lr * (1 - iteration/max_iterations)^power, clamped to 0 past the end.
double poly_lr(double base_lr, int64_t iteration, int64_t max_iterations, double power);

struct TrainLogRow {
  int64_t iteration = 0;
  double lr_s = 0.0, lr_d = 0.0;
  double l_vox = 0.0, l_adv = 0.0, l_semi = 0.0, l_d = 0.0;
  double trusted_frac = 0.0;
  std::string branch;  // "labeled" | "unlabeled"
};

std::string log_to_csv(const std::vector<TrainLogRow>& rows);

struct LabeledBatch {
  Tensor<float> x;    // (N,Z,H,W,1)
  Tensor<uint8_t> y;  // (N,Z,H,W)
};

struct UnlabeledBatch {
  Tensor<float> x;
};

struct RunResult {
  std::vector<TrainLogRow> log;
  metrics::AggregateReport report;  // best checkpoint evaluated on the val split
  double best_val_dsc = -1.0;
  int64_t iterations_done = 0;
  std::filesystem::path best_checkpoint;
  std::filesystem::path final_checkpoint;
};

// Parameter checksums captured between the two phases of a labeled step, for
// verifying the freeze/detach contracts.
struct PhaseChecksums {
  uint64_t s_after_s_update = 0, d_after_s_update = 0;
  uint64_t s_after_d_update = 0, d_after_d_update = 0;
};

// Owns the networks, optimizers, RNG streams and the adaptive-weight carry
// state. Steps execute sequentially; the trainer is single-threaded over
// model state (kernels parallelize internally).
class Trainer {
 public:
  Trainer(TrainConfig cfg, const std::filesystem::path& data_dir);

  // One labeled adversarial iteration (S-update with frozen D, then D-update
  // with detached S). Non-adversarial variants run only the S-update.
  TrainLogRow train_step_labeled(const LabeledBatch& batch, PhaseChecksums* probe = nullptr);

  // One unlabeled iteration: S-update only; D is never updated here.
  TrainLogRow train_step_unlabeled(const UnlabeledBatch& batch);

  // Pretraining then interleaved training to max_iterations, periodic
  // validation, checkpointing and reporting into run_dir.
  RunResult run_experiment(const std::filesystem::path& run_dir, bool resume = false);

  // split -> forward -> stack -> argmax.
  voldata::LabelMap infer_case(const voldata::CtVolume& vol, int64_t depth);

  int64_t iteration() const { return iteration_; }
  segnet::SegNet<float>& seg() { return *seg_; }
  disc::DiscNet<float>* disc_net() { return disc_ ? disc_.get() : nullptr; }
  const TrainConfig& config() const { return cfg_; }

  // Draws a batch from the loaded cases (random case, random crop).
  LabeledBatch sample_labeled_batch();
  UnlabeledBatch sample_unlabeled_batch();

  metrics::AggregateReport evaluate_on(const std::vector<std::string>& case_ids);

 private:
  struct CaseData {
    std::string id;
    voldata::CtVolume volume;
    std::optional<voldata::LabelMap> labels;
  };

  const CaseData& find_case(const std::string& id) const;
  void load_cases(const std::filesystem::path& data_dir);
  std::vector<double> batch_dsc_and_counts(const Tensor<float>& fused_probs,
                                           const Tensor<uint8_t>& gt,
                                           std::vector<int64_t>& counts);
  void save_state(const std::filesystem::path& run_dir, const std::string& tag);
  void check_finite(double v, const char* what);

  TrainConfig cfg_;
  std::array<double, 3> spacing_mm_{1.5, 0.97, 0.97};
  std::vector<CaseData> cases_;
  std::vector<std::string> labeled_ids_, unlabeled_ids_;

  std::unique_ptr<segnet::SegNet<float>> seg_;
  std::unique_ptr<disc::DiscNet<float>> disc_;
  std::unique_ptr<nn::Adam<float>> adam_s_, adam_d_;

  Rng rng_data_;
  Rng rng_coin_;
  int64_t iteration_ = 0;
  std::vector<double> last_dsc_;  // adaptive-weight carry-over, init 0
  std::filesystem::path last_checkpoint_;
};

}  // namespace vseg::trainer
