#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "test_helpers.hpp"
#include "vseg/checkpoint.hpp"
#include "vseg/trainer.hpp"

using namespace vseg;
using namespace vseg::trainer;
namespace fs = std::filesystem;

namespace {

// Writes a small phantom dataset and returns its directory.
fs::path make_dataset(const std::string& tag, int n_labeled, int n_unlabeled, int n_val,
                      std::array<int64_t, 3> shape = {16, 32, 32}) {
  const fs::path dir = fs::temp_directory_path() / ("vseg_ds_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  voldata::DatasetManifest m;
  m.grid_shape = shape;
  m.spacing_mm = {1.5, 0.97, 0.97};
  m.class_names.assign(voldata::kClassNames.begin(), voldata::kClassNames.end());
  uint64_t seed = 0;
  auto add = [&](const std::string& role, const std::string& split, bool labels) {
    voldata::PhantomSpec ps;
    ps.seed = seed;
    ps.grid_shape = shape;
    auto [raw, lab] = voldata::generate_phantom(ps);
    const auto vol = voldata::normalize_intensity(raw);
    char id[32];
    std::snprintf(id, sizeof(id), "case_%03d", int(seed));
    voldata::CaseMeta cm{id, seed, role, split};
    voldata::write_case(dir / id, vol, labels ? &lab : nullptr, cm);
    m.cases.push_back(cm);
    ++seed;
  };
  for (int i = 0; i < n_labeled; ++i) add("labeled", "train", true);
  for (int i = 0; i < n_unlabeled; ++i) add("unlabeled", "train", false);
  for (int i = 0; i < n_val; ++i) add("labeled", "val", true);
  voldata::write_manifest(dir, m);
  return dir;
}

std::vector<std::string> ids(int from, int to) {
  std::vector<std::string> out;
  for (int i = from; i < to; ++i) {
    char id[32];
    std::snprintf(id, sizeof(id), "case_%03d", i);
    out.push_back(id);
  }
  return out;
}

TrainConfig small_cfg(Variant v, int n_labeled, int n_unlabeled, int n_val) {
  TrainConfig cfg;
  cfg.max_iterations = 4;
  cfg.pretrain_iterations = 2;
  cfg.base_channels = 4;
  cfg.disc_base_channels = 4;
  cfg.seed = 3;
  cfg.experiment.variant = v;
  cfg.experiment.labeled_cases = ids(0, n_labeled);
  if (n_unlabeled > 0) cfg.experiment.unlabeled_cases = ids(n_labeled, n_labeled + n_unlabeled);
  if (n_val > 0)
    cfg.experiment.val_cases = ids(n_labeled + n_unlabeled, n_labeled + n_unlabeled + n_val);
  return cfg;
}

}  // namespace

TEST_CASE("poly_lr: endpoints, frozen value, monotonicity, clamping") {
  CHECK(poly_lr(5e-4, 0, 40000, 0.9) == 5e-4);
  CHECK(poly_lr(5e-4, 40000, 40000, 0.9) == 0.0);
  // 5e-4 * 0.5^0.9 (midpoint of the paper's 40k schedule)
  CHECK(poly_lr(5e-4, 20000, 40000, 0.9) == doctest::Approx(2.67943e-4).epsilon(1e-5));
  CHECK(poly_lr(5e-4, 50000, 40000, 0.9) == 0.0);  // past the end clamps to zero
  double prev = 1.0;
  for (int64_t it : {0, 1, 100, 1000, 20000, 39999}) {
    const double lr = poly_lr(5e-4, it, 40000, 0.9);
    CHECK(lr < prev);
    prev = lr;
  }
  CHECK_THROWS_AS(poly_lr(5e-4, -1, 100, 0.9), InvalidArgument);
}

TEST_CASE("experiment spec: variant/case-list contracts") {
  ExperimentSpec e;
  e.labeled_cases = {"a"};
  e.variant = Variant::kResUnet;
  CHECK_NOTHROW(e.validate());
  e.unlabeled_cases = {"b"};
  CHECK_THROWS_AS(e.validate(), InvalidArgument);  // non-semi with unlabeled data
  e.variant = Variant::kResUnetAuxAdvSemi;
  CHECK_NOTHROW(e.validate());
  e.unlabeled_cases.clear();
  CHECK_THROWS_AS(e.validate(), InvalidArgument);  // semi without unlabeled data
  CHECK(variant_from_string("res_unet_aux_adv_semi") == Variant::kResUnetAuxAdvSemi);
  CHECK(variant_to_string(Variant::kResUnetAux) == "res_unet_aux");
  CHECK_THROWS_AS(variant_from_string("nope"), InvalidArgument);
}

TEST_CASE("labeled step: S/D parameter isolation contracts") {
  const auto dir = make_dataset("iso", 2, 0, 0);
  auto cfg = small_cfg(Variant::kResUnetAuxAdv, 2, 0, 0);
  Trainer tr(cfg, dir);
  auto batch = tr.sample_labeled_batch();

  const uint64_t s_before = ckpt::params_checksum(tr.seg().params());
  const uint64_t d_before = ckpt::params_checksum(tr.disc_net()->params());
  PhaseChecksums probe;
  auto row = tr.train_step_labeled(batch, &probe);
  CHECK(row.l_vox > 0.0);
  CHECK(row.l_d > 0.0);
  CHECK(row.branch == "labeled");

  // S-update moved S but left D bit-identical
  CHECK(probe.s_after_s_update != s_before);
  CHECK(probe.d_after_s_update == d_before);
  // D-update moved D but left S bit-identical
  CHECK(probe.d_after_d_update != probe.d_after_s_update);
  CHECK(probe.s_after_d_update == probe.s_after_s_update);
}

TEST_CASE("unlabeled step: phase discipline, D untouched, zero-lambda no-op") {
  const auto dir = make_dataset("unl", 2, 2, 0);
  auto cfg = small_cfg(Variant::kResUnetAuxAdvSemi, 2, 2, 0);
  cfg.pretrain_iterations = 1;

  Trainer tr(cfg, dir);
  auto lb = tr.sample_labeled_batch();
  auto ub = tr.sample_unlabeled_batch();

  // phase discipline: unlabeled step before the pretraining boundary rejects
  CHECK_THROWS_AS(tr.train_step_unlabeled(ub), InvalidArgument);
  tr.train_step_labeled(lb);  // iteration 0 -> 1 == pretrain_iterations

  // D parameters bit-identical across an unlabeled step
  const uint64_t d_before = ckpt::params_checksum(tr.disc_net()->params());
  const uint64_t s_before = ckpt::params_checksum(tr.seg().params());
  auto row = tr.train_step_unlabeled(ub);
  CHECK(ckpt::params_checksum(tr.disc_net()->params()) == d_before);
  CHECK(ckpt::params_checksum(tr.seg().params()) != s_before);
  CHECK(row.branch == "unlabeled");
  CHECK(row.lr_d == 0.0);
  CHECK(row.trusted_frac >= 0.0);
  CHECK(row.trusted_frac <= 1.0);

  // lambda_adv = lambda_semi = 0 on a fresh optimizer: zero objective, zero
  // gradient, zero Adam moments -- parameters stay bit-identical.
  auto cfg0 = cfg;
  cfg0.pretrain_iterations = 0;
  cfg0.loss_weights.lambda_adv_unlabeled = 0.0;
  cfg0.loss_weights.lambda_semi = 0.0;
  Trainer tr0(cfg0, dir);
  const uint64_t s0 = ckpt::params_checksum(tr0.seg().params());
  auto ub0 = tr0.sample_unlabeled_batch();
  tr0.train_step_unlabeled(ub0);
  CHECK(ckpt::params_checksum(tr0.seg().params()) == s0);
}

TEST_CASE("zero-adversarial-weight step equals a pure supervised step") {
  const auto dir = make_dataset("dec", 2, 0, 0);
  // A: adversarial variant with lambda_adv = 0; B: plain aux variant.
  auto cfg_a = small_cfg(Variant::kResUnetAuxAdv, 2, 0, 0);
  cfg_a.loss_weights.lambda_adv_labeled = 0.0;
  auto cfg_b = small_cfg(Variant::kResUnetAux, 2, 0, 0);

  Trainer ta(cfg_a, dir);
  Trainer tb(cfg_b, dir);
  auto batch_a = ta.sample_labeled_batch();
  auto batch_b = tb.sample_labeled_batch();
  CHECK(vseg::testing::max_abs_diff(batch_a.x, batch_b.x) == 0.0);  // same stream

  ta.train_step_labeled(batch_a);
  tb.train_step_labeled(batch_b);
  // identical S parameters after one step (gradient identity within 1e-6)
  double worst = 0.0;
  for (const auto* pa : ta.seg().params().all()) {
    const auto* pb = tb.seg().params().find(pa->name);
    REQUIRE(pb != nullptr);
    worst = std::max(worst, vseg::testing::max_abs_diff(pa->value, pb->value));
  }
  CHECK(worst <= 1e-6);
}

TEST_CASE("run_experiment: bookkeeping, ablation contract, determinism") {
  const auto dir = make_dataset("run", 2, 0, 1);
  auto cfg = small_cfg(Variant::kResUnetAux, 2, 0, 1);
  cfg.max_iterations = 4;
  cfg.pretrain_iterations = 0;

  const fs::path run1 = fs::temp_directory_path() / "vseg_run1";
  const fs::path run2 = fs::temp_directory_path() / "vseg_run2";
  fs::remove_all(run1);
  fs::remove_all(run2);

  Trainer tr(cfg, dir);
  CHECK(tr.disc_net() == nullptr);  // no adversary for the ablation variant
  auto res = tr.run_experiment(run1);
  CHECK(res.iterations_done == 4);
  CHECK(int64_t(res.log.size()) == 4);
  for (const auto& row : res.log) CHECK(row.branch == "labeled");
  CHECK(fs::exists(run1 / "log.csv"));
  CHECK(fs::exists(run1 / "final.ckpt"));
  CHECK(fs::exists(run1 / "report.json"));
  CHECK(res.best_val_dsc >= 0.0);

  // end-to-end determinism: a second run from the same seed matches exactly
  Trainer tr2(cfg, dir);
  auto res2 = tr2.run_experiment(run2);
  CHECK(log_to_csv(res.log) == log_to_csv(res2.log));
  CHECK(metrics::report_to_json(res.report) == metrics::report_to_json(res2.report));
  std::ifstream f1(run1 / "final.ckpt", std::ios::binary), f2(run2 / "final.ckpt", std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(b1 == b2);
  fs::remove_all(run1);
  fs::remove_all(run2);
}

TEST_CASE("run_experiment resumes without iteration gaps") {
  const auto dir = make_dataset("res", 2, 0, 0);
  auto cfg = small_cfg(Variant::kResUnetAux, 2, 0, 0);
  cfg.max_iterations = 3;
  cfg.pretrain_iterations = 0;
  cfg.validation_every = 1;  // persist state every iteration

  const fs::path run = fs::temp_directory_path() / "vseg_resume";
  fs::remove_all(run);
  {
    Trainer tr(cfg, dir);
    tr.run_experiment(run);
  }
  // extend the schedule and resume
  auto cfg2 = cfg;
  cfg2.max_iterations = 6;
  Trainer tr2(cfg2, dir);
  auto res = tr2.run_experiment(run, /*resume=*/true);
  CHECK(res.iterations_done == 6);
  CHECK(res.log.front().iteration == 3);  // continued, no gap or overlap

  std::ifstream lf(run / "log.csv");
  std::string line;
  std::vector<int64_t> iters;
  std::getline(lf, line);  // header
  while (std::getline(lf, line))
    if (!line.empty()) iters.push_back(std::stoll(line.substr(0, line.find(','))));
  REQUIRE(iters.size() == 6);
  for (int64_t i = 0; i < 6; ++i) CHECK(iters[size_t(i)] == i);
  fs::remove_all(run);
}

TEST_CASE("semi experiment interleaves branches after pretraining") {
  const auto dir = make_dataset("sem", 2, 2, 0);
  auto cfg = small_cfg(Variant::kResUnetAuxAdvSemi, 2, 2, 0);
  cfg.max_iterations = 8;
  cfg.pretrain_iterations = 3;
  cfg.seed = 9;
  const fs::path run = fs::temp_directory_path() / "vseg_semi_run";
  fs::remove_all(run);
  Trainer tr(cfg, dir);
  auto res = tr.run_experiment(run);
  REQUIRE(res.log.size() == 8);
  for (int i = 0; i < 3; ++i) CHECK(res.log[size_t(i)].branch == "labeled");
  int unl = 0;
  for (int i = 3; i < 8; ++i) unl += res.log[size_t(i)].branch == "unlabeled";
  CHECK(unl > 0);  // seed 9 draws at least one unlabeled turn at p=0.5
  fs::remove_all(run);
}

TEST_CASE("infer_case splits, stacks and matches single-pass inference") {
  const auto dir = make_dataset("inf", 2, 0, 0, {64, 32, 32});
  auto cfg = small_cfg(Variant::kResUnetAux, 2, 0, 0);
  cfg.crop_depth = 16;
  Trainer tr(cfg, dir);

  voldata::PhantomSpec ps;
  ps.seed = 77;
  ps.grid_shape = {64, 32, 32};
  auto [raw, lab] = voldata::generate_phantom(ps);
  const auto vol = voldata::normalize_intensity(raw);

  // (64,H,W) with depth 16 -> four forward passes, one (64,H,W) label map
  auto pred = tr.infer_case(vol, 16);
  CHECK(pred.classes.shape() == std::vector<int64_t>{64, 32, 32});

  // desk-sized case: single pass equals whole-volume forward
  voldata::PhantomSpec ps2;
  ps2.seed = 78;
  ps2.grid_shape = {16, 32, 32};
  auto [raw2, lab2] = voldata::generate_phantom(ps2);
  const auto vol2 = voldata::normalize_intensity(raw2);
  auto pred2 = tr.infer_case(vol2, 16);
  CHECK(pred2.classes.shape() == std::vector<int64_t>{16, 32, 32});

  // indivisible depth propagates the shape violation
  CHECK_THROWS_AS(tr.infer_case(vol, 24), InvalidArgument);
}
