#include "vseg/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "vseg/checkpoint.hpp"
#include "vseg/common.hpp"

namespace vseg::trainer {

using nlohmann::json;

Variant variant_from_string(const std::string& s) {
  if (s == "res_unet") return Variant::kResUnet;
  if (s == "res_unet_aux") return Variant::kResUnetAux;
  if (s == "res_unet_aux_adv") return Variant::kResUnetAuxAdv;
  if (s == "res_unet_aux_adv_semi") return Variant::kResUnetAuxAdvSemi;
  throw InvalidArgument("unknown variant: " + s);
}

std::string variant_to_string(Variant v) {
  switch (v) {
    case Variant::kResUnet: return "res_unet";
    case Variant::kResUnetAux: return "res_unet_aux";
    case Variant::kResUnetAuxAdv: return "res_unet_aux_adv";
    case Variant::kResUnetAuxAdvSemi: return "res_unet_aux_adv_semi";
  }
  throw InvalidArgument("bad variant enum");
}

bool variant_has_aux(Variant v) { return v != Variant::kResUnet; }
bool variant_has_adv(Variant v) {
  return v == Variant::kResUnetAuxAdv || v == Variant::kResUnetAuxAdvSemi;
}
bool variant_has_semi(Variant v) { return v == Variant::kResUnetAuxAdvSemi; }

void ExperimentSpec::validate() const {
  check_arg(!labeled_cases.empty(), "experiment: labeled case list is empty");
  if (variant_has_semi(variant)) {
    check_arg(!unlabeled_cases.empty(), "experiment: semi variant requires unlabeled cases");
  } else {
    check_arg(unlabeled_cases.empty(),
              "experiment: only the semi variant may carry unlabeled cases");
  }
}

void TrainConfig::validate() const {
  check_arg(s_lr > 0 && d_lr > 0, "config: learning rates must be positive");
  check_arg(max_iterations >= 0, "config: negative max_iterations");
  check_arg(pretrain_iterations <= max_iterations,
            "config: pretrain_iterations must not exceed max_iterations");
  check_arg(batch_size >= 1, "config: batch_size must be positive");
  check_arg(loss_weights.t_semi >= 0.0 || true, "");
  experiment.validate();
}

int64_t TrainConfig::validation_interval() const {
  if (validation_every > 0) return validation_every;
  return std::max<int64_t>(1, max_iterations / 20);
}

double poly_lr(double base_lr, int64_t iteration, int64_t max_iterations, double power) {
  check_arg(iteration >= 0, "poly_lr: negative iteration");
  check_arg(max_iterations > 0, "poly_lr: max_iterations must be positive");
  if (iteration >= max_iterations) return 0.0;
  return base_lr * std::pow(1.0 - double(iteration) / double(max_iterations), power);
}

std::string log_to_csv(const std::vector<TrainLogRow>& rows) {
  std::ostringstream os;
  os << "iteration,branch,lr_s,lr_d,l_vox,l_adv,l_semi,l_d,trusted_frac\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%lld,%s,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n",
                  (long long)r.iteration, r.branch.c_str(), r.lr_s, r.lr_d, r.l_vox, r.l_adv,
                  r.l_semi, r.l_d, r.trusted_frac);
    os << buf;
  }
  return os.str();
}

// ---- Trainer -----------------------------------------------------------------

Trainer::Trainer(TrainConfig cfg, const std::filesystem::path& data_dir)
    : cfg_(std::move(cfg)),
      rng_data_(Rng::derive(cfg_.seed, 11)),
      rng_coin_(Rng::derive(cfg_.seed, 12)) {
  cfg_.validate();
  load_cases(data_dir);

  const auto& first = find_case(cfg_.experiment.labeled_cases.front());
  segnet::SegNetConfig scfg;
  scfg.in_depth = cfg_.crop_depth;
  scfg.in_height = first.volume.height();
  scfg.in_width = first.volume.width();
  scfg.base_channels = cfg_.base_channels;
  scfg.use_aux = variant_has_aux(cfg_.experiment.variant);
  scfg.init_seed = Rng::derive(cfg_.seed, 21);
  seg_ = std::make_unique<segnet::SegNet<float>>(scfg);
  adam_s_ = std::make_unique<nn::Adam<float>>(seg_->params().all());

  if (variant_has_adv(cfg_.experiment.variant)) {
    disc::DiscConfig dcfg;
    dcfg.in_depth = cfg_.crop_depth;
    dcfg.in_height = first.volume.height();
    dcfg.in_width = first.volume.width();
    dcfg.base_channels = cfg_.disc_base_channels;
    dcfg.num_classes = scfg.num_classes;
    dcfg.init_seed = Rng::derive(cfg_.seed, 22);
    disc_ = std::make_unique<disc::DiscNet<float>>(dcfg);
    adam_d_ = std::make_unique<nn::Adam<float>>(disc_->params().all());
  }

  last_dsc_.assign(size_t(seg_->config().num_classes), 0.0);
}

void Trainer::load_cases(const std::filesystem::path& data_dir) {
  const auto manifest = voldata::read_manifest(data_dir);
  spacing_mm_ = manifest.spacing_mm;
  auto want = [&](const std::string& id) {
    const auto& e = cfg_.experiment;
    auto in = [&](const std::vector<std::string>& v) {
      return std::find(v.begin(), v.end(), id) != v.end();
    };
    return in(e.labeled_cases) || in(e.unlabeled_cases) || in(e.val_cases);
  };
  for (const auto& cm : manifest.cases) {
    if (!want(cm.id)) continue;
    auto loaded = voldata::read_case(data_dir / cm.id);
    check_arg(loaded.volume.normalized, "trainer: case " + cm.id + " is not normalized");
    cases_.push_back({cm.id, std::move(loaded.volume), std::move(loaded.labels)});
  }
  for (const auto& id : cfg_.experiment.labeled_cases) {
    check_arg(find_case(id).labels.has_value(), "trainer: labeled case " + id + " has no labels");
    labeled_ids_.push_back(id);
  }
  for (const auto& id : cfg_.experiment.unlabeled_cases) {
    (void)find_case(id);
    unlabeled_ids_.push_back(id);
  }
  for (const auto& id : cfg_.experiment.val_cases)
    check_arg(find_case(id).labels.has_value(), "trainer: val case " + id + " has no labels");
}

const Trainer::CaseData& Trainer::find_case(const std::string& id) const {
  for (const auto& c : cases_)
    if (c.id == id) return c;
  throw InvalidArgument("trainer: case not found in dataset: " + id);
}

LabeledBatch Trainer::sample_labeled_batch() {
  const int64_t n = cfg_.batch_size;
  const auto& c0 = find_case(labeled_ids_.front());
  const int64_t hd = c0.volume.height(), wd = c0.volume.width(), dd = cfg_.crop_depth;
  LabeledBatch b;
  b.x = Tensor<float>({n, dd, hd, wd, 1});
  b.y = Tensor<uint8_t>({n, dd, hd, wd});
  for (int64_t i = 0; i < n; ++i) {
    const auto& c = find_case(labeled_ids_[size_t(rng_data_.uniform_int(
        int64_t(labeled_ids_.size())))]);
    auto [vol, lab] = voldata::random_crop_subvolume(c.volume, c.labels, dd, rng_data_);
    std::copy(vol.data.data(), vol.data.data() + vol.data.size(),
              b.x.data() + i * vol.data.size());
    std::copy(lab->classes.data(), lab->classes.data() + lab->classes.size(),
              b.y.data() + i * lab->classes.size());
  }
  return b;
}

UnlabeledBatch Trainer::sample_unlabeled_batch() {
  const int64_t n = cfg_.batch_size;
  const auto& c0 = find_case(unlabeled_ids_.front());
  const int64_t hd = c0.volume.height(), wd = c0.volume.width(), dd = cfg_.crop_depth;
  UnlabeledBatch b;
  b.x = Tensor<float>({n, dd, hd, wd, 1});
  for (int64_t i = 0; i < n; ++i) {
    const auto& c = find_case(unlabeled_ids_[size_t(rng_data_.uniform_int(
        int64_t(unlabeled_ids_.size())))]);
    auto [vol, lab] = voldata::random_crop_subvolume(c.volume, std::nullopt, dd, rng_data_);
    std::copy(vol.data.data(), vol.data.data() + vol.data.size(),
              b.x.data() + i * vol.data.size());
  }
  return b;
}

std::vector<double> Trainer::batch_dsc_and_counts(const Tensor<float>& fused_probs,
                                                  const Tensor<uint8_t>& gt,
                                                  std::vector<int64_t>& counts) {
  const int c = seg_->config().num_classes;
  const auto pred = ad::argmax_channels(fused_probs);
  std::vector<int64_t> inter(size_t(c), 0), np(size_t(c), 0), ng(size_t(c), 0);
  for (int64_t i = 0; i < gt.size(); ++i) {
    ng[gt[i]]++;
    np[pred[i]]++;
    if (gt[i] == pred[i]) inter[gt[i]]++;
  }
  counts.assign(size_t(c), 0);
  std::vector<double> dsc(size_t(c), 0.0);
  for (int cc = 0; cc < c; ++cc) {
    counts[size_t(cc)] = ng[size_t(cc)];
    if (ng[size_t(cc)] + np[size_t(cc)] > 0) {
      last_dsc_[size_t(cc)] =
          2.0 * double(inter[size_t(cc)]) / double(ng[size_t(cc)] + np[size_t(cc)]);
    }
    // classes absent from the batch keep the carried-over DSC (init 0)
    dsc[size_t(cc)] = last_dsc_[size_t(cc)];
  }
  return dsc;
}

void Trainer::check_finite(double v, const char* what) {
  if (!std::isfinite(v)) {
    throw RuntimeFailure(std::string("trainer: non-finite ") + what + " at iteration " +
                         std::to_string(iteration_) + "; last good checkpoint: " +
                         (last_checkpoint_.empty() ? "<none>" : last_checkpoint_.string()));
  }
}

TrainLogRow Trainer::train_step_labeled(const LabeledBatch& batch, PhaseChecksums* probe) {
  const bool adv = variant_has_adv(cfg_.experiment.variant);
  TrainLogRow row;
  row.iteration = iteration_;
  row.branch = "labeled";
  row.lr_s = poly_lr(cfg_.s_lr, iteration_, cfg_.max_iterations, cfg_.poly_power);
  row.lr_d = adv ? poly_lr(cfg_.d_lr, iteration_, cfg_.max_iterations, cfg_.poly_power) : 0.0;

  // ---- S-update: L_vox (+ lambda_adv * L_adv with D frozen) ----
  ad::Tape<float> tape;
  ad::Var<float> x = tape.constant(batch.x);
  auto fwd = seg_->forward(tape, x);
  const Tensor<float> fused_detached = fwd.fused.value();

  std::vector<int64_t> counts;
  const auto dsc = batch_dsc_and_counts(fused_detached, batch.y, counts);
  const auto weights = losses::adaptive_weights(dsc, counts);
  auto l_vox = losses::weighted_mce(fwd.fused, batch.y, weights);
  row.l_vox = double(l_vox.value()[0]);

  std::optional<ad::Var<float>> l_adv;
  if (adv) {
    disc_->set_trainable(false);
    auto disc_in = disc::make_disc_input(x, fwd.fused, disc::DiscInputMode::kStraightThrough);
    auto conf = disc_->forward(tape, disc_in);
    l_adv = losses::adversarial_loss(conf);
    row.l_adv = double(l_adv->value()[0]);
  }
  auto total = losses::total_s_loss<float>(l_vox, l_adv, std::nullopt, cfg_.loss_weights,
                                           losses::Branch::kLabeled);
  check_finite(double(total.value()[0]), "S loss");
  seg_->params().zero_grads();
  tape.backward(total);
  adam_s_->step(float(row.lr_s));
  if (probe) {
    probe->s_after_s_update = ckpt::params_checksum(seg_->params());
    probe->d_after_s_update = disc_ ? ckpt::params_checksum(disc_->params()) : 0;
  }

  // ---- D-update: Eq.-12 BCE with S detached (hard one-hot fake input) ----
  if (adv) {
    disc_->set_trainable(true);
    ad::Tape<float> dtape;
    ad::Var<float> xd = dtape.constant(batch.x);
    const auto pred_onehot =
        ad::onehot_channels<float>(ad::argmax_channels(fused_detached),
                                   seg_->config().num_classes);
    const auto gt_onehot = ad::onehot_channels<float>(
        batch.y, seg_->config().num_classes);
    auto in_real =
        disc::make_disc_input(xd, dtape.constant(gt_onehot), disc::DiscInputMode::kHard);
    auto in_fake =
        disc::make_disc_input(xd, dtape.constant(pred_onehot), disc::DiscInputMode::kHard);
    auto conf_real = disc_->forward(dtape, in_real);
    auto conf_fake = disc_->forward(dtape, in_fake);
    auto l_d = losses::d_loss(conf_real, conf_fake);
    row.l_d = double(l_d.value()[0]);
    check_finite(row.l_d, "D loss");
    disc_->params().zero_grads();
    dtape.backward(l_d);
    adam_d_->step(float(row.lr_d));
  }
  if (probe) {
    probe->s_after_d_update = ckpt::params_checksum(seg_->params());
    probe->d_after_d_update = disc_ ? ckpt::params_checksum(disc_->params()) : 0;
  }

  ++iteration_;
  return row;
}

TrainLogRow Trainer::train_step_unlabeled(const UnlabeledBatch& batch) {
  check_arg(variant_has_semi(cfg_.experiment.variant),
            "trainer: unlabeled steps require the semi variant");
  check_arg(iteration_ >= cfg_.pretrain_iterations,
            "trainer: unlabeled step during the pretraining phase");
  TrainLogRow row;
  row.iteration = iteration_;
  row.branch = "unlabeled";
  row.lr_s = poly_lr(cfg_.s_lr, iteration_, cfg_.max_iterations, cfg_.poly_power);
  row.lr_d = 0.0;  // D is never updated on unlabeled batches

  ad::Tape<float> tape;
  ad::Var<float> x = tape.constant(batch.x);
  auto fwd = seg_->forward(tape, x);

  disc_->set_trainable(false);
  auto disc_in = disc::make_disc_input(x, fwd.fused, disc::DiscInputMode::kStraightThrough);
  auto conf = disc_->forward(tape, disc_in);
  auto l_adv = losses::adversarial_loss(conf);
  row.l_adv = double(l_adv.value()[0]);

  losses::SemiMask mask;
  auto l_semi = losses::semi_loss(fwd.fused, conf.value(), cfg_.loss_weights, &mask);
  row.l_semi = double(l_semi.value()[0]);
  row.trusted_frac = mask.trusted_fraction;

  auto total = losses::total_s_loss<float>(std::nullopt, l_adv, l_semi, cfg_.loss_weights,
                                           losses::Branch::kUnlabeled);
  check_finite(double(total.value()[0]), "S loss (unlabeled)");
  seg_->params().zero_grads();
  tape.backward(total);
  adam_s_->step(float(row.lr_s));

  ++iteration_;
  return row;
}

voldata::LabelMap Trainer::infer_case(const voldata::CtVolume& vol, int64_t depth) {
  const auto slabs = voldata::split_for_inference(vol, depth);
  std::vector<voldata::OneHotMap> chunks;
  for (const auto& slab : slabs) {
    ad::Tape<float> tape;
    Tensor<float> x({1, slab.depth(), slab.height(), slab.width(), 1});
    std::copy(slab.data.data(), slab.data.data() + slab.data.size(), x.data());
    auto fwd = seg_->forward(tape, tape.constant(x));
    const Tensor<float>& fused = fwd.fused.value();  // (1,Z,H,W,C)
    const int c = seg_->config().num_classes;
    voldata::OneHotMap oh;
    oh.num_classes = c;
    oh.data = Tensor<float>({c, slab.depth(), slab.height(), slab.width()});
    const int64_t vox = slab.data.size();
    for (int64_t i = 0; i < vox; ++i)
      for (int cc = 0; cc < c; ++cc) oh.data[cc * vox + i] = fused[i * c + cc];
    chunks.push_back(std::move(oh));
  }
  return voldata::from_one_hot(voldata::stack_predictions(chunks));
}

metrics::AggregateReport Trainer::evaluate_on(const std::vector<std::string>& case_ids) {
  std::vector<metrics::MetricReport> reports;
  for (const auto& id : case_ids) {
    const auto& c = find_case(id);
    check_arg(c.labels.has_value(), "evaluate: case " + id + " has no labels");
    const auto pred = infer_case(c.volume, cfg_.crop_depth);
    reports.push_back(metrics::evaluate_case(*c.labels, pred, spacing_mm_));
  }
  return metrics::aggregate(reports);
}

void Trainer::save_state(const std::filesystem::path& run_dir, const std::string& tag) {
  std::filesystem::create_directories(run_dir);
  const auto path = run_dir / (tag + ".ckpt");
  ckpt::save_params(path, seg_->params(), adam_s_.get());
  if (disc_) ckpt::save_params(run_dir / (tag + "_disc.ckpt"), disc_->params(), adam_d_.get());
  last_checkpoint_ = path;
}

RunResult Trainer::run_experiment(const std::filesystem::path& run_dir, bool resume) {
  std::filesystem::create_directories(run_dir);
  RunResult result;
  double best = -1.0;
  int64_t start_iter = 0;

  const auto state_path = run_dir / "trainer_state.json";
  if (resume) {
    check_runtime(std::filesystem::exists(state_path),
                  "resume: no trainer_state.json in " + run_dir.string());
    std::ifstream f(state_path);
    json j = json::parse(f);
    start_iter = j.at("iteration").get<int64_t>();
    best = j.at("best_val_dsc").get<double>();
    rng_data_.set_state(j.at("rng_data").get<std::string>());
    rng_coin_.set_state(j.at("rng_coin").get<std::string>());
    last_dsc_ = j.at("last_dsc").get<std::vector<double>>();
    ckpt::load_params(run_dir / "last.ckpt", seg_->params(), adam_s_.get());
    if (disc_) ckpt::load_params(run_dir / "last_disc.ckpt", disc_->params(), adam_d_.get());
    iteration_ = start_iter;
    // previously written rows are preserved by the caller appending logs
  }

  const bool semi = variant_has_semi(cfg_.experiment.variant);
  const double p_unlabeled =
      semi ? double(unlabeled_ids_.size()) /
                 double(unlabeled_ids_.size() + labeled_ids_.size())
           : 0.0;
  const int64_t val_every = cfg_.validation_interval();

  auto validate_now = [&]() {
    if (cfg_.experiment.val_cases.empty()) return;
    const auto agg = evaluate_on(cfg_.experiment.val_cases);
    double mean_dsc = 0.0;
    for (const auto& m : agg.mean) mean_dsc += m[0];
    mean_dsc /= double(agg.mean.size());
    if (mean_dsc > best) {
      best = mean_dsc;
      ckpt::save_params(run_dir / "best.ckpt", seg_->params());
    }
  };

  for (int64_t it = start_iter; it < cfg_.max_iterations; ++it) {
    const bool unlabeled_turn = semi && it >= cfg_.pretrain_iterations &&
                                rng_coin_.uniform() < p_unlabeled;
    TrainLogRow row = unlabeled_turn ? train_step_unlabeled(sample_unlabeled_batch())
                                     : train_step_labeled(sample_labeled_batch());
    result.log.push_back(row);
    if ((it + 1) % val_every == 0 || it + 1 == cfg_.max_iterations) {
      save_state(run_dir, "last");
      validate_now();
      // persist resume state
      json j;
      j["iteration"] = iteration_;
      j["best_val_dsc"] = best;
      j["rng_data"] = rng_data_.state();
      j["rng_coin"] = rng_coin_.state();
      j["last_dsc"] = last_dsc_;
      std::ofstream f(state_path);
      f << j.dump(2) << "\n";
    }
  }

  // final artifacts
  save_state(run_dir, "final");
  result.final_checkpoint = run_dir / "final.ckpt";
  if (!cfg_.experiment.val_cases.empty()) {
    if (best < 0) validate_now();
    // evaluate the best checkpoint
    nn::ParamSet<float>& ps = seg_->params();
    // keep the final weights aside, load best, evaluate, restore
    ckpt::save_params(run_dir / "final_tmp.ckpt", ps);
    if (std::filesystem::exists(run_dir / "best.ckpt"))
      ckpt::load_params(run_dir / "best.ckpt", ps);
    result.report = evaluate_on(cfg_.experiment.val_cases);
    ckpt::load_params(run_dir / "final_tmp.ckpt", ps);
    std::filesystem::remove(run_dir / "final_tmp.ckpt");
    std::ofstream rc(run_dir / "report.csv");
    rc << metrics::report_to_csv(result.report);
    std::ofstream rj(run_dir / "report.json");
    rj << metrics::report_to_json(result.report) << "\n";
  }
  result.best_val_dsc = best;
  result.best_checkpoint = run_dir / "best.ckpt";
  result.iterations_done = iteration_;

  std::ofstream lc(run_dir / "log.csv", resume ? std::ios::app : std::ios::out);
  if (resume) {
    // append without duplicating the header
    lc << log_to_csv(result.log).substr(log_to_csv({}).size());
  } else {
    lc << log_to_csv(result.log);
  }

  json summary;
  summary["iterations"] = iteration_;
  summary["best_val_dsc"] = best;
  summary["variant"] = variant_to_string(cfg_.experiment.variant);
  summary["seed"] = cfg_.seed;
  std::ofstream sf(run_dir / "summary.json");
  sf << summary.dump(2) << "\n";
  return result;
}

}  // namespace vseg::trainer
