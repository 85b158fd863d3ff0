// vseg: phantom generation, PGGAN synthesis, adversarial semi-supervised
// segmentation training, evaluation and report merging.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

#include "CLI11.hpp"
#include "json.hpp"
#include "vseg/checkpoint.hpp"
#include "vseg/common.hpp"
#include "vseg/metrics.hpp"
#include "vseg/pggan.hpp"
#include "vseg/trainer.hpp"
#include "vseg/voldata.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace vseg;

namespace {

int g_verbosity = 1;

void say(int level, const std::string& msg) {
  if (g_verbosity >= level) std::cout << msg << "\n";
}

json load_config(const std::string& path, const std::set<std::string>& allowed,
                 const std::set<std::string>& required) {
  std::ifstream f(path);
  check_runtime(f.good(), "cannot open config: " + path);
  json j = json::parse(f);
  check_arg(j.is_object(), "config must be a JSON object: " + path);
  for (const auto& [key, value] : j.items()) {
    (void)value;
    check_arg(allowed.count(key) != 0, "config " + path + ": unknown key \"" + key + "\"");
  }
  for (const auto& key : required)
    check_arg(j.contains(key), "config " + path + ": missing required key \"" + key + "\"");
  return j;
}

void require_out_dir(const fs::path& out, bool force) {
  if (fs::exists(out) && !fs::is_empty(out)) {
    check_arg(force, "output directory " + out.string() +
                         " exists and is not empty (pass --force to overwrite)");
  }
  fs::create_directories(out);
}

void copy_config_into(const std::string& cfg_path, const fs::path& out) {
  std::ifstream src(cfg_path, std::ios::binary);
  std::ofstream dst(out / "config.json", std::ios::binary);
  dst << src.rdbuf();
}

// Expands "@labeled" / "@unlabeled" / "@synthetic" / "@val" / "@test" against
// the dataset manifest; explicit ids pass through.
std::vector<std::string> expand_cases(const std::vector<std::string>& spec,
                                      const voldata::DatasetManifest& m) {
  std::vector<std::string> out;
  for (const auto& s : spec) {
    if (s.empty() || s[0] != '@') {
      out.push_back(s);
      continue;
    }
    for (const auto& c : m.cases) {
      const bool match = (s == "@labeled" && c.role == "labeled" && c.split == "train") ||
                         (s == "@unlabeled" && c.role == "unlabeled" && c.split == "train") ||
                         (s == "@synthetic" && c.role == "unlabeled-synthetic") ||
                         (s == "@val" && c.split == "val") || (s == "@test" && c.split == "test");
      if (match) out.push_back(c.id);
    }
  }
  check_arg(!out.empty() || spec.empty(), "case selector matched no cases");
  return out;
}

// ---- gen-data ----------------------------------------------------------------

int cmd_gen_data(const std::string& cfg_path, const fs::path& out, int64_t seed_override,
                 bool force) {
  const json j = load_config(cfg_path,
                             {"n_train_labeled", "n_train_unlabeled", "n_val", "n_test",
                              "grid_shape", "spacing_mm", "noise_sigma", "seed"},
                             {"n_train_labeled"});
  require_out_dir(out, force);

  voldata::PhantomSpec base;
  if (j.contains("grid_shape")) {
    const auto g = j["grid_shape"].get<std::vector<int64_t>>();
    check_arg(g.size() == 3, "grid_shape must have 3 entries");
    base.grid_shape = {g[0], g[1], g[2]};
  }
  if (j.contains("spacing_mm")) {
    const auto s = j["spacing_mm"].get<std::vector<double>>();
    check_arg(s.size() == 3, "spacing_mm must have 3 entries");
    base.spacing_mm = {s[0], s[1], s[2]};
  }
  base.noise_sigma = j.value("noise_sigma", base.noise_sigma);
  uint64_t master = j.value("seed", uint64_t(0));
  if (seed_override >= 0) master = uint64_t(seed_override);

  const int64_t nl = j["n_train_labeled"].get<int64_t>();
  const int64_t nu = j.value("n_train_unlabeled", int64_t(0));
  const int64_t nv = j.value("n_val", int64_t(0));
  const int64_t nt = j.value("n_test", int64_t(0));

  voldata::DatasetManifest m;
  m.grid_shape = base.grid_shape;
  m.spacing_mm = base.spacing_mm;
  m.class_names.assign(voldata::kClassNames.begin(), voldata::kClassNames.end());

  int64_t index = 0;
  auto emit = [&](int64_t n, const std::string& role, const std::string& split, bool labels) {
    for (int64_t i = 0; i < n; ++i, ++index) {
      voldata::PhantomSpec spec = base;
      spec.seed = Rng::derive(master, uint64_t(index));
      auto [raw, lab] = voldata::generate_phantom(spec);
      const auto vol = voldata::normalize_intensity(raw);
      char id[32];
      std::snprintf(id, sizeof(id), "case_%03lld", (long long)index);
      voldata::CaseMeta cm{id, spec.seed, role, split};
      voldata::write_case(out / id, vol, labels ? &lab : nullptr, cm);
      m.cases.push_back(cm);
    }
  };
  emit(nl, "labeled", "train", true);
  emit(nu, "unlabeled", "train", false);
  emit(nv, "labeled", "val", true);
  emit(nt, "labeled", "test", true);
  voldata::write_manifest(out, m);
  say(1, "gen-data: wrote " + std::to_string(index) + " cases to " + out.string());
  return 0;
}

// ---- train-pggan ---------------------------------------------------------------

int cmd_train_pggan(const std::string& cfg_path, const fs::path& out, int64_t seed_override,
                    bool force) {
  const json j = load_config(
      cfg_path,
      {"data_dir", "cases", "schedule", "iterations_per_stage", "fade_iterations",
       "latent_channels", "stage_channels", "batch_size", "g_lr", "d_lr", "gp_weight", "seed"},
      {"data_dir", "cases"});
  require_out_dir(out, force);
  copy_config_into(cfg_path, out);

  pggan::PgganConfig cfg;
  if (j.contains("schedule")) {
    if (j["schedule"].is_string()) {
      const auto s = j["schedule"].get<std::string>();
      if (s == "desk") {
        cfg.schedule = pggan::GrowthSchedule::desk_default();
      } else if (s == "full") {
        cfg.schedule = pggan::GrowthSchedule::full_default();
      } else {
        throw InvalidArgument("schedule must be desk, full, or a shape list");
      }
    } else {
      cfg.schedule.stages.clear();
      for (const auto& st : j["schedule"]) {
        const auto v = st.get<std::vector<int64_t>>();
        check_arg(v.size() == 3, "schedule entries must have 3 dims");
        cfg.schedule.stages.push_back({v[0], v[1], v[2]});
      }
    }
  }
  cfg.schedule.iterations_per_stage =
      j.value("iterations_per_stage", cfg.schedule.iterations_per_stage);
  cfg.schedule.fade_iterations = j.value("fade_iterations", cfg.schedule.fade_iterations);
  cfg.latent_channels = j.value("latent_channels", cfg.latent_channels);
  if (j.contains("stage_channels"))
    cfg.stage_channels = j["stage_channels"].get<std::vector<int64_t>>();
  cfg.batch_size = j.value("batch_size", cfg.batch_size);
  cfg.g_lr = j.value("g_lr", cfg.g_lr);
  cfg.d_lr = j.value("d_lr", cfg.d_lr);
  cfg.gp_weight = j.value("gp_weight", cfg.gp_weight);
  cfg.seed = j.value("seed", uint64_t(0));
  if (seed_override >= 0) cfg.seed = uint64_t(seed_override);
  cfg.finalize();

  const fs::path data_dir = j["data_dir"].get<std::string>();
  const auto manifest = voldata::read_manifest(data_dir);
  const auto case_ids = expand_cases(j["cases"].get<std::vector<std::string>>(), manifest);
  std::vector<voldata::CtVolume> volumes;
  for (const auto& id : case_ids) volumes.push_back(voldata::read_case(data_dir / id).volume);
  say(1, "train-pggan: " + std::to_string(volumes.size()) + " volumes, " +
             std::to_string(cfg.schedule.num_stages()) + " stages");

  auto trained = pggan::train_pggan<float>(volumes, cfg, out);

  // training log
  std::ofstream lf(out / "log.csv");
  lf << "iteration,stage,alpha,critic_loss,gen_loss,gp,real_score,fake_score\n";
  char buf[256];
  for (const auto& r : trained.log) {
    std::snprintf(buf, sizeof(buf), "%lld,%d,%.6g,%.9g,%.9g,%.9g,%.9g,%.9g\n",
                  (long long)r.iteration, r.stage, r.alpha, r.critic_loss, r.gen_loss, r.gp,
                  r.real_score, r.fake_score);
    lf << buf;
  }
  // generator descriptor for synth
  json g;
  g["schedule"] = json::array();
  for (const auto& s : cfg.schedule.stages) g["schedule"].push_back({s[0], s[1], s[2]});
  g["latent_channels"] = cfg.latent_channels;
  g["stage_channels"] = cfg.stage_channels;
  g["seed"] = cfg.seed;
  std::ofstream gf(out / "generator_final.json");
  gf << g.dump(2) << "\n";
  say(1, "train-pggan: done, " + std::to_string(trained.log.size()) + " iterations logged");
  return 0;
}

// ---- synth ---------------------------------------------------------------------

int cmd_synth(const std::string& cfg_path, const fs::path& out, int64_t seed_override,
              bool force) {
  const json j = load_config(cfg_path,
                             {"generator_dir", "n", "seed", "id_prefix", "spacing_mm"},
                             {"generator_dir", "n"});
  const fs::path gdir = j["generator_dir"].get<std::string>();
  std::ifstream gf(gdir / "generator_final.json");
  check_runtime(gf.good(), "missing generator_final.json in " + gdir.string());
  const json g = json::parse(gf);

  pggan::PgganConfig cfg;
  cfg.schedule.stages.clear();
  for (const auto& st : g.at("schedule")) {
    const auto v = st.get<std::vector<int64_t>>();
    cfg.schedule.stages.push_back({v[0], v[1], v[2]});
  }
  cfg.latent_channels = g.at("latent_channels").get<int64_t>();
  cfg.stage_channels = g.at("stage_channels").get<std::vector<int64_t>>();
  cfg.seed = g.at("seed").get<uint64_t>();
  cfg.finalize();

  pggan::Generator<float> gen(cfg);
  while (gen.built_stages() < cfg.schedule.num_stages()) gen.grow();
  ckpt::load_params(gdir / "generator_final.ckpt", gen.params());

  const int n = j["n"].get<int>();
  uint64_t seed = j.value("seed", uint64_t(0));
  if (seed_override >= 0) seed = uint64_t(seed_override);
  std::array<double, 3> spacing{1.5, 0.97, 0.97};
  if (j.contains("spacing_mm")) {
    const auto s = j["spacing_mm"].get<std::vector<double>>();
    spacing = {s.at(0), s.at(1), s.at(2)};
  }
  const std::string prefix = j.value("id_prefix", std::string("synth"));

  // Extend an existing dataset or start a fresh one.
  voldata::DatasetManifest m;
  if (fs::exists(out / "dataset.json")) {
    m = voldata::read_manifest(out);
  } else {
    require_out_dir(out, force);
    const auto shape = cfg.schedule.stages.back();
    m.grid_shape = shape;
    m.spacing_mm = spacing;
    m.class_names.assign(voldata::kClassNames.begin(), voldata::kClassNames.end());
  }
  for (const auto& c : m.cases)
    check_arg(c.id.rfind(prefix, 0) != 0, "synth: id prefix collides with existing case " + c.id);

  const auto volumes = pggan::synthesize(gen, n, seed, spacing);
  for (int i = 0; i < n; ++i) {
    char id[64];
    std::snprintf(id, sizeof(id), "%s_%03d", prefix.c_str(), i);
    voldata::CaseMeta cm{id, seed, "unlabeled-synthetic", "train"};
    voldata::write_case(out / id, volumes[size_t(i)], nullptr, cm);
    m.cases.push_back(cm);
  }
  voldata::write_manifest(out, m);
  say(1, "synth: wrote " + std::to_string(n) + " synthetic volumes to " + out.string());
  return 0;
}

// ---- train-seg -------------------------------------------------------------------

trainer::TrainConfig parse_train_config(const json& j, const voldata::DatasetManifest& manifest,
                                        int64_t seed_override) {
  trainer::TrainConfig cfg;
  cfg.s_lr = j.value("s_lr", cfg.s_lr);
  cfg.d_lr = j.value("d_lr", cfg.d_lr);
  cfg.poly_power = j.value("poly_power", cfg.poly_power);
  cfg.max_iterations = j.value("max_iterations", cfg.max_iterations);
  cfg.batch_size = j.value("batch_size", cfg.batch_size);
  cfg.pretrain_iterations = j.value("pretrain_iterations", cfg.pretrain_iterations);
  cfg.crop_depth = j.value("crop_depth", cfg.crop_depth);
  cfg.base_channels = j.value("base_channels", cfg.base_channels);
  cfg.disc_base_channels = j.value("disc_base_channels", cfg.disc_base_channels);
  cfg.validation_every = j.value("validation_every", cfg.validation_every);
  cfg.loss_weights.lambda_adv_labeled =
      j.value("lambda_adv_labeled", cfg.loss_weights.lambda_adv_labeled);
  cfg.loss_weights.lambda_adv_unlabeled =
      j.value("lambda_adv_unlabeled", cfg.loss_weights.lambda_adv_unlabeled);
  cfg.loss_weights.lambda_semi = j.value("lambda_semi", cfg.loss_weights.lambda_semi);
  cfg.loss_weights.t_semi = j.value("t_semi", cfg.loss_weights.t_semi);
  cfg.seed = j.value("seed", uint64_t(0));
  if (seed_override >= 0) cfg.seed = uint64_t(seed_override);
  cfg.experiment.variant = trainer::variant_from_string(j.at("variant").get<std::string>());
  cfg.experiment.labeled_cases =
      expand_cases(j.at("labeled_cases").get<std::vector<std::string>>(), manifest);
  if (j.contains("unlabeled_cases"))
    cfg.experiment.unlabeled_cases =
        expand_cases(j["unlabeled_cases"].get<std::vector<std::string>>(), manifest);
  if (j.contains("val_cases"))
    cfg.experiment.val_cases =
        expand_cases(j["val_cases"].get<std::vector<std::string>>(), manifest);
  return cfg;
}

const std::set<std::string> kTrainKeys = {
    "data_dir",          "variant",           "labeled_cases",   "unlabeled_cases",
    "val_cases",         "s_lr",              "d_lr",            "poly_power",
    "max_iterations",    "batch_size",        "pretrain_iterations", "crop_depth",
    "base_channels",     "disc_base_channels", "validation_every",
    "lambda_adv_labeled", "lambda_adv_unlabeled", "lambda_semi", "t_semi", "seed"};

int cmd_train_seg(const std::string& cfg_path, const fs::path& out, int64_t seed_override,
                  bool force, bool resume) {
  const json j = load_config(cfg_path, kTrainKeys, {"data_dir", "variant", "labeled_cases"});
  if (!resume) require_out_dir(out, force);
  const fs::path data_dir = j["data_dir"].get<std::string>();
  const auto manifest = voldata::read_manifest(data_dir);
  const auto cfg = parse_train_config(j, manifest, seed_override);
  copy_config_into(cfg_path, out);

  trainer::Trainer tr(cfg, data_dir);
  say(1, "train-seg: variant " + trainer::variant_to_string(cfg.experiment.variant) + ", " +
             std::to_string(cfg.experiment.labeled_cases.size()) + " labeled / " +
             std::to_string(cfg.experiment.unlabeled_cases.size()) + " unlabeled cases, " +
             std::to_string(cfg.max_iterations) + " iterations");
  auto res = tr.run_experiment(out, resume);
  say(1, "train-seg: finished at iteration " + std::to_string(res.iterations_done) +
             ", best val DSC " + std::to_string(res.best_val_dsc));
  return 0;
}

// ---- evaluate ---------------------------------------------------------------------

int cmd_evaluate(const std::string& cfg_path, const fs::path& out, bool force) {
  const json j = load_config(cfg_path,
                             {"data_dir", "cases", "checkpoint", "variant", "base_channels",
                              "disc_base_channels", "crop_depth"},
                             {"data_dir", "cases", "checkpoint", "variant"});
  require_out_dir(out, force);
  const fs::path data_dir = j["data_dir"].get<std::string>();
  const auto manifest = voldata::read_manifest(data_dir);
  const auto case_ids = expand_cases(j["cases"].get<std::vector<std::string>>(), manifest);

  trainer::TrainConfig cfg;
  cfg.experiment.variant = trainer::variant_from_string(j.at("variant").get<std::string>());
  cfg.base_channels = j.value("base_channels", cfg.base_channels);
  cfg.disc_base_channels = j.value("disc_base_channels", cfg.disc_base_channels);
  cfg.crop_depth = j.value("crop_depth", cfg.crop_depth);
  cfg.max_iterations = 0;
  cfg.pretrain_iterations = 0;
  cfg.experiment.labeled_cases = case_ids;  // evaluation cases must carry labels
  if (trainer::variant_has_semi(cfg.experiment.variant))
    cfg.experiment.variant = trainer::Variant::kResUnetAuxAdv;  // same S-net shape

  trainer::Trainer tr(cfg, data_dir);
  ckpt::load_params(j.at("checkpoint").get<std::string>(), tr.seg().params());
  const auto agg = tr.evaluate_on(case_ids);
  std::ofstream rc(out / "report.csv");
  rc << metrics::report_to_csv(agg);
  std::ofstream rj(out / "report.json");
  rj << metrics::report_to_json(agg) << "\n";
  say(1, "evaluate: " + std::to_string(case_ids.size()) + " cases -> " +
             (out / "report.json").string());
  return 0;
}

// ---- report --------------------------------------------------------------------

int cmd_report(const std::vector<std::string>& run_dirs, const fs::path& out, bool force) {
  require_out_dir(out, force);
  const char* metric_names[4] = {"dsc", "ahd_mm", "ashd_mm", "vd_percent"};
  struct Row {
    std::string run;
    bool complete = false;
    nlohmann::ordered_json report;
  };
  std::vector<Row> rows;
  std::vector<std::string> organs;
  for (const auto& rd : run_dirs) {
    Row r;
    r.run = rd;
    const fs::path p = fs::path(rd) / "report.json";
    if (fs::exists(p)) {
      std::ifstream f(p);
      r.report = nlohmann::ordered_json::parse(f);
      r.complete = true;
      if (organs.empty())
        for (const auto& [organ, v] : r.report.items()) {
          (void)v;
          organs.push_back(organ);
        }
    }
    rows.push_back(std::move(r));
  }
  check_arg(!rows.empty(), "report: no run directories given");

  // best per column: dsc max; ahd/ashd min; |vd| min
  auto value_of = [&](const Row& r, const std::string& organ, const char* metric,
                      double& out_v) -> bool {
    if (!r.complete) return false;
    if (!r.report.contains(organ) || r.report[organ][metric].is_null()) return false;
    out_v = r.report[organ][metric]["mean"].get<double>();
    return true;
  };
  json jout;
  std::ostringstream csv;
  csv << "run,complete";
  for (const auto& organ : organs)
    for (const auto* m : metric_names) csv << "," << organ << "_" << m;
  csv << "\n";
  for (const auto& row : rows) {
    csv << row.run << "," << (row.complete ? "yes" : "no");
    json jrow;
    jrow["complete"] = row.complete;
    for (const auto& organ : organs) {
      for (const auto* m : metric_names) {
        double v = 0;
        if (!value_of(row, organ, m, v)) {
          csv << ",N/A";
          jrow[organ][m] = nullptr;
          continue;
        }
        // best flag across rows
        bool best = true;
        for (const auto& other : rows) {
          double ov = 0;
          if (&other == &row || !value_of(other, organ, m, ov)) continue;
          const bool better = std::string(m) == "dsc"
                                  ? ov > v
                                  : (std::string(m) == "vd_percent" ? std::abs(ov) < std::abs(v)
                                                                    : ov < v);
          if (better) best = false;
        }
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.4f%s", v, best ? "*" : "");
        csv << "," << buf;
        jrow[organ][m] = {{"mean", v}, {"best", best}};
      }
    }
    csv << "\n";
    jout[row.run] = jrow;
  }
  std::ofstream cf(out / "comparison.csv");
  cf << csv.str();
  std::ofstream jf(out / "comparison.json");
  jf << jout.dump(2) << "\n";
  say(1, "report: merged " + std::to_string(rows.size()) + " runs");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semi-supervised adversarial 3D segmentation on phantom volumes"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  int64_t seed_override = -1;
  bool force = false;
  bool resume = false;
  std::vector<std::string> run_dirs;

  auto add_common = [&](CLI::App* sub, bool needs_config = true) {
    if (needs_config)
      sub->add_option("--config", config_path, "JSON config file")->required();
    sub->add_option("--out", out_dir, "output directory")->required();
    sub->add_option("--seed", seed_override, "override the config seed");
    sub->add_flag("--force", force, "allow writing into a non-empty directory");
    sub->add_option("--verbosity", g_verbosity, "0 = quiet, 1 = progress, 2 = chatty");
  };

  auto* gen = app.add_subcommand("gen-data", "generate a phantom dataset");
  add_common(gen);
  auto* tpg = app.add_subcommand("train-pggan", "train the volume-synthesis PGGAN");
  add_common(tpg);
  auto* syn = app.add_subcommand("synth", "synthesize unlabeled volumes from a trained PGGAN");
  add_common(syn);
  auto* tsg = app.add_subcommand("train-seg", "train a segmentation experiment");
  add_common(tsg);
  tsg->add_flag("--resume", resume, "resume a previous run in --out");
  auto* evl = app.add_subcommand("evaluate", "evaluate a checkpoint on labeled cases");
  add_common(evl);
  auto* rep = app.add_subcommand("report", "merge run reports into a comparison table");
  rep->add_option("runs", run_dirs, "run directories")->required();
  add_common(rep, /*needs_config=*/false);

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(config_path, out_dir, seed_override, force);
    if (tpg->parsed()) return cmd_train_pggan(config_path, out_dir, seed_override, force);
    if (syn->parsed()) return cmd_synth(config_path, out_dir, seed_override, force);
    if (tsg->parsed()) return cmd_train_seg(config_path, out_dir, seed_override, force, resume);
    if (evl->parsed()) return cmd_evaluate(config_path, out_dir, force);
    if (rep->parsed()) return cmd_report(run_dirs, out_dir, force);
  } catch (const std::exception& e) {
    json err;
    err["error"] = e.what();
    std::cerr << err.dump() << "\n";
    return 1;
  }
  return 1;
}
