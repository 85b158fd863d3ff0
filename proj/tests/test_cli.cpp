#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "json.hpp"
#include "vseg/voldata.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kWork = fs::temp_directory_path() / "vseg_cli_tests";

int run_cli(const std::string& args) {
  const std::string cmd = std::string(VSEG_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  return std::system(cmd.c_str());
}

void write_json(const fs::path& p, const json& j) {
  std::ofstream f(p);
  f << j.dump(2);
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("gen-data: split partition, determinism, force semantics") {
  fs::remove_all(kWork);
  fs::create_directories(kWork);
  write_json(kWork / "gen.json", {{"n_train_labeled", 3},
                                  {"n_train_unlabeled", 1},
                                  {"n_val", 1},
                                  {"n_test", 2},
                                  {"seed", 11}});
  REQUIRE(run_cli("gen-data --config " + (kWork / "gen.json").string() + " --out " +
                  (kWork / "data").string()) == 0);
  const auto m = vseg::voldata::read_manifest(kWork / "data");
  CHECK(m.cases.size() == 7);
  int train = 0, test = 0;
  for (const auto& c : m.cases) {
    if (c.split == "test") ++test;
    else ++train;
  }
  CHECK(train == 5);
  CHECK(test == 2);

  // rejected without --force on a non-empty directory
  CHECK(run_cli("gen-data --config " + (kWork / "gen.json").string() + " --out " +
                (kWork / "data").string()) != 0);

  // same seed reproduces byte-identical volumes
  REQUIRE(run_cli("gen-data --config " + (kWork / "gen.json").string() + " --out " +
                  (kWork / "data2").string()) == 0);
  CHECK(slurp(kWork / "data" / "case_000" / "volume.f32") ==
        slurp(kWork / "data2" / "case_000" / "volume.f32"));
  CHECK(slurp(kWork / "data" / "case_000" / "meta.json") ==
        slurp(kWork / "data2" / "case_000" / "meta.json"));

  // unknown config keys are rejected with a nonzero exit
  write_json(kWork / "bad.json", {{"n_train_labeled", 1}, {"bogus_key", 2}});
  CHECK(run_cli("gen-data --config " + (kWork / "bad.json").string() + " --out " +
                (kWork / "never").string()) != 0);
}

TEST_CASE("train-seg + evaluate + report round trip") {
  // relies on the dataset from the previous case (doctest runs in order)
  write_json(kWork / "train.json", {{"data_dir", (kWork / "data").string()},
                                    {"variant", "res_unet"},
                                    {"labeled_cases", {"@labeled"}},
                                    {"val_cases", {"@val"}},
                                    {"max_iterations", 3},
                                    {"pretrain_iterations", 0},
                                    {"base_channels", 4},
                                    {"seed", 1}});
  REQUIRE(run_cli("train-seg --config " + (kWork / "train.json").string() + " --out " +
                  (kWork / "run").string()) == 0);
  CHECK(fs::exists(kWork / "run" / "log.csv"));
  CHECK(fs::exists(kWork / "run" / "config.json"));
  CHECK(fs::exists(kWork / "run" / "report.json"));

  // resume continues the counter without gaps
  write_json(kWork / "train6.json", {{"data_dir", (kWork / "data").string()},
                                     {"variant", "res_unet"},
                                     {"labeled_cases", {"@labeled"}},
                                     {"val_cases", {"@val"}},
                                     {"max_iterations", 6},
                                     {"pretrain_iterations", 0},
                                     {"base_channels", 4},
                                     {"seed", 1}});
  REQUIRE(run_cli("train-seg --config " + (kWork / "train6.json").string() + " --out " +
                  (kWork / "run").string() + " --resume") == 0);
  std::ifstream lf(kWork / "run" / "log.csv");
  std::string line;
  std::getline(lf, line);
  int64_t expect = 0;
  while (std::getline(lf, line))
    if (!line.empty()) CHECK(std::stoll(line.substr(0, line.find(','))) == expect++);
  CHECK(expect == 6);

  write_json(kWork / "eval.json", {{"data_dir", (kWork / "data").string()},
                                   {"cases", {"@test"}},
                                   {"checkpoint", (kWork / "run" / "final.ckpt").string()},
                                   {"variant", "res_unet"},
                                   {"base_channels", 4}});
  REQUIRE(run_cli("evaluate --config " + (kWork / "eval.json").string() + " --out " +
                  (kWork / "eval").string()) == 0);
  const json rep = json::parse(std::ifstream(kWork / "eval" / "report.json"));
  CHECK(rep.contains("prostate"));

  REQUIRE(run_cli("report " + (kWork / "run").string() + " --out " +
                  (kWork / "cmp").string()) == 0);
  const std::string csv = slurp(kWork / "cmp" / "comparison.csv");
  CHECK(csv.find("prostate_dsc") != std::string::npos);

  // missing report -> incomplete row, N/A propagation
  fs::create_directories(kWork / "empty_run");
  REQUIRE(run_cli("report " + (kWork / "run").string() + " " + (kWork / "empty_run").string() +
                  " --out " + (kWork / "cmp2").string()) == 0);
  const std::string csv2 = slurp(kWork / "cmp2" / "comparison.csv");
  CHECK(csv2.find("no,N/A") != std::string::npos);
}

TEST_CASE("pggan + synth extend the dataset for the semi variant") {
  write_json(kWork / "pg.json",
             {{"data_dir", (kWork / "data").string()},
              {"cases", {"@labeled"}},
              {"schedule", {{4, 4, 4}, {8, 8, 8}, {16, 16, 16}, {16, 32, 32}}},
              {"iterations_per_stage", 2},
              {"fade_iterations", 1},
              {"latent_channels", 8},
              {"stage_channels", {12, 10, 8, 8}},
              {"batch_size", 2},
              {"seed", 4}});
  REQUIRE(run_cli("train-pggan --config " + (kWork / "pg.json").string() + " --out " +
                  (kWork / "pgg").string()) == 0);
  CHECK(fs::exists(kWork / "pgg" / "generator_final.ckpt"));
  CHECK(fs::exists(kWork / "pgg" / "generator_stage3.json"));
  // one log row per iteration
  std::ifstream lf(kWork / "pgg" / "log.csv");
  std::string line;
  int rows = -1;  // header
  while (std::getline(lf, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 8);

  write_json(kWork / "synth.json",
             {{"generator_dir", (kWork / "pgg").string()}, {"n", 2}, {"seed", 6}});
  REQUIRE(run_cli("synth --config " + (kWork / "synth.json").string() + " --out " +
                  (kWork / "data").string()) == 0);
  const auto m = vseg::voldata::read_manifest(kWork / "data");
  int synth = 0;
  for (const auto& c : m.cases) synth += c.role == "unlabeled-synthetic";
  CHECK(synth == 2);

  write_json(kWork / "semi.json", {{"data_dir", (kWork / "data").string()},
                                   {"variant", "res_unet_aux_adv_semi"},
                                   {"labeled_cases", {"@labeled"}},
                                   {"unlabeled_cases", {"@synthetic"}},
                                   {"max_iterations", 3},
                                   {"pretrain_iterations", 1},
                                   {"base_channels", 4},
                                   {"disc_base_channels", 4},
                                   {"seed", 2}});
  REQUIRE(run_cli("train-seg --config " + (kWork / "semi.json").string() + " --out " +
                  (kWork / "runsemi").string()) == 0);
  fs::remove_all(kWork);
}
