// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "probgen/checkpoint.hpp"
#include "probgen/harness.hpp"
#include "testutil.hpp"

#include <filesystem>
#include <fstream>
#include <map>

using namespace probgen;
namespace fs = std::filesystem;

namespace {

std::string fresh_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / "probgen_harness" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir.string();
}

ExperimentConfig tiny_config() {
  ExperimentConfig cfg;
  cfg.kind = ExperimentKind::GmmDimSweep;
  cfg.models = {"ns", "cfm", "ddpm"};
  cfg.seeds = {1};
  cfg.dims = {2, 3};
  cfg.n_modes = 2;
  cfg.n_train = 3000;
  cfg.n_eval = 1500;
  cfg.steps = 150;
  cfg.batch_size = 64;
  cfg.nn_hidden = 16;
  cfg.nn_depth = 1;
  cfg.ns_layers = 2;
  cfg.ddpm_T = 100;
  cfg.ddpm_beta_lo = 1e-3;
  cfg.ddpm_beta_hi = 1e-1;
  cfg.cfm_ode_steps = 25;
  return cfg;
}

}  // namespace

TEST_CASE("config round trips through the flat key = value file format") {
  ExperimentConfig cfg = tiny_config();
  const std::string dir = fresh_dir("cfg");
  const std::string path = dir + "/exp.cfg";
  {
    std::ofstream out(path);
    out << "# tiny sweep\n";
    out << "kind = \"gmm-dim-sweep\"\n";
    out << "models = [\"ns\", \"cfm\"]\n";
    out << "dims = [2, 3]\n";
    out << "seeds = [1, 2]\n";
    out << "steps = 50\n";
    out << "n_train = 500   # inline comment\n";
    out << "lr = 0.001\n";
    out << "\n";
  }
  ExperimentConfig parsed = ExperimentConfig::from_file(path);
  CHECK(parsed.kind == ExperimentKind::GmmDimSweep);
  CHECK(parsed.models == std::vector<std::string>{"ns", "cfm"});
  CHECK(parsed.seeds == std::vector<uint64_t>{1, 2});
  CHECK(parsed.steps == 50);
  CHECK(parsed.n_train == 500);

  parsed.apply_override("steps", "75");
  CHECK(parsed.steps == 75);
  CHECK_THROWS_AS(parsed.apply_override("not_a_key", "1"), std::invalid_argument);
  CHECK_THROWS_AS(parsed.apply_override("steps", "not json"), std::invalid_argument);

  // Round trip through json.
  ExperimentConfig back = ExperimentConfig::from_json(parsed.to_json());
  CHECK(back.steps == 75);
  CHECK(kind_name(back.kind) == "gmm-dim-sweep");
}

TEST_CASE("config validation rejects duplicate seeds and empty sweeps") {
  ExperimentConfig cfg = tiny_config();
  cfg.seeds = {1, 1};
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = tiny_config();
  cfg.models = {};
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = tiny_config();
  cfg.models = {"vae"};
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("result rows round trip through csv") {
  ResultRow row;
  row.kind = "gmm-dim-sweep";
  row.sweep = "10";
  row.model = "cfm";
  row.d = 10;
  row.n_train = 90000;
  row.seed = 3;
  row.kld = 0.123456789012345;
  row.true_delta_f = 1.5;
  row.param_count = 4242;
  row.sampler = "euler-50";
  row.train_steps = 10000;
  row.train_seconds = 12.5;
  ResultRow back = ResultRow::parse(row.csv_row());
  CHECK(back.key() == row.key());
  CHECK(*back.kld == *row.kld);
  CHECK(*back.true_delta_f == 1.5);
  CHECK(!back.delta_f.has_value());
  CHECK(!back.r2.has_value());
  CHECK(*back.param_count == 4242);
  CHECK(back.sampler == "euler-50");
}

TEST_CASE("dim sweep writes one baseline and one row per model, resumes as a no-op") {
  ExperimentConfig cfg = tiny_config();
  const std::string dir = fresh_dir("sweep");
  run_experiment(cfg, dir);
  const std::string path = dir + "/results_gmm-dim-sweep.csv";
  auto rows = read_result_rows(path);
  // 2 sweep values x 1 seed x (baseline + 3 models)
  CHECK(rows.size() == 8);
  std::map<std::string, int> by_model;
  for (const auto& r : rows) {
    by_model[r.model] += 1;
    CHECK(r.error.empty());
    if (r.model != "baseline") {
      CHECK(r.kld.has_value());
      CHECK(*r.kld >= 0.0);
      CHECK(r.param_count.has_value());
      CHECK(r.train_steps == cfg.steps);
      CHECK(!r.sampler.empty());
    } else {
      CHECK(r.kld.has_value());  // the noise floor
      CHECK(*r.kld > 0.0);
    }
  }
  CHECK(by_model["baseline"] == 2);
  CHECK(by_model["ns"] == 2);
  CHECK(by_model["cfm"] == 2);
  CHECK(by_model["ddpm"] == 2);

  // Rerun: resumable, no new rows, bytes unchanged.
  std::ifstream f1(path);
  std::string before((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  run_experiment(cfg, dir);
  std::ifstream f2(path);
  std::string after((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(before == after);
}

TEST_CASE("rerunning a cell from scratch reproduces rows except timing columns") {
  ExperimentConfig cfg = tiny_config();
  cfg.dims = {2};
  const std::string dir1 = fresh_dir("det1");
  const std::string dir2 = fresh_dir("det2");
  run_experiment(cfg, dir1);
  run_experiment(cfg, dir2);
  auto rows1 = read_result_rows(dir1 + "/results_gmm-dim-sweep.csv");
  auto rows2 = read_result_rows(dir2 + "/results_gmm-dim-sweep.csv");
  REQUIRE(rows1.size() == rows2.size());
  for (size_t i = 0; i < rows1.size(); ++i) {
    ResultRow a = rows1[i], b = rows2[i];
    a.train_seconds = b.train_seconds = 0;  // timing columns excluded
    a.sec_per_sample = b.sec_per_sample = std::nullopt;
    CHECK(a.csv_row() == b.csv_row());
  }
}

TEST_CASE("asymmetry sweep records oriented delta_f against the truth") {
  ExperimentConfig cfg = tiny_config();
  cfg.kind = ExperimentKind::GmmAsymmetry;
  cfg.fixed_dim = 2;
  cfg.delta_f_grid = {0.0, 1.0};
  cfg.n_train = 20000;
  cfg.n_eval = 20000;
  cfg.steps = 500;
  cfg.ns_layers = 4;
  cfg.nn_hidden = 24;
  const std::string dir = fresh_dir("asym");
  run_experiment(cfg, dir);
  auto rows = read_result_rows(dir + "/results_gmm-asymmetry.csv");
  CHECK(rows.size() == 2 * (1 + 3));
  for (const auto& r : rows) {
    if (r.model == "baseline") continue;
    INFO(r.model, " sweep=", r.sweep, " err=", r.error);
    CHECK(r.error.empty());
    REQUIRE(r.delta_f.has_value());
    REQUIRE(r.true_delta_f.has_value());
    // Loose bound: these are 500-step models, the estimate just has to be
    // oriented and in the right neighborhood.
    CHECK(std::abs(*r.delta_f - *r.true_delta_f) < 1.0);
  }
}

TEST_CASE("params experiment fills counts without training and cfm equals ddpm") {
  ExperimentConfig cfg = tiny_config();
  cfg.kind = ExperimentKind::GmmParams;
  cfg.dims = {10, 20, 50};
  const std::string dir = fresh_dir("params");
  run_experiment(cfg, dir);
  auto rows = read_result_rows(dir + "/results_gmm-params.csv");
  CHECK(rows.size() == 9);
  std::map<std::string, std::map<std::string, long>> counts;
  for (const auto& r : rows) {
    REQUIRE(r.param_count.has_value());
    counts[r.sweep][r.model] = *r.param_count;
    CHECK(!r.kld.has_value());
  }
  long prev_ns = 0;
  for (const auto& d : {"10", "20", "50"}) {
    CHECK(counts[d]["cfm"] == counts[d]["ddpm"]);
    CHECK(counts[d]["ns"] > prev_ns);
    prev_ns = counts[d]["ns"];
  }
}

TEST_CASE("hp sweep selects the argmin and writes the selection file") {
  ExperimentConfig cfg = tiny_config();
  cfg.kind = ExperimentKind::HpSweep;
  cfg.hp_model = "ns";
  cfg.hp_values = {2, 4};
  cfg.fixed_dim = 2;
  cfg.n_train = 2000;
  cfg.n_eval = 1000;
  cfg.steps = 100;
  const std::string dir = fresh_dir("hp");
  run_hp_sweep(cfg, dir);
  auto rows = read_result_rows(dir + "/results_hp-sweep.csv");
  CHECK(rows.size() == 2);
  REQUIRE(fs::exists(dir + "/hp_selected.json"));
  std::ifstream sel(dir + "/hp_selected.json");
  nlohmann::json j = nlohmann::json::parse(sel);
  CHECK(j["model"] == "ns");
  CHECK(j["parameter"] == "layers");
  CHECK((j["value"] == 2 || j["value"] == 4));
}

TEST_CASE("dihedral residue sweep emits nine rows per model with a shared training") {
  ExperimentConfig cfg = tiny_config();
  cfg.kind = ExperimentKind::DihedralResidues;
  cfg.models = {"ns"};
  cfg.dihedral_n = 4000;
  cfg.n_eval = 2000;
  cfg.steps = 120;
  cfg.ns_layers = 2;
  const std::string dir = fresh_dir("dihedral");
  run_experiment(cfg, dir);
  auto rows = read_result_rows(dir + "/results_dihedral-residues.csv");
  CHECK(rows.size() == 18);  // 9 residues x (baseline + ns)
  int model_rows = 0;
  for (const auto& r : rows) {
    CHECK(r.error.empty());
    REQUIRE(r.kld.has_value());
    if (r.model == "ns") ++model_rows;
  }
  CHECK(model_rows == 9);
}

TEST_CASE("figure tables are written sorted with r2 summary rows for fig2") {
  ExperimentConfig cfg = tiny_config();
  cfg.kind = ExperimentKind::GmmAsymmetry;
  cfg.fixed_dim = 2;
  cfg.delta_f_grid = {0.0, 0.5, 1.0};
  cfg.n_train = 20000;
  cfg.n_eval = 20000;
  cfg.steps = 400;
  cfg.models = {"ns"};
  cfg.ns_layers = 4;
  const std::string dir = fresh_dir("figs");
  run_experiment(cfg, dir);
  write_figure_tables(dir, dir);
  REQUIRE(fs::exists(dir + "/fig2.csv"));
  auto rows = read_result_rows(dir + "/fig2.csv");
  bool has_r2 = false;
  std::string prev_model;
  double prev_sweep = -1;
  for (const auto& r : rows) {
    if (r.sweep == "r2") {
      has_r2 = true;
      CHECK(r.r2.has_value());
      continue;
    }
    if (r.model == prev_model) CHECK(std::stod(r.sweep) >= prev_sweep);
    prev_model = r.model;
    prev_sweep = std::stod(r.sweep);
  }
  CHECK(has_r2);
}

TEST_CASE("checkpoint round trip preserves family, config and f32 parameters") {
  NsConfig nc;
  nc.d = 3;
  nc.n_layers = 2;
  nc.hidden_width = 8;
  nc.depth = 1;
  NsModel model(nc);
  Rng rng(5);
  Vec params = model.init_params(rng);
  for (long i = 0; i < params.size(); ++i) params[i] += 0.1 * rng.normal();
  StandardizationStats stats;
  stats.mean = Vec::Constant(3, 1.5);
  stats.stddev = Vec::Constant(3, 2.0);
  Checkpoint ckpt = make_checkpoint(model, params, stats);
  const std::string dir = fresh_dir("ckpt");
  save_checkpoint(dir + "/m.ckpt", ckpt);
  Checkpoint back = load_checkpoint(dir + "/m.ckpt");
  CHECK(back.family == "ns");
  CHECK(back.config == ckpt.config);
  CHECK(back.layout.total() == ckpt.layout.total());
  for (long i = 0; i < params.size(); ++i)
    CHECK(back.params[i] == static_cast<double>(static_cast<float>(params[i])));

  AnyModel any(back);
  CHECK(any.family() == "ns");
  CHECK(any.dim() == 3);
  CHECK(any.param_count() == model.param_count());
  Mat s1 = any.sample(100, 7);
  Mat s2 = any.sample(100, 7);
  CHECK((s1 - s2).norm() == 0.0);
  // Standardization is applied on the way out.
  CHECK(std::abs(s1.col(0).mean() - 1.5) < 0.8);
}

TEST_CASE("corrupt checkpoints are rejected") {
  const std::string dir = fresh_dir("ckpt_bad");
  {
    std::ofstream out(dir + "/bad.ckpt");
    out << "NOT-A-CKPT\n";
  }
  CHECK_THROWS_AS(load_checkpoint(dir + "/bad.ckpt"), FormatError);

  // Digest mismatch: tamper with the config line.
  NsConfig nc;
  nc.d = 1;
  nc.n_layers = 1;
  NsModel model(nc);
  Rng rng(6);
  Vec params = model.init_params(rng);
  save_checkpoint(dir + "/ok.ckpt", make_checkpoint(model, params));
  std::ifstream in(dir + "/ok.ckpt", std::ios::binary);
  std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto pos = content.find("\"d\":1");
  REQUIRE(pos != std::string::npos);
  content.replace(pos, 5, "\"d\":2");
  std::ofstream out(dir + "/tampered.ckpt", std::ios::binary);
  out << content;
  out.close();
  CHECK_THROWS_AS(load_checkpoint(dir + "/tampered.ckpt"), FormatError);
}
