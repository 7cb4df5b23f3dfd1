// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "probgen/checkpoint.hpp"
#include "probgen/common.hpp"
#include "probgen/dataset.hpp"
#include "probgen/evaluation.hpp"

#include <json.hpp>

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace probgen {

enum class ExperimentKind {
  GmmDimSweep,
  GmmTrainsize,
  GmmAsymmetry,
  GmmTiming,
  GmmParams,
  DihedralResidues,
  DihedralTrainsize,
  HpSweep,
};

std::string kind_name(ExperimentKind k);
ExperimentKind kind_from_name(const std::string& name);

/// Configuration for one experiment run. Parsed from a flat key = value file
/// with JSON-compatible values; every field can be overridden.
struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::GmmDimSweep;
  std::vector<std::string> models{"ns", "cfm", "ddpm"};
  std::vector<uint64_t> seeds{1, 2, 3};

  // GMM data.
  std::vector<int> dims{10, 20, 30, 40, 50, 60, 70, 80, 90, 100};
  int fixed_dim = 50;
  int n_modes = 4;
  double mode_half_width = 8.0;
  double mode_min_separation = 6.0;
  long n_train = 100000;
  std::vector<long> train_sizes{1000, 3162, 10000, 31623, 100000};
  std::vector<double> delta_f_grid{0.0, 0.5, 1.0, 1.5};
  double test_fraction = 0.1;

  // Dihedral data: an 18-column CSV or, when the path is empty, the
  // von Mises surrogate with `dihedral_n` rows.
  std::string dihedral_csv;
  long dihedral_n = 100000;
  int residue = 5;  // 1-based, for the train-size sweep

  // Training budget.
  long steps = 10000;
  double train_seconds = 0;  // > 0 switches to a wall-clock budget
  int batch_size = 128;
  double lr = 1e-3;

  // Backbone and model hyperparameters.
  int nn_hidden = 64;
  int nn_depth = 2;
  int ns_layers = 8;
  int ns_bins = 8;
  double ns_tail_bound = 3.0;
  double cfm_sigma_min = 1e-2;
  std::string cfm_coupling = "independent";
  int cfm_ode_steps = 50;
  int ddpm_T = 1000;
  double ddpm_beta_lo = 1e-4;
  double ddpm_beta_hi = 2e-2;

  // Evaluation.
  long n_eval = 10000;
  int eval_bins = 50;
  double fe_cutoff = 0.0374;
  bool fe_mass_ratio = true;  // also record the large-cutoff mass-ratio estimate
  long timing_n = 2000;
  int timing_repeats = 5;

  // Hyperparameter sweep (fig 6): NS depth or CFM/DDPM hidden width.
  std::string hp_model = "ns";
  std::vector<int> hp_values{2, 4, 8, 16};

  void validate() const;
  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  /// key = value lines, '#' comments, JSON values.
  static ExperimentConfig from_file(const std::string& path);
  void apply_override(const std::string& key, const std::string& json_value);
};

/// One output row. Numeric fields are optional so the schema stays stable
/// across experiment kinds; timing fields are excluded from determinism
/// comparisons.
struct ResultRow {
  std::string kind;
  std::string sweep;  // sweep-variable value, formatted
  std::string model;  // family or "baseline"
  int d = 0;
  long n_train = 0;
  uint64_t seed = 0;
  std::optional<double> kld;
  std::optional<double> delta_f;
  std::optional<double> true_delta_f;
  std::optional<double> r2;
  std::optional<double> sec_per_sample;
  std::optional<long> param_count;
  std::string sampler;
  long train_steps = 0;
  double train_seconds = 0;
  std::string error;

  static std::string csv_header();
  std::string csv_row() const;
  static ResultRow parse(const std::string& line);
  std::string key() const { return kind + "|" + sweep + "|" + model + "|" + std::to_string(seed); }
};

/// Runs every cell of the configured experiment, appending to
/// `<out_dir>/results_<kind>.csv`. Completed (kind, sweep, model, seed)
/// cells are skipped on rerun. Worker threads come from PROBGEN_WORKERS
/// (timing runs are always serial).
void run_experiment(const ExperimentConfig& cfg, const std::string& out_dir);

/// Depth/width tuning table plus `hp_selected.json` recording the argmin of
/// the seed-averaged KLD (ties to the smaller value).
void run_hp_sweep(const ExperimentConfig& cfg, const std::string& out_dir);

/// Aggregates result tables in `in_dir` into per-figure CSVs under
/// `out_dir` (fig1a, fig1b, fig2, fig3a, fig3b, fig4a, fig4b, fig6).
void write_figure_tables(const std::string& in_dir, const std::string& out_dir);

/// Reads all rows of a result CSV (skipping the header).
std::vector<ResultRow> read_result_rows(const std::string& path);

}  // namespace probgen
