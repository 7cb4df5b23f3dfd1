// SPDX-License-Identifier: Apache-2.0
//
// probgen: dataset generation, model training/sampling and benchmark sweeps
// for the three generative families (ns, cfm, ddpm).

#include <CLI11.hpp>

#include "probgen/checkpoint.hpp"
#include "probgen/dataset.hpp"
#include "probgen/ddpm.hpp"
#include "probgen/evaluation.hpp"
#include "probgen/flow_matching.hpp"
#include "probgen/harness.hpp"
#include "probgen/nn.hpp"
#include "probgen/spline_flow.hpp"

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

using namespace probgen;

namespace {

std::vector<double> parse_weights(const std::string& spec, int k) {
  std::vector<double> weights;
  if (spec.empty()) {
    weights.assign(k, 1.0 / k);
    double acc = 0;
    for (int i = 0; i + 1 < k; ++i) acc += weights[i];
    weights.back() = 1.0 - acc;
    return weights;
  }
  std::string cur;
  for (char c : spec + ",") {
    if (c == ',') {
      if (!cur.empty()) weights.push_back(std::stod(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (static_cast<int>(weights.size()) != k)
    throw std::invalid_argument("--weights needs exactly " + std::to_string(k) + " values");
  double sum = 0;
  for (double w : weights) sum += w;
  for (double& w : weights) w /= sum;
  return weights;
}

struct TrainFlags {
  std::string model, data, out;
  uint64_t seed = 0;
  long steps = 10000;
  double seconds = 0;
  int batch = 128;
  double lr = 1e-3;
  int width = 64, depth = 2;
  int layers = 8, bins = 8;
  double tail_bound = 3.0;
  double sigma_min = 1e-2;
  std::string coupling = "independent";
  int ode_steps = 50;
  int T = 1000;
  double beta_lo = 1e-4, beta_hi = 2e-2;
};

int cmd_train(const TrainFlags& f) {
  Dataset ds = read_dataset_csv(f.data);
  auto [std_ds, stats] = standardize(ds);
  TrainOptions opts;
  opts.steps = f.steps;
  opts.max_seconds = f.seconds;
  opts.batch_size = f.batch;
  opts.adam.lr = f.lr;
  opts.seed = derive_seed(f.seed, {2});
  opts.record_trace = false;
  Rng init_rng(derive_seed(f.seed, {1}));
  const int d = static_cast<int>(ds.dim());

  Checkpoint ckpt;
  if (f.model == "ns") {
    NsConfig c;
    c.d = d;
    c.n_layers = (d >= 2) ? std::max(2, f.layers) : f.layers;
    c.bins = f.bins;
    c.tail_bound = f.tail_bound;
    c.hidden_width = f.width;
    c.depth = f.depth;
    NsModel model(c);
    Vec params = model.init_params(init_rng);
    ns_train(model, params, std_ds.samples, opts);
    ckpt = make_checkpoint(model, params, stats);
  } else if (f.model == "cfm") {
    CfmConfig c;
    c.d = d;
    c.hidden_width = f.width;
    c.depth = f.depth;
    c.sigma_min = f.sigma_min;
    c.coupling = coupling_from_name(f.coupling);
    c.ode_steps = f.ode_steps;
    CfmModel model(c);
    Vec params = model.init_params(init_rng);
    cfm_train(model, params, std_ds.samples, opts);
    ckpt = make_checkpoint(model, params, stats);
  } else if (f.model == "ddpm") {
    DdpmConfig c;
    c.d = d;
    c.hidden_width = f.width;
    c.depth = f.depth;
    c.T = f.T;
    c.beta_lo = f.beta_lo;
    c.beta_hi = f.beta_hi;
    DdpmModel model(c);
    Vec params = model.init_params(init_rng);
    ddpm_train(model, params, std_ds.samples, opts);
    ckpt = make_checkpoint(model, params, stats);
  } else {
    throw std::invalid_argument("unknown model: " + f.model);
  }
  save_checkpoint(f.out, ckpt);
  std::cout << "checkpoint " << f.out << " family=" << ckpt.family
            << " params=" << ckpt.params.size() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"probgen: probabilistic generative model benchmark"};
  app.require_subcommand(1);

  // gen-gmm
  auto* gen = app.add_subcommand("gen-gmm", "Generate a Gaussian-mixture dataset CSV");
  int g_dim = 2, g_modes = 2;
  long g_n = 10000;
  uint64_t g_seed = 0;
  std::string g_weights, g_out;
  double g_half_width = 8.0, g_separation = 6.0;
  gen->add_option("--dim", g_dim, "Data dimension")->required();
  gen->add_option("--modes", g_modes, "Number of modes")->required();
  gen->add_option("--weights", g_weights, "Comma-separated mode weights (default equal)");
  gen->add_option("--n", g_n, "Sample count")->required();
  gen->add_option("--seed", g_seed, "Random seed")->required();
  gen->add_option("--out", g_out, "Output CSV path")->required();
  gen->add_option("--half-width", g_half_width, "Mode-mean hypercube half-width");
  gen->add_option("--separation", g_separation, "Minimum pairwise mode distance");

  // ingest-dihedrals
  auto* ing = app.add_subcommand("ingest-dihedrals", "Normalize an 18-column dihedral CSV");
  std::string i_in, i_out;
  ing->add_option("--in", i_in, "Input CSV")->required();
  ing->add_option("--out", i_out, "Output CSV")->required();

  // train
  auto* tr = app.add_subcommand("train", "Train a model on a dataset CSV");
  TrainFlags tf;
  tr->add_option("--model", tf.model, "ns | cfm | ddpm")->required();
  tr->add_option("--data", tf.data, "Training CSV")->required();
  tr->add_option("--out", tf.out, "Checkpoint path")->required();
  tr->add_option("--seed", tf.seed, "Random seed")->required();
  tr->add_option("--steps", tf.steps, "Optimizer steps");
  tr->add_option("--seconds", tf.seconds, "Wall-clock budget (0 = step budget)");
  tr->add_option("--batch", tf.batch, "Batch size");
  tr->add_option("--lr", tf.lr, "Learning rate");
  tr->add_option("--width", tf.width, "Hidden width");
  tr->add_option("--depth", tf.depth, "Hidden layers");
  tr->add_option("--layers", tf.layers, "NS coupling layers");
  tr->add_option("--bins", tf.bins, "NS spline bins");
  tr->add_option("--tail-bound", tf.tail_bound, "NS spline tail bound");
  tr->add_option("--sigma-min", tf.sigma_min, "CFM path noise");
  tr->add_option("--coupling", tf.coupling, "CFM coupling: independent | minibatch-ot");
  tr->add_option("--ode-steps", tf.ode_steps, "CFM sampler steps");
  tr->add_option("--T", tf.T, "DDPM steps");
  tr->add_option("--beta-lo", tf.beta_lo, "DDPM beta start");
  tr->add_option("--beta-hi", tf.beta_hi, "DDPM beta end");

  // sample
  auto* sa = app.add_subcommand("sample", "Draw samples from a checkpoint");
  std::string s_ckpt, s_out;
  long s_n = 10000;
  uint64_t s_seed = 0;
  int s_steps = -1;
  bool s_pf_ode = false;
  sa->add_option("--checkpoint", s_ckpt, "Checkpoint path")->required();
  sa->add_option("--n", s_n, "Sample count")->required();
  sa->add_option("--seed", s_seed, "Random seed")->required();
  sa->add_option("--out", s_out, "Output CSV")->required();
  sa->add_option("--steps", s_steps, "Sampler step override");
  sa->add_flag("--pf-ode", s_pf_ode, "Use the probability-flow sampler (ddpm)");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "Evaluate a checkpoint against held-out data");
  std::string e_ckpt, e_test, e_train;
  long e_n = 10000;
  uint64_t e_seed = 0;
  int e_bins = 50;
  ev->add_option("--checkpoint", e_ckpt, "Checkpoint path")->required();
  ev->add_option("--test", e_test, "Held-out CSV")->required();
  ev->add_option("--train", e_train, "Training CSV (PCA basis + noise floor)");
  ev->add_option("--n-eval", e_n, "Generated sample count");
  ev->add_option("--seed", e_seed, "Sampling seed");
  ev->add_option("--bins", e_bins, "Histogram bins per axis");

  // benchmark
  auto* be = app.add_subcommand("benchmark", "Run a configured experiment sweep");
  std::string b_cfg, b_out;
  std::vector<std::string> b_sets;
  be->add_option("--config", b_cfg, "Flat key = value config file")->required();
  be->add_option("--out", b_out, "Output directory")->required();
  be->add_option("--set", b_sets, "Override: key=json (repeatable)");

  // hp-sweep
  auto* hp = app.add_subcommand("hp-sweep", "Depth/width tuning sweep");
  std::string h_cfg, h_out;
  std::vector<std::string> h_sets;
  hp->add_option("--config", h_cfg, "Flat key = value config file")->required();
  hp->add_option("--out", h_out, "Output directory")->required();
  hp->add_option("--set", h_sets, "Override: key=json (repeatable)");

  // report
  auto* re = app.add_subcommand("report", "Aggregate result tables into per-figure CSVs");
  std::string r_in, r_out;
  re->add_option("--in", r_in, "Directory holding results_*.csv")->required();
  re->add_option("--out", r_out, "Directory for figN.csv tables")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n" << app.help() << "\n";
    return 2;
  }

  try {
    if (*gen) {
      GmmSpec spec;
      spec.dim = g_dim;
      spec.means =
          random_mode_means(g_dim, g_modes, g_half_width, g_separation, derive_seed(g_seed, {7}));
      spec.weights = parse_weights(g_weights, g_modes);
      spec.seed = g_seed;
      Dataset ds = gen_gmm(spec, g_n);
      write_dataset_csv(ds, g_out);
      std::cout << "wrote " << g_out << " (" << ds.n() << " x " << ds.dim() << ")\n";
    } else if (*ing) {
      Dataset ds = ingest_dihedrals(i_in);
      write_dataset_csv(ds, i_out);
      std::cout << "wrote " << i_out << " (" << ds.n() << " x " << ds.dim() << ")\n";
    } else if (*tr) {
      return cmd_train(tf);
    } else if (*sa) {
      AnyModel model(load_checkpoint(s_ckpt));
      Mat samples = model.sample(s_n, s_seed, s_steps, s_pf_ode);
      Dataset out;
      out.samples = std::move(samples);
      out.meta.generator = "sample:" + model.family();
      out.meta.seed = s_seed;
      write_dataset_csv(out, s_out);
      std::cout << "wrote " << s_out << " (" << s_n << " x " << model.dim() << ")\n";
    } else if (*ev) {
      AnyModel model(load_checkpoint(e_ckpt));
      Dataset test = read_dataset_csv(e_test);
      const Mat gen_samples = model.sample(e_n, e_seed);
      EvalOptions opts;
      opts.nx = e_bins;
      opts.ny = e_bins;
      EvaluationReport report;
      report.experiment_id = "evaluate";
      report.model = model.family();
      report.d = model.dim();
      report.seed = e_seed;
      report.param_count = model.param_count();
      if (!e_train.empty()) {
        Dataset train = read_dataset_csv(e_train);
        report.n_train = train.n();
        EvalResult er = evaluate_samples(train.samples, test.samples, gen_samples, opts);
        report.kld = er.kld;
        nlohmann::json j = report.to_json();
        j["kld_floor"] = er.kld_floor;
        std::cout << j.dump() << "\n";
      } else {
        // Without the training set the basis and ranges come from the
        // held-out data itself; no noise floor is defined.
        EvalResult er = evaluate_samples(test.samples, test.samples, gen_samples, opts);
        report.kld = er.kld;
        nlohmann::json j = report.to_json();
        j["basis"] = "test";
        std::cout << j.dump() << "\n";
      }
    } else if (*be) {
      ExperimentConfig cfg = ExperimentConfig::from_file(b_cfg);
      for (const auto& kv : b_sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos)
          throw std::invalid_argument("--set expects key=json, got: " + kv);
        cfg.apply_override(kv.substr(0, eq), kv.substr(eq + 1));
      }
      run_experiment(cfg, b_out);
      std::cout << "results in " << b_out << "/results_" << kind_name(cfg.kind) << ".csv\n";
    } else if (*hp) {
      ExperimentConfig cfg = ExperimentConfig::from_file(h_cfg);
      cfg.kind = ExperimentKind::HpSweep;
      for (const auto& kv : h_sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos)
          throw std::invalid_argument("--set expects key=json, got: " + kv);
        cfg.apply_override(kv.substr(0, eq), kv.substr(eq + 1));
      }
      run_hp_sweep(cfg, h_out);
      std::cout << "results in " << h_out << "/results_hp-sweep.csv\n";
    } else if (*re) {
      write_figure_tables(r_in, r_out);
      std::cout << "figure tables in " << r_out << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
