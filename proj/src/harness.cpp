// SPDX-License-Identifier: Apache-2.0
#include "probgen/harness.hpp"

#include "probgen/ddpm.hpp"
#include "probgen/flow_matching.hpp"
#include "probgen/spline_flow.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

namespace probgen {

using nlohmann::json;
namespace fs = std::filesystem;

std::string kind_name(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::GmmDimSweep: return "gmm-dim-sweep";
    case ExperimentKind::GmmTrainsize: return "gmm-trainsize";
    case ExperimentKind::GmmAsymmetry: return "gmm-asymmetry";
    case ExperimentKind::GmmTiming: return "gmm-timing";
    case ExperimentKind::GmmParams: return "gmm-params";
    case ExperimentKind::DihedralResidues: return "dihedral-residues";
    case ExperimentKind::DihedralTrainsize: return "dihedral-trainsize";
    case ExperimentKind::HpSweep: return "hp-sweep";
  }
  return "unknown";
}

ExperimentKind kind_from_name(const std::string& name) {
  for (ExperimentKind k :
       {ExperimentKind::GmmDimSweep, ExperimentKind::GmmTrainsize, ExperimentKind::GmmAsymmetry,
        ExperimentKind::GmmTiming, ExperimentKind::GmmParams, ExperimentKind::DihedralResidues,
        ExperimentKind::DihedralTrainsize, ExperimentKind::HpSweep})
    if (kind_name(k) == name) return k;
  throw std::invalid_argument("unknown experiment kind: " + name);
}

void ExperimentConfig::validate() const {
  require(!models.empty(), "ExperimentConfig: empty model list");
  for (const auto& m : models)
    require(m == "ns" || m == "cfm" || m == "ddpm", "ExperimentConfig: unknown model " + m);
  require(!seeds.empty(), "ExperimentConfig: empty seed list");
  require(std::set<uint64_t>(seeds.begin(), seeds.end()).size() == seeds.size(),
          "ExperimentConfig: seeds must be distinct");
  require(!dims.empty() && !train_sizes.empty() && !delta_f_grid.empty() && !hp_values.empty(),
          "ExperimentConfig: sweep lists must be non-empty");
  require(steps >= 1 || train_seconds > 0, "ExperimentConfig: empty training budget");
  require(n_train >= 10 && n_eval >= 10, "ExperimentConfig: sample counts too small");
  require(test_fraction > 0 && test_fraction < 1, "ExperimentConfig: bad test fraction");
  require(residue >= 1 && residue <= 9, "ExperimentConfig: residue must be 1..9");
}

json ExperimentConfig::to_json() const {
  return {{"kind", kind_name(kind)},
          {"models", models},
          {"seeds", seeds},
          {"dims", dims},
          {"fixed_dim", fixed_dim},
          {"n_modes", n_modes},
          {"mode_half_width", mode_half_width},
          {"mode_min_separation", mode_min_separation},
          {"n_train", n_train},
          {"train_sizes", train_sizes},
          {"delta_f_grid", delta_f_grid},
          {"test_fraction", test_fraction},
          {"dihedral_csv", dihedral_csv},
          {"dihedral_n", dihedral_n},
          {"residue", residue},
          {"steps", steps},
          {"train_seconds", train_seconds},
          {"batch_size", batch_size},
          {"lr", lr},
          {"nn_hidden", nn_hidden},
          {"nn_depth", nn_depth},
          {"ns_layers", ns_layers},
          {"ns_bins", ns_bins},
          {"ns_tail_bound", ns_tail_bound},
          {"cfm_sigma_min", cfm_sigma_min},
          {"cfm_coupling", cfm_coupling},
          {"cfm_ode_steps", cfm_ode_steps},
          {"ddpm_T", ddpm_T},
          {"ddpm_beta_lo", ddpm_beta_lo},
          {"ddpm_beta_hi", ddpm_beta_hi},
          {"n_eval", n_eval},
          {"eval_bins", eval_bins},
          {"fe_cutoff", fe_cutoff},
          {"fe_mass_ratio", fe_mass_ratio},
          {"timing_n", timing_n},
          {"timing_repeats", timing_repeats},
          {"hp_model", hp_model},
          {"hp_values", hp_values}};
}

namespace {

template <typename T>
void maybe(const json& j, const char* key, T& field) {
  if (j.contains(key)) field = j.at(key).get<T>();
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig c;
  if (j.contains("kind")) c.kind = kind_from_name(j.at("kind").get<std::string>());
  maybe(j, "models", c.models);
  maybe(j, "seeds", c.seeds);
  maybe(j, "dims", c.dims);
  maybe(j, "fixed_dim", c.fixed_dim);
  maybe(j, "n_modes", c.n_modes);
  maybe(j, "mode_half_width", c.mode_half_width);
  maybe(j, "mode_min_separation", c.mode_min_separation);
  maybe(j, "n_train", c.n_train);
  maybe(j, "train_sizes", c.train_sizes);
  maybe(j, "delta_f_grid", c.delta_f_grid);
  maybe(j, "test_fraction", c.test_fraction);
  maybe(j, "dihedral_csv", c.dihedral_csv);
  maybe(j, "dihedral_n", c.dihedral_n);
  maybe(j, "residue", c.residue);
  maybe(j, "steps", c.steps);
  maybe(j, "train_seconds", c.train_seconds);
  maybe(j, "batch_size", c.batch_size);
  maybe(j, "lr", c.lr);
  maybe(j, "nn_hidden", c.nn_hidden);
  maybe(j, "nn_depth", c.nn_depth);
  maybe(j, "ns_layers", c.ns_layers);
  maybe(j, "ns_bins", c.ns_bins);
  maybe(j, "ns_tail_bound", c.ns_tail_bound);
  maybe(j, "cfm_sigma_min", c.cfm_sigma_min);
  maybe(j, "cfm_coupling", c.cfm_coupling);
  maybe(j, "cfm_ode_steps", c.cfm_ode_steps);
  maybe(j, "ddpm_T", c.ddpm_T);
  maybe(j, "ddpm_beta_lo", c.ddpm_beta_lo);
  maybe(j, "ddpm_beta_hi", c.ddpm_beta_hi);
  maybe(j, "n_eval", c.n_eval);
  maybe(j, "eval_bins", c.eval_bins);
  maybe(j, "fe_cutoff", c.fe_cutoff);
  maybe(j, "fe_mass_ratio", c.fe_mass_ratio);
  maybe(j, "timing_n", c.timing_n);
  maybe(j, "timing_repeats", c.timing_repeats);
  maybe(j, "hp_model", c.hp_model);
  maybe(j, "hp_values", c.hp_values);
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("ExperimentConfig: cannot open " + path);
  json merged = json::object();
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      bool blank = line.find_first_not_of(" \t\r") == std::string::npos;
      if (!blank) throw FormatError("ExperimentConfig: expected key = value", lineno);
      continue;
    }
    std::string key = line.substr(0, eq);
    std::string value = line.substr(eq + 1);
    auto trim = [](std::string& s) {
      const auto a = s.find_first_not_of(" \t\r");
      const auto b = s.find_last_not_of(" \t\r");
      s = (a == std::string::npos) ? "" : s.substr(a, b - a + 1);
    };
    trim(key);
    trim(value);
    json parsed = json::parse(value, nullptr, false);
    if (parsed.is_discarded())
      throw FormatError("ExperimentConfig: value for '" + key + "' is not valid JSON", lineno);
    merged[key] = parsed;
  }
  return from_json(merged);
}

void ExperimentConfig::apply_override(const std::string& key, const std::string& json_value) {
  json j = to_json();
  json parsed = json::parse(json_value, nullptr, false);
  if (parsed.is_discarded())
    throw std::invalid_argument("override value for '" + key + "' is not valid JSON");
  if (!j.contains(key)) throw std::invalid_argument("unknown config key: " + key);
  j[key] = parsed;
  *this = from_json(j);
}

std::string ResultRow::csv_header() {
  return "kind,sweep,model,d,n_train,seed,kld,delta_f,true_delta_f,r2,sec_per_sample,"
         "param_count,sampler,train_steps,train_seconds,error";
}

namespace {

std::string fmt_opt(const std::optional<double>& v) {
  if (!v) return "";
  char b[32];
  std::snprintf(b, sizeof b, "%.17g", *v);
  return b;
}

std::string sanitize(std::string s) {
  for (char& c : s)
    if (c == ',' || c == '\n' || c == '\r') c = ';';
  return s;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

std::string ResultRow::csv_row() const {
  std::ostringstream os;
  os << kind << ',' << sweep << ',' << model << ',' << d << ',' << n_train << ',' << seed << ','
     << fmt_opt(kld) << ',' << fmt_opt(delta_f) << ',' << fmt_opt(true_delta_f) << ','
     << fmt_opt(r2) << ',' << fmt_opt(sec_per_sample) << ','
     << (param_count ? std::to_string(*param_count) : "") << ',' << sampler << ',' << train_steps
     << ',';
  char b[32];
  std::snprintf(b, sizeof b, "%.6g", train_seconds);
  os << b << ',' << sanitize(error);
  return os.str();
}

ResultRow ResultRow::parse(const std::string& line) {
  const auto f = split_csv(line);
  if (f.size() != 16) throw FormatError("ResultRow: expected 16 fields, got " +
                                        std::to_string(f.size()));
  ResultRow r;
  r.kind = f[0];
  r.sweep = f[1];
  r.model = f[2];
  r.d = f[3].empty() ? 0 : std::stoi(f[3]);
  r.n_train = f[4].empty() ? 0 : std::stol(f[4]);
  r.seed = f[5].empty() ? 0 : std::stoull(f[5]);
  auto opt = [](const std::string& s) -> std::optional<double> {
    if (s.empty()) return std::nullopt;
    return std::stod(s);
  };
  r.kld = opt(f[6]);
  r.delta_f = opt(f[7]);
  r.true_delta_f = opt(f[8]);
  r.r2 = opt(f[9]);
  r.sec_per_sample = opt(f[10]);
  if (!f[11].empty()) r.param_count = std::stol(f[11]);
  r.sampler = f[12];
  r.train_steps = f[13].empty() ? 0 : std::stol(f[13]);
  r.train_seconds = f[14].empty() ? 0 : std::stod(f[14]);
  r.error = f[15];
  return r;
}

std::vector<ResultRow> read_result_rows(const std::string& path) {
  std::vector<ResultRow> rows;
  std::ifstream in(path);
  if (!in) return rows;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (first) {
      first = false;
      continue;
    }
    if (line.empty()) continue;
    rows.push_back(ResultRow::parse(line));
  }
  return rows;
}

namespace {

// ---------------------------------------------------------------------------
// Cell machinery
// ---------------------------------------------------------------------------

constexpr uint64_t kTagMeans = 0x4d45414e;
constexpr uint64_t kTagData = 0x44415441;
constexpr uint64_t kTagSplit = 0x53504c54;
constexpr uint64_t kTagInit = 0x494e4954;
constexpr uint64_t kTagTrain = 0x5452414e;
constexpr uint64_t kTagEval = 0x4556414c;

uint64_t model_tag(const std::string& name) {
  uint64_t t = 0;
  for (char c : name) t = t * 31 + static_cast<unsigned char>(c);
  return t;
}

struct ResultAppender {
  std::string path;
  std::set<std::string> done;
  std::mutex mu;

  explicit ResultAppender(const std::string& p) : path(p) {
    for (const auto& row : read_result_rows(path)) done.insert(row.key());
    if (!fs::exists(path)) {
      std::ofstream out(path);
      out << ResultRow::csv_header() << "\n";
    }
  }
  bool is_done(const ResultRow& row) {
    std::lock_guard<std::mutex> lock(mu);
    return done.count(row.key()) > 0;
  }
  bool is_done_key(const std::string& key) {
    std::lock_guard<std::mutex> lock(mu);
    return done.count(key) > 0;
  }
  void append(const ResultRow& row) {
    std::lock_guard<std::mutex> lock(mu);
    if (done.count(row.key())) return;
    std::ofstream out(path, std::ios::app);
    out << row.csv_row() << "\n";
    done.insert(row.key());
  }
};

struct TrainedCell {
  Checkpoint ckpt;
  long steps_run = 0;
  double seconds = 0;
};

TrainOptions train_options(const ExperimentConfig& cfg, uint64_t seed,
                           const std::string& model_name) {
  TrainOptions opts;
  opts.steps = cfg.steps;
  opts.max_seconds = cfg.train_seconds;
  opts.batch_size = cfg.batch_size;
  opts.adam.lr = cfg.lr;
  opts.seed = derive_seed(seed, {kTagTrain, model_tag(model_name)});
  opts.record_trace = false;
  return opts;
}

// hp_override: NS depth (layers) or CFM/DDPM hidden width, 0 = config value.
TrainedCell train_family(const std::string& name, const ExperimentConfig& cfg, int d,
                         const Mat& train_std, const StandardizationStats& stats, uint64_t seed,
                         int hp_override = 0) {
  TrainedCell cell;
  Rng init_rng(derive_seed(seed, {kTagInit, model_tag(name)}));
  const TrainOptions opts = train_options(cfg, seed, name);
  if (name == "ns") {
    NsConfig nc;
    nc.d = d;
    nc.n_layers = hp_override > 0 ? hp_override : cfg.ns_layers;
    if (d >= 2 && nc.n_layers < 2) nc.n_layers = 2;
    nc.bins = cfg.ns_bins;
    nc.tail_bound = cfg.ns_tail_bound;
    nc.hidden_width = cfg.nn_hidden;
    nc.depth = cfg.nn_depth;
    NsModel model(nc);
    Vec params = model.init_params(init_rng);
    TrainResult res = ns_train(model, params, train_std, opts);
    cell.ckpt = make_checkpoint(model, params, stats);
    cell.steps_run = res.steps_run;
    cell.seconds = res.seconds;
  } else if (name == "cfm") {
    CfmConfig cc;
    cc.d = d;
    cc.hidden_width = hp_override > 0 ? hp_override : cfg.nn_hidden;
    cc.depth = cfg.nn_depth;
    cc.sigma_min = cfg.cfm_sigma_min;
    cc.coupling = coupling_from_name(cfg.cfm_coupling);
    cc.ode_steps = cfg.cfm_ode_steps;
    CfmModel model(cc);
    Vec params = model.init_params(init_rng);
    TrainResult res = cfm_train(model, params, train_std, opts);
    cell.ckpt = make_checkpoint(model, params, stats);
    cell.steps_run = res.steps_run;
    cell.seconds = res.seconds;
  } else if (name == "ddpm") {
    DdpmConfig dc;
    dc.d = d;
    dc.hidden_width = hp_override > 0 ? hp_override : cfg.nn_hidden;
    dc.depth = cfg.nn_depth;
    dc.T = cfg.ddpm_T;
    dc.beta_lo = cfg.ddpm_beta_lo;
    dc.beta_hi = cfg.ddpm_beta_hi;
    DdpmModel model(dc);
    Vec params = model.init_params(init_rng);
    TrainResult res = ddpm_train(model, params, train_std, opts);
    cell.ckpt = make_checkpoint(model, params, stats);
    cell.steps_run = res.steps_run;
    cell.seconds = res.seconds;
  } else {
    throw std::invalid_argument("train_family: unknown model " + name);
  }
  return cell;
}

struct CellData {
  Dataset train_raw, test_raw;
  Mat train_std;
  StandardizationStats stats;
};

CellData prepare(const Dataset& ds, const ExperimentConfig& cfg, uint64_t seed) {
  CellData cd;
  auto [train, test] = split(ds, cfg.test_fraction, derive_seed(seed, {kTagSplit}));
  cd.train_raw = std::move(train);
  cd.test_raw = std::move(test);
  auto [std_train, stats] = standardize(cd.train_raw);
  cd.train_std = std::move(std_train.samples);
  cd.stats = std::move(stats);
  return cd;
}

Dataset gmm_dataset(const ExperimentConfig& cfg, int d, long n, int n_modes,
                    const std::vector<double>& weights, uint64_t seed) {
  GmmSpec spec;
  spec.dim = d;
  spec.means = random_mode_means(d, n_modes, cfg.mode_half_width, cfg.mode_min_separation,
                                 derive_seed(seed, {kTagMeans}));
  spec.weights = weights;
  spec.seed = derive_seed(seed, {kTagData});
  return gen_gmm(spec, n);
}

std::string fmt_sweep_double(double v) {
  char b[32];
  std::snprintf(b, sizeof b, "%g", v);
  return b;
}

EvalOptions eval_options(const ExperimentConfig& cfg) {
  EvalOptions o;
  o.nx = cfg.eval_bins;
  o.ny = cfg.eval_bins;
  return o;
}

int harness_workers() {
  const char* env = std::getenv("PROBGEN_WORKERS");
  if (!env) return 1;
  const int w = std::atoi(env);
  return w >= 1 ? w : 1;
}

void run_groups(const std::vector<std::function<void()>>& groups, bool serial) {
  const int workers = serial ? 1 : harness_workers();
  if (workers <= 1) {
    for (const auto& g : groups) g();
    return;
  }
  std::mutex mu;
  size_t next = 0;
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      while (true) {
        size_t idx;
        {
          std::lock_guard<std::mutex> lock(mu);
          if (next >= groups.size()) return;
          idx = next++;
        }
        groups[idx]();
      }
    });
  }
  for (auto& t : pool) t.join();
}

// Runs the shared per-cell pipeline for one dataset: baseline row plus one
// row per model. `decorate` fills kind-specific fields from the finished
// evaluation.
void run_dataset_cell(
    const ExperimentConfig& cfg, ResultAppender& app, const std::string& kind,
    const std::string& sweep, uint64_t seed, const Dataset& ds,
    const std::function<void(const std::string&, const AnyModel&, const EvalResult&, ResultRow&)>&
        decorate = {}) {
  ResultRow proto;
  proto.kind = kind;
  proto.sweep = sweep;
  proto.seed = seed;
  proto.d = static_cast<int>(ds.dim());
  proto.n_train = static_cast<long>(std::lround(ds.n() * (1.0 - cfg.test_fraction)));

  // Skip the whole cell when every row is already present.
  bool all_done = true;
  {
    ResultRow probe = proto;
    probe.model = "baseline";
    all_done = app.is_done(probe);
    for (const auto& m : cfg.models) {
      probe.model = m;
      all_done = all_done && app.is_done(probe);
    }
  }
  if (all_done) return;

  CellData cd = prepare(ds, cfg, seed);
  const EvalOptions eopts = eval_options(cfg);

  {
    ResultRow row = proto;
    row.model = "baseline";
    if (!app.is_done(row)) {
      try {
        EvalResult er =
            evaluate_samples(cd.train_raw.samples, cd.test_raw.samples, cd.train_raw.samples, eopts);
        row.kld = er.kld_floor;
      } catch (const std::exception& e) {
        row.error = e.what();
      }
      app.append(row);
    }
  }

  for (const auto& name : cfg.models) {
    ResultRow row = proto;
    row.model = name;
    if (app.is_done(row)) continue;
    try {
      TrainedCell cell =
          train_family(name, cfg, static_cast<int>(ds.dim()), cd.train_std, cd.stats, seed);
      row.train_steps = cell.steps_run;
      row.train_seconds = cell.seconds;
      AnyModel model(cell.ckpt);
      row.param_count = model.param_count();
      row.sampler = model.sampler_tag();
      const Mat gen =
          model.sample(cfg.n_eval, derive_seed(seed, {kTagEval, model_tag(name)}));
      EvalResult er = evaluate_samples(cd.train_raw.samples, cd.test_raw.samples, gen, eopts);
      row.kld = er.kld;
      if (decorate) decorate(name, model, er, row);
    } catch (const std::exception& e) {
      row.error = e.what();
    }
    app.append(row);
  }
}

Dataset load_dihedral_dataset(const ExperimentConfig& cfg) {
  if (!cfg.dihedral_csv.empty()) return ingest_dihedrals(cfg.dihedral_csv);
  return gen_dihedral_surrogate(cfg.dihedral_n, 424242);
}

Mat take_columns(const Mat& m, int c0, int c1) {
  Mat out(m.rows(), 2);
  out.col(0) = m.col(c0);
  out.col(1) = m.col(c1);
  return out;
}

void run_dihedral_residues(const ExperimentConfig& cfg, ResultAppender& app) {
  const Dataset full = load_dihedral_dataset(cfg);
  require(full.dim() == 18, "dihedral-residues: 18 columns expected");
  std::vector<std::function<void()>> groups;
  for (uint64_t seed : cfg.seeds) {
    groups.push_back([&, seed] {
      // Residue rows share one training per (model, seed).
      bool all_done = true;
      for (int r = 1; r <= 9 && all_done; ++r) {
        ResultRow probe;
        probe.kind = kind_name(cfg.kind);
        probe.sweep = std::to_string(r);
        probe.seed = seed;
        probe.model = "baseline";
        all_done = app.is_done(probe);
        for (const auto& m : cfg.models) {
          probe.model = m;
          all_done = all_done && app.is_done(probe);
        }
      }
      if (all_done) return;

      CellData cd = prepare(full, cfg, seed);
      const EvalOptions eopts = eval_options(cfg);
      ResultRow proto;
      proto.kind = kind_name(cfg.kind);
      proto.seed = seed;
      proto.d = 18;
      proto.n_train = cd.train_raw.n();

      for (int r = 1; r <= 9; ++r) {
        ResultRow row = proto;
        row.sweep = std::to_string(r);
        row.model = "baseline";
        if (app.is_done(row)) continue;
        try {
          const int c0 = 2 * (r - 1), c1 = 2 * (r - 1) + 1;
          EvalResult er = evaluate_samples(take_columns(cd.train_raw.samples, c0, c1),
                                           take_columns(cd.test_raw.samples, c0, c1),
                                           take_columns(cd.train_raw.samples, c0, c1), eopts);
          row.kld = er.kld_floor;
        } catch (const std::exception& e) {
          row.error = e.what();
        }
        app.append(row);
      }

      for (const auto& name : cfg.models) {
        bool model_done = true;
        for (int r = 1; r <= 9; ++r) {
          ResultRow probe = proto;
          probe.sweep = std::to_string(r);
          probe.model = name;
          model_done = model_done && app.is_done(probe);
        }
        if (model_done) continue;
        try {
          TrainedCell cell = train_family(name, cfg, 18, cd.train_std, cd.stats, seed);
          AnyModel model(cell.ckpt);
          const Mat gen =
              model.sample(cfg.n_eval, derive_seed(seed, {kTagEval, model_tag(name)}));
          for (int r = 1; r <= 9; ++r) {
            ResultRow row = proto;
            row.sweep = std::to_string(r);
            row.model = name;
            if (app.is_done(row)) continue;
            row.train_steps = cell.steps_run;
            row.train_seconds = cell.seconds;
            row.param_count = model.param_count();
            row.sampler = model.sampler_tag();
            const int c0 = 2 * (r - 1), c1 = 2 * (r - 1) + 1;
            EvalResult er = evaluate_samples(take_columns(cd.train_raw.samples, c0, c1),
                                             take_columns(cd.test_raw.samples, c0, c1),
                                             take_columns(gen, c0, c1), eopts);
            row.kld = er.kld;
            app.append(row);
          }
        } catch (const std::exception& e) {
          for (int r = 1; r <= 9; ++r) {
            ResultRow row = proto;
            row.sweep = std::to_string(r);
            row.model = name;
            if (app.is_done(row)) continue;
            row.error = e.what();
            app.append(row);
          }
        }
      }
    });
  }
  run_groups(groups, false);
}

}  // namespace

void run_experiment(const ExperimentConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  fs::create_directories(out_dir);
  ResultAppender app(out_dir + "/results_" + kind_name(cfg.kind) + ".csv");
  const std::string kind = kind_name(cfg.kind);

  switch (cfg.kind) {
    case ExperimentKind::GmmDimSweep:
    case ExperimentKind::GmmTrainsize: {
      std::vector<std::function<void()>> groups;
      const bool dim_sweep = cfg.kind == ExperimentKind::GmmDimSweep;
      const auto& sweep_dims = cfg.dims;
      const auto& sweep_sizes = cfg.train_sizes;
      const size_t n_sweep = dim_sweep ? sweep_dims.size() : sweep_sizes.size();
      for (size_t si = 0; si < n_sweep; ++si) {
        for (uint64_t seed : cfg.seeds) {
          groups.push_back([&, si, seed] {
            const int d = dim_sweep ? sweep_dims[si] : cfg.fixed_dim;
            const long n = dim_sweep ? cfg.n_train : sweep_sizes[si];
            const std::string sweep =
                dim_sweep ? std::to_string(d) : std::to_string(n);
            std::vector<double> weights(cfg.n_modes, 1.0 / cfg.n_modes);
            // Exact sum for the spec invariant.
            double acc = 0;
            for (size_t i = 0; i + 1 < weights.size(); ++i) acc += weights[i];
            weights.back() = 1.0 - acc;
            Dataset ds = gmm_dataset(cfg, d, n, cfg.n_modes, weights,
                                     derive_seed(seed, {model_tag(sweep)}));
            run_dataset_cell(cfg, app, kind, sweep, seed, ds);
          });
        }
      }
      run_groups(groups, false);
      break;
    }
    case ExperimentKind::GmmAsymmetry: {
      std::vector<std::function<void()>> groups;
      for (double df : cfg.delta_f_grid) {
        for (uint64_t seed : cfg.seeds) {
          groups.push_back([&, df, seed] {
            auto [w0, w1] = weights_from_delta_f(df);
            const std::string sweep = fmt_sweep_double(df);
            Dataset ds = gmm_dataset(cfg, cfg.fixed_dim, cfg.n_train, 2, {w0, w1},
                                     derive_seed(seed, {model_tag(sweep)}));
            GmmSpec spec = GmmSpec::from_json(ds.meta.extra.at("spec"));
            auto decorate = [&](const std::string&, const AnyModel&, const EvalResult& er,
                                ResultRow& row) {
              row.true_delta_f = df;
              const Boundary boundary = boundary_from_projection(er.proj_test);
              const double cutoff = cfg.fe_mass_ratio ? 1e9 : cfg.fe_cutoff;
              FreeEnergyEstimate est = mode_delta_f(er.hist_generated, boundary, cutoff, 1.0);
              // Orient by the generating modes: report ln(Z_dom(mode0) /
              // Z_dom(mode1)) so the estimate tracks ln(w0/w1) = df.
              Mat means(2, spec.dim);
              means.row(0) = spec.means[0].transpose();
              means.row(1) = spec.means[1].transpose();
              const Mat pm = pca_project(er.basis, means);
              const int dom0 = boundary.domain_of(pm(0, 0), pm(0, 1));
              const int dom1 = boundary.domain_of(pm(1, 0), pm(1, 1));
              if (dom0 == dom1) throw std::runtime_error("asymmetry: modes share a domain");
              row.delta_f = (dom0 == 0) ? std::log(est.z1 / est.z2) : std::log(est.z2 / est.z1);
            };
            run_dataset_cell(cfg, app, kind, sweep, seed, ds, decorate);
          });
        }
      }
      run_groups(groups, false);
      break;
    }
    case ExperimentKind::GmmTiming: {
      // Exclusive use of the machine: always serial.
      std::vector<std::function<void()>> groups;
      for (int d : cfg.dims) {
        for (uint64_t seed : cfg.seeds) {
          groups.push_back([&, d, seed] {
            std::vector<double> weights(cfg.n_modes, 1.0 / cfg.n_modes);
            double acc = 0;
            for (size_t i = 0; i + 1 < weights.size(); ++i) acc += weights[i];
            weights.back() = 1.0 - acc;
            Dataset ds = gmm_dataset(cfg, d, cfg.n_train, cfg.n_modes, weights,
                                     derive_seed(seed, {model_tag(std::to_string(d))}));
            auto decorate = [&](const std::string& name, const AnyModel& model,
                                const EvalResult&, ResultRow& row) {
              uint64_t tick = derive_seed(seed, {kTagEval, model_tag(name), 99});
              auto sampler = [&](long n) {
                model.sample(n, tick++);
              };
              row.sec_per_sample =
                  measure_sampling_time(sampler, cfg.timing_n, cfg.timing_repeats);
            };
            run_dataset_cell(cfg, app, kind, std::to_string(d), seed, ds, decorate);
          });
        }
      }
      run_groups(groups, true);
      break;
    }
    case ExperimentKind::GmmParams: {
      for (int d : cfg.dims) {
        for (uint64_t seed : cfg.seeds) {
          for (const auto& name : cfg.models) {
            ResultRow row;
            row.kind = kind;
            row.sweep = std::to_string(d);
            row.model = name;
            row.seed = seed;
            row.d = d;
            row.n_train = cfg.n_train;
            if (app.is_done(row)) continue;
            if (name == "ns") {
              NsConfig nc;
              nc.d = d;
              nc.n_layers = std::max(2, cfg.ns_layers);
              nc.bins = cfg.ns_bins;
              nc.tail_bound = cfg.ns_tail_bound;
              nc.hidden_width = cfg.nn_hidden;
              nc.depth = cfg.nn_depth;
              row.param_count = NsModel(nc).param_count();
            } else if (name == "cfm") {
              CfmConfig cc;
              cc.d = d;
              cc.hidden_width = cfg.nn_hidden;
              cc.depth = cfg.nn_depth;
              row.param_count = CfmModel(cc).param_count();
            } else {
              DdpmConfig dc;
              dc.d = d;
              dc.hidden_width = cfg.nn_hidden;
              dc.depth = cfg.nn_depth;
              dc.T = cfg.ddpm_T;
              dc.beta_lo = cfg.ddpm_beta_lo;
              dc.beta_hi = cfg.ddpm_beta_hi;
              row.param_count = DdpmModel(dc).param_count();
            }
            app.append(row);
          }
        }
      }
      break;
    }
    case ExperimentKind::DihedralResidues:
      run_dihedral_residues(cfg, app);
      break;
    case ExperimentKind::DihedralTrainsize: {
      const Dataset full = load_dihedral_dataset(cfg);
      require(full.dim() == 18, "dihedral-trainsize: 18 columns expected");
      std::vector<std::function<void()>> groups;
      for (long n : cfg.train_sizes) {
        for (uint64_t seed : cfg.seeds) {
          groups.push_back([&, n, seed] {
            require(n <= full.n(), "dihedral-trainsize: subset larger than dataset");
            Rng rng(derive_seed(seed, {kTagData, static_cast<uint64_t>(n)}));
            const auto perm = rng.permutation(full.n());
            Dataset sub;
            sub.samples.resize(n, 18);
            for (long i = 0; i < n; ++i) sub.samples.row(i) = full.samples.row(perm[i]);
            sub.meta = full.meta;
            const int c0 = 2 * (cfg.residue - 1), c1 = c0 + 1;
            // Train on all 18 columns, evaluate on the configured residue pair.
            ResultRow proto;
            proto.kind = kind;
            proto.sweep = std::to_string(n);
            proto.seed = seed;
            proto.d = 18;
            proto.n_train = static_cast<long>(std::lround(n * (1.0 - cfg.test_fraction)));
            bool all_done = true;
            {
              ResultRow probe = proto;
              probe.model = "baseline";
              all_done = app.is_done(probe);
              for (const auto& m : cfg.models) {
                probe.model = m;
                all_done = all_done && app.is_done(probe);
              }
            }
            if (all_done) return;
            CellData cd = prepare(sub, cfg, seed);
            const EvalOptions eopts = eval_options(cfg);
            {
              ResultRow row = proto;
              row.model = "baseline";
              if (!app.is_done(row)) {
                try {
                  EvalResult er = evaluate_samples(take_columns(cd.train_raw.samples, c0, c1),
                                                   take_columns(cd.test_raw.samples, c0, c1),
                                                   take_columns(cd.train_raw.samples, c0, c1),
                                                   eopts);
                  row.kld = er.kld_floor;
                } catch (const std::exception& e) {
                  row.error = e.what();
                }
                app.append(row);
              }
            }
            for (const auto& name : cfg.models) {
              ResultRow row = proto;
              row.model = name;
              if (app.is_done(row)) continue;
              try {
                TrainedCell cell = train_family(name, cfg, 18, cd.train_std, cd.stats, seed);
                row.train_steps = cell.steps_run;
                row.train_seconds = cell.seconds;
                AnyModel model(cell.ckpt);
                row.param_count = model.param_count();
                row.sampler = model.sampler_tag();
                const Mat gen =
                    model.sample(cfg.n_eval, derive_seed(seed, {kTagEval, model_tag(name)}));
                EvalResult er = evaluate_samples(take_columns(cd.train_raw.samples, c0, c1),
                                                 take_columns(cd.test_raw.samples, c0, c1),
                                                 take_columns(gen, c0, c1), eopts);
                row.kld = er.kld;
              } catch (const std::exception& e) {
                row.error = e.what();
              }
              app.append(row);
            }
          });
        }
      }
      run_groups(groups, false);
      break;
    }
    case ExperimentKind::HpSweep:
      run_hp_sweep(cfg, out_dir);
      break;
  }
}

void run_hp_sweep(const ExperimentConfig& cfg, const std::string& out_dir) {
  require(cfg.hp_model == "ns" || cfg.hp_model == "cfm" || cfg.hp_model == "ddpm",
          "hp sweep: unknown model");
  fs::create_directories(out_dir);
  ResultAppender app(out_dir + "/results_hp-sweep.csv");
  const std::string kind = "hp-sweep";

  std::vector<std::function<void()>> groups;
  for (int value : cfg.hp_values) {
    for (uint64_t seed : cfg.seeds) {
      groups.push_back([&, value, seed] {
        ResultRow row;
        row.kind = kind;
        row.sweep = std::to_string(value);
        row.model = cfg.hp_model;
        row.seed = seed;
        row.d = cfg.fixed_dim;
        if (app.is_done(row)) return;
        try {
          std::vector<double> weights(cfg.n_modes, 1.0 / cfg.n_modes);
          double acc = 0;
          for (size_t i = 0; i + 1 < weights.size(); ++i) acc += weights[i];
          weights.back() = 1.0 - acc;
          Dataset ds = gmm_dataset(cfg, cfg.fixed_dim, cfg.n_train, cfg.n_modes, weights,
                                   derive_seed(seed, {model_tag(row.sweep)}));
          row.n_train = static_cast<long>(std::lround(ds.n() * (1.0 - cfg.test_fraction)));
          CellData cd = prepare(ds, cfg, seed);
          TrainedCell cell =
              train_family(cfg.hp_model, cfg, cfg.fixed_dim, cd.train_std, cd.stats, seed, value);
          row.train_steps = cell.steps_run;
          row.train_seconds = cell.seconds;
          AnyModel model(cell.ckpt);
          row.param_count = model.param_count();
          row.sampler = model.sampler_tag();
          const Mat gen =
              model.sample(cfg.n_eval, derive_seed(seed, {kTagEval, model_tag(cfg.hp_model)}));
          EvalResult er = evaluate_samples(cd.train_raw.samples, cd.test_raw.samples, gen,
                                           eval_options(cfg));
          row.kld = er.kld;
        } catch (const std::exception& e) {
          row.error = e.what();
        }
        app.append(row);
      });
    }
  }
  run_groups(groups, false);

  // Selected optimum: argmin of the seed-averaged KLD, ties to the smaller
  // hyperparameter value.
  const auto rows = read_result_rows(out_dir + "/results_hp-sweep.csv");
  std::map<int, std::pair<double, int>> by_value;  // value -> (sum kld, count)
  for (const auto& r : rows) {
    if (r.model != cfg.hp_model || !r.kld || !r.error.empty()) continue;
    auto& acc = by_value[std::stoi(r.sweep)];
    acc.first += *r.kld;
    acc.second += 1;
  }
  int best_value = 0;
  double best_kld = std::numeric_limits<double>::infinity();
  for (const auto& [value, acc] : by_value) {
    if (acc.second == 0) continue;
    const double mean = acc.first / acc.second;
    if (mean < best_kld - 1e-15) {  // map iteration ascends, ties keep the smaller value
      best_kld = mean;
      best_value = value;
    }
  }
  if (best_value != 0) {
    json sel = {{"model", cfg.hp_model},
                {"parameter", cfg.hp_model == "ns" ? "layers" : "hidden_width"},
                {"value", best_value},
                {"mean_kld", best_kld}};
    std::ofstream out(out_dir + "/hp_selected.json");
    out << sel.dump(2) << "\n";
  }
}

namespace {

void write_figure(const std::string& in_path, const std::string& out_path, bool with_r2) {
  auto rows = read_result_rows(in_path);
  if (rows.empty()) return;
  std::stable_sort(rows.begin(), rows.end(), [](const ResultRow& a, const ResultRow& b) {
    if (a.model != b.model) return a.model < b.model;
    double sa = 0, sb = 0;
    try {
      sa = std::stod(a.sweep);
      sb = std::stod(b.sweep);
      if (sa != sb) return sa < sb;
    } catch (...) {
      if (a.sweep != b.sweep) return a.sweep < b.sweep;
    }
    return a.seed < b.seed;
  });
  std::ofstream out(out_path);
  out << ResultRow::csv_header() << "\n";
  for (const auto& r : rows) out << r.csv_row() << "\n";
  if (with_r2) {
    // Per-model r^2 against the identity line over the sweep.
    std::map<std::string, std::vector<std::pair<double, double>>> pts;
    for (const auto& r : rows)
      if (r.true_delta_f && r.delta_f && r.error.empty())
        pts[r.model].push_back({*r.true_delta_f, *r.delta_f});
    for (const auto& [model, pairs] : pts) {
      if (pairs.size() < 2) continue;
      ResultRow summary;
      summary.kind = rows.front().kind;
      summary.sweep = "r2";
      summary.model = model;
      try {
        summary.r2 = r_squared(pairs);
      } catch (const std::exception&) {
        continue;
      }
      out << summary.csv_row() << "\n";
    }
  }
}

}  // namespace

void write_figure_tables(const std::string& in_dir, const std::string& out_dir) {
  fs::create_directories(out_dir);
  const std::vector<std::pair<std::string, std::string>> mapping = {
      {"results_gmm-dim-sweep.csv", "fig1a.csv"},
      {"results_gmm-trainsize.csv", "fig1b.csv"},
      {"results_gmm-asymmetry.csv", "fig2.csv"},
      {"results_gmm-timing.csv", "fig3a.csv"},
      {"results_gmm-params.csv", "fig3b.csv"},
      {"results_dihedral-residues.csv", "fig4a.csv"},
      {"results_dihedral-trainsize.csv", "fig4b.csv"},
      {"results_hp-sweep.csv", "fig6.csv"},
  };
  for (const auto& [in_name, out_name] : mapping)
    write_figure(in_dir + "/" + in_name, out_dir + "/" + out_name,
                 out_name == std::string("fig2.csv"));
}

}  // namespace probgen
