// SPDX-License-Identifier: Apache-2.0
#include "probgen/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace probgen {

using nlohmann::json;

void Dataset::validate() const {
  require(samples.allFinite(), "Dataset: non-finite entries");
  if (!meta.angular.empty()) {
    require(static_cast<long>(meta.angular.size()) == dim(),
            "Dataset: angular flag count must match dimension");
    for (long j = 0; j < dim(); ++j) {
      if (!meta.angular[j]) continue;
      for (long i = 0; i < n(); ++i) {
        const double v = samples(i, j);
        require(v >= -180.0 && v < 180.0, "Dataset: angular value outside [-180, 180)");
      }
    }
  }
}

void GmmSpec::validate() const {
  require(dim >= 1, "GmmSpec: dim must be >= 1");
  require(!means.empty(), "GmmSpec: empty mode list");
  require(means.size() == weights.size(), "GmmSpec: means/weights size mismatch");
  double sum = 0;
  for (double w : weights) {
    require(w > 0 && w <= 1, "GmmSpec: weights must lie in (0, 1]");
    sum += w;
  }
  require(std::abs(sum - 1.0) <= 1e-12, "GmmSpec: weights must sum to 1 within 1e-12");
  for (const Vec& m : means)
    require(m.size() == dim, "GmmSpec: mean length must equal dim");
}

json GmmSpec::to_json() const {
  json j;
  j["dim"] = dim;
  j["weights"] = weights;
  j["seed"] = seed;
  std::vector<std::vector<double>> ms;
  for (const Vec& m : means) ms.emplace_back(m.data(), m.data() + m.size());
  j["means"] = ms;
  return j;
}

GmmSpec GmmSpec::from_json(const json& j) {
  GmmSpec s;
  s.dim = j.at("dim").get<int>();
  s.weights = j.at("weights").get<std::vector<double>>();
  s.seed = j.at("seed").get<uint64_t>();
  for (const auto& m : j.at("means")) {
    auto v = m.get<std::vector<double>>();
    s.means.push_back(Eigen::Map<const Vec>(v.data(), static_cast<long>(v.size())));
  }
  s.validate();
  return s;
}

std::pair<double, double> weights_from_delta_f(double delta_f) {
  const double w0 = 1.0 / (1.0 + std::exp(-delta_f));
  return {w0, 1.0 - w0};
}

Dataset gen_gmm(const GmmSpec& spec, long n, std::vector<int>* labels) {
  spec.validate();
  require(n >= 1, "gen_gmm: n must be >= 1");
  Rng rng(spec.seed);
  const int k = static_cast<int>(spec.means.size());
  std::vector<double> cum(k);
  double acc = 0;
  for (int i = 0; i < k; ++i) {
    acc += spec.weights[i];
    cum[i] = acc;
  }
  cum[k - 1] = 1.0;

  Dataset ds;
  ds.samples.resize(n, spec.dim);
  std::vector<long> counts(k, 0);
  if (labels) labels->assign(n, 0);
  for (long i = 0; i < n; ++i) {
    const double u = rng.uniform();
    int mode = static_cast<int>(std::lower_bound(cum.begin(), cum.end(), u) - cum.begin());
    if (mode >= k) mode = k - 1;
    counts[mode] += 1;
    if (labels) (*labels)[i] = mode;
    for (int j = 0; j < spec.dim; ++j) ds.samples(i, j) = spec.means[mode][j] + rng.normal();
  }
  ds.meta.generator = "gmm";
  ds.meta.seed = spec.seed;
  for (int j = 0; j < spec.dim; ++j) ds.meta.columns.push_back("x" + std::to_string(j));
  ds.meta.angular.assign(spec.dim, false);
  ds.meta.extra["spec"] = spec.to_json();
  ds.meta.extra["mode_counts"] = counts;
  return ds;
}

std::vector<Vec> random_mode_means(int d, int n_modes, double half_width, double min_separation,
                                   uint64_t seed) {
  require(d >= 1, "random_mode_means: d must be >= 1");
  require(n_modes >= 1, "random_mode_means: n_modes must be >= 1");
  require(half_width > 0, "random_mode_means: half_width must be positive");
  Rng rng(seed);
  const int max_attempts = 10000;
  for (int attempt = 0; attempt < max_attempts; ++attempt) {
    std::vector<Vec> means;
    for (int m = 0; m < n_modes; ++m) {
      Vec v(d);
      for (int j = 0; j < d; ++j) v[j] = rng.uniform(-half_width, half_width);
      means.push_back(std::move(v));
    }
    bool ok = true;
    for (size_t a = 0; a < means.size() && ok; ++a)
      for (size_t b = a + 1; b < means.size(); ++b)
        if ((means[a] - means[b]).norm() < min_separation) {
          ok = false;
          break;
        }
    if (ok) return means;
  }
  throw std::runtime_error(
      "random_mode_means: could not satisfy the separation constraint; lower min_separation or "
      "raise half_width");
}

std::pair<Dataset, Dataset> split(const Dataset& ds, double test_fraction, uint64_t seed) {
  require(test_fraction > 0 && test_fraction < 1, "split: test_fraction must be in (0, 1)");
  const long n = ds.n();
  const long n_test = std::lround(n * test_fraction);
  require(n_test >= 1 && n - n_test >= 1, "split: a partition would be empty");
  Rng rng(seed);
  std::vector<int> order = rng.permutation(n);
  Dataset test, train;
  test.samples.resize(n_test, ds.dim());
  train.samples.resize(n - n_test, ds.dim());
  for (long i = 0; i < n_test; ++i) test.samples.row(i) = ds.samples.row(order[i]);
  for (long i = n_test; i < n; ++i) train.samples.row(i - n_test) = ds.samples.row(order[i]);
  test.meta = ds.meta;
  train.meta = ds.meta;
  test.meta.extra["split"] = {{"role", "test"}, {"fraction", test_fraction}, {"seed", seed}};
  train.meta.extra["split"] = {{"role", "train"}, {"fraction", test_fraction}, {"seed", seed}};
  return {std::move(train), std::move(test)};
}

std::pair<Dataset, StandardizationStats> standardize(const Dataset& ds) {
  require(ds.n() >= 2, "standardize: need at least 2 rows");
  StandardizationStats st;
  st.mean = ds.samples.colwise().mean();
  Mat centered = ds.samples.rowwise() - st.mean.transpose();
  st.stddev = (centered.array().square().colwise().sum() / (ds.n() - 1)).sqrt();
  for (long j = 0; j < ds.dim(); ++j) {
    if (!(st.stddev[j] > 0)) {
      const std::string col = ds.meta.columns.empty() ? ("#" + std::to_string(j))
                                                      : ds.meta.columns[j];
      throw std::invalid_argument("standardize: zero-variance column " + col);
    }
  }
  Dataset out;
  out.meta = ds.meta;
  out.samples = centered.array().rowwise() / st.stddev.transpose().array();
  return {std::move(out), std::move(st)};
}

Mat destandardize(const Mat& samples, const StandardizationStats& stats) {
  require_shape(samples.cols() == stats.mean.size(), "destandardize: dimension mismatch");
  return (samples.array().rowwise() * stats.stddev.transpose().array()).matrix().rowwise() +
         stats.mean.transpose();
}

Dataset destandardize(const Dataset& ds, const StandardizationStats& stats) {
  Dataset out;
  out.meta = ds.meta;
  out.samples = destandardize(ds.samples, stats);
  return out;
}

double wrap_degrees(double x) {
  double w = std::fmod(x + 180.0, 360.0);
  if (w < 0) w += 360.0;
  return w - 180.0;
}

namespace {

std::vector<std::string> split_fields(const std::string& line) {
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

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t");
  size_t b = s.find_last_not_of(" \t");
  if (a == std::string::npos) return "";
  return s.substr(a, b - a + 1);
}

}  // namespace

Dataset ingest_dihedrals(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("ingest_dihedrals: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw FormatError("ingest_dihedrals: empty file", 1);
  auto header = split_fields(line);
  if (header.size() != 18)
    throw FormatError("ingest_dihedrals: expected 18 columns, got " +
                          std::to_string(header.size()),
                      1);
  std::vector<std::string> expected;
  for (int r = 1; r <= 9; ++r) {
    expected.push_back("phi" + std::to_string(r));
    expected.push_back("psi" + std::to_string(r));
  }
  for (size_t j = 0; j < 18; ++j) {
    if (trim(header[j]) != expected[j])
      throw FormatError("ingest_dihedrals: unexpected header column '" + trim(header[j]) +
                            "', expected '" + expected[j] + "'",
                        1);
  }

  std::vector<double> values;
  long n = 0;
  long lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    auto fields = split_fields(line);
    if (fields.size() != 18)
      throw FormatError("ingest_dihedrals: expected 18 values, got " +
                            std::to_string(fields.size()),
                        lineno);
    for (const auto& f : fields) {
      try {
        size_t pos = 0;
        double v = std::stod(f, &pos);
        if (pos != trim(f).size() && !trim(f).empty() && pos != f.size())
          throw std::invalid_argument("trailing");
        values.push_back(wrap_degrees(v));
      } catch (const std::exception&) {
        throw FormatError("ingest_dihedrals: non-numeric cell '" + f + "'", lineno);
      }
    }
    ++n;
  }
  if (n == 0) throw FormatError("ingest_dihedrals: no data rows", lineno);

  Dataset ds;
  ds.samples.resize(n, 18);
  for (long i = 0; i < n; ++i)
    for (int j = 0; j < 18; ++j) ds.samples(i, j) = values[i * 18 + j];
  ds.meta.generator = "dihedrals:" + path;
  ds.meta.columns = expected;
  ds.meta.angular.assign(18, true);
  ds.validate();
  return ds;
}

void write_dataset_csv(const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_dataset_csv: cannot open " + path);
  std::vector<std::string> cols = ds.meta.columns;
  if (cols.empty())
    for (long j = 0; j < ds.dim(); ++j) cols.push_back("x" + std::to_string(j));
  for (long j = 0; j < ds.dim(); ++j) out << (j ? "," : "") << cols[j];
  out << "\n";
  char buf[64];
  for (long i = 0; i < ds.n(); ++i) {
    for (long j = 0; j < ds.dim(); ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", ds.samples(i, j));
      out << (j ? "," : "") << buf;
    }
    out << "\n";
  }

  json meta;
  meta["generator"] = ds.meta.generator;
  meta["seed"] = ds.meta.seed;
  meta["n"] = ds.n();
  meta["d"] = ds.dim();
  meta["columns"] = cols;
  meta["angular"] = std::vector<bool>(ds.meta.angular.begin(), ds.meta.angular.end());
  if (!ds.meta.extra.is_null()) meta["extra"] = ds.meta.extra;
  std::ofstream mout(path + ".meta.json");
  mout << meta.dump(2) << "\n";
}

Dataset read_dataset_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("read_dataset_csv: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw FormatError("read_dataset_csv: empty file", 1);
  auto header = split_fields(line);
  const long d = static_cast<long>(header.size());
  std::vector<double> values;
  long n = 0, lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    auto fields = split_fields(line);
    if (static_cast<long>(fields.size()) != d)
      throw FormatError("read_dataset_csv: ragged row", lineno);
    for (const auto& f : fields) {
      try {
        values.push_back(std::stod(f));
      } catch (const std::exception&) {
        throw FormatError("read_dataset_csv: non-numeric cell '" + f + "'", lineno);
      }
    }
    ++n;
  }
  if (n == 0) throw FormatError("read_dataset_csv: no data rows", lineno);
  Dataset ds;
  ds.samples.resize(n, d);
  for (long i = 0; i < n; ++i)
    for (long j = 0; j < d; ++j) ds.samples(i, j) = values[i * d + j];
  for (auto& h : header) ds.meta.columns.push_back(trim(h));

  std::ifstream min(path + ".meta.json");
  if (min) {
    json meta = json::parse(min, nullptr, false);
    if (!meta.is_discarded()) {
      ds.meta.generator = meta.value("generator", "");
      ds.meta.seed = meta.value("seed", uint64_t{0});
      if (meta.contains("angular")) ds.meta.angular = meta["angular"].get<std::vector<bool>>();
      if (meta.contains("extra")) ds.meta.extra = meta["extra"];
    }
  }
  if (ds.meta.angular.empty()) ds.meta.angular.assign(d, false);
  return ds;
}

namespace {

// Best-Fisher rejection sampler for the von Mises distribution, in radians.
double sample_von_mises(double mu, double kappa, Rng& rng) {
  if (kappa < 1e-8) return rng.uniform(-M_PI, M_PI);
  const double tau = 1.0 + std::sqrt(1.0 + 4.0 * kappa * kappa);
  const double rho = (tau - std::sqrt(2.0 * tau)) / (2.0 * kappa);
  const double r = (1.0 + rho * rho) / (2.0 * rho);
  double f = 0.0;
  while (true) {
    const double u1 = rng.uniform();
    const double z = std::cos(M_PI * u1);
    f = (1.0 + r * z) / (r + z);
    const double c = kappa * (r - f);
    const double u2 = rng.uniform();
    if (c * (2.0 - c) - u2 > 0 || std::log(c / u2) + 1.0 - c >= 0) break;
  }
  const double u3 = rng.uniform();
  const double theta = (u3 > 0.5 ? 1.0 : -1.0) * std::acos(f);
  double out = mu + theta;
  while (out > M_PI) out -= 2.0 * M_PI;
  while (out < -M_PI) out += 2.0 * M_PI;
  return out;
}

}  // namespace

Dataset gen_dihedral_surrogate(long n, uint64_t seed) {
  require(n >= 1, "gen_dihedral_surrogate: n must be >= 1");
  Rng rng(seed);
  // Two chirality states per residue in (phi, psi), in degrees.
  const double left_phi = 50.0, left_psi = 45.0;
  const double right_phi = -55.0, right_psi = -48.0;
  Dataset ds;
  ds.samples.resize(n, 18);
  for (long i = 0; i < n; ++i) {
    for (int r = 0; r < 9; ++r) {
      // Exterior residues flip more often: weight of the minority state
      // rises toward the chain ends.
      const double edge = std::min(r, 8 - r) / 4.0;            // 0 at ends, 2 center
      const double minority = 0.5 - 0.38 * std::min(edge, 1.0);  // 0.5 ends, 0.12 center
      const bool left = rng.uniform() < minority;
      const double kappa = 12.0 + 8.0 * std::min(edge, 1.0);
      const double mu_phi = (left ? left_phi : right_phi) * M_PI / 180.0;
      const double mu_psi = (left ? left_psi : right_psi) * M_PI / 180.0;
      ds.samples(i, 2 * r) = wrap_degrees(sample_von_mises(mu_phi, kappa, rng) * 180.0 / M_PI);
      ds.samples(i, 2 * r + 1) =
          wrap_degrees(sample_von_mises(mu_psi, kappa, rng) * 180.0 / M_PI);
    }
  }
  ds.meta.generator = "dihedral-surrogate";
  ds.meta.seed = seed;
  for (int r = 1; r <= 9; ++r) {
    ds.meta.columns.push_back("phi" + std::to_string(r));
    ds.meta.columns.push_back("psi" + std::to_string(r));
  }
  ds.meta.angular.assign(18, true);
  return ds;
}

}  // namespace probgen
