// SPDX-License-Identifier: Apache-2.0
#include "probgen/evaluation.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>

namespace probgen {

using nlohmann::json;

PcaBasis pca_fit(const Mat& train) {
  require(train.rows() >= 3, "pca_fit: need at least 3 samples");
  require(train.cols() >= 2, "pca_fit: need at least 2 dimensions");
  PcaBasis basis;
  basis.mean = train.colwise().mean();
  Mat centered = train.rowwise() - basis.mean.transpose();
  Mat cov = centered.transpose() * centered / (train.rows() - 1);
  Eigen::SelfAdjointEigenSolver<Mat> eig(cov);
  require(eig.info() == Eigen::Success, "pca_fit: eigendecomposition failed");
  const long d = train.cols();
  // Eigenvalues ascend; take the top two.
  const double ev1 = eig.eigenvalues()[d - 1];
  const double ev2 = eig.eigenvalues()[d - 2];
  require(ev2 > 0, "pca_fit: covariance has fewer than 2 positive eigenvalues");
  basis.explained_variance << ev1, ev2;
  basis.components.resize(d, 2);
  basis.components.col(0) = eig.eigenvectors().col(d - 1);
  basis.components.col(1) = eig.eigenvectors().col(d - 2);
  // Deterministic sign: the largest-magnitude entry of each component is
  // positive (first such index on ties).
  for (int c = 0; c < 2; ++c) {
    long arg = 0;
    double best = -1;
    for (long j = 0; j < d; ++j) {
      const double a = std::abs(basis.components(j, c));
      if (a > best + 1e-15) {
        best = a;
        arg = j;
      }
    }
    if (basis.components(arg, c) < 0) basis.components.col(c) *= -1.0;
  }
  return basis;
}

Mat pca_project(const PcaBasis& basis, const Mat& samples) {
  require_shape(samples.cols() == basis.mean.size(), "pca_project: dimension mismatch");
  return (samples.rowwise() - basis.mean.transpose()) * basis.components;
}

BinSpec BinSpec::from_reference(const Mat& points2d, int nx, int ny, double expand) {
  require_shape(points2d.cols() == 2, "BinSpec: reference points must be 2-D");
  require(points2d.rows() >= 1, "BinSpec: empty reference set");
  BinSpec spec;
  spec.nx = nx;
  spec.ny = ny;
  spec.xmin = points2d.col(0).minCoeff();
  spec.xmax = points2d.col(0).maxCoeff();
  spec.ymin = points2d.col(1).minCoeff();
  spec.ymax = points2d.col(1).maxCoeff();
  const double xpad = 0.5 * expand * (spec.xmax - spec.xmin);
  const double ypad = 0.5 * expand * (spec.ymax - spec.ymin);
  spec.xmin -= xpad;
  spec.xmax += xpad;
  spec.ymin -= ypad;
  spec.ymax += ypad;
  spec.validate();
  return spec;
}

void BinSpec::validate() const {
  require(nx >= 1 && ny >= 1, "BinSpec: bin counts must be >= 1");
  require(xmax > xmin && ymax > ymin, "BinSpec: zero-area range");
}

Histogram2D histogram2d(const Mat& points2d, const BinSpec& spec) {
  require_shape(points2d.cols() == 2, "histogram2d: points must be 2-D");
  spec.validate();
  Histogram2D h;
  h.xedges = Vec::LinSpaced(spec.nx + 1, spec.xmin, spec.xmax);
  h.yedges = Vec::LinSpaced(spec.ny + 1, spec.ymin, spec.ymax);
  h.counts = Eigen::Matrix<long, Eigen::Dynamic, Eigen::Dynamic>::Zero(spec.nx, spec.ny);
  const double wx = (spec.xmax - spec.xmin) / spec.nx;
  const double wy = (spec.ymax - spec.ymin) / spec.ny;
  for (long i = 0; i < points2d.rows(); ++i) {
    const double x = points2d(i, 0), y = points2d(i, 1);
    if (x < spec.xmin || x > spec.xmax || y < spec.ymin || y > spec.ymax) {
      ++h.overflow;
      continue;
    }
    long bx = static_cast<long>((x - spec.xmin) / wx);
    long by = static_cast<long>((y - spec.ymin) / wy);
    bx = std::min<long>(bx, spec.nx - 1);  // right edge closed
    by = std::min<long>(by, spec.ny - 1);
    h.counts(bx, by) += 1;
    ++h.total;
  }
  return h;
}

double binned_kld(const Histogram2D& p, const Histogram2D& q, double epsilon) {
  require(epsilon > 0, "binned_kld: epsilon must be positive");
  require(p.xedges.size() == q.xedges.size() && p.yedges.size() == q.yedges.size() &&
              (p.xedges - q.xedges).cwiseAbs().maxCoeff() == 0.0 &&
              (p.yedges - q.yedges).cwiseAbs().maxCoeff() == 0.0,
          "binned_kld: bin edges differ");
  const long nbins = p.nx() * p.ny();
  const double psum = static_cast<double>(p.total) + epsilon * nbins;
  const double qsum = static_cast<double>(q.total) + epsilon * nbins;
  double kld = 0;
  for (long i = 0; i < p.nx(); ++i) {
    for (long j = 0; j < p.ny(); ++j) {
      const double pp = (p.counts(i, j) + epsilon) / psum;
      const double qq = (q.counts(i, j) + epsilon) / qsum;
      kld += pp * std::log(pp / qq);
    }
  }
  return kld;
}

Mat free_energy_surface(const Histogram2D& hist, double beta) {
  require(beta > 0, "free_energy_surface: beta must be positive");
  require(hist.total > 0, "free_energy_surface: empty histogram");
  Mat f(hist.nx(), hist.ny());
  double fmin = std::numeric_limits<double>::infinity();
  for (long i = 0; i < hist.nx(); ++i) {
    for (long j = 0; j < hist.ny(); ++j) {
      if (hist.counts(i, j) > 0) {
        const double pj = static_cast<double>(hist.counts(i, j)) / hist.total;
        f(i, j) = -std::log(pj) / beta;
        fmin = std::min(fmin, f(i, j));
      } else {
        f(i, j) = std::numeric_limits<double>::quiet_NaN();  // undefined bin
      }
    }
  }
  for (long i = 0; i < hist.nx(); ++i)
    for (long j = 0; j < hist.ny(); ++j)
      if (std::isfinite(f(i, j))) f(i, j) -= fmin;
  return f;
}

Boundary default_boundary(const Histogram2D& hist) {
  // Local maxima by 8-neighborhood: count >= all neighbors and > 0.
  struct Peak {
    long i, j, count;
  };
  std::vector<Peak> peaks;
  for (long i = 0; i < hist.nx(); ++i) {
    for (long j = 0; j < hist.ny(); ++j) {
      const long c = hist.counts(i, j);
      if (c <= 0) continue;
      bool is_max = true;
      for (long di = -1; di <= 1 && is_max; ++di) {
        for (long dj = -1; dj <= 1; ++dj) {
          if (di == 0 && dj == 0) continue;
          const long ni = i + di, nj = j + dj;
          if (ni < 0 || nj < 0 || ni >= hist.nx() || nj >= hist.ny()) continue;
          if (hist.counts(ni, nj) > c) {
            is_max = false;
            break;
          }
        }
      }
      if (is_max) peaks.push_back({i, j, c});
    }
  }
  // Order by count descending, lexicographic bin index on ties.
  std::sort(peaks.begin(), peaks.end(), [](const Peak& a, const Peak& b) {
    if (a.count != b.count) return a.count > b.count;
    if (a.i != b.i) return a.i < b.i;
    return a.j < b.j;
  });
  // Counting noise creates spurious maxima on the flank of a real peak, so
  // the second peak must clear an exclusion radius around the first.
  const long radius = std::max<long>(2, std::min(hist.nx(), hist.ny()) / 16);
  std::vector<Peak> chosen;
  for (const Peak& p : peaks) {
    bool excluded = false;
    for (const Peak& c : chosen)
      if (std::abs(p.i - c.i) <= radius && std::abs(p.j - c.j) <= radius) excluded = true;
    if (!excluded) chosen.push_back(p);
    if (chosen.size() == 2) break;
  }
  if (chosen.size() < 2)
    throw std::invalid_argument(
        "default_boundary: fewer than 2 local maxima; supply a manual boundary");
  auto [x1, y1] = hist.bin_center(chosen[0].i, chosen[0].j);
  auto [x2, y2] = hist.bin_center(chosen[1].i, chosen[1].j);
  Boundary b;
  b.point = Eigen::Vector2d(0.5 * (x1 + x2), 0.5 * (y1 + y2));
  b.normal = Eigen::Vector2d(x2 - x1, y2 - y1).normalized();
  return b;
}

Boundary boundary_from_projection(const Mat& proj2d) {
  const long n = proj2d.rows();
  // Aim for ~20 points per occupied bin so peaks beat Poisson noise.
  int nb = static_cast<int>(std::lround(std::sqrt(static_cast<double>(n) / 20.0)));
  nb = std::max(12, std::min(50, nb));
  return default_boundary(histogram2d(proj2d, BinSpec::from_reference(proj2d, nb, nb)));
}

json FreeEnergyEstimate::to_json() const {
  return {{"delta_f", delta_f}, {"z1", z1},     {"z2", z2},
          {"cutoff", cutoff},   {"beta", beta}, {"boundary", boundary_note}};
}

FreeEnergyEstimate mode_delta_f(const Histogram2D& hist, const Boundary& boundary, double cutoff,
                                double beta) {
  require(cutoff >= 0, "mode_delta_f: cutoff must be >= 0");
  require(beta > 0, "mode_delta_f: beta must be positive");
  require(hist.total > 0, "mode_delta_f: empty histogram");
  // Domain-wise free-energy minimum, i.e. maximum probability.
  double pmax[2] = {0, 0};
  for (long i = 0; i < hist.nx(); ++i) {
    for (long j = 0; j < hist.ny(); ++j) {
      if (hist.counts(i, j) <= 0) continue;
      auto [x, y] = hist.bin_center(i, j);
      const int dom = boundary.domain_of(x, y);
      pmax[dom] = std::max(pmax[dom], static_cast<double>(hist.counts(i, j)));
    }
  }
  if (pmax[0] <= 0 || pmax[1] <= 0)
    throw std::invalid_argument("mode_delta_f: a domain holds no probability mass");
  // Keep bins with F <= F_min + cutoff, i.e. p >= p_max exp(-beta cutoff).
  double z[2] = {0, 0};
  const double factor = std::exp(-beta * cutoff);
  for (long i = 0; i < hist.nx(); ++i) {
    for (long j = 0; j < hist.ny(); ++j) {
      const long c = hist.counts(i, j);
      if (c <= 0) continue;
      auto [x, y] = hist.bin_center(i, j);
      const int dom = boundary.domain_of(x, y);
      if (static_cast<double>(c) >= pmax[dom] * factor)
        z[dom] += static_cast<double>(c) / hist.total;
    }
  }
  if (z[0] <= 0 || z[1] <= 0)
    throw std::invalid_argument("mode_delta_f: cutoff excluded all bins of a domain");
  FreeEnergyEstimate est;
  est.z1 = z[0];
  est.z2 = z[1];
  est.cutoff = cutoff;
  est.beta = beta;
  est.delta_f = -std::log(z[0] / z[1]) / beta;
  char buf[160];
  std::snprintf(buf, sizeof buf, "bisector point=(%.4g,%.4g) normal=(%.4g,%.4g); domain0=higher peak",
                boundary.point[0], boundary.point[1], boundary.normal[0], boundary.normal[1]);
  est.boundary_note = buf;
  return est;
}

double r_squared(const std::vector<std::pair<double, double>>& true_est) {
  require(true_est.size() >= 2, "r_squared: need at least 2 points");
  double tmean = 0;
  for (const auto& [t, e] : true_est) tmean += t;
  tmean /= true_est.size();
  double ss_res = 0, ss_tot = 0;
  for (const auto& [t, e] : true_est) {
    ss_res += (e - t) * (e - t);
    ss_tot += (t - tmean) * (t - tmean);
  }
  require(ss_tot > 0, "r_squared: constant true values");
  return 1.0 - ss_res / ss_tot;
}

double measure_sampling_time(const std::function<void(long)>& sampler, long n, int repeats) {
  require(n >= 100, "measure_sampling_time: n must be >= 100");
  require(repeats >= 1, "measure_sampling_time: repeats must be >= 1");
  sampler(n);  // warm-up batch, excluded
  std::vector<double> per_sample;
  for (int r = 0; r < repeats; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    sampler(n);
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    per_sample.push_back(secs / static_cast<double>(n));
  }
  std::sort(per_sample.begin(), per_sample.end());
  const size_t m = per_sample.size();
  return (m % 2 == 1) ? per_sample[m / 2] : 0.5 * (per_sample[m / 2 - 1] + per_sample[m / 2]);
}

EvalResult evaluate_samples(const Mat& train, const Mat& test, const Mat& generated,
                            const EvalOptions& opts) {
  EvalResult res;
  res.basis = pca_fit(train);
  res.proj_test = pca_project(res.basis, test);
  const BinSpec spec = BinSpec::from_reference(res.proj_test, opts.nx, opts.ny, opts.expand);
  res.hist_test = histogram2d(res.proj_test, spec);
  res.hist_generated = histogram2d(pca_project(res.basis, generated), spec);
  const Histogram2D hist_train = histogram2d(pca_project(res.basis, train), spec);
  res.kld = binned_kld(res.hist_test, res.hist_generated, opts.kld_epsilon);
  res.kld_floor = binned_kld(res.hist_test, hist_train, opts.kld_epsilon);
  return res;
}

json EvaluationReport::to_json() const {
  json j;
  j["experiment_id"] = experiment_id;
  j["model"] = model;
  j["d"] = d;
  j["n_train"] = n_train;
  j["kld"] = kld;
  j["delta_f"] = delta_f ? delta_f->to_json() : json(nullptr);
  j["r2"] = r2 ? json(*r2) : json(nullptr);
  j["sec_per_sample"] = sec_per_sample;
  j["param_count"] = param_count;
  j["seed"] = seed;
  return j;
}

std::string EvaluationReport::csv_header() {
  return "experiment_id,model,d,n_train,kld,delta_f,r2,sec_per_sample,param_count,seed";
}

std::string EvaluationReport::csv_row() const {
  char buf[512];
  std::string df = delta_f ? [&] {
    char b[32];
    std::snprintf(b, sizeof b, "%.17g", delta_f->delta_f);
    return std::string(b);
  }() : std::string();
  std::string r2s = r2 ? [&] {
    char b[32];
    std::snprintf(b, sizeof b, "%.17g", *r2);
    return std::string(b);
  }() : std::string();
  std::snprintf(buf, sizeof buf, "%s,%s,%d,%ld,%.17g,%s,%s,%.17g,%ld,%llu",
                experiment_id.c_str(), model.c_str(), d, n_train, kld, df.c_str(), r2s.c_str(),
                sec_per_sample, param_count, static_cast<unsigned long long>(seed));
  return buf;
}

}  // namespace probgen
