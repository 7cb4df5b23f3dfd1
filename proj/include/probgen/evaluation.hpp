// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "probgen/common.hpp"
#include "probgen/dataset.hpp"

#include <json.hpp>

#include <functional>
#include <optional>
#include <string>
#include <utility>

namespace probgen {

/// Top-2 principal components of the training data, fixed sign convention
/// (largest-magnitude entry positive).
struct PcaBasis {
  Vec mean;
  Eigen::Matrix<double, Eigen::Dynamic, 2> components;  // orthonormal columns
  Eigen::Vector2d explained_variance;
};

PcaBasis pca_fit(const Mat& train);
Mat pca_project(const PcaBasis& basis, const Mat& samples);

struct BinSpec {
  int nx = 50;
  int ny = 50;
  double xmin = 0, xmax = 0, ymin = 0, ymax = 0;

  /// Ranges from the reference points, expanded by `expand` of the span
  /// (half on each side).
  static BinSpec from_reference(const Mat& points2d, int nx = 50, int ny = 50,
                                double expand = 0.05);
  void validate() const;
};

struct Histogram2D {
  Vec xedges, yedges;  // strictly increasing, sizes nx+1 / ny+1
  Eigen::Matrix<long, Eigen::Dynamic, Eigen::Dynamic> counts;
  long total = 0;     // in-range counts
  long overflow = 0;  // recorded but excluded from bins

  long nx() const { return counts.rows(); }
  long ny() const { return counts.cols(); }
  std::pair<double, double> bin_center(long i, long j) const {
    return {0.5 * (xedges[i] + xedges[i + 1]), 0.5 * (yedges[j] + yedges[j + 1])};
  }
};

Histogram2D histogram2d(const Mat& points2d, const BinSpec& spec);

/// Eq.-style binned divergence: counts plus `epsilon` per bin are normalized
/// to probabilities on both sides; returns sum p ln(p/q). Requires identical
/// edges.
double binned_kld(const Histogram2D& p, const Histogram2D& q, double epsilon = 1e-10);

/// F_j = -(1/beta) ln p_j shifted so the minimum is zero; empty bins are NaN.
Mat free_energy_surface(const Histogram2D& hist, double beta = 1.0);

/// Oriented split of the projected plane into two domains.
struct Boundary {
  Eigen::Vector2d point;
  Eigen::Vector2d normal;  // domain 0 is the side the normal points away from
  int domain_of(double x, double y) const {
    return ((Eigen::Vector2d(x, y) - point).dot(normal) < 0.0) ? 0 : 1;
  }
};

/// Perpendicular bisector between the two highest local maxima of the
/// histogram (8-neighborhood test, ties broken lexicographically). The
/// normal points from the higher maximum toward the lower one, so domain 0
/// contains the higher peak. Throws when fewer than two maxima exist.
Boundary default_boundary(const Histogram2D& hist);

/// default_boundary on a coarse histogram of the projected points, with the
/// bin count scaled to the sample size so mode peaks dominate count noise.
Boundary boundary_from_projection(const Mat& proj2d);

struct FreeEnergyEstimate {
  double delta_f = 0;  // -(1/beta) ln(Z1/Z2), domains ordered by the boundary
  double z1 = 0, z2 = 0;
  double cutoff = 0;
  double beta = 1.0;
  std::string boundary_note;

  nlohmann::json to_json() const;
};

/// Within each domain keep bins with F <= F_min(domain) + cutoff; Z_i is the
/// kept probability mass; delta_f = -(1/beta) ln(Z1/Z2) with Z1 the mass of
/// domain 0.
FreeEnergyEstimate mode_delta_f(const Histogram2D& hist, const Boundary& boundary,
                                double cutoff = 0.0374, double beta = 1.0);

/// r^2 against the identity line: 1 - sum (est-true)^2 / sum (true-mean)^2.
double r_squared(const std::vector<std::pair<double, double>>& true_est);

/// Median over `repeats` of (wall-clock for an n-batch)/n, one warm-up batch
/// excluded. The sampler receives the batch size.
double measure_sampling_time(const std::function<void(long)>& sampler, long n, int repeats);

/// Evaluation protocol shared by the harness and the acceptance suite: PCA
/// on the training data, histogram ranges fixed from the test-set
/// projection, KLD(test || generated) plus the train-vs-test noise floor.
struct EvalOptions {
  int nx = 50;
  int ny = 50;
  double expand = 0.05;
  double kld_epsilon = 1e-10;
};

struct EvalResult {
  double kld = 0;
  double kld_floor = 0;
  PcaBasis basis;
  Mat proj_test;
  Histogram2D hist_test;
  Histogram2D hist_generated;
};

EvalResult evaluate_samples(const Mat& train, const Mat& test, const Mat& generated,
                            const EvalOptions& opts = EvalOptions{});

struct EvaluationReport {
  std::string experiment_id;
  std::string model;
  int d = 0;
  long n_train = 0;
  double kld = 0;
  std::optional<FreeEnergyEstimate> delta_f;
  std::optional<double> r2;
  double sec_per_sample = 0;
  long param_count = 0;
  uint64_t seed = 0;

  nlohmann::json to_json() const;
  /// CSV row: experiment id, model, d, n_train, kld, delta_f, r2,
  /// sec_per_sample, param_count, seed.
  std::string csv_row() const;
  static std::string csv_header();
};

}  // namespace probgen
