// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "probgen/common.hpp"
#include "probgen/rng.hpp"

#include <json.hpp>

#include <string>
#include <utility>
#include <vector>

namespace probgen {

struct DatasetMeta {
  std::string generator;  // free-form description of how the data was made
  uint64_t seed = 0;
  std::vector<std::string> columns;
  std::vector<bool> angular;  // degrees in [-180, 180) when set
  nlohmann::json extra;       // generator-specific fields (spec, mode counts, ...)
};

/// n x d sample matrix plus provenance. Angular columns hold degrees wrapped
/// into [-180, 180).
struct Dataset {
  Mat samples;
  DatasetMeta meta;

  long n() const { return samples.rows(); }
  long dim() const { return samples.cols(); }
  void validate() const;  // finite entries, angular range, label count
};

/// Gaussian mixture: modes share an isotropic identity covariance.
struct GmmSpec {
  int dim = 2;
  std::vector<Vec> means;
  std::vector<double> weights;
  uint64_t seed = 0;

  void validate() const;  // weights sum to 1 within 1e-12, mean lengths match
  nlohmann::json to_json() const;
  static GmmSpec from_json(const nlohmann::json& j);
};

/// Mixture weights (w0, w1) whose log-ratio ln(w0/w1) equals `delta_f`.
std::pair<double, double> weights_from_delta_f(double delta_f);

/// Draw n samples: choose mode k with probability weight_k, add standard
/// normal noise to mean_k. Mode occupancy counts are recorded in
/// meta.extra["mode_counts"]. When `labels` is non-null it receives the
/// chosen mode index per row.
Dataset gen_gmm(const GmmSpec& spec, long n, std::vector<int>* labels = nullptr);

/// Mode means drawn i.i.d. uniform in [-half_width, half_width]^d; draws with
/// any pairwise distance below `min_separation` are rejected and redrawn from
/// the continuing stream. Deterministic per seed.
std::vector<Vec> random_mode_means(int d, int n_modes, double half_width, double min_separation,
                                   uint64_t seed);

/// Disjoint row partition, uniformly shuffled by seed; |test| = round(n * test_fraction).
std::pair<Dataset, Dataset> split(const Dataset& ds, double test_fraction, uint64_t seed);

struct StandardizationStats {
  Vec mean;
  Vec stddev;
};

/// Column-wise z-scoring. Throws naming the column when its variance is zero.
std::pair<Dataset, StandardizationStats> standardize(const Dataset& ds);
Dataset destandardize(const Dataset& ds, const StandardizationStats& stats);
Mat destandardize(const Mat& samples, const StandardizationStats& stats);

/// Wrap a value in degrees into [-180, 180).
double wrap_degrees(double x);

/// Read an 18-column dihedral CSV (header phi1,psi1,...,phi9,psi9); values are
/// wrapped into [-180, 180). Throws FormatError with a line number on
/// malformed input.
Dataset ingest_dihedrals(const std::string& path);

/// Dataset CSV + `<path>.meta.json` sidecar.
void write_dataset_csv(const Dataset& ds, const std::string& path);
Dataset read_dataset_csv(const std::string& path);

/// Synthetic stand-in for a peptide dihedral trajectory: per residue a
/// mixture of von Mises states over (phi, psi), exterior residues mixing
/// faster than interior ones. 18 angular columns in degrees.
Dataset gen_dihedral_surrogate(long n, uint64_t seed);

}  // namespace probgen
