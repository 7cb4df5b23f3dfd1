// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "probgen/dataset.hpp"
#include "probgen/evaluation.hpp"
#include "testutil.hpp"

#include <cmath>

using namespace probgen;

TEST_CASE("pca: axis-aligned anisotropic Gaussian aligns with the axes within 1 degree") {
  Rng rng(1);
  const long n = 60000;
  Mat data(n, 2);
  for (long i = 0; i < n; ++i) {
    data(i, 0) = 5.0 * rng.normal() + 3.0;
    data(i, 1) = 1.0 * rng.normal() - 2.0;
  }
  PcaBasis basis = pca_fit(data);
  // Analytic covariance oracle: diag(25, 1), components e_x then e_y.
  const double cos1 = std::abs(basis.components.col(0).dot(Eigen::Vector2d(1, 0)));
  const double cos2 = std::abs(basis.components.col(1).dot(Eigen::Vector2d(0, 1)));
  CHECK(std::acos(std::min(1.0, cos1)) * 180.0 / M_PI < 1.0);
  CHECK(std::acos(std::min(1.0, cos2)) * 180.0 / M_PI < 1.0);
  CHECK(basis.explained_variance[0] == doctest::Approx(25.0).epsilon(0.05));

  // Projecting the training mean gives (0, 0).
  Mat mean_row = basis.mean.transpose();
  Mat proj = pca_project(basis, mean_row);
  CHECK(std::abs(proj(0, 0)) < 1e-12);
  CHECK(std::abs(proj(0, 1)) < 1e-12);
}

TEST_CASE("pca components are orthonormal and preserve planar distances") {
  Rng rng(2);
  const long n = 500;
  // Synthetic planar data embedded in d=5.
  Mat data(n, 5);
  for (long i = 0; i < n; ++i) {
    const double a = rng.normal(), b = rng.normal();
    data.row(i) << 2 * a + b, a - b, 0.1 * a, 0.05 * b, 0.0;
    data(i, 4) = 1e-4 * rng.normal();  // break exact rank deficiency
  }
  PcaBasis basis = pca_fit(data);
  CHECK(std::abs(basis.components.col(0).norm() - 1.0) < 1e-10);
  CHECK(std::abs(basis.components.col(1).norm() - 1.0) < 1e-10);
  CHECK(std::abs(basis.components.col(0).dot(basis.components.col(1))) < 1e-10);

  // Orthonormality: distances restricted to the component plane survive.
  Mat proj = pca_project(basis, data);
  for (int rep = 0; rep < 50; ++rep) {
    const long i = rng.uniform_int(n), j = rng.uniform_int(n);
    Vec diff = (data.row(i) - data.row(j)).transpose();
    Eigen::Vector2d pd(diff.dot(basis.components.col(0)), diff.dot(basis.components.col(1)));
    const double got = (proj.row(i) - proj.row(j)).norm();
    CHECK(got == doctest::Approx(pd.norm()).epsilon(1e-10));
  }
}

TEST_CASE("pca rejects rank-deficient covariance") {
  Mat constant = Mat::Ones(10, 3);
  CHECK_THROWS_AS(pca_fit(constant), std::invalid_argument);
}

TEST_CASE("histogram: single point in its bin, conservation, zero-area rejection") {
  Mat pts(1, 2);
  pts << 0.5, 0.5;
  BinSpec spec;
  spec.nx = 10;
  spec.ny = 10;
  spec.xmin = 0;
  spec.xmax = 1;
  spec.ymin = 0;
  spec.ymax = 1;
  Histogram2D h = histogram2d(pts, spec);
  CHECK(h.counts(5, 5) == 1);
  CHECK(h.total == 1);

  Rng rng(3);
  Mat many = rng.normal_mat(5000, 2);
  Histogram2D h2 = histogram2d(many, spec);
  long sum = 0;
  for (long i = 0; i < h2.nx(); ++i)
    for (long j = 0; j < h2.ny(); ++j) sum += h2.counts(i, j);
  CHECK(sum + h2.overflow == 5000);
  CHECK(sum == h2.total);

  BinSpec bad = spec;
  bad.xmax = bad.xmin;
  CHECK_THROWS_AS(histogram2d(pts, bad), std::invalid_argument);
}

TEST_CASE("histogram: uniform points give Poisson-consistent bin counts") {
  Rng rng(4);
  const long n = 250000;
  Mat pts(n, 2);
  for (long i = 0; i < n; ++i) {
    pts(i, 0) = rng.uniform();
    pts(i, 1) = rng.uniform();
  }
  BinSpec spec;
  spec.nx = 50;
  spec.ny = 50;
  spec.xmin = 0;
  spec.xmax = 1;
  spec.ymin = 0;
  spec.ymax = 1;
  Histogram2D h = histogram2d(pts, spec);
  const double expect = static_cast<double>(n) / (50 * 50);
  const double sigma = std::sqrt(expect);
  for (long i = 0; i < 50; ++i)
    for (long j = 0; j < 50; ++j) CHECK(std::abs(h.counts(i, j) - expect) < 5 * sigma);
}

TEST_CASE("binned_kld: identity, hand-computed two-bin case, edge mismatch") {
  Rng rng(5);
  Mat pts = rng.normal_mat(2000, 2);
  BinSpec spec = BinSpec::from_reference(pts);
  Histogram2D h = histogram2d(pts, spec);
  CHECK(binned_kld(h, h) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(binned_kld(h, h) >= -1e-12);

  // Two-bin hand evaluation: p=(1,0), q=(0.5,0.5) in the epsilon->0 limit
  // gives ln 2.
  BinSpec two;
  two.nx = 2;
  two.ny = 1;
  two.xmin = 0;
  two.xmax = 2;
  two.ymin = 0;
  two.ymax = 1;
  Mat p_pts(4, 2), q_pts(4, 2);
  p_pts << 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5;       // all in bin 0
  q_pts << 0.5, 0.5, 1.5, 0.5, 0.5, 0.5, 1.5, 0.5;        // half and half
  Histogram2D hp = histogram2d(p_pts, two), hq = histogram2d(q_pts, two);
  CHECK(binned_kld(hp, hq, 1e-12) == doctest::Approx(std::log(2.0)).epsilon(1e-6));

  Histogram2D other = histogram2d(pts, BinSpec::from_reference(pts, 40, 40));
  CHECK_THROWS_AS(binned_kld(h, other), std::invalid_argument);
}

TEST_CASE("binned_kld decreases with sample size for two halves of one distribution") {
  Rng rng(6);
  double prev = 1e9;
  for (long n : {1000L, 10000L, 100000L}) {
    Mat a = rng.normal_mat(n, 2), b = rng.normal_mat(n, 2);
    BinSpec spec = BinSpec::from_reference(a);
    const double kld = binned_kld(histogram2d(a, spec), histogram2d(b, spec));
    CHECK(kld < prev);
    CHECK(kld > 0);
    prev = kld;
  }
}

TEST_CASE("epsilon monotonicity on disjoint-support histograms") {
  BinSpec two;
  two.nx = 2;
  two.ny = 1;
  two.xmin = 0;
  two.xmax = 2;
  two.ymin = 0;
  two.ymax = 1;
  Mat left(10, 2), right(10, 2);
  left.col(0).setConstant(0.5);
  left.col(1).setConstant(0.5);
  right.col(0).setConstant(1.5);
  right.col(1).setConstant(0.5);
  Histogram2D hl = histogram2d(left, two), hr = histogram2d(right, two);
  double prev = binned_kld(hl, hr, 1e-12);
  for (double eps : {1e-10, 1e-6, 1e-2}) {
    const double cur = binned_kld(hl, hr, eps);
    CHECK(cur <= prev + 1e-12);
    prev = cur;
  }
}

TEST_CASE("free energy surface: uniform histogram is flat zero, half-probability bin is ln 2") {
  BinSpec spec;
  spec.nx = 2;
  spec.ny = 1;
  spec.xmin = 0;
  spec.xmax = 2;
  spec.ymin = 0;
  spec.ymax = 1;
  Mat pts(3, 2);
  pts << 0.5, 0.5, 0.5, 0.5, 1.5, 0.5;  // bin0: 2 counts, bin1: 1 count
  Histogram2D h = histogram2d(pts, spec);
  Mat f = free_energy_surface(h, 1.0);
  CHECK(f(0, 0) == doctest::Approx(0.0));
  CHECK(f(1, 0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  Mat uni(4, 2);
  uni << 0.5, 0.5, 0.5, 0.5, 1.5, 0.5, 1.5, 0.5;
  Mat fu = free_energy_surface(histogram2d(uni, spec), 1.0);
  CHECK(fu(0, 0) == doctest::Approx(0.0));
  CHECK(fu(1, 0) == doctest::Approx(0.0));

  // Shape is invariant to the total count.
  Mat pts2(6, 2);
  pts2 << 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 1.5, 0.5, 1.5, 0.5;
  Mat f2 = free_energy_surface(histogram2d(pts2, spec), 1.0);
  CHECK(f2(1, 0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

namespace {

Mat bimodal_2d(long n, double w0, double sep, uint64_t seed) {
  GmmSpec spec;
  spec.dim = 2;
  Vec m0 = Vec::Zero(2), m1 = Vec::Zero(2);
  m0[0] = -sep / 2;
  m1[0] = sep / 2;
  spec.means = {m0, m1};
  spec.weights = {w0, 1 - w0};
  spec.seed = seed;
  return gen_gmm(spec, n).samples;
}

}  // namespace

TEST_CASE("default_boundary: symmetric modes give the perpendicular bisector") {
  Mat data = bimodal_2d(200000, 0.5, 8.0, 7);
  BinSpec spec = BinSpec::from_reference(data);
  Histogram2D h = histogram2d(data, spec);
  Boundary b = default_boundary(h);
  // Modes sit at x = -4 and 4 on the x-axis: the bisector crosses near 0
  // within one bin width and is perpendicular to the x-axis.
  const double binw = (spec.xmax - spec.xmin) / spec.nx;
  CHECK(std::abs(b.point[0]) < binw);
  CHECK(std::abs(b.normal[1]) < 0.2);
  CHECK(b.domain_of(-4.0, 0.0) != b.domain_of(4.0, 0.0));
}

TEST_CASE("default_boundary requires two maxima") {
  // All mass in one bin: a single local maximum, no usable boundary.
  Mat pts = Mat::Zero(100, 2);
  BinSpec spec;
  spec.nx = 8;
  spec.ny = 8;
  spec.xmin = -1;
  spec.xmax = 1;
  spec.ymin = -1;
  spec.ymax = 1;
  Histogram2D h = histogram2d(pts, spec);
  CHECK_THROWS_AS(default_boundary(h), std::invalid_argument);
}

TEST_CASE("boundary domain labels agree with generation-time mode labels on random 2-mode GMMs") {
  for (uint64_t seed = 0; seed < 10; ++seed) {
    GmmSpec spec;
    spec.dim = 2;
    spec.means = random_mode_means(2, 2, 8.0, 6.0, 100 + seed);
    spec.weights = {0.5, 0.5};
    spec.seed = seed;
    std::vector<int> labels;
    Dataset ds = gen_gmm(spec, 50000, &labels);
    Histogram2D h = histogram2d(ds.samples, BinSpec::from_reference(ds.samples));
    Boundary b = default_boundary(h);
    // Map generation labels to domains via the mode means.
    const int dom_of_mode0 = b.domain_of(spec.means[0][0], spec.means[0][1]);
    const int dom_of_mode1 = b.domain_of(spec.means[1][0], spec.means[1][1]);
    REQUIRE(dom_of_mode0 != dom_of_mode1);
    long agree = 0;
    for (long i = 0; i < ds.n(); ++i) {
      const int dom = b.domain_of(ds.samples(i, 0), ds.samples(i, 1));
      const int expected = labels[i] == 0 ? dom_of_mode0 : dom_of_mode1;
      agree += (dom == expected);
    }
    CHECK(static_cast<double>(agree) / ds.n() >= 0.99);
  }
}

TEST_CASE("mode_delta_f: mirror-symmetric bimodal gives dF near 0") {
  Mat data = bimodal_2d(400000, 0.5, 8.0, 9);
  Histogram2D h = histogram2d(data, BinSpec::from_reference(data));
  FreeEnergyEstimate est = mode_delta_f(h, default_boundary(h), 1e9, 1.0);
  CHECK(std::abs(est.delta_f) < 0.02);
}

TEST_CASE("mode_delta_f with a large cutoff recovers the label-count ratio") {
  const double w = 0.62;  // dF = ln(w/(1-w)) ~ 0.489
  GmmSpec spec;
  spec.dim = 2;
  spec.means = {Vec::Zero(2), Vec::Zero(2)};
  spec.means[0][0] = -4.0;
  spec.means[1][0] = 4.0;
  spec.weights = {w, 1 - w};
  spec.seed = 10;
  std::vector<int> labels;
  Dataset ds = gen_gmm(spec, 1000000, &labels);
  Histogram2D h = histogram2d(ds.samples, BinSpec::from_reference(ds.samples));
  Boundary b = default_boundary(h);
  FreeEnergyEstimate est = mode_delta_f(h, b, 1e9, 1.0);
  // Orient: delta_f = -ln(Z_dom0/Z_dom1); domain of mode 0 determines the sign.
  const double signed_truth =
      (b.domain_of(-4.0, 0.0) == 0) ? -std::log(w / (1 - w)) : std::log(w / (1 - w));
  CHECK(est.delta_f == doctest::Approx(signed_truth).epsilon(0.02));

  // Label-count oracle at generation time.
  long c0 = 0;
  for (int l : labels) c0 += (l == 0);
  const double truth_counts = std::log(static_cast<double>(c0) / (ds.n() - c0));
  CHECK(std::abs(std::abs(est.delta_f) - std::abs(truth_counts)) < 0.05);
}

TEST_CASE("mode_delta_f: all mass on one side raises the empty-domain error") {
  Rng rng(11);
  Mat pts = rng.normal_mat(10000, 2);
  Histogram2D h = histogram2d(pts, BinSpec::from_reference(pts));
  Boundary far;
  far.point = Eigen::Vector2d(100.0, 0.0);
  far.normal = Eigen::Vector2d(1.0, 0.0);
  CHECK_THROWS_AS(mode_delta_f(h, far, 1e9, 1.0), std::invalid_argument);
}

TEST_CASE("finite cutoff keeps near-peak bins only") {
  Mat data = bimodal_2d(1000000, 0.62, 8.0, 12);
  Histogram2D h = histogram2d(data, BinSpec::from_reference(data));
  Boundary b = default_boundary(h);
  FreeEnergyEstimate tight = mode_delta_f(h, b, 0.0374, 1.0);
  FreeEnergyEstimate loose = mode_delta_f(h, b, 1e9, 1.0);
  CHECK(tight.z1 < loose.z1);
  CHECK(tight.z2 < loose.z2);
  CHECK(std::isfinite(tight.delta_f));
  // Note: at this cutoff the kept-bin count per domain depends on how the
  // peak lands on the grid, so tight.delta_f carries an alignment term
  // ln(k1/k2) on top of the peak-height ratio; only the large-cutoff
  // estimator tracks the mass ratio reliably.
}

TEST_CASE("r_squared: exact, mean predictor, hand-computed case, errors") {
  CHECK(r_squared({{0, 0}, {1, 1}, {2, 2}}) == doctest::Approx(1.0));
  CHECK(r_squared({{0, 1}, {1, 1}, {2, 1}}) == doctest::Approx(0.0));
  CHECK(r_squared({{0, 0}, {1, 1}, {2, 3}}) == doctest::Approx(0.5));
  CHECK_THROWS_AS(r_squared({{1, 1}}), std::invalid_argument);
  CHECK_THROWS_AS(r_squared({{1, 0}, {1, 2}}), std::invalid_argument);
}

TEST_CASE("measure_sampling_time: positive, amortized, stable across repeats") {
  auto sampler = [](long n) {
    volatile double sink = 0;
    for (long i = 0; i < n * 2000; ++i) sink += std::sqrt(static_cast<double>(i));
    (void)sink;
  };
  const double t1 = measure_sampling_time(sampler, 200, 5);
  const double t2 = measure_sampling_time(sampler, 400, 5);
  CHECK(t1 > 0);
  // Doubling n changes per-sample time by < 20%.
  CHECK(std::abs(t2 - t1) / t1 < 0.2);
  const double t3 = measure_sampling_time(sampler, 200, 5);
  CHECK(std::abs(t3 - t1) / t1 < 0.25);
  CHECK_THROWS_AS(measure_sampling_time(sampler, 50, 3), std::invalid_argument);
}

TEST_CASE("evaluate_samples: generated equal in law to test scores near the noise floor") {
  Rng rng(13);
  Mat train = rng.normal_mat(20000, 3);
  Mat test = rng.normal_mat(4000, 3);
  Mat gen_good = rng.normal_mat(4000, 3);
  Mat gen_bad = 0.4 * rng.normal_mat(4000, 3);
  EvalResult good = evaluate_samples(train, test, gen_good);
  EvalResult bad = evaluate_samples(train, test, gen_bad);
  CHECK(good.kld < bad.kld);
  CHECK(good.kld_floor > 0);
  CHECK(good.kld < 10 * good.kld_floor + 0.05);
}

TEST_CASE("no-leakage property: projected train and test means agree within 4 SE") {
  GmmSpec spec;
  spec.dim = 10;
  spec.means = random_mode_means(10, 3, 8.0, 6.0, 77);
  spec.weights = {0.3, 0.3, 0.4};
  spec.seed = 14;
  Dataset ds = gen_gmm(spec, 30000);
  auto [train, test] = split(ds, 0.1, 15);
  PcaBasis basis = pca_fit(train.samples);
  Mat ptrain = pca_project(basis, train.samples);
  Mat ptest = pca_project(basis, test.samples);
  for (int c = 0; c < 2; ++c) {
    const double sd = std::sqrt(
        (ptrain.col(c).array() - ptrain.col(c).mean()).square().sum() / (ptrain.rows() - 1));
    const double se = sd * std::sqrt(1.0 / ptrain.rows() + 1.0 / ptest.rows());
    CHECK(std::abs(ptrain.col(c).mean() - ptest.col(c).mean()) < 4 * se);
  }
}

TEST_CASE("report serialization carries the csv schema") {
  EvaluationReport rep;
  rep.experiment_id = "unit";
  rep.model = "ns";
  rep.d = 2;
  rep.n_train = 1000;
  rep.kld = 0.25;
  rep.sec_per_sample = 1e-5;
  rep.param_count = 1234;
  rep.seed = 7;
  const std::string row = rep.csv_row();
  CHECK(row.find("unit,ns,2,1000,") == 0);
  CHECK(EvaluationReport::csv_header().find("experiment_id") == 0);
  CHECK(rep.to_json()["param_count"] == 1234);
}
