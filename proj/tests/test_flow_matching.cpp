// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "probgen/dataset.hpp"
#include "probgen/flow_matching.hpp"
#include "testutil.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

using namespace probgen;
using probgen::test::finite_diff_grad;
using probgen::test::max_rel_err;

TEST_CASE("interpolant endpoints: t=0 gives the prior draw, t=1 the data") {
  CfmConfig cfg;
  cfg.d = 3;
  cfg.sigma_min = 0.0;
  CfmModel model(cfg);
  Rng rng(1);
  Mat x0 = rng.normal_mat(4, 3), x1 = rng.normal_mat(4, 3);
  Mat eps = rng.normal_mat(4, 3);
  Vec t0 = Vec::Zero(4), t1 = Vec::Ones(4);
  PathBatch a = model.make_pairs_from(x0, x1, t0, eps);
  CHECK((a.xt - x0).norm() == 0.0);
  PathBatch b = model.make_pairs_from(x0, x1, t1, eps);
  CHECK((b.xt - x1).cwiseAbs().maxCoeff() < 1e-15);
  CHECK((a.u - (x1 - x0)).norm() == 0.0);
}

TEST_CASE("minibatch-OT assignment on a batch of 4 equals brute-force enumeration") {
  Rng rng(2);
  for (int rep = 0; rep < 20; ++rep) {
    Mat cost(4, 4);
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) cost(i, j) = rng.uniform();
    auto assign = min_cost_assignment(cost);
    double got = 0;
    for (int i = 0; i < 4; ++i) got += cost(i, assign[i]);

    std::vector<int> perm = {0, 1, 2, 3};
    double best = 1e30;
    do {
      double c = 0;
      for (int i = 0; i < 4; ++i) c += cost(i, perm[i]);
      best = std::min(best, c);
    } while (std::next_permutation(perm.begin(), perm.end()));
    CHECK(got == doctest::Approx(best).epsilon(1e-12));
  }
}

TEST_CASE("ot coupling pairs each prior draw with a distinct data row") {
  CfmConfig cfg;
  cfg.d = 2;
  cfg.coupling = Coupling::MinibatchOt;
  CfmModel model(cfg);
  Rng rng(3);
  Mat batch = rng.normal_mat(8, 2);
  PathBatch pb = model.make_pairs(batch, rng);
  CHECK(pb.xt.rows() == 8);
  CHECK(pb.u.allFinite());
}

TEST_CASE("loss is zero when the field equals the target and mean|u|^2 for a zero field") {
  CfmConfig cfg;
  cfg.d = 2;
  cfg.hidden_width = 8;
  cfg.depth = 1;
  CfmModel model(cfg);
  Rng rng(4);
  Vec params = model.init_params(rng);
  PathBatch pb;
  pb.xt = rng.normal_mat(16, 2);
  pb.t = Vec::Constant(16, 0.5);
  pb.u = model.net().forward(params, pb.xt, &pb.t);  // targets equal the field
  CHECK(model.loss(params, pb) == doctest::Approx(0.0).epsilon(1e-14));

  Vec zero_params = Vec::Zero(model.param_count());
  // Unit-velocity targets: loss = mean |u|^2 = 1.
  for (long i = 0; i < pb.u.rows(); ++i) {
    pb.u.row(i).setZero();
    pb.u(i, 0) = 1.0;
  }
  CHECK(model.loss(zero_params, pb) == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("cfm loss gradient matches finite differences") {
  CfmConfig cfg;
  cfg.d = 2;
  cfg.hidden_width = 4;
  cfg.depth = 1;
  cfg.time_embed_dim = 4;
  CfmModel model(cfg);
  CHECK(model.param_count() <= 100);
  Rng rng(5);
  Vec params = model.init_params(rng);
  Mat batch = rng.normal_mat(8, 2);
  PathBatch pb = model.make_pairs(batch, rng);

  Vec grad;
  model.loss_and_grad(params, pb, grad);
  auto f = [&](const Vec& p) { return model.loss(p, pb); };
  Vec fd = finite_diff_grad(f, params);
  CHECK(max_rel_err(grad, fd) < 1e-4);
}

TEST_CASE("zero vector field: samples equal the prior draw") {
  CfmConfig cfg;
  cfg.d = 3;
  CfmModel model(cfg);
  Vec params = Vec::Zero(model.param_count());
  Rng r1(6), r2(6);
  Mat s = model.sample(params, 50, r1);
  Mat prior = r2.normal_mat(50, 3);
  CHECK((s - prior).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("constant field with Euler lands exactly at x0 + c") {
  Mat x0 = Mat::Random(10, 2);
  Mat c = Mat::Ones(10, 2) * 0.7;
  VectorField f = [&](const Mat& x, double) { return Mat(c.topRows(x.rows())); };
  Mat out = integrate_ode(x0, 0.0, 1.0, 17, OdeMethod::Euler, f);
  CHECK((out - (x0 + c)).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("linear field -x matches the analytic decay within the integrator order") {
  Mat x0 = Mat::Ones(1, 1) * 2.0;
  VectorField f = [](const Mat& x, double) { return Mat(-x); };
  const double exact = 2.0 * std::exp(-1.0);
  // Euler: first order.
  double e_prev = 0;
  for (int steps : {50, 100}) {
    Mat out = integrate_ode(x0, 0.0, 1.0, steps, OdeMethod::Euler, f);
    const double err = std::abs(out(0, 0) - exact);
    if (e_prev > 0) CHECK(e_prev / err == doctest::Approx(2.0).epsilon(0.1));
    e_prev = err;
    CHECK(err < 10.0 / steps);
  }
  // Classical 4-stage method: fourth order.
  double r_prev = 0;
  for (int steps : {10, 20}) {
    Mat out = integrate_ode(x0, 0.0, 1.0, steps, OdeMethod::Rk4, f);
    const double err = std::abs(out(0, 0) - exact);
    if (r_prev > 0) CHECK(r_prev / err == doctest::Approx(16.0).epsilon(0.2));
    r_prev = err;
  }
}

TEST_CASE("hutchinson trace is unbiased and converges at the 1/sqrt(n) rate") {
  Rng rng(7);
  const int d = 6;
  Mat a = rng.normal_mat(d, d);
  const double exact = a.trace();
  auto apply = [&](const Vec& v) { return Vec(a * v); };

  // 3-standard-error agreement at 64 probes, with the SE measured from the
  // probe population itself.
  {
    std::vector<double> draws;
    Rng r2(8);
    for (int i = 0; i < 64; ++i) draws.push_back(hutchinson_trace(apply, d, 1, r2));
    const double m = probgen::test::mean(draws);
    double var = 0;
    for (double x : draws) var += (x - m) * (x - m);
    var /= (draws.size() - 1);
    const double se = std::sqrt(var / draws.size());
    CHECK(std::abs(m - exact) <= 3 * se);
  }

  // Error shrinks ~1/sqrt(n) over probe counts {1,4,16,64}.
  std::vector<double> rmse;
  for (int np : {1, 4, 16, 64}) {
    double acc = 0;
    Rng r3(9);
    const int reps = 400;
    for (int r = 0; r < reps; ++r) {
      const double est = hutchinson_trace(apply, d, np, r3);
      acc += (est - exact) * (est - exact);
    }
    rmse.push_back(std::sqrt(acc / reps));
  }
  for (size_t i = 0; i + 1 < rmse.size(); ++i) {
    const double ratio = rmse[i] / rmse[i + 1];
    CHECK(ratio > 1.3);  // consistent with the expected factor 2 per 4x probes
    CHECK(ratio < 3.0);
  }
}

TEST_CASE("divergence integration with exact trace matches Hutchinson within 3 SE") {
  // Linear field A x in d=2: divergence is tr(A) everywhere, so the
  // integral over [0,1] is exactly tr(A).
  Rng rng(10);
  Mat a = rng.normal_mat(2, 2);
  VectorField f = [&](const Mat& x, double) { return Mat(x * a.transpose()); };
  JvpField jf = [&](const Mat&, double, const Mat& v) { return Mat(v * a.transpose()); };
  Mat x0 = rng.normal_mat(200, 2);

  Rng r0(11);
  FlowIntegration exact = integrate_with_divergence(x0, 0, 1, 40, OdeMethod::Rk4, f, jf, 0, r0);
  for (long i = 0; i < 5; ++i)
    CHECK(exact.div_integral[i] == doctest::Approx(a.trace()).epsilon(1e-10));

  Rng r1(12);
  FlowIntegration hutch =
      integrate_with_divergence(x0, 0, 1, 40, OdeMethod::Rk4, f, jf, 64, r1);
  // Per-probe variance of e^T A e is 2 sum_{i != j} a_ij^2 for Rademacher e.
  double offdiag = 0;
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j)
      if (i != j) offdiag += a(i, j) * a(i, j);
  const double se = std::sqrt(2.0 * offdiag / 64.0);
  long within = 0;
  for (long i = 0; i < x0.rows(); ++i)
    within += std::abs(hutch.div_integral[i] - a.trace()) <= 3 * se;
  CHECK(within >= x0.rows() * 95 / 100);
}

TEST_CASE("zero field log_prob equals the standard normal density") {
  CfmConfig cfg;
  cfg.d = 2;
  CfmModel model(cfg);
  Vec params = Vec::Zero(model.param_count());
  Rng rng(13);
  Mat x = rng.normal_mat(10, 2);
  Vec lp = model.log_prob(params, x, 8, rng, 20);
  for (long i = 0; i < x.rows(); ++i) {
    const double expect = -0.5 * x.row(i).squaredNorm() - std::log(2 * M_PI);
    CHECK(lp[i] == doctest::Approx(expect).epsilon(1e-9));
  }
}

TEST_CASE("d=1 quadrature: exp(log_prob) of a lightly trained model integrates to 1") {
  CfmConfig cfg;
  cfg.d = 1;
  cfg.hidden_width = 16;
  cfg.depth = 1;
  CfmModel model(cfg);
  Rng rng(14);
  Vec params = model.init_params(rng);
  Mat data(2000, 1);
  for (long i = 0; i < data.rows(); ++i) data(i, 0) = 1.5 + 0.5 * rng.normal();
  TrainOptions opts;
  opts.steps = 200;
  opts.batch_size = 128;
  opts.seed = 15;
  cfm_train(model, params, data, opts);

  const int npts = 400;
  const double lo = -10, hi = 10, dx = (hi - lo) / npts;
  Mat grid(npts, 1);
  for (int i = 0; i < npts; ++i) grid(i, 0) = lo + (i + 0.5) * dx;
  Rng prng(16);
  Vec lp = model.log_prob(params, grid, 1, prng, 100, OdeMethod::Rk4);
  const double integral = lp.array().exp().sum() * dx;
  CHECK(integral == doctest::Approx(1.0).epsilon(1e-2));
}

TEST_CASE("self-transport: training toward the prior leaves a small field") {
  // Under minibatch-OT coupling two identical clouds pair nearby points, so
  // the regression targets (and the learned field) shrink toward zero.
  // Independent coupling would leave the nonzero field x(2t-1)/((1-t)^2+t^2).
  CfmConfig cfg;
  cfg.d = 2;
  cfg.hidden_width = 16;
  cfg.depth = 1;
  cfg.sigma_min = 0.0;
  cfg.coupling = Coupling::MinibatchOt;
  CfmModel model(cfg);
  Rng rng(17);
  Vec params = model.init_params(rng);
  Mat data = rng.normal_mat(4000, 2);  // target equals the prior
  TrainOptions opts;
  opts.steps = 400;
  opts.batch_size = 256;
  opts.seed = 18;
  cfm_train(model, params, data, opts);
  Mat probe = rng.normal_mat(500, 2);
  double msq = 0;
  for (double t : {0.1, 0.5, 0.9})
    msq = std::max(msq, model.velocity(params, probe, t).array().square().rowwise().sum().mean());
  // Residual field is small relative to the unit-scale data.
  CHECK(msq < 0.35);
}

TEST_CASE("loss trace reproducible per seed") {
  CfmConfig cfg;
  cfg.d = 2;
  cfg.hidden_width = 8;
  cfg.depth = 1;
  auto run = [&] {
    CfmModel model(cfg);
    Rng rng(19);
    Vec params = model.init_params(rng);
    Mat data = rng.normal_mat(256, 2);
    TrainOptions opts;
    opts.steps = 30;
    opts.seed = 20;
    return cfm_train(model, params, data, opts).loss_trace;
  };
  auto a = run(), b = run();
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("endpoint consistency: single-Gaussian target is matched in mean and covariance") {
  CfmConfig cfg;
  cfg.d = 2;
  cfg.hidden_width = 32;
  cfg.depth = 2;
  CfmModel model(cfg);
  Rng rng(21);
  Vec params = model.init_params(rng);
  Mat data = rng.normal_mat(8000, 2);
  data.col(0) = data.col(0).array() + 2.0;  // N((2,0), I)
  TrainOptions opts;
  opts.steps = 4000;
  opts.batch_size = 256;
  opts.seed = 22;
  cfm_train(model, params, data, opts);

  Rng srng(23);
  const long n = 20000;
  Mat s = model.sample(params, n, srng, 100);
  const double se_mean = 4.0 / std::sqrt(static_cast<double>(n));
  CHECK(std::abs(s.col(0).mean() - 2.0) < se_mean + 0.05);
  CHECK(std::abs(s.col(1).mean()) < se_mean + 0.05);
  Mat centered = s.rowwise() - s.colwise().mean();
  Mat cov = centered.transpose() * centered / (n - 1);
  CHECK(cov(0, 0) == doctest::Approx(1.0).epsilon(0.1));
  CHECK(cov(1, 1) == doctest::Approx(1.0).epsilon(0.1));
  CHECK(std::abs(cov(0, 1)) < 0.08);
}

TEST_CASE("step-count refinement shrinks the sampling difference per integrator order") {
  CfmConfig cfg;
  cfg.d = 2;
  cfg.hidden_width = 8;
  cfg.depth = 1;
  CfmModel model(cfg);
  Rng rng(24);
  Vec params = model.init_params(rng);
  for (long i = 0; i < params.size(); ++i) params[i] += 0.2 * rng.normal();

  auto run = [&](int steps, OdeMethod m) {
    Rng srng(25);
    return model.sample(params, 100, srng, steps, m);
  };
  // Euler is first order: halving h roughly halves the defect.
  Mat e1 = run(20, OdeMethod::Euler), e2 = run(40, OdeMethod::Euler),
      e4 = run(80, OdeMethod::Euler);
  const double d1 = (e1 - e2).cwiseAbs().maxCoeff();
  const double d2 = (e2 - e4).cwiseAbs().maxCoeff();
  CHECK(d1 / d2 == doctest::Approx(2.0).epsilon(0.5));
  // The 4-stage method converges much faster at equal step counts.
  Mat r1 = run(20, OdeMethod::Rk4), r2 = run(40, OdeMethod::Rk4);
  CHECK((r1 - r2).cwiseAbs().maxCoeff() < d2 / 10.0);
}
