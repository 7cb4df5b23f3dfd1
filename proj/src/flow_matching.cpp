// SPDX-License-Identifier: Apache-2.0
#include "probgen/flow_matching.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace probgen {

std::string ode_method_name(OdeMethod m) { return m == OdeMethod::Euler ? "euler" : "rk4"; }

OdeMethod ode_method_from_name(const std::string& name) {
  if (name == "euler") return OdeMethod::Euler;
  if (name == "rk4") return OdeMethod::Rk4;
  throw std::invalid_argument("unknown ODE method: " + name);
}

std::string coupling_name(Coupling c) {
  return c == Coupling::Independent ? "independent" : "minibatch-ot";
}

Coupling coupling_from_name(const std::string& name) {
  if (name == "independent") return Coupling::Independent;
  if (name == "minibatch-ot") return Coupling::MinibatchOt;
  throw std::invalid_argument("unknown coupling: " + name);
}

std::vector<int> min_cost_assignment(const Mat& cost) {
  require_shape(cost.rows() == cost.cols(), "min_cost_assignment: square matrix required");
  const int n = static_cast<int>(cost.rows());
  const double inf = std::numeric_limits<double>::infinity();
  // Shortest augmenting path formulation with potentials (1-based arrays).
  std::vector<double> u(n + 1, 0), v(n + 1, 0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      int j1 = -1;
      double delta = inf;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> row_to_col(n, -1);
  for (int j = 1; j <= n; ++j)
    if (p[j] > 0) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

namespace {

void check_finite(const Mat& x, long step) {
  if (!x.allFinite()) throw DivergenceError("ode integration: non-finite state at step", step);
}

}  // namespace

Mat integrate_ode(const Mat& x0, double t0, double t1, int steps, OdeMethod method,
                  const VectorField& f) {
  require(steps >= 1, "integrate_ode: steps must be >= 1");
  const double h = (t1 - t0) / steps;
  Mat x = x0;
  for (int s = 0; s < steps; ++s) {
    const double t = t0 + s * h;
    if (method == OdeMethod::Euler) {
      x += h * f(x, t);
    } else {
      const Mat k1 = f(x, t);
      const Mat k2 = f(x + 0.5 * h * k1, t + 0.5 * h);
      const Mat k3 = f(x + 0.5 * h * k2, t + 0.5 * h);
      const Mat k4 = f(x + h * k3, t + h);
      x += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    check_finite(x, s);
  }
  return x;
}

FlowIntegration integrate_with_divergence(const Mat& x0, double t0, double t1, int steps,
                                          OdeMethod method, const VectorField& f,
                                          const JvpField& jvp, int n_probe, Rng& rng) {
  require(steps >= 1, "integrate_with_divergence: steps must be >= 1");
  const long n = x0.rows(), d = x0.cols();
  const double h = (t1 - t0) / steps;

  // Probes fixed for the whole trajectory (fresh Rademacher per row).
  std::vector<Mat> probes;
  for (int p = 0; p < std::max(0, n_probe); ++p) {
    Mat e(n, d);
    for (long i = 0; i < n; ++i)
      for (long j = 0; j < d; ++j) e(i, j) = rng.rademacher();
    probes.push_back(std::move(e));
  }

  auto divergence = [&](const Mat& x, double t) -> Vec {
    Vec div = Vec::Zero(n);
    if (n_probe <= 0) {
      for (long j = 0; j < d; ++j) {
        Mat basis = Mat::Zero(n, d);
        basis.col(j).setOnes();
        div += jvp(x, t, basis).col(j);
      }
      return div;
    }
    for (const Mat& e : probes) div += (e.cwiseProduct(jvp(x, t, e))).rowwise().sum();
    return div / static_cast<double>(n_probe);
  };

  Mat x = x0;
  Vec acc = Vec::Zero(n);
  for (int s = 0; s < steps; ++s) {
    const double t = t0 + s * h;
    if (method == OdeMethod::Euler) {
      acc += h * divergence(x, t);
      x += h * f(x, t);
    } else {
      const Mat k1 = f(x, t);
      const Vec g1 = divergence(x, t);
      const Mat x2 = x + 0.5 * h * k1;
      const Mat k2 = f(x2, t + 0.5 * h);
      const Vec g2 = divergence(x2, t + 0.5 * h);
      const Mat x3 = x + 0.5 * h * k2;
      const Mat k3 = f(x3, t + 0.5 * h);
      const Vec g3 = divergence(x3, t + 0.5 * h);
      const Mat x4 = x + h * k3;
      const Mat k4 = f(x4, t + h);
      const Vec g4 = divergence(x4, t + h);
      x += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
      acc += (h / 6.0) * (g1 + 2.0 * g2 + 2.0 * g3 + g4);
    }
    check_finite(x, s);
  }
  return {std::move(x), std::move(acc)};
}

double hutchinson_trace(const std::function<Vec(const Vec&)>& apply, int d, int n_probe,
                        Rng& rng) {
  require(n_probe >= 1, "hutchinson_trace: n_probe must be >= 1");
  double acc = 0;
  for (int p = 0; p < n_probe; ++p) {
    Vec e(d);
    for (int j = 0; j < d; ++j) e[j] = rng.rademacher();
    acc += e.dot(apply(e));
  }
  return acc / n_probe;
}

void CfmConfig::validate() const {
  require(d >= 1, "CfmConfig: d must be >= 1");
  require(hidden_width >= 1 && depth >= 1, "CfmConfig: network dims must be >= 1");
  require(sigma_min >= 0, "CfmConfig: sigma_min must be >= 0");
  require(ode_steps >= 1, "CfmConfig: ode_steps must be >= 1");
}

nlohmann::json CfmConfig::to_json() const {
  return {{"d", d},
          {"hidden_width", hidden_width},
          {"depth", depth},
          {"time_embed_dim", embed_dim()},
          {"activation", activation_name(activation)},
          {"sigma_min", sigma_min},
          {"coupling", coupling_name(coupling)},
          {"method", ode_method_name(method)},
          {"ode_steps", ode_steps}};
}

CfmConfig CfmConfig::from_json(const nlohmann::json& j) {
  CfmConfig c;
  c.d = j.at("d").get<int>();
  c.hidden_width = j.at("hidden_width").get<int>();
  c.depth = j.at("depth").get<int>();
  c.time_embed_dim = j.value("time_embed_dim", 0);
  c.activation = activation_from_name(j.value("activation", "silu"));
  c.sigma_min = j.at("sigma_min").get<double>();
  c.coupling = coupling_from_name(j.value("coupling", "independent"));
  c.method = ode_method_from_name(j.value("method", "euler"));
  c.ode_steps = j.value("ode_steps", 50);
  c.validate();
  return c;
}

namespace {

MlpConfig cfm_net_config(const CfmConfig& cfg) {
  MlpConfig mc;
  mc.input_dim = cfg.d;
  mc.output_dim = cfg.d;
  mc.hidden_width = cfg.hidden_width;
  mc.depth = cfg.depth;
  mc.activation = cfg.activation;
  mc.time_embedding = true;
  mc.time_embed_dim = cfg.embed_dim();
  return mc;
}

}  // namespace

CfmModel::CfmModel(CfmConfig cfg) : cfg_(cfg), net_(cfm_net_config(cfg)) { cfg_.validate(); }

PathBatch CfmModel::make_pairs_from(const Mat& x0, const Mat& x1, const Vec& t,
                                    const Mat& eps) const {
  require_shape(x0.rows() == x1.rows() && x0.cols() == cfg_.d && x1.cols() == cfg_.d,
                "make_pairs_from: endpoint shape mismatch");
  require_shape(t.size() == x0.rows() && eps.rows() == x0.rows(),
                "make_pairs_from: draw shape mismatch");
  PathBatch pb;
  pb.t = t;
  pb.u = x1 - x0;
  pb.xt = x0 + cfg_.sigma_min * eps;
  for (long i = 0; i < x0.rows(); ++i)
    pb.xt.row(i) += t[i] * (x1.row(i) - x0.row(i));
  return pb;
}

PathBatch CfmModel::make_pairs(const Mat& data_batch, Rng& rng) const {
  const long n = data_batch.rows();
  Mat x0 = rng.normal_mat(n, cfg_.d);
  Mat x1 = data_batch;
  if (cfg_.coupling == Coupling::MinibatchOt) {
    Mat cost(n, n);
    for (long i = 0; i < n; ++i)
      for (long j = 0; j < n; ++j) cost(i, j) = (x0.row(i) - x1.row(j)).squaredNorm();
    const auto assign = min_cost_assignment(cost);
    Mat matched(n, cfg_.d);
    for (long i = 0; i < n; ++i) matched.row(i) = data_batch.row(assign[i]);
    x1 = std::move(matched);
  }
  Vec t(n);
  for (long i = 0; i < n; ++i) t[i] = rng.uniform();
  Mat eps = rng.normal_mat(n, cfg_.d);
  return make_pairs_from(x0, x1, t, eps);
}

double CfmModel::loss(const Vec& params, const PathBatch& pb) const {
  const Mat v = net_.forward(params, pb.xt, &pb.t);
  return (v - pb.u).squaredNorm() / pb.xt.rows();
}

double CfmModel::loss_and_grad(const Vec& params, const PathBatch& pb, Vec& grad) const {
  MlpCache cache;
  const Mat v = net_.forward(params, pb.xt, &pb.t, &cache);
  const Mat diff = v - pb.u;
  const double loss = diff.squaredNorm() / pb.xt.rows();
  if (!std::isfinite(loss)) {
    long bad = 0;
    for (long i = 0; i < diff.rows(); ++i)
      if (!diff.row(i).allFinite()) {
        bad = i;
        break;
      }
    throw DivergenceError("cfm loss: non-finite residual at batch row", bad);
  }
  grad = net_.backward(params, cache, 2.0 * diff / pb.xt.rows());
  return loss;
}

Mat CfmModel::velocity(const Vec& params, const Mat& x, double t) const {
  Vec tv = Vec::Constant(x.rows(), t);
  return net_.forward(params, x, &tv);
}

Mat CfmModel::sample(const Vec& params, long n, Rng& rng, int steps, OdeMethod method) const {
  const int s = steps > 0 ? steps : cfg_.ode_steps;
  const Mat x0 = rng.normal_mat(n, cfg_.d);
  VectorField f = [&](const Mat& x, double t) { return velocity(params, x, t); };
  return integrate_ode(x0, 0.0, 1.0, s, method, f);
}

Vec CfmModel::log_prob(const Vec& params, const Mat& x, int n_probe, Rng& rng, int steps,
                       OdeMethod method) const {
  require_shape(x.cols() == cfg_.d, "cfm log_prob: dimension mismatch");
  const int s = steps > 0 ? steps : std::max(cfg_.ode_steps, 100);
  VectorField f = [&](const Mat& xs, double t) { return velocity(params, xs, t); };
  JvpField jf = [&](const Mat& xs, double t, const Mat& v) {
    Vec tv = Vec::Constant(xs.rows(), t);
    return net_.jvp_input(params, xs, &tv, v);
  };
  // Integrate data (t=1) back to the prior (t=0); the accumulated integral
  // is -int_0^1 div f dt, so log p(x) = log N(x(0)) + accumulator.
  FlowIntegration fi = integrate_with_divergence(x, 1.0, 0.0, s, method, f, jf, n_probe, rng);
  const double c = -0.5 * cfg_.d * std::log(2.0 * M_PI);
  Vec lp(x.rows());
  for (long i = 0; i < x.rows(); ++i)
    lp[i] = c - 0.5 * fi.x.row(i).squaredNorm() + fi.div_integral[i];
  return lp;
}

TrainResult cfm_train(const CfmModel& model, Vec& params, const Mat& train_data,
                      const TrainOptions& opts) {
  require_shape(train_data.cols() == model.config().d, "cfm_train: data dimension mismatch");
  Objective obj = [&](const Vec& p, const std::vector<int>& batch, Rng& rng, Vec& grad) {
    Mat xb(batch.size(), train_data.cols());
    for (size_t i = 0; i < batch.size(); ++i) xb.row(i) = train_data.row(batch[i]);
    PathBatch pb = model.make_pairs(xb, rng);
    Vec g;
    const double loss = model.loss_and_grad(p, pb, g);
    grad = g;
    return loss;
  };
  return train_loop(params, train_data.rows(), opts, obj);
}

}  // namespace probgen
