// SPDX-License-Identifier: Apache-2.0
#include "probgen/ddpm.hpp"

#include <algorithm>
#include <cmath>

namespace probgen {

NoiseSchedule NoiseSchedule::linear(int T, double beta_lo, double beta_hi) {
  require(T >= 1, "NoiseSchedule: T must be >= 1");
  NoiseSchedule s;
  s.T = T;
  s.beta.resize(T);
  for (int t = 0; t < T; ++t)
    s.beta[t] = (T == 1) ? beta_hi : beta_lo + (beta_hi - beta_lo) * t / (T - 1);
  s.alpha = (1.0 - s.beta.array()).matrix();
  s.alpha_bar.resize(T);
  double prod = 1.0;
  for (int t = 0; t < T; ++t) {
    prod *= s.alpha[t];
    s.alpha_bar[t] = prod;
  }
  s.validate();
  return s;
}

NoiseSchedule NoiseSchedule::constant_rate(int T, double lambda) {
  const double beta = 1.0 - std::exp(-2.0 * lambda / T);
  return linear(T, beta, beta);
}

void NoiseSchedule::validate() const {
  require(T >= 1 && beta.size() == T && alpha.size() == T && alpha_bar.size() == T,
          "NoiseSchedule: inconsistent sizes");
  for (int t = 0; t < T; ++t) {
    require(beta[t] > 0 && beta[t] < 1, "NoiseSchedule: beta must lie in (0, 1)");
    if (t > 0) {
      require(beta[t] >= beta[t - 1], "NoiseSchedule: beta must be non-decreasing");
      require(alpha_bar[t] < alpha_bar[t - 1], "NoiseSchedule: alpha_bar must decrease");
    }
  }
  require(alpha_bar[T - 1] <= 1e-2,
          "NoiseSchedule: terminal alpha_bar must be <= 1e-2 so the end marginal is near N(0, I)");
}

double NoiseSchedule::alpha_bar_at(double s) const {
  const double sc = std::min(1.0, std::max(0.0, s));
  const double pos = sc * T;  // grid units; log(alpha_bar) linear on each cell
  const int cell = std::min(T - 1, static_cast<int>(pos));
  const double lo = (cell == 0) ? 0.0 : std::log(alpha_bar[cell - 1]);
  const double hi = std::log(alpha_bar[cell]);
  const double frac = pos - cell;
  return std::exp(lo + (hi - lo) * frac);
}

double NoiseSchedule::lambda_at(double s) const {
  const double sc = std::min(1.0, std::max(1e-12, s));
  int cell = static_cast<int>(std::ceil(sc * T)) - 1;
  cell = std::min(T - 1, std::max(0, cell));
  const double lo = (cell == 0) ? 0.0 : std::log(alpha_bar[cell - 1]);
  const double hi = std::log(alpha_bar[cell]);
  return -0.5 * (hi - lo) * T;
}

void DdpmConfig::validate() const {
  require(d >= 1, "DdpmConfig: d must be >= 1");
  require(hidden_width >= 1 && depth >= 1, "DdpmConfig: network dims must be >= 1");
  require(T >= 1, "DdpmConfig: T must be >= 1");
  require(beta_lo > 0 && beta_hi < 1 && beta_lo <= beta_hi, "DdpmConfig: bad beta range");
}

nlohmann::json DdpmConfig::to_json() const {
  return {{"d", d},
          {"hidden_width", hidden_width},
          {"depth", depth},
          {"time_embed_dim", embed_dim()},
          {"activation", activation_name(activation)},
          {"T", T},
          {"beta_lo", beta_lo},
          {"beta_hi", beta_hi},
          {"posterior_variance", posterior_variance}};
}

DdpmConfig DdpmConfig::from_json(const nlohmann::json& j) {
  DdpmConfig c;
  c.d = j.at("d").get<int>();
  c.hidden_width = j.at("hidden_width").get<int>();
  c.depth = j.at("depth").get<int>();
  c.time_embed_dim = j.value("time_embed_dim", 0);
  c.activation = activation_from_name(j.value("activation", "silu"));
  c.T = j.at("T").get<int>();
  c.beta_lo = j.at("beta_lo").get<double>();
  c.beta_hi = j.at("beta_hi").get<double>();
  c.posterior_variance = j.value("posterior_variance", false);
  c.validate();
  return c;
}

namespace {

MlpConfig ddpm_net_config(const DdpmConfig& cfg) {
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

DdpmModel::DdpmModel(DdpmConfig cfg)
    : cfg_(cfg),
      sched_(NoiseSchedule::linear(cfg.T, cfg.beta_lo, cfg.beta_hi)),
      net_(ddpm_net_config(cfg)) {
  cfg_.validate();
}

Vec DdpmModel::q_sample(const Vec& x0, int t, const Vec& noise) const {
  require(t >= 1 && t <= cfg_.T, "q_sample: step index out of range");
  require_shape(x0.size() == cfg_.d && noise.size() == cfg_.d, "q_sample: dimension mismatch");
  const double ab = sched_.alpha_bar[t - 1];
  return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * noise;
}

Mat DdpmModel::q_sample(const Mat& x0, int t, const Mat& noise) const {
  require(t >= 1 && t <= cfg_.T, "q_sample: step index out of range");
  require_shape(x0.cols() == cfg_.d && noise.rows() == x0.rows() && noise.cols() == cfg_.d,
                "q_sample: shape mismatch");
  const double ab = sched_.alpha_bar[t - 1];
  return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * noise;
}

DdpmModel::NoiseBatch DdpmModel::make_targets(const Mat& batch, Rng& rng) const {
  require_shape(batch.cols() == cfg_.d, "make_targets: dimension mismatch");
  const long n = batch.rows();
  NoiseBatch nb;
  nb.tidx.resize(n);
  nb.tfrac.resize(n);
  nb.eps = rng.normal_mat(n, cfg_.d);
  nb.xt.resize(n, cfg_.d);
  for (long i = 0; i < n; ++i) {
    const int t = static_cast<int>(rng.uniform_int(cfg_.T)) + 1;
    nb.tidx[i] = t;
    nb.tfrac[i] = static_cast<double>(t) / cfg_.T;
    const double ab = sched_.alpha_bar[t - 1];
    nb.xt.row(i) = std::sqrt(ab) * batch.row(i) + std::sqrt(1.0 - ab) * nb.eps.row(i);
  }
  return nb;
}

double DdpmModel::loss(const Vec& params, const NoiseBatch& nb) const {
  const Mat pred = net_.forward(params, nb.xt, &nb.tfrac);
  return (pred - nb.eps).squaredNorm() / nb.xt.rows();
}

double DdpmModel::loss_and_grad(const Vec& params, const NoiseBatch& nb, Vec& grad) const {
  MlpCache cache;
  const Mat pred = net_.forward(params, nb.xt, &nb.tfrac, &cache);
  const Mat diff = pred - nb.eps;
  const double loss = diff.squaredNorm() / nb.xt.rows();
  if (!std::isfinite(loss)) {
    long bad = 0;
    for (long i = 0; i < diff.rows(); ++i)
      if (!diff.row(i).allFinite()) {
        bad = i;
        break;
      }
    throw DivergenceError("ddpm loss: non-finite residual at batch row", bad);
  }
  grad = net_.backward(params, cache, 2.0 * diff / nb.xt.rows());
  return loss;
}

double DdpmModel::loss_seeded(const Vec& params, const Mat& batch, uint64_t seed) const {
  Rng rng(seed);
  return loss(params, make_targets(batch, rng));
}

Mat DdpmModel::sample(const Vec& params, long n, Rng& rng) const {
  Mat x = rng.normal_mat(n, cfg_.d);
  for (int t = cfg_.T; t >= 1; --t) {
    const double ab = sched_.alpha_bar[t - 1];
    const double a = sched_.alpha[t - 1];
    const double b = sched_.beta[t - 1];
    Vec tfrac = Vec::Constant(n, static_cast<double>(t) / cfg_.T);
    const Mat eps_hat = net_.forward(params, x, &tfrac);
    x = (x - (b / std::sqrt(1.0 - ab)) * eps_hat) / std::sqrt(a);
    if (!x.allFinite())
      throw DivergenceError("ddpm sample: non-finite state at step", cfg_.T - t);
    if (t > 1) {
      double sigma = std::sqrt(b);
      if (cfg_.posterior_variance) {
        const double ab_prev = sched_.alpha_bar[t - 2];
        sigma = std::sqrt(b * (1.0 - ab_prev) / (1.0 - ab));
      }
      x += sigma * rng.normal_mat(n, cfg_.d);
    }
  }
  return x;
}

Mat DdpmModel::score(const Vec& params, const Mat& x, double s) const {
  const double ab = sched_.alpha_bar_at(s);
  Vec tfrac = Vec::Constant(x.rows(), s);
  return -net_.forward(params, x, &tfrac) / std::sqrt(1.0 - ab);
}

Mat DdpmModel::pf_ode_sample(const Vec& params, long n, int steps, Rng& rng,
                             OdeMethod method) const {
  require(steps >= 1, "pf_ode_sample: steps must be >= 1");
  Mat x0 = rng.normal_mat(n, cfg_.d);
  // Probability flow dx/ds = -lambda(s) [x + score(x, s)] in forward time s;
  // sampling runs it from the terminal Gaussian at s = 1 down to s = 1/T,
  // the innermost discrete step, where the score scale 1/sqrt(1-abar) is
  // still finite.
  VectorField f = [&](const Mat& x, double s) {
    return Mat(-sched_.lambda_at(s) * (x + score(params, x, s)));
  };
  return integrate_ode(x0, 1.0, 1.0 / cfg_.T, steps, method, f);
}

TrainResult ddpm_train(const DdpmModel& model, Vec& params, const Mat& train_data,
                       const TrainOptions& opts) {
  require_shape(train_data.cols() == model.config().d, "ddpm_train: data dimension mismatch");
  Objective obj = [&](const Vec& p, const std::vector<int>& batch, Rng& rng, Vec& grad) {
    Mat xb(batch.size(), train_data.cols());
    for (size_t i = 0; i < batch.size(); ++i) xb.row(i) = train_data.row(batch[i]);
    DdpmModel::NoiseBatch nb = model.make_targets(xb, rng);
    Vec g;
    const double loss = model.loss_and_grad(p, nb, g);
    grad = g;
    return loss;
  };
  return train_loop(params, train_data.rows(), opts, obj);
}

}  // namespace probgen
