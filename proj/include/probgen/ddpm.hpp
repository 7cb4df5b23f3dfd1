// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "probgen/common.hpp"
#include "probgen/flow_matching.hpp"
#include "probgen/nn.hpp"
#include "probgen/rng.hpp"

#include <json.hpp>

#include <vector>

namespace probgen {

/// Discrete variance-preserving noising schedule. alpha_bar must decay to at
/// most 1e-2 so the terminal marginal is close to the standard normal.
struct NoiseSchedule {
  int T = 1000;
  Vec beta;       // size T, strictly positive, non-decreasing
  Vec alpha;      // 1 - beta
  Vec alpha_bar;  // running product, strictly decreasing

  static NoiseSchedule linear(int T = 1000, double beta_lo = 1e-4, double beta_hi = 2e-2);
  /// Constant time-dilation rate lambda: beta_t = 1 - exp(-2 lambda / T).
  static NoiseSchedule constant_rate(int T, double lambda);
  void validate() const;

  /// Piecewise-linear interpolation of log(alpha_bar) over s in [0, 1] with
  /// alpha_bar(0) = 1.
  double alpha_bar_at(double s) const;
  /// Time-dilation factor lambda(s) = -(d/ds) log(alpha_bar(s)) / 2,
  /// piecewise constant on schedule cells.
  double lambda_at(double s) const;
};

struct DdpmConfig {
  int d = 2;
  int hidden_width = 64;
  int depth = 2;
  int time_embed_dim = 0;  // 0: hidden_width rounded up to even
  Activation activation = Activation::SiLU;
  int T = 1000;
  double beta_lo = 1e-4;
  double beta_hi = 2e-2;
  bool posterior_variance = false;  // sigma_t^2 = beta_tilde instead of beta_t

  void validate() const;
  int embed_dim() const { return time_embed_dim > 0 ? time_embed_dim : (hidden_width + hidden_width % 2); }
  nlohmann::json to_json() const;
  static DdpmConfig from_json(const nlohmann::json& j);
};

/// Denoising diffusion with a noise-prediction network. The score is
/// recovered as -eps_theta(x, t) / sqrt(1 - alpha_bar_t) where the
/// probability-flow sampler needs it.
class DdpmModel {
 public:
  static constexpr const char* kFamily = "ddpm";

  explicit DdpmModel(DdpmConfig cfg);

  const DdpmConfig& config() const { return cfg_; }
  const NoiseSchedule& schedule() const { return sched_; }
  const Mlp& net() const { return net_; }
  long param_count() const { return net_.param_count(); }
  const ParamLayout& layout() const { return net_.layout(); }
  Vec init_params(Rng& rng) const { return net_.init_params(rng); }

  /// Closed-form forward marginal: x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps,
  /// t in 1..T.
  Vec q_sample(const Vec& x0, int t, const Vec& noise) const;
  Mat q_sample(const Mat& x0, int t, const Mat& noise) const;

  /// Noising targets for one batch: uniform t per row, fresh noise.
  struct NoiseBatch {
    Mat xt;
    Vec tfrac;  // t / T fed to the network
    Mat eps;
    std::vector<int> tidx;
  };
  NoiseBatch make_targets(const Mat& batch, Rng& rng) const;

  /// Simple noise-prediction objective mean_i |eps_i - eps_theta(x_t,i)|^2.
  double loss(const Vec& params, const NoiseBatch& nb) const;
  double loss_and_grad(const Vec& params, const NoiseBatch& nb, Vec& grad) const;
  double loss_seeded(const Vec& params, const Mat& batch, uint64_t seed) const;

  /// Ancestral reverse chain from x_T ~ N(0, I); the t = 1 step adds no
  /// noise. sigma_t = sqrt(beta_t) unless posterior_variance is configured.
  Mat sample(const Vec& params, long n, Rng& rng) const;

  /// Deterministic probability-flow sampler on the continuous-time
  /// interpolation of the schedule, integrating from the terminal Gaussian
  /// (s = 1) down to s = 1/T.
  Mat pf_ode_sample(const Vec& params, long n, int steps, Rng& rng,
                    OdeMethod method = OdeMethod::Euler) const;

  /// Continuous-time score from the noise net: -eps_theta(x, s)/sqrt(1-abar(s)).
  Mat score(const Vec& params, const Mat& x, double s) const;

 private:
  DdpmConfig cfg_;
  NoiseSchedule sched_;
  Mlp net_;
};

TrainResult ddpm_train(const DdpmModel& model, Vec& params, const Mat& train_data,
                       const TrainOptions& opts);

}  // namespace probgen
