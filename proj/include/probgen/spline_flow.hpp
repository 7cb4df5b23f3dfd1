// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "probgen/common.hpp"
#include "probgen/nn.hpp"
#include "probgen/rng.hpp"

#include <json.hpp>

#include <vector>

namespace probgen {

/// Monotonic rational-quadratic spline on [-B, B] with linear (identity)
/// tails. Raw parameters per coordinate: K width logits, K height logits,
/// K-1 derivative values, mapped so that all-zero raw parameters give the
/// identity transform.
struct RqSplineConfig {
  int bins = 8;
  double tail_bound = 3.0;
  double min_bin_frac = 1e-3;     // floor on normalized bin fractions
  double min_derivative = 1e-3;   // floor on knot derivatives

  int param_count() const { return 3 * bins - 1; }
};

/// Constrained spline for one coordinate: K+1 knots with positive widths,
/// heights and derivatives. Softmax outputs are kept for the reverse pass.
struct RqSpline {
  Vec xk, yk, dk;       // size K+1; dk[0] = dk[K] = 1
  Vec wsoft, hsoft;     // size K softmax outputs
  double tail_bound = 0;
  int bins = 0;
};

/// Forward evaluation record: output, log-derivative, and the intermediates
/// the reverse pass reuses.
struct RqEval {
  bool in_range = false;
  int bin = 0;
  double x = 0, y = 0, logdet = 0;
  double w = 0, h = 0, s = 0, xi = 0, u = 0, den = 0, numy = 0, pp = 0;
};

RqSpline rq_process(const RqSplineConfig& cfg, const double* raw);
RqEval rq_forward(const RqSpline& sp, double x);
/// Analytic inverse (per-bin quadratic root). `logdet` receives the
/// inverse's log-derivative, i.e. the negative forward log-derivative at x.
double rq_inverse(const RqSpline& sp, double y, double* logdet = nullptr);
/// Reverse pass through forward(): accumulates d/d(raw) into `raw_bar`
/// (length 3K-1) and returns d/dx, given upstream ybar and logdet-bar.
double rq_backward(const RqSplineConfig& cfg, const RqSpline& sp, const RqEval& ev, double ybar,
                   double ldbar, double* raw_bar);

/// Coupling-flow configuration. Layers alternate which half of the
/// coordinates is transformed; the conditioner network maps the pass-through
/// half to raw spline parameters for the transformed half. For d = 1 the
/// layers are elementwise splines with directly trainable raw parameters.
struct NsConfig {
  int d = 2;
  int n_layers = 8;
  int bins = 8;
  double tail_bound = 3.0;
  int hidden_width = 64;
  int depth = 2;  // conditioner hidden layers
  Activation activation = Activation::SiLU;

  void validate() const;
  nlohmann::json to_json() const;
  static NsConfig from_json(const nlohmann::json& j);
};

class NsModel {
 public:
  static constexpr const char* kFamily = "ns";

  explicit NsModel(NsConfig cfg);

  const NsConfig& config() const { return cfg_; }
  long param_count() const { return n_params_; }
  const ParamLayout& layout() const { return layout_; }

  /// Conditioner weights fan-in uniform with a zero final layer, so a fresh
  /// model is exactly the identity flow.
  Vec init_params(Rng& rng) const;

  /// z = f(x), data to latent; accumulates per-sample log|det J_f| when
  /// `logdet` is non-null.
  Mat forward_latent(const Vec& params, const Mat& x, Vec* logdet = nullptr) const;
  Mat inverse_latent(const Vec& params, const Mat& z) const;

  /// log p(x) = log N(f(x)) + log|det J_f(x)|, per sample.
  Vec log_prob(const Vec& params, const Mat& x) const;

  /// Mean negative log-likelihood over the batch and its exact reverse-mode
  /// gradient. Throws DivergenceError naming the first bad row if the loss
  /// goes non-finite.
  double nll_and_grad(const Vec& params, const Mat& x, Vec& grad) const;

  Mat sample(const Vec& params, long n, Rng& rng) const;

  /// Parameter slice owned by one coupling layer.
  std::pair<long, long> layer_slice(int layer) const {
    return {offsets_[layer], sizes_[layer]};
  }
  std::vector<int> pass_indices(int layer) const;
  std::vector<int> transform_indices(int layer) const;

 private:
  NsConfig cfg_;
  RqSplineConfig scfg_;
  std::vector<Mlp> cond_;  // one per layer when d >= 2
  std::vector<long> offsets_, sizes_;
  ParamLayout layout_;
  long n_params_ = 0;
};

TrainResult ns_train(const NsModel& model, Vec& params, const Mat& train_data,
                     const TrainOptions& opts);

}  // namespace probgen
