// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "probgen/common.hpp"
#include "probgen/nn.hpp"
#include "probgen/rng.hpp"

#include <json.hpp>

#include <functional>
#include <string>
#include <vector>

namespace probgen {

enum class OdeMethod { Euler, Rk4 };
enum class Coupling { Independent, MinibatchOt };

std::string ode_method_name(OdeMethod m);
OdeMethod ode_method_from_name(const std::string& name);
std::string coupling_name(Coupling c);
Coupling coupling_from_name(const std::string& name);

/// Exact minimum-cost assignment (Hungarian algorithm, square cost matrix).
/// Returns per-row assigned column.
std::vector<int> min_cost_assignment(const Mat& cost);

/// Batched time-dependent vector field and its input-directional derivative.
using VectorField = std::function<Mat(const Mat& x, double t)>;
using JvpField = std::function<Mat(const Mat& x, double t, const Mat& v)>;

/// Fixed-step integration of dx/dt = f(x, t) from t0 to t1 (either
/// direction). Throws DivergenceError with the step index if the state goes
/// non-finite.
Mat integrate_ode(const Mat& x0, double t0, double t1, int steps, OdeMethod method,
                  const VectorField& f);

struct FlowIntegration {
  Mat x;
  Vec div_integral;  // per-row integral of div f over the trajectory
};

/// Joint integration of the state and the divergence of f along it. The
/// divergence is the exact basis-vector trace when n_probe <= 0, otherwise a
/// Hutchinson estimate with Rademacher probes (drawn once per call).
FlowIntegration integrate_with_divergence(const Mat& x0, double t0, double t1, int steps,
                                          OdeMethod method, const VectorField& f,
                                          const JvpField& jvp, int n_probe, Rng& rng);

/// Hutchinson trace estimate of a linear operator given its action v -> A v.
double hutchinson_trace(const std::function<Vec(const Vec&)>& apply, int d, int n_probe,
                        Rng& rng);

/// Conditional flow matching with straight-line conditional paths between a
/// standard-normal prior (t = 0) and data (t = 1).
struct CfmConfig {
  int d = 2;
  int hidden_width = 64;
  int depth = 2;
  int time_embed_dim = 0;  // 0: use hidden_width rounded up to even
  Activation activation = Activation::SiLU;
  double sigma_min = 1e-2;
  Coupling coupling = Coupling::Independent;
  OdeMethod method = OdeMethod::Euler;
  int ode_steps = 50;

  void validate() const;
  int embed_dim() const { return time_embed_dim > 0 ? time_embed_dim : (hidden_width + hidden_width % 2); }
  nlohmann::json to_json() const;
  static CfmConfig from_json(const nlohmann::json& j);
};

/// One conditional-path regression target per row.
struct PathBatch {
  Mat xt;  // interpolant states
  Vec t;   // times in [0, 1]
  Mat u;   // target velocities x1 - x0
};

class CfmModel {
 public:
  static constexpr const char* kFamily = "cfm";

  explicit CfmModel(CfmConfig cfg);

  const CfmConfig& config() const { return cfg_; }
  const Mlp& net() const { return net_; }
  long param_count() const { return net_.param_count(); }
  const ParamLayout& layout() const { return net_.layout(); }
  Vec init_params(Rng& rng) const { return net_.init_params(rng); }

  /// Deterministic interpolant construction from explicit draws:
  /// x_t = (1-t) x0 + t x1 + sigma_min * eps, u = x1 - x0.
  PathBatch make_pairs_from(const Mat& x0, const Mat& x1, const Vec& t, const Mat& eps) const;
  /// Draws the prior, times and noise; applies minibatch-OT pairing when
  /// configured.
  PathBatch make_pairs(const Mat& data_batch, Rng& rng) const;

  /// Mean squared error between the field at (x_t, t) and the target
  /// velocity.
  double loss(const Vec& params, const PathBatch& pb) const;
  double loss_and_grad(const Vec& params, const PathBatch& pb, Vec& grad) const;

  Mat velocity(const Vec& params, const Mat& x, double t) const;

  /// Integrate the learned field from a prior draw at t=0 to t=1.
  Mat sample(const Vec& params, long n, Rng& rng, int steps = -1,
             OdeMethod method = OdeMethod::Euler) const;

  /// Probability-flow likelihood: reverse integration of state and
  /// divergence, Hutchinson estimate with `n_probe` Rademacher probes
  /// (exact trace when n_probe <= 0).
  Vec log_prob(const Vec& params, const Mat& x, int n_probe, Rng& rng, int steps = -1,
               OdeMethod method = OdeMethod::Rk4) const;

 private:
  CfmConfig cfg_;
  Mlp net_;
};

TrainResult cfm_train(const CfmModel& model, Vec& params, const Mat& train_data,
                      const TrainOptions& opts);

}  // namespace probgen
