// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "probgen/common.hpp"
#include "probgen/dataset.hpp"
#include "probgen/ddpm.hpp"
#include "probgen/flow_matching.hpp"
#include "probgen/nn.hpp"
#include "probgen/spline_flow.hpp"

#include <json.hpp>

#include <optional>
#include <string>
#include <variant>

namespace probgen {

/// Trained-model archive: plain-text manifest (family, config digest,
/// layout) followed by the parameters as little-endian 32-bit floats in
/// layout order.
struct Checkpoint {
  std::string family;  // "ns" | "cfm" | "ddpm"
  nlohmann::json config;
  ParamLayout layout;
  Vec params;
};

/// FNV-1a hash of the canonical (sorted-key) JSON dump, as 16 hex digits.
std::string config_digest(const nlohmann::json& config);

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

Checkpoint make_checkpoint(const NsModel& model, const Vec& params,
                           const std::optional<StandardizationStats>& stats = {});
Checkpoint make_checkpoint(const CfmModel& model, const Vec& params,
                           const std::optional<StandardizationStats>& stats = {});
Checkpoint make_checkpoint(const DdpmModel& model, const Vec& params,
                           const std::optional<StandardizationStats>& stats = {});

/// A loaded model of any family plus its parameters and the training-time
/// standardization, able to sample in original data units.
class AnyModel {
 public:
  explicit AnyModel(const Checkpoint& ckpt);

  const std::string& family() const { return family_; }
  int dim() const;
  long param_count() const { return params_.size(); }
  const Vec& params() const { return params_; }
  const std::optional<StandardizationStats>& standardization() const { return stats_; }

  /// Draw n samples and map them back to data units when standardization
  /// stats are present. `steps` overrides the sampler step count where one
  /// applies (CFM ODE / DDPM probability flow).
  Mat sample(long n, uint64_t seed, int steps = -1, bool pf_ode = false) const;

  /// One-line description of the sampler configuration used by sample().
  std::string sampler_tag(bool pf_ode = false) const;

  const NsModel* ns() const { return std::get_if<NsModel>(&model_); }
  const CfmModel* cfm() const { return std::get_if<CfmModel>(&model_); }
  const DdpmModel* ddpm() const { return std::get_if<DdpmModel>(&model_); }

 private:
  std::string family_;
  std::variant<NsModel, CfmModel, DdpmModel> model_;
  Vec params_;
  std::optional<StandardizationStats> stats_;
};

}  // namespace probgen
