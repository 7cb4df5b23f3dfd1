// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "probgen/common.hpp"
#include "probgen/rng.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace probgen {

enum class Activation { SiLU, Tanh };

std::string activation_name(Activation a);
Activation activation_from_name(const std::string& name);

/// One named tensor in a flat parameter vector.
struct LayoutEntry {
  std::string name;
  std::vector<long> shape;
  long size() const {
    long s = 1;
    for (long d : shape) s *= d;
    return s;
  }
};

struct ParamLayout {
  std::vector<LayoutEntry> entries;
  long total() const {
    long s = 0;
    for (const auto& e : entries) s += e.size();
    return s;
  }
  void append(const ParamLayout& other, const std::string& prefix);
};

/// Fully connected network configuration. `depth` counts hidden layers; the
/// output layer is always linear. When `time_embedding` is set, sinusoidal
/// features of a scalar time input are concatenated to the data input.
struct MlpConfig {
  int input_dim = 1;
  int output_dim = 1;
  int hidden_width = 64;
  int depth = 2;
  Activation activation = Activation::SiLU;
  bool time_embedding = false;
  int time_embed_dim = 0;  // even, >= 2 when time_embedding is set

  void validate() const;
  int effective_input() const { return input_dim + (time_embedding ? time_embed_dim : 0); }
  ParamLayout layout(const std::string& prefix = "") const;
  long param_count() const { return layout().total(); }
};

/// Sinusoidal features of t (interleaved sin/cos pairs, dim must be even).
Vec sinusoidal_embedding(double t, int dim);

/// Intermediate activations kept for the backward pass.
struct MlpCache {
  Mat input;             // n x effective_input
  std::vector<Mat> pre;  // pre-activations, one per linear layer
  std::vector<Mat> act;  // post-activations feeding the next layer
};

/// Multilayer perceptron operating on externally owned flat parameters.
/// All batch matrices are n x features. Pure given (params, input, t).
class Mlp {
 public:
  explicit Mlp(MlpConfig cfg);

  const MlpConfig& config() const { return cfg_; }
  long param_count() const { return n_params_; }
  const ParamLayout& layout() const { return layout_; }

  /// Uniform fan-in weight init, zero biases. `zero_last_layer` starts the
  /// output layer at exactly zero.
  Vec init_params(Rng& rng, bool zero_last_layer = false) const;

  Mat forward(const Vec& params, const Mat& x, const Vec* t = nullptr,
              MlpCache* cache = nullptr) const;
  Vec forward1(const Vec& params, const Vec& x, std::optional<double> t = {}) const;

  /// Reverse pass. `dy` is dLoss/dOutput (n x output_dim). Returns the
  /// parameter gradient; when `dx` is non-null it receives dLoss/dInput
  /// restricted to the data columns (n x input_dim).
  Vec backward(const Vec& params, const MlpCache& cache, const Mat& dy, Mat* dx = nullptr) const;

  /// Forward-mode directional derivative w.r.t. the data input: rows of
  /// `vx` are tangent vectors. Time features are held fixed. Returns J*v rows.
  Mat jvp_input(const Vec& params, const Mat& x, const Vec* t, const Mat& vx) const;

 private:
  Mat embed(const Mat& x, const Vec* t) const;
  long n_layers() const { return static_cast<long>(dims_.size()) - 1; }

  MlpConfig cfg_;
  std::vector<long> dims_;      // layer widths incl. input/output
  std::vector<long> w_offset_;  // flat offsets of weight blocks
  std::vector<long> b_offset_;  // flat offsets of bias blocks
  long n_params_ = 0;
  ParamLayout layout_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  long step = 0;
  Vec m;
  Vec v;
  static AdamState init(long n) { return AdamState{0, Vec::Zero(n), Vec::Zero(n)}; }
};

/// Bias-corrected adaptive-moment update, in place. Rejects non-finite
/// gradients.
void adam_step(AdamState& state, Vec& params, const Vec& grads,
               const AdamConfig& cfg = AdamConfig{});

struct TrainOptions {
  long steps = 10000;
  double max_seconds = 0;  // > 0 enables a wall-clock budget (stops at whichever comes first)
  int batch_size = 128;
  AdamConfig adam;
  uint64_t seed = 0;
  bool record_trace = true;
};

struct TrainResult {
  std::vector<double> loss_trace;
  long steps_run = 0;
  double seconds = 0;
};

/// Objective evaluated on a batch of row indices; fills `grad` (preallocated,
/// zeroed by the loop) and returns the mean batch loss.
using Objective =
    std::function<double(const Vec& params, const std::vector<int>& batch, Rng& rng, Vec& grad)>;

/// Shared minibatch training loop: epoch shuffling, adam updates, loss trace.
/// Throws DivergenceError with the step index if the loss goes non-finite.
TrainResult train_loop(Vec& params, long n_data, const TrainOptions& opts, const Objective& obj);

}  // namespace probgen
