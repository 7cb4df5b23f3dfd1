// SPDX-License-Identifier: Apache-2.0
#include "probgen/nn.hpp"

#include <chrono>
#include <cmath>

namespace probgen {

namespace {
// Weight blocks are stored row-major (out x in), matching the layout records.
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
}  // namespace

std::string activation_name(Activation a) {
  switch (a) {
    case Activation::SiLU: return "silu";
    case Activation::Tanh: return "tanh";
  }
  return "silu";
}

Activation activation_from_name(const std::string& name) {
  if (name == "silu") return Activation::SiLU;
  if (name == "tanh") return Activation::Tanh;
  throw std::invalid_argument("unknown activation: " + name);
}

void ParamLayout::append(const ParamLayout& other, const std::string& prefix) {
  for (const auto& e : other.entries) entries.push_back({prefix + e.name, e.shape});
}

void MlpConfig::validate() const {
  require(input_dim >= 1, "MlpConfig: input_dim must be >= 1");
  require(output_dim >= 1, "MlpConfig: output_dim must be >= 1");
  require(hidden_width >= 1, "MlpConfig: hidden_width must be >= 1");
  require(depth >= 1, "MlpConfig: depth must be >= 1 (zero hidden layers rejected)");
  if (time_embedding) {
    require(time_embed_dim >= 2 && time_embed_dim % 2 == 0,
            "MlpConfig: time_embed_dim must be even and >= 2");
  }
}

ParamLayout MlpConfig::layout(const std::string& prefix) const {
  validate();
  ParamLayout out;
  long in = effective_input();
  for (int i = 0; i <= depth; ++i) {
    long width = (i == depth) ? output_dim : hidden_width;
    std::string base = prefix + "layer" + std::to_string(i);
    out.entries.push_back({base + ".weight", {width, in}});
    out.entries.push_back({base + ".bias", {width}});
    in = width;
  }
  return out;
}

Vec sinusoidal_embedding(double t, int dim) {
  require(dim >= 2 && dim % 2 == 0, "sinusoidal_embedding: dim must be even and >= 2");
  const int half = dim / 2;
  Vec out(dim);
  for (int j = 0; j < half; ++j) {
    // Geometric frequency ladder from 1 down to 1e-4, scaled so t in [0,1]
    // spans many periods at the fastest frequency.
    double f = (half == 1) ? 1.0 : std::exp(-std::log(10000.0) * j / (half - 1));
    double arg = 1000.0 * t * f;
    out[2 * j] = std::sin(arg);
    out[2 * j + 1] = std::cos(arg);
  }
  return out;
}

namespace {

inline double silu(double z) { return z / (1.0 + std::exp(-z)); }
inline double silu_d(double z) {
  const double s = 1.0 / (1.0 + std::exp(-z));
  return s * (1.0 + z * (1.0 - s));
}

Mat apply_act(const Mat& z, Activation a) {
  if (a == Activation::SiLU) return z.unaryExpr([](double v) { return silu(v); });
  return z.array().tanh().matrix();
}

Mat apply_act_d(const Mat& z, Activation a) {
  if (a == Activation::SiLU) return z.unaryExpr([](double v) { return silu_d(v); });
  return (1.0 - z.array().tanh().square()).matrix();
}

}  // namespace

Mlp::Mlp(MlpConfig cfg) : cfg_(cfg) {
  cfg_.validate();
  dims_.push_back(cfg_.effective_input());
  for (int i = 0; i < cfg_.depth; ++i) dims_.push_back(cfg_.hidden_width);
  dims_.push_back(cfg_.output_dim);
  long off = 0;
  for (long i = 0; i + 1 < static_cast<long>(dims_.size()); ++i) {
    w_offset_.push_back(off);
    off += dims_[i + 1] * dims_[i];
    b_offset_.push_back(off);
    off += dims_[i + 1];
  }
  n_params_ = off;
  layout_ = cfg_.layout();
}

Vec Mlp::init_params(Rng& rng, bool zero_last_layer) const {
  Vec p = Vec::Zero(n_params_);
  for (long l = 0; l < n_layers(); ++l) {
    if (zero_last_layer && l == n_layers() - 1) break;
    const double bound = 1.0 / std::sqrt(static_cast<double>(dims_[l]));
    const long nw = dims_[l + 1] * dims_[l];
    for (long k = 0; k < nw; ++k) p[w_offset_[l] + k] = rng.uniform(-bound, bound);
  }
  return p;
}

Mat Mlp::embed(const Mat& x, const Vec* t) const {
  require_shape(x.cols() == cfg_.input_dim, "Mlp: input has " + std::to_string(x.cols()) +
                                                " columns, expected " +
                                                std::to_string(cfg_.input_dim));
  if (!cfg_.time_embedding) {
    require_shape(t == nullptr, "Mlp: time input supplied but time_embedding is disabled");
    return x;
  }
  require_shape(t != nullptr, "Mlp: time_embedding enabled but no time input supplied");
  require_shape(t->size() == x.rows(), "Mlp: time vector length must match batch size");
  Mat out(x.rows(), cfg_.effective_input());
  out.leftCols(cfg_.input_dim) = x;
  for (long i = 0; i < x.rows(); ++i)
    out.row(i).tail(cfg_.time_embed_dim) = sinusoidal_embedding((*t)[i], cfg_.time_embed_dim);
  return out;
}

Mat Mlp::forward(const Vec& params, const Mat& x, const Vec* t, MlpCache* cache) const {
  require_shape(params.size() == n_params_, "Mlp: parameter vector length mismatch");
  Mat a = embed(x, t);
  if (cache) {
    cache->input = a;
    cache->pre.clear();
    cache->act.clear();
  }
  for (long l = 0; l < n_layers(); ++l) {
    Eigen::Map<const RowMat> w(params.data() + w_offset_[l], dims_[l + 1], dims_[l]);
    Eigen::Map<const Vec> b(params.data() + b_offset_[l], dims_[l + 1]);
    Mat z = (a * w.transpose()).rowwise() + b.transpose();
    if (cache) cache->pre.push_back(z);
    if (l + 1 < n_layers()) {
      a = apply_act(z, cfg_.activation);
      if (cache) cache->act.push_back(a);
    } else {
      a = std::move(z);
    }
  }
  return a;
}

Vec Mlp::forward1(const Vec& params, const Vec& x, std::optional<double> t) const {
  Mat xm = x.transpose();
  if (t.has_value()) {
    Vec tv(1);
    tv[0] = *t;
    return forward(params, xm, &tv).row(0);
  }
  return forward(params, xm, nullptr).row(0);
}

Vec Mlp::backward(const Vec& params, const MlpCache& cache, const Mat& dy, Mat* dx) const {
  require_shape(dy.cols() == cfg_.output_dim && dy.rows() == cache.input.rows(),
                "Mlp::backward: dy shape mismatch");
  Vec grad = Vec::Zero(n_params_);
  Mat dz = dy;
  for (long l = n_layers() - 1; l >= 0; --l) {
    const Mat& a_in = (l == 0) ? cache.input : cache.act[l - 1];
    Eigen::Map<RowMat> gw(grad.data() + w_offset_[l], dims_[l + 1], dims_[l]);
    Eigen::Map<Vec> gb(grad.data() + b_offset_[l], dims_[l + 1]);
    gw = dz.transpose() * a_in;
    gb = dz.colwise().sum().transpose();
    if (l > 0 || dx) {
      Eigen::Map<const RowMat> w(params.data() + w_offset_[l], dims_[l + 1], dims_[l]);
      Mat da = dz * w;
      if (l > 0) {
        dz = da.cwiseProduct(apply_act_d(cache.pre[l - 1], cfg_.activation));
      } else if (dx) {
        *dx = da.leftCols(cfg_.input_dim);
      }
    }
  }
  return grad;
}

Mat Mlp::jvp_input(const Vec& params, const Mat& x, const Vec* t, const Mat& vx) const {
  require_shape(vx.rows() == x.rows() && vx.cols() == cfg_.input_dim,
                "Mlp::jvp_input: tangent shape mismatch");
  Mat a = embed(x, t);
  Mat v = Mat::Zero(a.rows(), a.cols());
  v.leftCols(cfg_.input_dim) = vx;  // time features held fixed
  for (long l = 0; l < n_layers(); ++l) {
    Eigen::Map<const RowMat> w(params.data() + w_offset_[l], dims_[l + 1], dims_[l]);
    Eigen::Map<const Vec> b(params.data() + b_offset_[l], dims_[l + 1]);
    Mat z = (a * w.transpose()).rowwise() + b.transpose();
    Mat vz = v * w.transpose();
    if (l + 1 < n_layers()) {
      v = vz.cwiseProduct(apply_act_d(z, cfg_.activation));
      a = apply_act(z, cfg_.activation);
    } else {
      v = std::move(vz);
      a = std::move(z);
    }
  }
  return v;
}

void adam_step(AdamState& state, Vec& params, const Vec& grads, const AdamConfig& cfg) {
  require_shape(params.size() == grads.size() && state.m.size() == params.size() &&
                    state.v.size() == params.size(),
                "adam_step: length mismatch");
  if (!grads.allFinite()) {
    long bad = 0;
    for (long i = 0; i < grads.size(); ++i)
      if (!std::isfinite(grads[i])) {
        bad = i;
        break;
      }
    throw DivergenceError("adam_step: non-finite gradient component", bad);
  }
  state.step += 1;
  state.m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grads;
  state.v = cfg.beta2 * state.v.array().matrix() +
            (1.0 - cfg.beta2) * grads.array().square().matrix();
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  params.array() -=
      cfg.lr * (state.m.array() / bc1) / ((state.v.array() / bc2).sqrt() + cfg.eps);
}

TrainResult train_loop(Vec& params, long n_data, const TrainOptions& opts, const Objective& obj) {
  require(n_data >= 1, "train_loop: empty dataset");
  require(opts.steps >= 1 || opts.max_seconds > 0, "train_loop: empty budget");
  Rng rng(opts.seed);
  AdamState state = AdamState::init(params.size());
  Vec grad(params.size());
  TrainResult res;
  const int bs = static_cast<int>(std::min<long>(opts.batch_size, n_data));
  std::vector<int> order = rng.permutation(n_data);
  long cursor = 0;
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };
  for (long step = 0; opts.steps <= 0 || step < opts.steps; ++step) {
    if (opts.max_seconds > 0 && elapsed() >= opts.max_seconds) break;
    std::vector<int> batch(bs);
    for (int i = 0; i < bs; ++i) {
      if (cursor == n_data) {
        order = rng.permutation(n_data);
        cursor = 0;
      }
      batch[i] = order[cursor++];
    }
    grad.setZero();
    double loss = obj(params, batch, rng, grad);
    if (!std::isfinite(loss)) throw DivergenceError("train_loop: non-finite loss at step", step);
    adam_step(state, params, grad, opts.adam);
    if (opts.record_trace) res.loss_trace.push_back(loss);
    res.steps_run = step + 1;
  }
  res.seconds = elapsed();
  return res;
}

}  // namespace probgen
