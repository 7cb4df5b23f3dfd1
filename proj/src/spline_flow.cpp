// SPDX-License-Identifier: Apache-2.0
#include "probgen/spline_flow.hpp"

#include <algorithm>
#include <cmath>

namespace probgen {

namespace {

inline double softplus(double x) {
  return x > 30.0 ? x : std::log1p(std::exp(x));
}

// Offset so that a zero raw derivative value maps to exactly 1.
inline double deriv_offset(double min_derivative) {
  return std::log(std::expm1(1.0 - min_derivative));
}

// softmax of K logits, returned with the normalized fractions.
void softmax(const double* logits, int k, Vec& out) {
  double mx = logits[0];
  for (int i = 1; i < k; ++i) mx = std::max(mx, logits[i]);
  double sum = 0;
  out.resize(k);
  for (int i = 0; i < k; ++i) {
    out[i] = std::exp(logits[i] - mx);
    sum += out[i];
  }
  out /= sum;
}

// Knot positions from normalized fractions over [-B, B]; endpoints exact.
void knots_from_fracs(const Vec& frac, double min_frac, double b, Vec& knots) {
  const int k = static_cast<int>(frac.size());
  knots.resize(k + 1);
  knots[0] = -b;
  double acc = -b;
  const double scale = 2.0 * b;
  for (int i = 0; i < k - 1; ++i) {
    acc += scale * (min_frac + (1.0 - k * min_frac) * frac[i]);
    knots[i + 1] = acc;
  }
  knots[k] = b;
}

}  // namespace

RqSpline rq_process(const RqSplineConfig& cfg, const double* raw) {
  const int k = cfg.bins;
  RqSpline sp;
  sp.bins = k;
  sp.tail_bound = cfg.tail_bound;
  softmax(raw, k, sp.wsoft);
  softmax(raw + k, k, sp.hsoft);
  knots_from_fracs(sp.wsoft, cfg.min_bin_frac, cfg.tail_bound, sp.xk);
  knots_from_fracs(sp.hsoft, cfg.min_bin_frac, cfg.tail_bound, sp.yk);
  sp.dk.resize(k + 1);
  sp.dk[0] = sp.dk[k] = 1.0;
  const double c0 = deriv_offset(cfg.min_derivative);
  for (int i = 1; i < k; ++i)
    sp.dk[i] = cfg.min_derivative + softplus(raw[2 * k + (i - 1)] + c0);
  return sp;
}

RqEval rq_forward(const RqSpline& sp, double x) {
  RqEval ev;
  ev.x = x;
  const double b = sp.tail_bound;
  if (!(x >= -b && x <= b)) {
    ev.in_range = false;
    ev.y = x;
    ev.logdet = 0.0;
    return ev;
  }
  ev.in_range = true;
  // Largest bin k with xk[k] <= x, clamped to the last bin for x == B.
  const int k = static_cast<int>(
      std::min<long>(sp.bins - 1,
                     std::upper_bound(sp.xk.data(), sp.xk.data() + sp.bins + 1, x) -
                         sp.xk.data() - 1));
  ev.bin = std::max(0, k);
  const double xk = sp.xk[ev.bin], xk1 = sp.xk[ev.bin + 1];
  const double yk = sp.yk[ev.bin], yk1 = sp.yk[ev.bin + 1];
  const double dk = sp.dk[ev.bin], dk1 = sp.dk[ev.bin + 1];
  ev.w = xk1 - xk;
  ev.h = yk1 - yk;
  ev.s = ev.h / ev.w;
  ev.xi = (x - xk) / ev.w;
  ev.u = ev.xi * (1.0 - ev.xi);
  ev.den = ev.s + (dk1 + dk - 2.0 * ev.s) * ev.u;
  ev.numy = ev.h * (ev.s * ev.xi * ev.xi + dk * ev.u);
  ev.y = yk + ev.numy / ev.den;
  const double omx = 1.0 - ev.xi;
  ev.pp = dk1 * ev.xi * ev.xi + 2.0 * ev.s * ev.u + dk * omx * omx;
  ev.logdet = 2.0 * std::log(ev.s) + std::log(ev.pp) - 2.0 * std::log(ev.den);
  return ev;
}

double rq_inverse(const RqSpline& sp, double y, double* logdet) {
  const double b = sp.tail_bound;
  if (!(y >= -b && y <= b)) {
    if (logdet) *logdet = 0.0;
    return y;
  }
  const int k = static_cast<int>(
      std::min<long>(sp.bins - 1,
                     std::upper_bound(sp.yk.data(), sp.yk.data() + sp.bins + 1, y) -
                         sp.yk.data() - 1));
  const int bin = std::max(0, k);
  const double xk = sp.xk[bin], xk1 = sp.xk[bin + 1];
  const double yk = sp.yk[bin], yk1 = sp.yk[bin + 1];
  const double dk = sp.dk[bin], dk1 = sp.dk[bin + 1];
  const double w = xk1 - xk, h = yk1 - yk, s = h / w;
  const double dy = y - yk;
  const double a = h * (s - dk) + dy * (dk1 + dk - 2.0 * s);
  const double bq = h * dk - dy * (dk1 + dk - 2.0 * s);
  const double c = -s * dy;
  const double disc = std::max(0.0, bq * bq - 4.0 * a * c);
  double xi = 2.0 * c / (-bq - std::sqrt(disc));
  xi = std::min(1.0, std::max(0.0, xi));
  const double x = xk + xi * w;
  if (logdet) {
    const double u = xi * (1.0 - xi);
    const double den = s + (dk1 + dk - 2.0 * s) * u;
    const double omx = 1.0 - xi;
    const double pp = dk1 * xi * xi + 2.0 * s * u + dk * omx * omx;
    *logdet = -(2.0 * std::log(s) + std::log(pp) - 2.0 * std::log(den));
  }
  return x;
}

double rq_backward(const RqSplineConfig& cfg, const RqSpline& sp, const RqEval& ev, double ybar,
                   double ldbar, double* raw_bar) {
  if (!ev.in_range) return ybar;  // identity tails: dy/dx = 1, no parameter path

  const int k = ev.bin;
  const int nb = cfg.bins;
  const double dk = sp.dk[k], dk1 = sp.dk[k + 1];
  const double omx = 1.0 - ev.xi;

  // Adjoints of the forward intermediates.
  double sbar = 0, pbar = 0, denbar = 0, numybar = 0, ubar = 0, xibar = 0;
  double hbar = 0, wbar = 0;
  double xkbar = 0, xk1bar = 0, ykbar = 0, yk1bar = 0, dkbar = 0, dk1bar = 0;

  // logdet = 2 ln s + ln pp - 2 ln den
  sbar += 2.0 * ldbar / ev.s;
  pbar += ldbar / ev.pp;
  denbar += -2.0 * ldbar / ev.den;

  // y = yk + numy / den
  ykbar += ybar;
  numybar += ybar / ev.den;
  denbar += -ybar * ev.numy / (ev.den * ev.den);

  // numy = h (s xi^2 + dk u)
  hbar += numybar * (ev.s * ev.xi * ev.xi + dk * ev.u);
  sbar += numybar * ev.h * ev.xi * ev.xi;
  dkbar += numybar * ev.h * ev.u;
  ubar += numybar * ev.h * dk;
  xibar += numybar * ev.h * ev.s * 2.0 * ev.xi;

  // pp = dk1 xi^2 + 2 s u + dk (1-xi)^2
  dk1bar += pbar * ev.xi * ev.xi;
  sbar += pbar * 2.0 * ev.u;
  ubar += pbar * 2.0 * ev.s;
  dkbar += pbar * omx * omx;
  xibar += pbar * (2.0 * dk1 * ev.xi - 2.0 * dk * omx);

  // den = s + (dk1 + dk - 2s) u
  sbar += denbar * (1.0 - 2.0 * ev.u);
  dk1bar += denbar * ev.u;
  dkbar += denbar * ev.u;
  ubar += denbar * (dk1 + dk - 2.0 * ev.s);

  // u = xi (1 - xi)
  xibar += ubar * (1.0 - 2.0 * ev.xi);

  // xi = (x - xk) / w
  const double xbar = xibar / ev.w;
  xkbar += -xibar / ev.w;
  wbar += -xibar * ev.xi / ev.w;

  // s = h / w
  hbar += sbar / ev.w;
  wbar += -sbar * ev.s / ev.w;

  // w = xk1 - xk, h = yk1 - yk
  xk1bar += wbar;
  xkbar -= wbar;
  yk1bar += hbar;
  ykbar -= hbar;

  // Interior knot adjoints push back through cumulative sums of bin sizes.
  auto knots_to_logits = [&](double lo_bar, double hi_bar, int bin, const Vec& soft,
                             double* logit_bar) {
    // x_m = -B + sum_{i<m} W_i for interior m; endpoints are constants.
    Vec wbar_bins = Vec::Zero(nb);
    if (bin >= 1 && bin <= nb - 1)
      for (int i = 0; i < bin; ++i) wbar_bins[i] += lo_bar;
    if (bin + 1 >= 1 && bin + 1 <= nb - 1)
      for (int i = 0; i < bin + 1; ++i) wbar_bins[i] += hi_bar;
    // W_i = 2B (min_frac + (1 - K min_frac) soft_i)
    const double scale = 2.0 * cfg.tail_bound * (1.0 - nb * cfg.min_bin_frac);
    Vec soft_bar = scale * wbar_bins;
    const double dot = soft.dot(soft_bar);
    for (int i = 0; i < nb; ++i) logit_bar[i] += soft[i] * (soft_bar[i] - dot);
  };
  knots_to_logits(xkbar, xk1bar, k, sp.wsoft, raw_bar);
  knots_to_logits(ykbar, yk1bar, k, sp.hsoft, raw_bar + nb);

  // Interior derivatives: d_m = min_derivative + softplus(raw + c0), and
  // softplus'(t) = sigmoid(t) = 1 - exp(-softplus(t)).
  if (k >= 1 && k <= nb - 1)
    raw_bar[2 * nb + (k - 1)] += dkbar * (1.0 - std::exp(-(dk - cfg.min_derivative)));
  if (k + 1 >= 1 && k + 1 <= nb - 1)
    raw_bar[2 * nb + k] += dk1bar * (1.0 - std::exp(-(dk1 - cfg.min_derivative)));

  return xbar;
}

void NsConfig::validate() const {
  require(d >= 1, "NsConfig: d must be >= 1");
  require(n_layers >= 1, "NsConfig: n_layers must be >= 1");
  if (d >= 2)
    require(n_layers >= 2, "NsConfig: need n_layers >= 2 so every coordinate is transformed");
  require(bins >= 2, "NsConfig: bins must be >= 2");
  require(tail_bound > 0, "NsConfig: tail_bound must be positive");
  require(hidden_width >= 1 && depth >= 1, "NsConfig: conditioner dims must be >= 1");
}

nlohmann::json NsConfig::to_json() const {
  return {{"d", d},
          {"n_layers", n_layers},
          {"bins", bins},
          {"tail_bound", tail_bound},
          {"hidden_width", hidden_width},
          {"depth", depth},
          {"activation", activation_name(activation)}};
}

NsConfig NsConfig::from_json(const nlohmann::json& j) {
  NsConfig c;
  c.d = j.at("d").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.bins = j.at("bins").get<int>();
  c.tail_bound = j.at("tail_bound").get<double>();
  c.hidden_width = j.at("hidden_width").get<int>();
  c.depth = j.at("depth").get<int>();
  c.activation = activation_from_name(j.value("activation", "silu"));
  c.validate();
  return c;
}

NsModel::NsModel(NsConfig cfg) : cfg_(cfg) {
  cfg_.validate();
  scfg_.bins = cfg_.bins;
  scfg_.tail_bound = cfg_.tail_bound;
  const int ppc = scfg_.param_count();
  long off = 0;
  for (int l = 0; l < cfg_.n_layers; ++l) {
    offsets_.push_back(off);
    const std::string prefix = "layer" + std::to_string(l) + ".";
    if (cfg_.d == 1) {
      sizes_.push_back(ppc);
      layout_.entries.push_back({prefix + "spline", {ppc}});
    } else {
      const long na = static_cast<long>(pass_indices(l).size());
      const long nb = static_cast<long>(transform_indices(l).size());
      MlpConfig mc;
      mc.input_dim = static_cast<int>(na);
      mc.output_dim = static_cast<int>(nb) * ppc;
      mc.hidden_width = cfg_.hidden_width;
      mc.depth = cfg_.depth;
      mc.activation = cfg_.activation;
      cond_.emplace_back(mc);
      sizes_.push_back(cond_.back().param_count());
      layout_.append(cond_.back().layout(), prefix + "cond.");
    }
    off += sizes_.back();
  }
  n_params_ = off;
}

std::vector<int> NsModel::pass_indices(int layer) const {
  const int h = (cfg_.d + 1) / 2;
  std::vector<int> idx;
  if (layer % 2 == 0)
    for (int i = 0; i < h; ++i) idx.push_back(i);
  else
    for (int i = h; i < cfg_.d; ++i) idx.push_back(i);
  return idx;
}

std::vector<int> NsModel::transform_indices(int layer) const {
  const int h = (cfg_.d + 1) / 2;
  std::vector<int> idx;
  if (layer % 2 == 0)
    for (int i = h; i < cfg_.d; ++i) idx.push_back(i);
  else
    for (int i = 0; i < h; ++i) idx.push_back(i);
  return idx;
}

Vec NsModel::init_params(Rng& rng) const {
  Vec p = Vec::Zero(n_params_);
  if (cfg_.d == 1) return p;  // zero raw parameters: identity splines
  for (int l = 0; l < cfg_.n_layers; ++l) {
    Vec lp = cond_[l].init_params(rng, /*zero_last_layer=*/true);
    p.segment(offsets_[l], sizes_[l]) = lp;
  }
  return p;
}

Mat NsModel::forward_latent(const Vec& params, const Mat& x, Vec* logdet) const {
  require_shape(params.size() == n_params_, "NsModel: parameter length mismatch");
  require_shape(x.cols() == cfg_.d, "NsModel: input dimension mismatch");
  const long n = x.rows();
  const int ppc = scfg_.param_count();
  Mat cur = x;
  if (logdet) *logdet = Vec::Zero(n);
  for (int l = 0; l < cfg_.n_layers; ++l) {
    if (cfg_.d == 1) {
      const RqSpline sp = rq_process(scfg_, params.data() + offsets_[l]);
      for (long i = 0; i < n; ++i) {
        RqEval ev = rq_forward(sp, cur(i, 0));
        cur(i, 0) = ev.y;
        if (logdet) (*logdet)[i] += ev.logdet;
      }
      continue;
    }
    const auto a_idx = pass_indices(l);
    const auto b_idx = transform_indices(l);
    Mat a(n, a_idx.size());
    for (size_t j = 0; j < a_idx.size(); ++j) a.col(j) = cur.col(a_idx[j]);
    const Mat raw = cond_[l].forward(params.segment(offsets_[l], sizes_[l]), a);
    Vec rbuf(ppc);
    for (long i = 0; i < n; ++i) {
      for (size_t j = 0; j < b_idx.size(); ++j) {
        rbuf = raw.row(i).segment(j * ppc, ppc);
        const RqSpline sp = rq_process(scfg_, rbuf.data());
        RqEval ev = rq_forward(sp, cur(i, b_idx[j]));
        cur(i, b_idx[j]) = ev.y;
        if (logdet) (*logdet)[i] += ev.logdet;
      }
    }
  }
  return cur;
}

Mat NsModel::inverse_latent(const Vec& params, const Mat& z) const {
  require_shape(params.size() == n_params_, "NsModel: parameter length mismatch");
  require_shape(z.cols() == cfg_.d, "NsModel: latent dimension mismatch");
  const long n = z.rows();
  const int ppc = scfg_.param_count();
  Mat cur = z;
  for (int l = cfg_.n_layers - 1; l >= 0; --l) {
    if (cfg_.d == 1) {
      const RqSpline sp = rq_process(scfg_, params.data() + offsets_[l]);
      for (long i = 0; i < n; ++i) cur(i, 0) = rq_inverse(sp, cur(i, 0));
      continue;
    }
    const auto a_idx = pass_indices(l);
    const auto b_idx = transform_indices(l);
    Mat a(n, a_idx.size());
    for (size_t j = 0; j < a_idx.size(); ++j) a.col(j) = cur.col(a_idx[j]);
    const Mat raw = cond_[l].forward(params.segment(offsets_[l], sizes_[l]), a);
    Vec rbuf(ppc);
    for (long i = 0; i < n; ++i) {
      for (size_t j = 0; j < b_idx.size(); ++j) {
        rbuf = raw.row(i).segment(j * ppc, ppc);
        const RqSpline sp = rq_process(scfg_, rbuf.data());
        cur(i, b_idx[j]) = rq_inverse(sp, cur(i, b_idx[j]));
      }
    }
  }
  return cur;
}

Vec NsModel::log_prob(const Vec& params, const Mat& x) const {
  Vec logdet;
  const Mat z = forward_latent(params, x, &logdet);
  const double c = -0.5 * cfg_.d * std::log(2.0 * M_PI);
  Vec lp(x.rows());
  for (long i = 0; i < x.rows(); ++i)
    lp[i] = c - 0.5 * z.row(i).squaredNorm() + logdet[i];
  return lp;
}

double NsModel::nll_and_grad(const Vec& params, const Mat& x, Vec& grad) const {
  require_shape(params.size() == n_params_, "NsModel: parameter length mismatch");
  require_shape(x.cols() == cfg_.d, "NsModel: input dimension mismatch");
  const long n = x.rows();
  const int ppc = scfg_.param_count();
  const int nl = cfg_.n_layers;
  grad = Vec::Zero(n_params_);

  // Forward, caching everything the reverse sweep needs.
  struct LayerCache {
    MlpCache mlp;
    std::vector<RqSpline> splines;  // n * nb, row-major
    std::vector<RqEval> evals;
  };
  std::vector<LayerCache> caches(nl);
  Mat cur = x;
  Vec logdet = Vec::Zero(n);
  for (int l = 0; l < nl; ++l) {
    auto& lc = caches[l];
    if (cfg_.d == 1) {
      const RqSpline sp = rq_process(scfg_, params.data() + offsets_[l]);
      lc.splines.assign(1, sp);
      lc.evals.resize(n);
      for (long i = 0; i < n; ++i) {
        lc.evals[i] = rq_forward(sp, cur(i, 0));
        cur(i, 0) = lc.evals[i].y;
        logdet[i] += lc.evals[i].logdet;
      }
      continue;
    }
    const auto a_idx = pass_indices(l);
    const auto b_idx = transform_indices(l);
    const long nb = static_cast<long>(b_idx.size());
    Mat a(n, a_idx.size());
    for (size_t j = 0; j < a_idx.size(); ++j) a.col(j) = cur.col(a_idx[j]);
    const Mat raw = cond_[l].forward(params.segment(offsets_[l], sizes_[l]), a, nullptr, &lc.mlp);
    lc.splines.resize(n * nb);
    lc.evals.resize(n * nb);
    Vec rbuf(ppc);
    for (long i = 0; i < n; ++i) {
      for (long j = 0; j < nb; ++j) {
        rbuf = raw.row(i).segment(j * ppc, ppc);
        lc.splines[i * nb + j] = rq_process(scfg_, rbuf.data());
        lc.evals[i * nb + j] = rq_forward(lc.splines[i * nb + j], cur(i, b_idx[j]));
        cur(i, b_idx[j]) = lc.evals[i * nb + j].y;
        logdet[i] += lc.evals[i * nb + j].logdet;
      }
    }
  }

  const double c = 0.5 * cfg_.d * std::log(2.0 * M_PI);
  double loss = 0;
  for (long i = 0; i < n; ++i) {
    const double li = 0.5 * cur.row(i).squaredNorm() + c - logdet[i];
    if (!std::isfinite(li))
      throw DivergenceError("NsModel: non-finite per-sample loss at batch row", i);
    loss += li;
  }
  loss /= static_cast<double>(n);

  // Reverse sweep. dLoss/dz = z/n, dLoss/d(logdet_i) = -1/n.
  Mat zbar = cur / static_cast<double>(n);
  const double ldbar = -1.0 / static_cast<double>(n);
  for (int l = nl - 1; l >= 0; --l) {
    auto& lc = caches[l];
    if (cfg_.d == 1) {
      Vec raw_bar = Vec::Zero(ppc);
      for (long i = 0; i < n; ++i)
        zbar(i, 0) = rq_backward(scfg_, lc.splines[0], lc.evals[i], zbar(i, 0), ldbar,
                                 raw_bar.data());
      grad.segment(offsets_[l], sizes_[l]) += raw_bar;
      continue;
    }
    const auto a_idx = pass_indices(l);
    const auto b_idx = transform_indices(l);
    const long nb = static_cast<long>(b_idx.size());
    Mat raw_bar = Mat::Zero(n, nb * ppc);
    Vec rb(ppc);
    for (long i = 0; i < n; ++i) {
      for (long j = 0; j < nb; ++j) {
        rb.setZero();
        zbar(i, b_idx[j]) = rq_backward(scfg_, lc.splines[i * nb + j], lc.evals[i * nb + j],
                                        zbar(i, b_idx[j]), ldbar, rb.data());
        raw_bar.row(i).segment(j * ppc, ppc) = rb;
      }
    }
    Mat abar;
    Vec gl = cond_[l].backward(params.segment(offsets_[l], sizes_[l]), lc.mlp, raw_bar, &abar);
    grad.segment(offsets_[l], sizes_[l]) += gl;
    for (size_t j = 0; j < a_idx.size(); ++j) zbar.col(a_idx[j]) += abar.col(j);
  }
  return loss;
}

Mat NsModel::sample(const Vec& params, long n, Rng& rng) const {
  return inverse_latent(params, rng.normal_mat(n, cfg_.d));
}

TrainResult ns_train(const NsModel& model, Vec& params, const Mat& train_data,
                     const TrainOptions& opts) {
  require_shape(train_data.cols() == model.config().d, "ns_train: data dimension mismatch");
  Objective obj = [&](const Vec& p, const std::vector<int>& batch, Rng&, Vec& grad) {
    Mat xb(batch.size(), train_data.cols());
    for (size_t i = 0; i < batch.size(); ++i) xb.row(i) = train_data.row(batch[i]);
    Vec g;
    const double loss = model.nll_and_grad(p, xb, g);
    grad = g;
    return loss;
  };
  return train_loop(params, train_data.rows(), opts, obj);
}

}  // namespace probgen
