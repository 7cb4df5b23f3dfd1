// SPDX-License-Identifier: Apache-2.0
#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "probgen/checkpoint.hpp"
#include "probgen/dataset.hpp"
#include "probgen/ddpm.hpp"
#include "probgen/evaluation.hpp"
#include "probgen/flow_matching.hpp"
#include "probgen/harness.hpp"
#include "probgen/nn.hpp"
#include "probgen/spline_flow.hpp"

namespace py = pybind11;
using namespace probgen;

namespace {

TrainOptions make_train_options(long steps, int batch, double lr, uint64_t seed,
                                double seconds) {
  TrainOptions opts;
  opts.steps = steps;
  opts.max_seconds = seconds;
  opts.batch_size = batch;
  opts.adam.lr = lr;
  opts.seed = seed;
  return opts;
}

}  // namespace

PYBIND11_MODULE(_probgen, m) {
  m.doc() = "Benchmark suite for spline-flow, flow-matching and diffusion models";

  // ------------------------------------------------------------------ data
  m.def(
      "random_mode_means",
      [](int d, int n_modes, double half_width, double min_separation, uint64_t seed) {
        const auto means = random_mode_means(d, n_modes, half_width, min_separation, seed);
        Mat out(static_cast<long>(means.size()), d);
        for (size_t i = 0; i < means.size(); ++i) out.row(static_cast<long>(i)) = means[i];
        return out;
      },
      py::arg("d"), py::arg("n_modes"), py::arg("half_width") = 8.0,
      py::arg("min_separation") = 6.0, py::arg("seed") = 0,
      "Mode means as a (n_modes x d) matrix");

  m.def(
      "gen_gmm",
      [](const Mat& means, const std::vector<double>& weights, uint64_t seed, long n) {
        GmmSpec spec;
        spec.dim = static_cast<int>(means.cols());
        for (long i = 0; i < means.rows(); ++i) spec.means.push_back(means.row(i).transpose());
        spec.weights = weights;
        spec.seed = seed;
        std::vector<int> labels;
        Dataset ds = gen_gmm(spec, n, &labels);
        return py::make_tuple(ds.samples, labels);
      },
      py::arg("means"), py::arg("weights"), py::arg("seed"), py::arg("n"),
      "Draw GMM samples from (n_modes x d) means; returns (samples, mode_labels)");

  m.def(
      "split_rows",
      [](const Mat& samples, double test_fraction, uint64_t seed) {
        Dataset ds;
        ds.samples = samples;
        auto [train, test] = split(ds, test_fraction, seed);
        return py::make_tuple(train.samples, test.samples);
      },
      py::arg("samples"), py::arg("test_fraction") = 0.1, py::arg("seed") = 0);

  m.def(
      "standardize",
      [](const Mat& samples) {
        Dataset ds;
        ds.samples = samples;
        auto [z, stats] = standardize(ds);
        return py::make_tuple(z.samples, stats.mean, stats.stddev);
      },
      py::arg("samples"), "Column-wise z-scoring; returns (z, mean, stddev)");

  m.def(
      "destandardize",
      [](const Mat& samples, const Vec& mean, const Vec& stddev) {
        StandardizationStats st{mean, stddev};
        return destandardize(samples, st);
      },
      py::arg("samples"), py::arg("mean"), py::arg("stddev"));

  m.def("gen_dihedral_surrogate",
        [](long n, uint64_t seed) { return gen_dihedral_surrogate(n, seed).samples; },
        py::arg("n"), py::arg("seed"), "Von Mises stand-in for a dihedral trajectory (degrees)");

  m.def("ingest_dihedrals",
        [](const std::string& path) { return ingest_dihedrals(path).samples; }, py::arg("path"));

  m.def("write_csv",
        [](const Mat& samples, const std::string& path) {
          Dataset ds;
          ds.samples = samples;
          write_dataset_csv(ds, path);
        },
        py::arg("samples"), py::arg("path"));

  m.def("read_csv", [](const std::string& path) { return read_dataset_csv(path).samples; },
        py::arg("path"));

  // ---------------------------------------------------------------- models
  py::class_<NsModel>(m, "NsFlow")
      .def(py::init([](int d, int layers, int bins, double tail_bound, int hidden, int depth) {
             NsConfig c;
             c.d = d;
             c.n_layers = layers;
             c.bins = bins;
             c.tail_bound = tail_bound;
             c.hidden_width = hidden;
             c.depth = depth;
             return NsModel(c);
           }),
           py::arg("d"), py::arg("layers") = 8, py::arg("bins") = 8, py::arg("tail_bound") = 3.0,
           py::arg("hidden") = 64, py::arg("depth") = 2)
      .def_property_readonly("param_count", &NsModel::param_count)
      .def("init_params",
           [](const NsModel& self, uint64_t seed) {
             Rng rng(seed);
             return self.init_params(rng);
           },
           py::arg("seed") = 0)
      .def("log_prob", &NsModel::log_prob, py::arg("params"), py::arg("x"))
      .def("forward",
           [](const NsModel& self, const Vec& params, const Mat& x) {
             Vec logdet;
             Mat z = self.forward_latent(params, x, &logdet);
             return py::make_tuple(z, logdet);
           },
           py::arg("params"), py::arg("x"), "Data to latent; returns (z, logdet)")
      .def("inverse", &NsModel::inverse_latent, py::arg("params"), py::arg("z"))
      .def("sample",
           [](const NsModel& self, const Vec& params, long n, uint64_t seed) {
             Rng rng(seed);
             return self.sample(params, n, rng);
           },
           py::arg("params"), py::arg("n"), py::arg("seed") = 0)
      .def("train",
           [](const NsModel& self, Vec params, const Mat& data, long steps, int batch, double lr,
              uint64_t seed, double seconds) {
             TrainResult res =
                 ns_train(self, params, data, make_train_options(steps, batch, lr, seed, seconds));
             return py::make_tuple(params, res.loss_trace);
           },
           py::arg("params"), py::arg("data"), py::arg("steps") = 10000, py::arg("batch") = 128,
           py::arg("lr") = 1e-3, py::arg("seed") = 0, py::arg("seconds") = 0.0,
           "Returns (trained_params, loss_trace)");

  py::class_<CfmModel>(m, "FlowMatching")
      .def(py::init([](int d, int hidden, int depth, double sigma_min, const std::string& coupling,
                       int ode_steps) {
             CfmConfig c;
             c.d = d;
             c.hidden_width = hidden;
             c.depth = depth;
             c.sigma_min = sigma_min;
             c.coupling = coupling_from_name(coupling);
             c.ode_steps = ode_steps;
             return CfmModel(c);
           }),
           py::arg("d"), py::arg("hidden") = 64, py::arg("depth") = 2, py::arg("sigma_min") = 1e-2,
           py::arg("coupling") = "independent", py::arg("ode_steps") = 50)
      .def_property_readonly("param_count", &CfmModel::param_count)
      .def("init_params",
           [](const CfmModel& self, uint64_t seed) {
             Rng rng(seed);
             return self.init_params(rng);
           },
           py::arg("seed") = 0)
      .def("sample",
           [](const CfmModel& self, const Vec& params, long n, uint64_t seed, int steps) {
             Rng rng(seed);
             return self.sample(params, n, rng, steps);
           },
           py::arg("params"), py::arg("n"), py::arg("seed") = 0, py::arg("steps") = -1)
      .def("log_prob",
           [](const CfmModel& self, const Vec& params, const Mat& x, int n_probe, uint64_t seed,
              int steps) {
             Rng rng(seed);
             return self.log_prob(params, x, n_probe, rng, steps);
           },
           py::arg("params"), py::arg("x"), py::arg("n_probe") = 64, py::arg("seed") = 0,
           py::arg("steps") = -1)
      .def("train",
           [](const CfmModel& self, Vec params, const Mat& data, long steps, int batch, double lr,
              uint64_t seed, double seconds) {
             TrainResult res = cfm_train(self, params, data,
                                         make_train_options(steps, batch, lr, seed, seconds));
             return py::make_tuple(params, res.loss_trace);
           },
           py::arg("params"), py::arg("data"), py::arg("steps") = 10000, py::arg("batch") = 128,
           py::arg("lr") = 1e-3, py::arg("seed") = 0, py::arg("seconds") = 0.0);

  py::class_<DdpmModel>(m, "Ddpm")
      .def(py::init([](int d, int hidden, int depth, int T, double beta_lo, double beta_hi) {
             DdpmConfig c;
             c.d = d;
             c.hidden_width = hidden;
             c.depth = depth;
             c.T = T;
             c.beta_lo = beta_lo;
             c.beta_hi = beta_hi;
             return DdpmModel(c);
           }),
           py::arg("d"), py::arg("hidden") = 64, py::arg("depth") = 2, py::arg("T") = 1000,
           py::arg("beta_lo") = 1e-4, py::arg("beta_hi") = 2e-2)
      .def_property_readonly("param_count", &DdpmModel::param_count)
      .def_property_readonly("alpha_bar",
                             [](const DdpmModel& self) { return self.schedule().alpha_bar; })
      .def("init_params",
           [](const DdpmModel& self, uint64_t seed) {
             Rng rng(seed);
             return self.init_params(rng);
           },
           py::arg("seed") = 0)
      .def("q_sample",
           [](const DdpmModel& self, const Mat& x0, int t, const Mat& noise) {
             return self.q_sample(x0, t, noise);
           },
           py::arg("x0"), py::arg("t"), py::arg("noise"))
      .def("sample",
           [](const DdpmModel& self, const Vec& params, long n, uint64_t seed) {
             Rng rng(seed);
             return self.sample(params, n, rng);
           },
           py::arg("params"), py::arg("n"), py::arg("seed") = 0)
      .def("pf_ode_sample",
           [](const DdpmModel& self, const Vec& params, long n, int steps, uint64_t seed) {
             Rng rng(seed);
             return self.pf_ode_sample(params, n, steps, rng);
           },
           py::arg("params"), py::arg("n"), py::arg("steps") = 1000, py::arg("seed") = 0)
      .def("train",
           [](const DdpmModel& self, Vec params, const Mat& data, long steps, int batch,
              double lr, uint64_t seed, double seconds) {
             TrainResult res = ddpm_train(self, params, data,
                                          make_train_options(steps, batch, lr, seed, seconds));
             return py::make_tuple(params, res.loss_trace);
           },
           py::arg("params"), py::arg("data"), py::arg("steps") = 10000, py::arg("batch") = 128,
           py::arg("lr") = 1e-3, py::arg("seed") = 0, py::arg("seconds") = 0.0);

  // ------------------------------------------------------------ evaluation
  m.def(
      "pca_fit",
      [](const Mat& train) {
        PcaBasis b = pca_fit(train);
        return py::make_tuple(b.mean, Mat(b.components), Vec(b.explained_variance));
      },
      py::arg("train"), "Returns (mean, components[d x 2], explained_variance)");

  m.def(
      "evaluate_samples",
      [](const Mat& train, const Mat& test, const Mat& generated, int bins) {
        EvalOptions opts;
        opts.nx = bins;
        opts.ny = bins;
        EvalResult r = evaluate_samples(train, test, generated, opts);
        return py::make_tuple(r.kld, r.kld_floor);
      },
      py::arg("train"), py::arg("test"), py::arg("generated"), py::arg("bins") = 50,
      "PCA + binned KLD protocol; returns (kld, train_vs_test_floor)");

  m.def(
      "estimate_delta_f",
      [](const Mat& proj2d, double cutoff, double beta) {
        Boundary b = boundary_from_projection(proj2d);
        Histogram2D h = histogram2d(proj2d, BinSpec::from_reference(proj2d));
        FreeEnergyEstimate est = mode_delta_f(h, b, cutoff, beta);
        return py::make_tuple(est.delta_f, est.z1, est.z2);
      },
      py::arg("points2d"), py::arg("cutoff") = 0.0374, py::arg("beta") = 1.0,
      "Two-domain free-energy difference of projected samples");

  m.def("r_squared", &r_squared, py::arg("true_est_pairs"));

  // ------------------------------------------------------------ checkpoints
  py::class_<AnyModel>(m, "LoadedModel")
      .def_property_readonly("family", &AnyModel::family)
      .def_property_readonly("dim", &AnyModel::dim)
      .def_property_readonly("param_count", &AnyModel::param_count)
      .def("sample", &AnyModel::sample, py::arg("n"), py::arg("seed") = 0, py::arg("steps") = -1,
           py::arg("pf_ode") = false);

  m.def("load_model", [](const std::string& path) { return AnyModel(load_checkpoint(path)); },
        py::arg("path"));

  m.attr("__version__") = "0.1.0";
}
