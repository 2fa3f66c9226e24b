// Python bindings. Images are float32 arrays of shape (N, H*W) or (H*W,),
// guide weights and regression data are float64.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ilalab/errors.hpp"
#include "ilalab/harness.hpp"

namespace py = pybind11;
using namespace ilalab;

namespace {

using F32 = py::array_t<float, py::array::c_style | py::array::forcecast>;
using F64 = py::array_t<double, py::array::c_style | py::array::forcecast>;

std::vector<float> vec(const F32& a) { return {a.data(), a.data() + a.size()}; }

template <typename T>
py::array_t<T> arr(const std::vector<T>& v) {
  return py::array_t<T>(static_cast<py::ssize_t>(v.size()), v.data());
}

py::array_t<float> images(const ImageSet& s) {
  py::array_t<float> a({static_cast<py::ssize_t>(s.size()), static_cast<py::ssize_t>(s.image_size())});
  std::copy(s.pixels.begin(), s.pixels.end(), a.mutable_data());
  return a;
}

AttackConfig attack_config(const std::string& norm, double epsilon, double alpha, int iterations, int samples,
                           int runs, std::uint64_t seed) {
  AttackConfig c;
  c.norm = parse_norm(norm);
  c.epsilon = epsilon;
  c.alpha = alpha;
  c.iterations = iterations;
  c.samples = samples;
  c.runs = runs;
  c.seed = seed;
  c.validate();
  return c;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.attr("__version__") = ILALAB_PY_VERSION;

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<DegenerateError>(m, "DegenerateError", base.ptr());

  m.def("zoo_architectures", &zoo_architectures);

  m.def(
      "synthetic_dataset",
      [](std::uint64_t seed, std::size_t train_count, std::size_t test_count) {
        SyntheticOptions o;
        o.seed = seed;
        o.train_count = train_count;
        o.test_count = test_count;
        const auto ds = generate_synthetic(o);
        return py::make_tuple(images(ds.train), arr(ds.train.labels), images(ds.test), arr(ds.test.labels));
      },
      py::arg("seed") = 2024, py::arg("train_count") = 6000, py::arg("test_count") = 1500,
      "Synthetic digit set as (train_x, train_y, test_x, test_y).");

  py::class_<Model>(m, "Model")
      .def_static("build", &Model::build, py::arg("arch"), py::arg("seed"))
      .def_static("load", [](const std::string& path) { return Model::load(path); })
      .def("save", [](const Model& self, const std::string& path) { self.save(path); })
      .def_property_readonly("id", &Model::id)
      .def_property_readonly("arch", &Model::arch_id)
      .def_property_readonly("input_size", &Model::input_size)
      .def_property_readonly("test_accuracy", [](const Model& self) { return self.stats.test_accuracy; })
      .def("predict", [](const Model& self, const F32& x) {
        const std::size_t n = x.ndim() == 1 ? 1 : static_cast<std::size_t>(x.shape(0));
        if (x.size() != static_cast<py::ssize_t>(n * self.input_size())) throw ShapeError("predict: wrong input size");
        return arr(self.predict_batch(std::span<const float>(x.data(), x.size()), n));
      });

  py::class_<SplitModel>(m, "SplitModel")
      .def(py::init([](const Model& model, std::optional<std::size_t> k) {
             return SplitModel(model, k.value_or(default_split(model.arch_id())));
           }),
           py::arg("model"), py::arg("split") = py::none())
      .def_property_readonly("split", &SplitModel::split)
      .def_property_readonly("feature_dim", &SplitModel::feature_dim)
      .def("feature", [](const SplitModel& self, const F32& x) { return arr(self.feature(vec(x))); });

  py::class_<Trajectory>(m, "Trajectory")
      .def_readonly("run", &Trajectory::run)
      .def_property_readonly("final_input", [](const Trajectory& t) { return arr(t.final_input); })
      .def_property_readonly("times", [](const Trajectory& t) {
        std::vector<std::uint32_t> v;
        for (const auto& s : t.samples) v.push_back(s.t);
        return v;
      })
      .def_property_readonly("losses", [](const Trajectory& t) {
        std::vector<float> v;
        for (const auto& s : t.samples) v.push_back(s.loss);
        return arr(v);
      })
      .def_property_readonly("features", [](const Trajectory& t) {
        py::array_t<float> a({static_cast<py::ssize_t>(t.samples.size()), static_cast<py::ssize_t>(t.feature_dim())});
        auto* p = a.mutable_data();
        for (const auto& s : t.samples) p = std::copy(s.feature.begin(), s.feature.end(), p);
        return a;
      });

  m.def(
      "ifgsm",
      [](const SplitModel& sm, const F32& x, int y, const std::string& norm, double epsilon, double alpha,
         int iterations, int samples) {
        return ifgsm(sm, vec(x), y, attack_config(norm, epsilon, alpha, iterations, samples, 1, 0));
      },
      py::arg("model"), py::arg("x"), py::arg("y"), py::arg("norm") = "linf", py::arg("epsilon") = 8.0 / 255,
      py::arg("alpha") = 0.0, py::arg("iterations") = 100, py::arg("samples") = 10);

  m.def(
      "pgd",
      [](const SplitModel& sm, const F32& x, int y, int runs, std::uint64_t seed, std::uint64_t input_index,
         const std::string& norm, double epsilon, double alpha, int iterations, int samples) {
        auto c = attack_config(norm, epsilon, alpha, iterations, samples, runs, seed);
        c.random_init = true;
        return pgd_multirun(sm, vec(x), y, c, input_index);
      },
      py::arg("model"), py::arg("x"), py::arg("y"), py::arg("runs") = 1, py::arg("seed") = 0,
      py::arg("input_index") = 0, py::arg("norm") = "linf", py::arg("epsilon") = 8.0 / 255, py::arg("alpha") = 0.0,
      py::arg("iterations") = 100, py::arg("samples") = 10);

  m.def(
      "linbp",
      [](const SplitModel& sm, const F32& x, int y, std::size_t linear_relus, const std::string& norm, double epsilon,
         double alpha, int iterations, int samples) {
        return linbp_attack(sm, vec(x), y, attack_config(norm, epsilon, alpha, iterations, samples, 1, 0),
                            linear_relus);
      },
      py::arg("model"), py::arg("x"), py::arg("y"), py::arg("linear_relus") = 2, py::arg("norm") = "linf",
      py::arg("epsilon") = 8.0 / 255, py::arg("alpha") = 0.0, py::arg("iterations") = 100, py::arg("samples") = 10);

  py::class_<DiscrepancyDataset>(m, "DiscrepancyDataset")
      .def_property_readonly("H",
                             [](const DiscrepancyDataset& d) {
                               py::array_t<double> a({static_cast<py::ssize_t>(d.H.rows),
                                                      static_cast<py::ssize_t>(d.H.cols)});
                               std::copy(d.H.values.begin(), d.H.values.end(), a.mutable_data());
                               return a;
                             })
      .def_property_readonly("r", [](const DiscrepancyDataset& d) { return arr(d.r); })
      .def_property_readonly("anchor", [](const DiscrepancyDataset& d) { return arr(d.anchor); });

  m.def("build_dataset", [](const std::vector<Trajectory>& runs) { return build_dataset(runs); }, py::arg("runs"));

  py::class_<DirectionalGuide>(m, "DirectionalGuide")
      .def_readonly("method", &DirectionalGuide::method)
      .def_property_readonly("w", [](const DirectionalGuide& g) { return arr(g.w); })
      .def_property_readonly("anchor", [](const DirectionalGuide& g) { return arr(g.anchor); })
      .def("is_zero", &DirectionalGuide::is_zero);

  m.def("fit_rr", &fit_rr, py::arg("data"), py::arg("lam") = 1e10);
  m.def("fit_rr_woodbury", &fit_rr_woodbury, py::arg("data"), py::arg("lam") = 1e10);
  m.def("fit_rr_approx", &fit_rr_approx, py::arg("data"));
  m.def("fit_elasticnet", &fit_elasticnet, py::arg("data"), py::arg("lambda1") = 0.05, py::arg("lambda2") = 1e10);
  m.def("fit_svr", &fit_svr, py::arg("data"), py::arg("C") = 1e-10, py::arg("e") = 0.0);
  m.def("ila_guide", &ila_guide, py::arg("trajectory"));

  m.def(
      "refine",
      [](const SplitModel& sm, const F32& x, const DirectionalGuide& g, const std::string& norm, double epsilon,
         double alpha, int iterations, bool normalized) {
        RefineConfig c;
        c.norm = parse_norm(norm);
        c.epsilon = epsilon;
        c.alpha = alpha;
        c.iterations = iterations;
        c.objective = normalized ? Objective::normalized : Objective::projection;
        c.validate();
        const auto xs = vec(x);
        return arr(normalized ? refine_normalized(sm, xs, g, c) : refine(sm, xs, g, c));
      },
      py::arg("model"), py::arg("x"), py::arg("guide"), py::arg("norm") = "linf", py::arg("epsilon") = 8.0 / 255,
      py::arg("alpha") = 0.0, py::arg("iterations") = 100, py::arg("normalized") = false);

  m.def(
      "discrepancy_magnitude",
      [](const SplitModel& sm, const F32& x, const F32& x_adv) { return discrepancy_magnitude(sm, vec(x), vec(x_adv)); },
      py::arg("model"), py::arg("x"), py::arg("x_adv"));

  m.def(
      "pearson", [](const F64& x, const F64& y) {
        return pearson(std::span<const double>(x.data(), x.size()), std::span<const double>(y.data(), y.size()));
      },
      py::arg("x"), py::arg("y"));

  m.def(
      "run_campaign",
      [](const std::map<std::string, std::string>& config, bool write_reports) {
        KeyValueConfig cfg;
        for (const auto& [k, v] : config) cfg.set(k, v);
        const Campaign c = Campaign::from_config(cfg);
        TransferReport r;
        {
          py::gil_scoped_release release;
          r = run_campaign(c);
          if (write_reports) emit_reports(r, c, c.out_dir);
        }
        py::list summaries;
        for (const auto& s : r.summaries) {
          py::dict d;
          d["method"] = s.method;
          d["epsilon"] = s.epsilon;
          d["victim_average"] = s.victim_average;
          d["source_success"] = s.source_success;
          d["mean_discrepancy"] = s.mean_discrepancy;
          d["std_discrepancy"] = s.std_discrepancy;
          summaries.append(d);
        }
        py::dict out;
        out["source"] = r.source;
        out["victims"] = r.victims;
        out["csv"] = report_csv(r);
        out["summaries"] = summaries;
        return out;
      },
      py::arg("config"), py::arg("write_reports") = false,
      "Runs a campaign from flat config keys; returns source, victims, csv text and per-method summaries.");
}
