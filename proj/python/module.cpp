#include <memory>
#include <optional>
#include <string>

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "sgtm/errors.hpp"
#include "sgtm/eval.hpp"
#include "sgtm/experiment.hpp"
#include "sgtm/run_io.hpp"
#include "sgtm/trainer.hpp"

namespace py = pybind11;
using namespace sgtm;

namespace {

py::object to_py(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

nlohmann::json from_py(const py::handle& o) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

nlohmann::json losses_json(const EvalLosses& l) {
  return {{"forget", l.forget}, {"retain", l.retain}, {"related", l.related}};
}

nlohmann::json metrics_json(const MetricsRow& m) {
  return {{"step", m.step},
          {"tokens_retain", m.tokens_retain},
          {"tokens_forget", m.tokens_forget},
          {"flops", m.flops},
          {"loss_retain_test", m.loss_retain_test},
          {"loss_forget_test", m.loss_forget_test},
          {"loss_related_test", m.loss_related_test}};
}

py::dict params_dict(const ParamSet<float>& params) {
  py::dict out;
  for (const auto& e : params) {
    py::array_t<float> a(std::vector<py::ssize_t>(e.value.shape().begin(), e.value.shape().end()));
    std::copy(e.value.raw(), e.value.raw() + e.value.numel(), a.mutable_data());
    out[py::str(e.path)] = a;
  }
  return out;
}

struct Experiment {
  ExperimentConfig config;
  std::shared_ptr<const ExperimentData> data;
};

struct Run {
  ExperimentConfig config;
  std::shared_ptr<const ExperimentData> data;
  RunRecord record;
  Transformer<float> model;

  Transformer<float> view(bool ablated) const {
    return ablated ? reported_model(model, config.train_plan()) : model;
  }
};

Run train_run(const Experiment& ex, const std::optional<std::string>& method) {
  ExperimentConfig c = ex.config;
  if (method) c.train.method = method_from_string(*method);
  py::gil_scoped_release release;
  if (c.precision == "f64") {
    TrainedRun<double> r = train_experiment<double>(c, *ex.data);
    return {c, ex.data, std::move(r.record), r.model.cast<float>()};
  }
  TrainedRun<float> r = train_experiment<float>(c, *ex.data);
  return {c, ex.data, std::move(r.record), std::move(r.model)};
}

}  // namespace

PYBIND11_MODULE(_sgtm, m) {
  m.doc() = "Selective gradient masking: training, ablation and analysis";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_RuntimeError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);

  py::class_<ExperimentConfig>(m, "Config")
      .def_static("load", &ExperimentConfig::load, py::arg("path"))
      .def_static("from_dict", [](const py::dict& d) { return ExperimentConfig::from_json(from_py(d)); })
      .def("to_dict", [](const ExperimentConfig& c) { return to_py(c.to_json()); })
      .def("hash", &ExperimentConfig::hash)
      .def("validate", &ExperimentConfig::validate)
      .def("with_undiscovered_rate", &with_undiscovered_rate, py::arg("rate"))
      .def("with_tpr_fpr", &with_tpr_fpr, py::arg("tpr"), py::arg("fpr"))
      .def("with_size",
           [](const ExperimentConfig& c, std::size_t n_layers, std::size_t d_model, std::size_t d_mlp,
              std::size_t n_heads) { return with_size(c, {n_layers, d_model, d_mlp, n_heads}); },
           py::arg("n_layers"), py::arg("d_model"), py::arg("d_mlp"), py::arg("n_heads"))
      .def("with_method",
           [](ExperimentConfig c, const std::string& method) {
             c.train.method = method_from_string(method);
             return c;
           },
           py::arg("method"))
      .def("designation_counts", [](const ExperimentConfig& c) {
        const ParamDesignation d = build_designation(c.model, c.partition);
        return py::dict(py::arg("forget") = d.count(Tag::kForget), py::arg("retain") = d.count(Tag::kRetain),
                        py::arg("joint") = d.count(Tag::kJoint));
      });

  py::class_<Experiment>(m, "Experiment")
      .def(py::init([](const ExperimentConfig& c, const std::optional<std::filesystem::path>& cache) {
             c.validate();
             py::gil_scoped_release release;
             return Experiment{c, std::make_shared<const ExperimentData>(build_experiment_data(c, cache))};
           }),
           py::arg("config"), py::arg("cache_dir") = py::none())
      .def_property_readonly("config", [](const Experiment& e) { return e.config; })
      .def_property_readonly("shared_tokens", [](const Experiment& e) { return e.data->shared_tokens; })
      .def_property_readonly("n_train_examples", [](const Experiment& e) { return e.data->train.size(); })
      .def("train", &train_run, py::arg("method") = py::none());

  py::class_<Run>(m, "Run")
      .def_property_readonly("method", [](const Run& r) { return r.record.method; })
      .def_property_readonly("n_params", [](const Run& r) { return r.record.n_params; })
      .def_property_readonly("diverged", [](const Run& r) { return r.record.diverged; })
      .def_property_readonly("tokens_forget_unlabeled", [](const Run& r) { return r.record.tokens_forget_unlabeled; })
      .def_property_readonly("metrics",
                             [](const Run& r) {
                               nlohmann::json rows = nlohmann::json::array();
                               for (const MetricsRow& m : r.record.metrics) rows.push_back(metrics_json(m));
                               return to_py(rows);
                             })
      .def("params", [](const Run& r, bool ablated) { return params_dict(r.view(ablated).params()); },
           py::arg("ablated") = false)
      .def("evaluate",
           [](const Run& r, bool ablated, const std::optional<std::vector<double>>& bias) {
             return to_py(losses_json(evaluate(r.view(ablated), r.data->eval, bias ? &*bias : nullptr)));
           },
           py::arg("ablated") = true, py::arg("bias") = py::none())
      .def("calibrate",
           [](const Run& r, std::optional<double> alpha) {
             CalibrationOptions o = r.config.analysis.calibration;
             if (alpha) o.alpha = *alpha;
             const Transformer<float> v = r.view(true);
             CalibrationResult c;
             {
               py::gil_scoped_release release;
               c = calibrate(v, r.data->eval, o);
             }
             return to_py(c.to_json());
           },
           py::arg("alpha") = py::none())
      .def("leakage",
           [](const Run& r, const std::vector<const Run*>& baselines) {
             std::vector<const RunRecord*> recs;
             for (const Run* b : baselines) recs.push_back(&b->record);
             return to_py(leakage(r.record, baseline_curve(recs)).to_json());
           },
           py::arg("baselines"))
      .def("save_checkpoint",
           [](const Run& r, const std::filesystem::path& path, bool ablated) {
             write_checkpoint(path, r.config.model, r.record.partition, r.view(ablated).params(),
                              r.record.final_metrics().step, r.record.method,
                              {{"experiment", r.config.to_json()}, {"ablated", ablated}});
           },
           py::arg("path"), py::arg("ablated") = false);

  m.def("leakage",
        [](double forget_loss, double undiscovered_tokens, const std::vector<std::pair<double, double>>& curve) {
          std::vector<BaselinePoint> pts;
          for (auto [t, l] : curve) pts.push_back({t, l});
          return to_py(leakage(forget_loss, undiscovered_tokens, pts).to_json());
        },
        py::arg("forget_loss"), py::arg("undiscovered_tokens"), py::arg("curve"),
        "curve: (forget tokens, forget loss) pairs of filtered baselines");
  m.def("fit_scaling",
        [](const std::vector<std::pair<double, double>>& points) {
          const ScalingFit f = fit_scaling(points);
          return py::dict(py::arg("alpha") = f.alpha, py::arg("beta") = f.beta, py::arg("residual") = f.residual,
                          py::arg("n_points") = f.n_points, py::arg("low_confidence") = f.low_confidence);
        },
        py::arg("points"), "points: (compute, loss) pairs; fits loss = alpha * compute^-beta");
  m.def("compute_penalty",
        [](double loss, double compute, double alpha, double beta) {
          ScalingFit f;
          f.alpha = alpha;
          f.beta = beta;
          return compute_penalty(loss, compute, f);
        },
        py::arg("loss"), py::arg("compute"), py::arg("alpha"), py::arg("beta"));
  m.def("read_checkpoint", [](const std::filesystem::path& path) {
    const Checkpoint c = read_checkpoint(path);
    return py::dict(py::arg("header") = to_py(c.header), py::arg("step") = c.step, py::arg("method") = c.method,
                    py::arg("params") = params_dict(c.params));
  });
  m.attr("__version__") = code_version();
}
