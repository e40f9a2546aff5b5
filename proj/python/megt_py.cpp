#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "megt/attention.hpp"
#include "megt/checkpoint.hpp"
#include "megt/cli.hpp"
#include "megt/data.hpp"
#include "megt/errors.hpp"
#include "megt/metrics.hpp"
#include "megt/model.hpp"
#include "megt/train.hpp"

namespace py = pybind11;
using namespace megt;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  if (a.ndim() == 1) {
    Tensor t(1, a.shape(0));
    std::copy_n(a.data(), a.size(), t.values().begin());
    return t;
  }
  if (a.ndim() != 2) throw ShapeError("expected a 1-D or 2-D array, got " + std::to_string(a.ndim()) + " dimensions");
  Tensor t(a.shape(0), a.shape(1));
  std::copy_n(a.data(), a.size(), t.values().begin());
  return t;
}

Array to_array(const Tensor& t) {
  Array a({t.rows(), t.cols()});
  std::copy(t.values().begin(), t.values().end(), a.mutable_data());
  return a;
}

py::dict metrics_dict(const EvalResult& r) {
  py::dict d;
  d["accuracy"] = r.accuracy;
  d["recall_macro"] = r.recall_macro;
  d["f1_macro"] = r.f1_macro;
  d["auc"] = r.auc ? py::cast(*r.auc) : py::none();
  d["n"] = r.n;
  d["confusion"] = r.confusion;
  return d;
}

ModelConfig config_from(const py::dict& kw) {
  ModelConfig c;
  for (const auto& [k, v] : kw) {
    std::string value = py::str(v);
    if (py::isinstance<py::bool_>(v)) value = v.cast<bool>() ? "true" : "false";
    c.set(k.cast<std::string>(), value);
  }
  return c;
}

}  // namespace

PYBIND11_MODULE(_megt, m) {
  m.doc() = "Dual-resolution multiple-instance classifier with Nystrom attention";

  // Translators are tried newest first, so the base class goes first.
  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  py::class_<Bag>(m, "Bag")
      .def(py::init([](const Array& low, const Array& high, std::size_t label, std::string id) {
             Bag b{to_tensor(low), to_tensor(high), label, std::move(id)};
             b.validate();
             return b;
           }),
           py::arg("low"), py::arg("high"), py::arg("label") = 0, py::arg("id") = "")
      .def_property_readonly("low", [](const Bag& b) { return to_array(b.low); })
      .def_property_readonly("high", [](const Bag& b) { return to_array(b.high); })
      .def_readwrite("label", &Bag::label)
      .def_readwrite("id", &Bag::id)
      .def("__repr__", [](const Bag& b) {
        return "Bag(id='" + b.id + "', low=" + b.low.shape_string() + ", high=" + b.high.shape_string() +
               ", label=" + std::to_string(b.label) + ")";
      });

  m.def(
      "synthesize",
      [](const std::string& task, std::size_t bags, std::uint64_t seed, std::size_t d, std::size_t n_low_min,
         std::size_t n_low_max, std::size_t children) {
        SynthSpec s;
        s.task = parse_task(task);
        s.bags = bags;
        s.seed = seed;
        s.d = d;
        s.n_low_min = n_low_min;
        s.n_low_max = n_low_max;
        s.children_per_low = children;
        return generate_synthetic(s).bags;
      },
      py::arg("task") = "cross-scale", py::arg("bags") = 600, py::arg("seed") = 7, py::arg("d") = 64,
      py::arg("n_low_min") = SynthSpec{}.n_low_min, py::arg("n_low_max") = SynthSpec{}.n_low_max,
      py::arg("children") = 4);
  m.def("read_bag", [](const std::string& p) { return read_bag(p); });
  m.def("write_bag", [](const Bag& b, const std::string& p) { write_bag(b, p); });

  py::class_<Model>(m, "Model")
      .def(py::init([](const py::kwargs& kw) { return Model(config_from(kw)); }))
      .def_static("load", [](const std::string& p) { return load_checkpoint(p); })
      .def("save", [](Model& self, const std::string& p) { save_checkpoint(self, p); })
      .def("config", [](const Model& self) {
        py::dict d;
        for (const std::string& k : ModelConfig::keys()) d[py::str(k)] = self.config().get(k);
        return d;
      })
      .def("parameter_count", &Model::parameter_count)
      .def("parameter_names", &Model::parameter_names)
      .def("predict_proba", [](Model& self, const Bag& b) { return to_array(predict_probs(self, b)); })
      .def(
          "fit",
          [](Model& self, const std::vector<Bag>& train, const std::vector<Bag>& val,
             const std::function<void(std::size_t, double, double)>& on_epoch) {
            const History h = fit(self, train, val, [&](const EpochRecord& r) {
              if (on_epoch) on_epoch(r.epoch, r.train_loss, r.val_loss);
            });
            py::list epochs;
            for (const EpochRecord& r : h.epochs) {
              py::dict e;
              e["epoch"] = r.epoch;
              e["train_loss"] = r.train_loss;
              e["val_loss"] = r.val_loss;
              e["val_accuracy"] = r.val_accuracy;
              epochs.append(e);
            }
            py::dict out;
            out["best_epoch"] = h.best_epoch;
            out["best_val_loss"] = h.best_val_loss;
            out["stopped_early"] = h.stopped_early;
            out["epochs"] = epochs;
            return out;
          },
          py::arg("train"), py::arg("val"), py::arg("on_epoch") = nullptr)
      .def("evaluate", [](Model& self, const std::vector<Bag>& bags) { return metrics_dict(evaluate(self, bags)); });

  m.def(
      "attention",
      [](const Array& x, const Array& w_q, const Array& w_k, const Array& w_v, const Array& w_o, std::size_t heads,
         std::optional<std::size_t> landmarks, std::size_t pinv_iters) {
        AttentionParams p{to_tensor(w_q), to_tensor(w_k), to_tensor(w_v), to_tensor(w_o)};
        ad::Tape tape(false);
        const ad::Var xv = tape.constant(to_tensor(x));
        const AttentionVars v = bind(tape, p);
        const MhaOutput out =
            landmarks ? nystrom_attention(xv, v, heads, {*landmarks, pinv_iters}) : exact_mha(xv, v, heads);
        return to_array(out.output.value());
      },
      py::arg("x"), py::arg("w_q"), py::arg("w_k"), py::arg("w_v"), py::arg("w_o"), py::arg("heads") = 1,
      py::arg("landmarks") = py::none(), py::arg("pinv_iters") = 6,
      "Multi-head self-attention; exact unless `landmarks` is given.");
  m.def(
      "pinv", [](const Array& a, std::size_t iters) { return to_array(pinv_iterative(to_tensor(a), iters)); },
      py::arg("a"), py::arg("iters") = 6);

  m.def("auc", [](const std::vector<double>& s, const std::vector<std::size_t>& y) { return auc_rank(s, y); });
  m.def("confusion_metrics", [](const std::vector<std::size_t>& p, const std::vector<std::size_t>& y,
                                std::size_t classes) { return metrics_dict(confusion_metrics(p, y, classes)); });

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        const int code = run_cli(args, out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      "Runs the command-line interface in-process; returns (exit code, stdout, stderr).");
}
