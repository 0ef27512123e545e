#include "tame/engine/losses.hpp"
#include "tame/harness/config.hpp"
#include "tame/harness/pipeline.hpp"
#include "tame/moe/prompt_moe.hpp"
#include "tame/vlm/dataset.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>

namespace py = pybind11;
using namespace tame;
using nlohmann::json;

namespace {

py::object to_py(const json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

json from_py(const py::object& o) {
    return json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

harness::ExperimentConfig make_config(const py::object& config, std::optional<std::uint64_t> seed) {
    harness::ExperimentConfig cfg = config.is_none() ? harness::ExperimentConfig{}
                                                     : harness::ExperimentConfig::from_json(from_py(config));
    if (seed) cfg.seed = *seed;
    cfg.validate();
    return cfg;
}

double scalar(const ad::Var& v) { return v.item(); }

}  // namespace

PYBIND11_MODULE(_tame, m) {
    m.doc() = "Mixture-of-prompts test-time adaptation on a toy dual encoder";

    // std::invalid_argument already maps to ValueError.

    m.def("default_config", [] { return to_py(harness::ExperimentConfig{}.to_json()); },
          "Default experiment configuration as a dict.");
    m.def("validate_config", [](const py::object& c) { return to_py(make_config(c, std::nullopt).to_json()); },
          py::arg("config"), "Fill defaults and validate; raises ValueError naming the bad field.");
    m.def("derive_seed", &harness::derive_seed, py::arg("seed"), py::arg("tag"));
    m.def("cell_id", &harness::cell_id, py::arg("overrides"));
    m.def(
        "axis_values",
        [](const py::object& c, const std::string& axis) { return harness::axis_values(make_config(c, std::nullopt), axis); },
        py::arg("config"), py::arg("axis"));

    py::class_<harness::Workspace>(m, "Workspace")
        .def(py::init([](const std::string& root, const py::object& config, std::optional<std::uint64_t> seed, bool quiet) {
                 return std::make_unique<harness::Workspace>(root, make_config(config, seed), quiet);
             }),
             py::arg("root"), py::arg("config") = py::none(), py::arg("seed") = py::none(), py::arg("quiet") = true)
        .def_property_readonly("root", &harness::Workspace::root)
        .def_property_readonly("config", [](const harness::Workspace& w) { return to_py(w.config().to_json()); })
        .def("gen_data", &harness::Workspace::gen_data, py::call_guard<py::gil_scoped_release>())
        .def(
            "train_backbone",
            [](harness::Workspace& w, bool surrogate) {
                py::gil_scoped_release nogil;
                w.train_backbone();
                if (surrogate) w.train_surrogate();
            },
            py::arg("surrogate") = false)
        .def(
            "warmstart",
            [](harness::Workspace& w) {
                py::gil_scoped_release nogil;
                w.warmstart(w.config().bank);
            })
        .def(
            "stats",
            [](harness::Workspace& w) {
                py::gil_scoped_release nogil;
                w.stats(w.config().bank, w.config().tame.pooling);
            })
        .def(
            "attack_cache",
            [](harness::Workspace& w, std::vector<double> epsilons) {
                py::gil_scoped_release nogil;
                attacks::AttackConfig a = w.config().attack;
                if (epsilons.empty()) epsilons.push_back(a.epsilon * 255.0);
                for (double e : epsilons) {
                    a.epsilon = e / 255.0;
                    w.attack_cache(a);
                }
            },
            py::arg("epsilons") = std::vector<double>{}, "Budgets in units of 1/255.")
        .def(
            "evaluate",
            [](harness::Workspace& w, const harness::Overrides& o, std::optional<std::string> out) {
                harness::CellOutput r;
                harness::ExperimentConfig cell = harness::apply_overrides(w.config(), o);
                cell.validate();
                {
                    py::gil_scoped_release nogil;
                    w.prepare_cell(cell);
                    r = harness::evaluate_cell(w, cell, harness::cell_id(o));
                    if (out) harness::write_cell(*out, cell, r);
                }
                return to_py(r.summary);
            },
            py::arg("overrides") = harness::Overrides{}, py::arg("out") = py::none(),
            "Evaluate one cell and return its summary; writes the cell when `out` is given.")
        .def(
            "sweep",
            [](harness::Workspace& w, const std::vector<std::string>& axes, const std::string& out,
               const harness::Overrides& base, int threads) {
                harness::SweepResult r;
                {
                    py::gil_scoped_release nogil;
                    r = harness::run_sweep(w, axes, base, out, threads);
                }
                py::dict d;
                d["cells"] = r.cells;
                d["failed"] = r.failed;
                return d;
            },
            py::arg("axes"), py::arg("out"), py::arg("overrides") = harness::Overrides{}, py::arg("threads") = 1);

    m.def(
        "report",
        [](const std::string& dir) {
            const auto r = harness::write_report(dir);
            py::dict d;
            d["markdown"] = r.markdown;
            d["missing"] = r.missing;
            d["failed"] = r.failed;
            return d;
        },
        py::arg("results"));
    m.def(
        "verify",
        [](const std::string& dir, double tol) {
            const auto r = harness::verify_results(dir, tol);
            py::dict d;
            d["checked"] = r.checked;
            d["problems"] = r.problems;
            return d;
        },
        py::arg("results"), py::arg("tolerance") = 1e-9);

    // Building blocks on plain arrays.
    m.def("balance_loss", [](const ad::Matrix& pbar) { return scalar(moe::balance_loss(ad::constant(pbar))); },
          py::arg("pbar"), "Balance loss of a 1 x E routing row.");
    m.def("diversity_loss", [](const ad::Matrix& experts) { return scalar(moe::diversity_loss(ad::constant(experts))); },
          py::arg("experts"), "Diversity loss of an E x F expert matrix.");
    m.def("warmup", &moe::warmup, py::arg("t"), py::arg("t_warm"));
    m.def("entropy_loss", [](const ad::Matrix& probs) { return scalar(engine::entropy_loss(ad::constant(probs))); },
          py::arg("probs"), "Entropy of the mean prediction over the rows.");
    m.def("row_entropies", &engine::row_entropies, py::arg("logits"));
    m.def("selection_size", &engine::selection_size, py::arg("tau"), py::arg("n"));
    m.def("select_views", &engine::select_views, py::arg("entropies"), py::arg("tau"));
    m.def(
        "augment",
        [](const ad::Matrix& image, int m, std::uint64_t seed) { return engine::augment(image, m, seed).views; },
        py::arg("image"), py::arg("views"), py::arg("seed"), "The image followed by `views` random crops.");
    m.def("class_names", &vlm::shape_class_names);
    m.def(
        "render_shape",
        [](int cls, std::uint64_t seed) {
            std::mt19937_64 rng(seed);
            return vlm::render_shape(cls, rng);
        },
        py::arg("shape_class"), py::arg("seed"));
}
