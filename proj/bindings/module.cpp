#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "shapreg/pipeline.hpp"

namespace py = pybind11;
using namespace shapreg;
using nlohmann::json;

namespace {

json to_json(const py::handle& obj) {
    const py::module_ pyjson = py::module_::import("json");
    const std::string text = pyjson.attr("dumps")(obj).cast<std::string>();
    return json::parse(text);
}

py::object to_python(const json& j) {
    const py::module_ pyjson = py::module_::import("json");
    return pyjson.attr("loads")(j.dump());
}

ModelHyper hyper_from_dict(const py::dict& options) {
    json j = json::object();
    for (const auto& item : options) j[py::str(item.first).cast<std::string>()] = to_json(item.second);
    ModelHyper hyper;
    for (const auto& [key, value] : j.items()) {
        if (key == "trees") hyper.trees = value.get<int>();
        else if (key == "max_depth") hyper.max_depth = value.get<int>();
        else if (key == "min_leaf") hyper.min_leaf = value.get<int>();
        else if (key == "feature_frac") hyper.feature_frac = value.get<double>();
        else if (key == "gamma") hyper.gamma = value.get<double>();
        else if (key == "lambda") hyper.lambda = value.get<double>();
        else if (key == "hidden") hyper.hidden = value.get<std::vector<int>>();
        else if (key == "epochs") hyper.epochs = value.get<int>();
        else if (key == "step") hyper.step = value.get<double>();
        else throw py::value_error("unknown model option '" + key + "'");
    }
    return hyper;
}

Dataset make_dataset(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                     std::vector<std::string> names,
                     const std::optional<std::string>& treatment) {
    Dataset ds;
    ds.features = x;
    ds.target = y;
    if (names.empty())
        for (Eigen::Index c = 0; c < x.cols(); ++c) names.push_back("x" + std::to_string(c));
    ds.names = std::move(names);
    if (treatment) ds.treatment_index = ds.column_index(*treatment);
    ds.validate();
    return ds;
}

BackgroundSet make_background(const Eigen::MatrixXd& rows,
                              const std::optional<Eigen::VectorXd>& weights) {
    BackgroundSet bg;
    bg.rows = rows;
    if (weights) {
        bg.weights = *weights;
    } else {
        bg.weights = Eigen::VectorXd::Constant(rows.rows(), 1.0 / static_cast<double>(rows.rows()));
    }
    bg.validate();
    return bg;
}

json merged_config(const py::dict& config) {
    json merged = config_to_json(RunConfig{});
    merged.merge_patch(to_json(config));
    return merged;
}

py::dict read_manifest(const std::string& outdir) {
    std::ifstream in(std::filesystem::path(outdir) / "manifest.json", std::ios::binary);
    if (!in.good()) throw py::value_error("missing manifest in '" + outdir + "'");
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return to_python(json::parse(buffer.str())).cast<py::dict>();
}

} // namespace

PYBIND11_MODULE(shapreg, m) {
    m.doc() = "Model-agnostic attribution with cross-fit surrogate regression";

    py::register_exception<Error>(m, "StageError", PyExc_RuntimeError);

    m.def(
        "simulate",
        [](Eigen::Index rows, const std::vector<double>& beta, double noise_ratio,
           std::uint64_t seed) {
            SimConfig cfg;
            cfg.m = rows;
            if (beta.size() != 4) throw py::value_error("beta needs exactly 4 entries");
            std::copy(beta.begin(), beta.end(), cfg.beta.begin());
            cfg.noise_ratio = noise_ratio;
            cfg.seed = seed;
            const Dataset ds = simulate_dgp(cfg);
            py::dict out;
            out["X"] = ds.features;
            out["y"] = ds.target;
            out["names"] = ds.names;
            out["treatment"] = ds.names.front();
            out["noise_sd"] = dgp_noise_sd(cfg);
            return out;
        },
        py::arg("m") = 1000, py::arg("beta") = std::vector<double>{1.0, 1.0, 1.0, 0.0},
        py::arg("noise_ratio") = 0.1, py::arg("seed") = 0,
        "Draw a synthetic treatment dataset; returns X, y, names, treatment, noise_sd.");

    py::class_<TrainedModel>(m, "Model", "A fitted prediction function")
        .def_static(
            "fit",
            [](const std::string& kind, const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
               std::vector<std::string> names, const py::dict& options, std::uint64_t seed) {
                const Dataset ds = make_dataset(x, y, std::move(names), std::nullopt);
                return fit_model(kind_from_tag(kind), ds, hyper_from_dict(options), seed);
            },
            py::arg("kind"), py::arg("X"), py::arg("y"),
            py::arg("names") = std::vector<std::string>{}, py::arg("options") = py::dict(),
            py::arg("seed") = 0,
            "Train a linear, forest, kernel, or network model on (X, y).")
        .def(
            "predict",
            [](const TrainedModel& model, const Eigen::MatrixXd& x) { return predict(model, x); },
            py::arg("X"))
        .def_property_readonly("kind",
                               [](const TrainedModel& model) { return kind_tag(model.kind); })
        .def_property_readonly("base_loss",
                               [](const TrainedModel& model) { return model.base_loss; })
        .def_property_readonly("id", [](const TrainedModel& model) { return model.id(); })
        .def("__repr__", [](const TrainedModel& model) {
            return "<shapreg.Model kind=" + kind_tag(model.kind) + ">";
        });

    m.def(
        "decompose",
        [](const TrainedModel& model, const Eigen::MatrixXd& rows,
           const Eigen::MatrixXd& background, int order,
           const std::optional<Eigen::VectorXd>& weights,
           const std::optional<std::vector<Eigen::Index>>& keep) {
            const BackgroundSet bg = make_background(background, weights);
            const CoalitionUniverse universe =
                keep ? group_others(rows.cols(), *keep) : full_universe(rows.cols());
            const ShapleyDecomposition dec =
                order == 1 ? shapley_values(model, rows, {}, bg, universe)
                           : shapley_taylor(model, rows, {}, bg, universe, order);
            py::dict out;
            out["phi0"] = dec.phi0;
            out["order"] = dec.order;
            out["labels"] = dec.term_labels;
            out["values"] = dec.values;
            return out;
        },
        py::arg("model"), py::arg("rows"), py::arg("background"), py::arg("order") = 2,
        py::arg("weights") = std::nullopt, py::arg("keep") = std::nullopt,
        "Exact per-row attribution against a weighted background; order 1 gives "
        "single-feature contributions, order >= 2 adds interaction terms.");

    m.def(
        "run",
        [](const py::dict& config) {
            const RunConfig cfg = config_from_json(merged_config(config));
            if (cmd_run(cfg) != 0) throw py::value_error("run failed");
            return read_manifest(cfg.outdir);
        },
        py::arg("config"),
        "Execute the full cross-fit workflow described by the config dict; writes "
        "the artifact bundle to config['outdir'] and returns the manifest.");

    m.def(
        "required_folds",
        [](Eigen::Index rows, double xi) { return static_cast<int>(required_folds(rows, xi)); },
        py::arg("m"), py::arg("xi"),
        "Fold count needed for nominal interval coverage at convergence rate xi.");

    m.def("default_config", [] { return to_python(config_to_json(RunConfig{})); },
          "The full configuration schema with its default values.");
}
