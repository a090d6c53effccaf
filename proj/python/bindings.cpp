#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "maco/checkpoint.hpp"
#include "maco/commands.hpp"
#include "maco/errors.hpp"
#include "maco/inference.hpp"
#include "maco/objectives.hpp"
#include "maco/ops.hpp"
#include "maco/train.hpp"

namespace py = pybind11;
using namespace maco;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
    Shape shape(a.shape(), a.shape() + a.ndim());
    return Tensor(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
    Array out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
    std::copy(t.values().begin(), t.values().end(), out.mutable_data());
    return out;
}

std::vector<Tensor> to_tensors(const std::vector<Array>& arrays) {
    std::vector<Tensor> out;
    out.reserve(arrays.size());
    for (const auto& a : arrays) out.push_back(to_tensor(a));
    return out;
}

RunConfig config_from(const py::object& cfg) {
    if (cfg.is_none()) return RunConfig{};
    const std::string text = py::module_::import("json").attr("dumps")(cfg).cast<std::string>();
    return config_from_json(nlohmann::json::parse(text));
}

py::object json_to_py(const nlohmann::json& j) {
    return py::module_::import("json").attr("loads")(j.dump());
}

std::vector<BoxAnnotation> boxes_from(const std::vector<std::tuple<std::size_t, std::size_t, std::size_t, std::size_t>>& b) {
    std::vector<BoxAnnotation> out;
    for (const auto& [x, y, w, h] : b) out.push_back({x, y, w, h, ""});
    return out;
}

py::dict sample_dict(const PairedSample& s) {
    py::list boxes;
    for (const auto& b : s.boxes) boxes.append(py::make_tuple(b.x, b.y, b.width, b.height, b.label));
    py::dict d;
    d["image"] = to_array(s.image);
    d["report"] = s.report;
    d["labels"] = s.labels;
    d["boxes"] = boxes;
    d["phrases"] = s.phrases;
    return d;
}

}  // namespace

PYBIND11_MODULE(_maco, m) {
    m.doc() = "Masked-contrastive vision-language pretraining on a synthetic corpus";

    py::register_exception<Error>(m, "Error");
    m.attr("CLASS_NAMES") = std::vector<std::string>(kClassNames.begin(), kClassNames.end());

    m.def("default_config", [] { return json_to_py(to_json(RunConfig{})); },
          "The default run configuration as a nested dict.");
    m.def("validate_config", [](const py::object& cfg) { return json_to_py(to_json(config_from(cfg))); },
          py::arg("config"), "Validate a (partial) config dict and return it with defaults filled in.");

    m.def("run_command",
          [](const std::string& name, const py::object& cfg) {
              std::ostringstream out, err;
              const RunConfig rc = config_from(cfg);
              int code;
              {
                  py::gil_scoped_release release;
                  code = run_command(name, rc, out, err);
              }
              return py::make_tuple(code, out.str(), err.str());
          },
          py::arg("name"), py::arg("config") = py::none(),
          "Run a CLI command in-process; returns (exit_code, stdout, stderr).");

    m.def("generate_sample",
          [](std::uint64_t seed, std::uint64_t index, const py::object& cfg) {
              return sample_dict(generate_sample(config_from(cfg).data.scene, seed, index));
          },
          py::arg("seed"), py::arg("index"), py::arg("config") = py::none());

    // Losses on plain arrays.
    m.def("softplus", &softplus_scalar, py::arg("x"));
    m.def("softmax", [](const Array& x, double tau) { return to_array(softmax(to_tensor(x), tau)); }, py::arg("x"),
          py::arg("tau") = 1.0);
    m.def("bilinear_upsample",
          [](const Array& a, std::size_t h, std::size_t w) { return to_array(bilinear_upsample(to_tensor(a), h, w)); },
          py::arg("map"), py::arg("height"), py::arg("width"));
    m.def("loss_infonce", [](const Array& logits, double tau) { return loss_infonce(to_tensor(logits), tau); },
          py::arg("logits"), py::arg("tau"));
    m.def("loss_masked_contrastive",
          [](const Array& logits, double tau, const Array& w) {
              return loss_masked_contrastive(to_tensor(logits), tau, to_tensor(w));
          },
          py::arg("logits"), py::arg("tau"), py::arg("weights"));

    // Metrics. Boxes are (x, y, width, height) tuples.
    m.def("metric_auc", [](const std::vector<double>& s, const std::vector<int>& y) { return metric_auc(s, y); },
          py::arg("scores"), py::arg("labels"));
    m.def("metric_cnr", [](const Array& map, const std::vector<std::tuple<std::size_t, std::size_t, std::size_t, std::size_t>>& b) {
        return metric_cnr(to_tensor(map), boxes_from(b));
    }, py::arg("map"), py::arg("boxes"));
    m.def("metric_miou", [](const Array& map, const std::vector<std::tuple<std::size_t, std::size_t, std::size_t, std::size_t>>& b) {
        return metric_miou(to_tensor(map), boxes_from(b));
    }, py::arg("map"), py::arg("boxes"));
    m.def("metric_pointing_game", [](const Array& map, const std::vector<std::tuple<std::size_t, std::size_t, std::size_t, std::size_t>>& b) {
        return metric_pointing_game(to_tensor(map), boxes_from(b));
    }, py::arg("map"), py::arg("boxes"));
    m.def("weight_map", [](const Array& head, double tau_w) { return to_array(export_weight_map(to_tensor(head), tau_w).map); },
          py::arg("head"), py::arg("tau_w") = kDefaultGroundingTemperature);

    py::class_<Model>(m, "Model")
        .def(py::init([](const py::object& cfg, std::uint64_t seed) {
                 return Model(config_from(cfg).model, Vocabulary::synthetic(), seed);
             }),
             py::arg("config") = py::none(), py::arg("seed") = 0)
        .def_static("load", [](const std::filesystem::path& p) { return model_from_checkpoint(load_checkpoint(p)); },
                    py::arg("path"))
        .def_property_readonly("tau", &Model::tau)
        .def_property_readonly("importance_weights", [](const Model& mo) { return to_array(mo.importance_weights()); })
        .def("parameter_names",
             [](const Model& mo) {
                 std::vector<std::string> names;
                 for (const auto& p : mo.params().items()) names.push_back(p.name);
                 return names;
             })
        .def("parameter", [](const Model& mo, const std::string& name) { return to_array(mo.params().get(name).value); },
             py::arg("name"))
        .def("embed_images",
             [](const Model& mo, const std::vector<Array>& images) {
                 const auto t = to_tensors(images);
                 Tensor out;
                 {
                     py::gil_scoped_release release;
                     out = embed_images(mo, t);
                 }
                 return to_array(out);
             },
             py::arg("images"))
        .def("embed_texts",
             [](const Model& mo, const std::vector<std::string>& texts) {
                 Tensor out;
                 {
                     py::gil_scoped_release release;
                     out = embed_texts(mo, texts);
                 }
                 return to_array(out);
             },
             py::arg("texts"))
        .def("zero_shot_scores",
             [](const Model& mo, const std::vector<Array>& images) {
                 const auto t = to_tensors(images);
                 const auto prompts = default_prompts();
                 return to_array(zero_shot_scores(mo, t, prompts));
             },
             py::arg("images"), "Per-class scores [n x classes] with the default prompt pairs.")
        .def("grounding_map",
             [](const Model& mo, const Array& image, const std::string& phrase, double tau_w) {
                 GroundingOptions opts;
                 opts.tau_w = tau_w;
                 return to_array(grounding_map(mo, to_tensor(image), phrase, opts).map);
             },
             py::arg("image"), py::arg("phrase"), py::arg("tau_w") = kDefaultGroundingTemperature);

    m.def("pretrain",
          [](const py::object& cfg, const std::filesystem::path& out_dir) {
              RunConfig rc = config_from(cfg);
              if (!out_dir.empty()) rc.out_dir = out_dir.string();
              const auto corpus = build_corpus(rc);
              const auto train = split_of(corpus, "train");
              TrainResult res = [&] {
                  py::gil_scoped_release release;
                  return pretrain(rc, train, out_dir);
              }();
              py::list epochs;
              for (const auto& e : res.epochs) {
                  py::dict d;
                  d["epoch"] = e.epoch;
                  d["loss_pretext"] = e.pretext;
                  d["loss_contrastive"] = e.contrastive;
                  d["loss_total"] = e.total;
                  d["tau"] = e.tau;
                  d["mean_weight"] = e.mean_weight;
                  epochs.append(d);
              }
              return py::make_tuple(std::move(res.model), epochs);
          },
          py::arg("config") = py::none(), py::arg("out_dir") = std::filesystem::path{},
          "Train on an in-memory corpus; returns (model, per-epoch records).");
}
