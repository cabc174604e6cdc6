#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>
#include <string>
#include <vector>

#include "mlens/checkpoint.hpp"
#include "mlens/common.hpp"
#include "mlens/counterfactual.hpp"
#include "mlens/distshift.hpp"
#include "mlens/interventions.hpp"
#include "mlens/model.hpp"
#include "mlens/numerics.hpp"
#include "mlens/synthlab.hpp"

namespace py = pybind11;
using namespace mlens;

namespace {

Matrix to_matrix(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) throw ConfigError("matrix must be non-empty");
  Matrix m(static_cast<int>(rows.size()), static_cast<int>(rows[0].size()));
  for (size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != rows[0].size()) throw ConfigError("ragged matrix rows");
    for (size_t j = 0; j < rows[i].size(); ++j) m(static_cast<int>(i), static_cast<int>(j)) = rows[i][j];
  }
  return m;
}

}  // namespace

PYBIND11_MODULE(_modal_lens, m) {
  m.doc() = "Core operations of the modal-lens toolkit";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("num_layers", &ModelConfig::num_layers)
      .def_readwrite("num_heads", &ModelConfig::num_heads)
      .def_readwrite("model_dim", &ModelConfig::model_dim)
      .def_readwrite("ffn_dim", &ModelConfig::ffn_dim)
      .def_readwrite("vocab_size", &ModelConfig::vocab_size)
      .def_readwrite("max_seq_len", &ModelConfig::max_seq_len)
      .def_readwrite("num_visual_slots", &ModelConfig::num_visual_slots)
      .def_readwrite("num_audio_slots", &ModelConfig::num_audio_slots)
      .def_readwrite("feature_dim", &ModelConfig::feature_dim)
      .def_readwrite("vision_only", &ModelConfig::vision_only)
      .def("to_json", &ModelConfig::to_json)
      .def_static("from_json", &ModelConfig::from_json);

  py::class_<Parameters>(m, "Parameters")
      .def_readonly("config", &Parameters::config)
      .def_static(
          "init", [](const ModelConfig& cfg, uint64_t seed) { return Parameters::init(cfg, Rng(seed)); },
          py::arg("config"), py::arg("seed"));

  m.def("save_checkpoint", &save_checkpoint, py::arg("params"), py::arg("path"));
  m.def("load_checkpoint", &load_checkpoint, py::arg("path"));

  py::class_<TaskConfig>(m, "TaskConfig")
      .def(py::init<>())
      .def_readwrite("num_classes", &TaskConfig::num_classes)
      .def_readwrite("correlation", &TaskConfig::correlation)
      .def_readwrite("feature_dim", &TaskConfig::feature_dim)
      .def_readwrite("noise_scale", &TaskConfig::noise_scale)
      .def_readwrite("audio_noise_mult", &TaskConfig::audio_noise_mult)
      .def_readwrite("visual_slots", &TaskConfig::visual_slots)
      .def_readwrite("audio_slots", &TaskConfig::audio_slots)
      .def("to_json", &TaskConfig::to_json)
      .def_static("from_json", &TaskConfig::from_json);

  py::class_<SceneSample>(m, "SceneSample")
      .def_readwrite("visual_class", &SceneSample::visual_class)
      .def_readwrite("audio_class", &SceneSample::audio_class)
      .def_readwrite("factual", &SceneSample::factual)
      .def_readwrite("visual_features", &SceneSample::visual_features)
      .def_readwrite("audio_features", &SceneSample::audio_features);

  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("steps", &TrainConfig::steps)
      .def_readwrite("batch_size", &TrainConfig::batch_size)
      .def_readwrite("lr", &TrainConfig::lr)
      .def_readwrite("beta1", &TrainConfig::beta1)
      .def_readwrite("beta2", &TrainConfig::beta2)
      .def_readwrite("weight_decay", &TrainConfig::weight_decay)
      .def_readwrite("seed", &TrainConfig::seed);

  m.def(
      "gen_dataset",
      [](const TaskConfig& task, int n, const std::string& split, uint64_t seed) {
        return gen_dataset(task, n, split_from_string(split), seed);
      },
      py::arg("task"), py::arg("n"), py::arg("split"), py::arg("seed"));

  m.def("train", &train, py::arg("params"), py::arg("dataset"), py::arg("config"),
        "Trains in place; returns the per-step loss curve.");

  m.def(
      "eval_accuracy",
      [](const Parameters& params, const std::vector<SceneSample>& samples, const std::string& query,
         const std::optional<std::string>& knockout_json, int threads) {
        std::optional<KnockoutSpec> spec;
        if (knockout_json) spec = KnockoutSpec::from_json(*knockout_json);
        return eval_accuracy(params, samples, query_from_string(query), spec, threads);
      },
      py::arg("params"), py::arg("samples"), py::arg("query"), py::arg("knockout_json") = std::nullopt,
      py::arg("threads") = 1);

  m.def("resolve_window", &resolve_window, py::arg("center"), py::arg("width"), py::arg("num_layers"));

  m.def(
      "hungarian_min", [](const std::vector<std::vector<double>>& cost) { return hungarian_min(to_matrix(cost)); },
      py::arg("cost"), "Minimum-cost assignment; lexicographically smallest among optima.");

  m.def(
      "softmax", [](const Vec& logits) { return softmax(logits).values; }, py::arg("logits"));

  m.def(
      "kl_divergence", [](const Vec& p, const Vec& q) { return kl_divergence(ProbVector(p), ProbVector(q)); },
      py::arg("p"), py::arg("q"));

  m.def(
      "base_rank", [](const Vec& p_base, int chosen) { return base_rank(ProbVector(p_base), chosen); },
      py::arg("p_base"), py::arg("chosen"));

  m.def(
      "categorize", [](int eta) { return to_string(categorize(eta)); }, py::arg("eta"));
}
