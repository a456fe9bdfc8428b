#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "nodetab/analysis.hpp"
#include "nodetab/choice.hpp"
#include "nodetab/data.hpp"
#include "nodetab/model.hpp"
#include "nodetab/serialize.hpp"
#include "nodetab/train.hpp"

namespace py = pybind11;
using namespace nodetab;

namespace {

using Rows = std::vector<std::vector<double>>;

Dataset rows_to_dataset(const Rows& rows) {
  if (rows.empty()) throw std::invalid_argument("features: at least one row required");
  std::size_t width = rows[0].size();
  if (width == 0) throw std::invalid_argument("features: rows must not be empty");
  Dataset ds;
  ds.row_count = rows.size();
  ds.features.resize(width);
  for (std::size_t j = 0; j < width; ++j) {
    ds.features[j].meta.name = "f" + std::to_string(j);
    ds.features[j].meta.kind = ColumnKind::numeric;
    ds.features[j].numeric.resize(rows.size());
  }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != width) {
      throw std::invalid_argument("features: ragged rows (row " + std::to_string(i) + ")");
    }
    for (std::size_t j = 0; j < width; ++j) ds.features[j].numeric[i] = rows[i][j];
  }
  ds.tags.assign(ds.row_count, SplitTag::train);
  return ds;
}

void attach_class_labels(Dataset& ds, const std::vector<std::string>& targets) {
  std::vector<std::string> labels(targets);
  std::sort(labels.begin(), labels.end());
  labels.erase(std::unique(labels.begin(), labels.end()), labels.end());
  if (labels.size() < 2) throw std::invalid_argument("targets: need at least two classes");
  ds.task = TaskKind::classification;
  ds.has_target = true;
  ds.class_labels = labels;
  ds.target_class.reserve(targets.size());
  for (const std::string& t : targets) {
    auto it = std::lower_bound(labels.begin(), labels.end(), t);
    ds.target_class.push_back(static_cast<int>(it - labels.begin()));
  }
}

ChoiceKind parse_choice(const std::string& name, double alpha) {
  if (name == "softmax") return ChoiceKind::softmax();
  if (name == "sparsemax") return ChoiceKind::sparsemax();
  if (name == "entmax") return ChoiceKind::entmax(alpha);
  if (name == "gumbel") return ChoiceKind::gumbel();
  throw std::invalid_argument("choice: unknown kind '" + name + "'");
}

std::vector<std::size_t> all_rows(const Dataset& ds) {
  std::vector<std::size_t> rows(ds.row_count);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  return rows;
}

// Owning handle shared between fit results and loaded files.
struct PyModel {
  NodeModel model;
  TrainHistory history;

  py::object predict_rows(const Rows& rows) {
    Dataset ds = rows_to_dataset(rows);
    Tensor out = predict(model, ds, all_rows(ds));
    if (model.task == TaskKind::classification) {
      py::list result;
      for (std::size_t i = 0; i < out.dim(0); ++i) {
        py::list probs;
        for (std::size_t c = 0; c < out.dim(1); ++c) probs.append(out.at(i, c));
        result.append(probs);
      }
      return result;
    }
    py::list result;
    for (std::size_t i = 0; i < out.dim(0); ++i) result.append(out.at(i, 0));
    return result;
  }

  Dataset labeled_dataset(const Rows& rows, const py::object& targets) {
    Dataset ds = rows_to_dataset(rows);
    if (model.task == TaskKind::classification) {
      attach_class_labels(ds, targets.cast<std::vector<std::string>>());
      // Remap onto the model's training-time label order.
      std::vector<int> remap(ds.class_labels.size());
      for (std::size_t i = 0; i < ds.class_labels.size(); ++i) {
        auto it = std::find(model.class_labels.begin(), model.class_labels.end(),
                            ds.class_labels[i]);
        if (it == model.class_labels.end()) {
          throw std::invalid_argument("targets: label '" + ds.class_labels[i] +
                                      "' not known to the model");
        }
        remap[i] = static_cast<int>(it - model.class_labels.begin());
      }
      for (int& label : ds.target_class) label = remap[label];
      ds.class_labels = model.class_labels;
    } else {
      ds.task = TaskKind::regression;
      ds.has_target = true;
      ds.target_real = targets.cast<std::vector<double>>();
    }
    return ds;
  }
};

std::shared_ptr<PyModel> train_rows(const Rows& rows, const py::object& targets,
                                    const std::string& task, std::size_t num_layers,
                                    std::size_t trees, std::size_t depth, std::size_t output_dim,
                                    const std::string& choice, double alpha, double learning_rate,
                                    std::size_t batch_size, std::size_t max_steps,
                                    std::size_t eval_interval, std::size_t patience,
                                    double val_fraction, std::uint64_t seed,
                                    bool normalize_targets) {
  Dataset ds = rows_to_dataset(rows);
  if (task == "classification") {
    attach_class_labels(ds, targets.cast<std::vector<std::string>>());
  } else if (task == "regression") {
    ds.task = TaskKind::regression;
    ds.has_target = true;
    ds.target_real = targets.cast<std::vector<double>>();
  } else {
    throw std::invalid_argument("task: expected 'classification' or 'regression'");
  }
  if ((ds.task == TaskKind::classification ? ds.target_class.size() : ds.target_real.size()) !=
      ds.row_count) {
    throw std::invalid_argument("targets: length must match the feature rows");
  }

  TrainConfig config;
  config.num_layers = num_layers;
  config.total_tree_count = trees;
  config.depth = depth;
  config.tree_output_dim = output_dim;
  config.choice = parse_choice(choice, alpha);
  config.learning_rate = learning_rate;
  config.batch_size = batch_size;
  config.max_steps = max_steps;
  config.eval_interval = eval_interval;
  config.patience = patience;
  config.val_fraction = val_fraction;
  config.seed = seed;
  config.normalize_targets = normalize_targets;

  auto handle = std::make_shared<PyModel>();
  TrainResult result = train_model(ds, config);
  handle->model = std::move(result.model);
  handle->history = std::move(result.history);
  return handle;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Neural oblivious decision ensembles for tabular data";

  m.def(
      "entmax",
      [](const std::vector<double>& z, double alpha) { return entmax_row(z, alpha); },
      py::arg("z"), py::arg("alpha") = 1.5,
      "Alpha-entmax over a score vector; exact zeros off support.");
  m.def(
      "sparsemax", [](const std::vector<double>& z) { return sparsemax_row(z); }, py::arg("z"));
  m.def(
      "softmax", [](const std::vector<double>& z) { return softmax_row(z); }, py::arg("z"));
  m.def("gate", &gate, py::arg("t"), py::arg("alpha") = 1.5,
        "Two-class entmax routing gate; saturates exactly for |t| >= gap.");
  m.def("saturation_gap", &saturation_gap, py::arg("alpha") = 1.5);

  py::class_<PyModel, std::shared_ptr<PyModel>>(m, "Model")
      .def_property_readonly(
          "task",
          [](const PyModel& self) {
            return self.model.task == TaskKind::classification ? "classification" : "regression";
          })
      .def_property_readonly("class_labels",
                             [](const PyModel& self) { return self.model.class_labels; })
      .def_property_readonly("feature_dim",
                             [](const PyModel& self) { return self.model.feature_dim; })
      .def_property_readonly("num_layers",
                             [](const PyModel& self) { return self.model.layers.size(); })
      .def_property_readonly("trained_steps",
                             [](const PyModel& self) { return self.history.steps_run; })
      .def_property_readonly("best_val_metric",
                             [](const PyModel& self) { return self.history.best_val_metric; })
      .def_property_readonly("parameter_count",
                             [](const PyModel& self) {
                               std::size_t total = 0;
                               for (const Tensor& t : parameter_values(self.model)) {
                                 total += t.size();
                               }
                               return total;
                             })
      .def("predict", &PyModel::predict_rows, py::arg("features"),
           "Class probabilities (classification) or values (regression), row per input.")
      .def(
          "evaluate",
          [](PyModel& self, const Rows& rows, const py::object& targets) {
            Dataset ds = self.labeled_dataset(rows, targets);
            EvalMetrics metrics = evaluate_model(self.model, ds, all_rows(ds));
            py::dict out;
            out["metric"] = metrics.metric;
            out["objective"] = metrics.objective;
            out["accuracy"] = metrics.accuracy;
            out["rows"] = metrics.rows;
            return out;
          },
          py::arg("features"), py::arg("targets"))
      .def(
          "save", [](const PyModel& self, const std::string& path) { save_model(self.model, path); },
          py::arg("path"))
      .def(
          "compile_to",
          [](const PyModel& self, const std::string& path) {
            CompiledModel compiled = compile(self.model);
            save_compiled(compiled, path);
            return compiled.dropped_weight_fraction;
          },
          py::arg("path"),
          "Writes the sparse pre-evaluated artifact; returns the dropped weight fraction.")
      .def(
          "feature_importance",
          [](PyModel& self, const Rows& rows, const py::object& targets, std::size_t repeats,
             std::uint64_t seed, bool include_learned) {
            Dataset ds = self.labeled_dataset(rows, targets);
            ImportanceOptions options;
            options.repeats = repeats;
            options.seed = seed;
            options.include_learned = include_learned;
            py::list out;
            for (const FeatureImportance& imp :
                 permutation_importance(self.model, ds, all_rows(ds), options)) {
              py::dict record;
              record["feature"] = imp.name;
              record["layer"] = imp.layer;
              record["column"] = imp.column;
              record["mean"] = imp.mean;
              record["std"] = imp.stddev;
              out.append(record);
            }
            return out;
          },
          py::arg("features"), py::arg("targets"), py::arg("repeats") = 5, py::arg("seed") = 0,
          py::arg("include_learned") = false)
      .def(
          "tree_contributions",
          [](PyModel& self, const Rows& rows) {
            Dataset ds = rows_to_dataset(rows);
            return tree_contributions(self.model, ds, all_rows(ds));
          },
          py::arg("features"),
          "Mean absolute head contribution per tree, normalized by the ensemble size.")
      .def_static(
          "load",
          [](const std::string& path) {
            auto handle = std::make_shared<PyModel>();
            handle->model = load_model(path);
            return handle;
          },
          py::arg("path"));

  m.def("train", &train_rows, py::arg("features"), py::arg("targets"),
        py::arg("task") = "classification", py::arg("num_layers") = 1, py::arg("trees") = 8,
        py::arg("depth") = 4, py::arg("output_dim") = 0, py::arg("choice") = "entmax",
        py::arg("alpha") = 1.5, py::arg("learning_rate") = 0.01, py::arg("batch_size") = 256,
        py::arg("max_steps") = 1000, py::arg("eval_interval") = 100, py::arg("patience") = 10,
        py::arg("val_fraction") = 0.2, py::arg("seed") = 0,
        py::arg("normalize_targets") = false,
        "Fits an ensemble on row-major features. Classification targets are label strings; "
        "regression targets are floats.");
}
