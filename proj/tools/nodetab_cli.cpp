#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "nodetab/config.hpp"
#include "nodetab/serialize.hpp"
#include "nodetab/train.hpp"

using namespace nodetab;
using nlohmann::json;

namespace {

struct CliArgs {
  std::string config_path;
  std::string data_path;
  std::string model_path;
  std::string out_path;
  std::uint64_t seed = 0;
  bool seed_set = false;
  bool grid = false;
};

struct LoadedConfig {
  RunConfig config;
  std::uint64_t digest = 0;
};

LoadedConfig load_config(CliArgs& args, bool required) {
  LoadedConfig loaded;
  if (!args.config_path.empty()) {
    std::string text = read_text_file(args.config_path);
    loaded.config = parse_run_config(text);
    loaded.digest = fnv1a(text);
  } else if (required) {
    throw std::invalid_argument("missing --config (required for this command)");
  }
  RunConfig& config = loaded.config;
  if (!args.data_path.empty()) config.data_path = args.data_path;
  if (!args.model_path.empty()) config.model_path = args.model_path;
  if (!args.out_path.empty()) config.out_path = args.out_path;
  if (args.seed_set) config.train.seed = args.seed;
  if (args.grid) config.grid = true;
  return loaded;
}

const std::string& require_path(const std::string& path, const char* what) {
  if (path.empty()) {
    throw std::invalid_argument(std::string("missing ") + what +
                                " path (set it in the config paths section or via the flag)");
  }
  return path;
}

std::vector<std::size_t> all_rows(const Dataset& ds) {
  std::vector<std::size_t> rows(ds.row_count);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  return rows;
}

// Re-indexes dataset labels onto the model's class order so metric
// computations agree with the training-time label mapping.
void align_labels(Dataset& ds, const std::vector<std::string>& model_labels) {
  if (ds.task != TaskKind::classification || !ds.has_target) return;
  std::vector<int> remap(ds.class_labels.size());
  for (std::size_t i = 0; i < ds.class_labels.size(); ++i) {
    auto it = std::find(model_labels.begin(), model_labels.end(), ds.class_labels[i]);
    if (it == model_labels.end()) {
      throw std::runtime_error("data: label '" + ds.class_labels[i] +
                               "' does not appear in the model's classes");
    }
    remap[i] = static_cast<int>(it - model_labels.begin());
  }
  for (int& label : ds.target_class) label = remap[label];
  ds.class_labels = model_labels;
}

void emit(std::ostream& out, const json& record) { out << record.dump() << "\n"; }

double or_nan(double v) { return v; }

json metrics_record(const EvalMetrics& metrics) {
  return json{{"rows", metrics.rows},
              {"metric", metrics.metric},
              {"objective", metrics.objective},
              {"accuracy", metrics.accuracy}};
}

// Metric/objective for predictions that came from a compiled artifact
// (probabilities or raw-scale values rather than a dense model).
EvalMetrics prediction_metrics(TaskKind task, const Tensor& predictions, const Dataset& ds,
                               std::span<const std::size_t> rows) {
  EvalMetrics metrics;
  metrics.rows = rows.size();
  if (!ds.has_target) throw std::invalid_argument("evaluate: data has no target column");
  if (task == TaskKind::classification) {
    std::size_t wrong = 0;
    double ce = 0.0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      int label = ds.target_class[rows[i]];
      std::size_t best = 0;
      for (std::size_t c = 1; c < predictions.dim(1); ++c) {
        if (predictions.at(i, c) > predictions.at(i, best)) best = c;
      }
      if (static_cast<int>(best) != label) ++wrong;
      double p = std::max(predictions.at(i, static_cast<std::size_t>(label)), 1e-12);
      ce -= std::log(p);
    }
    metrics.metric = static_cast<double>(wrong) / static_cast<double>(rows.size());
    metrics.objective = ce / static_cast<double>(rows.size());
    metrics.accuracy = 1.0 - metrics.metric;
    return metrics;
  }
  double se = 0.0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    double diff = predictions.at(i, 0) - ds.target_real[rows[i]];
    se += diff * diff;
  }
  metrics.metric = se / static_cast<double>(rows.size());
  metrics.objective = metrics.metric;
  return metrics;
}

void write_history(const std::string& path, const TrainHistory& history,
                   const GridSearchResult* grid) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("history: cannot write '" + path + "'");
  if (grid != nullptr) {
    for (std::size_t i = 0; i < grid->cells.size(); ++i) {
      const GridCellResult& cell = grid->cells[i];
      json record{{"event", "grid_cell"},
                  {"index", i},
                  {"num_layers", cell.cell.num_layers},
                  {"total_tree_count", cell.cell.total_tree_count},
                  {"depth", cell.cell.depth},
                  {"tree_output_dim", cell.cell.tree_output_dim},
                  {"val_metric", cell.val_metric},
                  {"failed", cell.failed}};
      if (cell.failed) record["error"] = cell.error;
      if (i == grid->best_index) record["best"] = true;
      emit(out, record);
    }
  }
  for (const std::string& warning : history.warnings) {
    emit(out, json{{"event", "warning"}, {"message", warning}});
  }
  for (const EvalRecord& eval : history.evals) {
    emit(out, json{{"event", "eval"},
                   {"step", eval.step},
                   {"train_loss", eval.train_loss},
                   {"val_metric", eval.val_metric},
                   {"val_objective", eval.val_objective},
                   {"wall_seconds", eval.wall_seconds}});
  }
}

void write_predictions(const std::string& path, TaskKind task, const Tensor& predictions,
                       const std::vector<std::string>& labels) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("predict: cannot write '" + path + "'");
  char buf[64];
  if (task == TaskKind::classification) {
    for (std::size_t c = 0; c < labels.size(); ++c) {
      out << (c == 0 ? "" : ",") << "prob_" << labels[c];
    }
    out << "\n";
    for (std::size_t i = 0; i < predictions.dim(0); ++i) {
      for (std::size_t c = 0; c < predictions.dim(1); ++c) {
        std::snprintf(buf, sizeof(buf), "%.17g", predictions.at(i, c));
        out << (c == 0 ? "" : ",") << buf;
      }
      out << "\n";
    }
    return;
  }
  out << "prediction\n";
  for (std::size_t i = 0; i < predictions.dim(0); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g", predictions.at(i, 0));
    out << buf << "\n";
  }
}

int cmd_train(CliArgs& args, bool force_grid) {
  LoadedConfig loaded = load_config(args, true);
  RunConfig& rc = loaded.config;
  if (force_grid) rc.grid = true;
  require_path(rc.data_path, "--data");
  if (rc.schema.target.empty()) {
    throw std::invalid_argument("train: config data.target must name the target column");
  }
  std::string model_path = rc.model_path.empty() ? "model.bin" : rc.model_path;
  std::string history_path =
      rc.history_path.empty() ? model_path + ".history.jsonl" : rc.history_path;
  std::string metrics_path =
      rc.metrics_path.empty() ? model_path + ".metrics.jsonl" : rc.metrics_path;

  Dataset ds = load_csv(rc.data_path, rc.schema);

  auto start = std::chrono::steady_clock::now();
  GridSearchResult grid;
  TrainResult result;
  if (rc.grid) {
    grid = grid_search(ds, rc.train);
    result = train_model(ds, grid.best_config);
  } else {
    result = train_model(ds, rc.train);
  }
  double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  result.model.meta.config_digest = loaded.digest;
  save_model(result.model, model_path);
  write_history(history_path, result.history, rc.grid ? &grid : nullptr);

  std::size_t parameter_count = 0;
  for (const Tensor& t : parameter_values(result.model)) parameter_count += t.size();

  EvalMetrics train_metrics =
      evaluate_model(result.model, ds, ds.rows_with_tag(SplitTag::train));
  EvalMetrics val_metrics = evaluate_model(result.model, ds, ds.rows_with_tag(SplitTag::val));
  auto test_rows = ds.rows_with_tag(SplitTag::test);

  json record{{"command", rc.grid ? "gridsearch" : "train"},
              {"model", model_path},
              {"history", history_path},
              {"steps", result.history.steps_run},
              {"best_step", result.history.best_step},
              {"best_val_metric", result.history.best_val_metric},
              {"train_metric", train_metrics.metric},
              {"val_metric", val_metrics.metric},
              {"test_metric", nullptr},
              {"wall_seconds", or_nan(wall)},
              {"parameter_count", parameter_count},
              {"diverged", result.history.diverged},
              {"warnings", result.history.warnings}};
  if (!test_rows.empty()) {
    record["test_metric"] = evaluate_model(result.model, ds, test_rows).metric;
  }
  if (result.history.diverged) record["abort_reason"] = result.history.abort_reason;
  if (rc.grid) {
    record["grid_cells"] = grid.cells.size();
    record["grid_best_index"] = grid.best_index;
  }

  std::ofstream metrics_out(metrics_path, std::ios::app);
  if (!metrics_out) throw std::runtime_error("metrics: cannot write '" + metrics_path + "'");
  emit(metrics_out, record);
  emit(std::cout, record);
  return 0;
}

int cmd_evaluate(CliArgs& args) {
  LoadedConfig loaded = load_config(args, true);
  RunConfig& rc = loaded.config;
  require_path(rc.model_path, "--model");
  require_path(rc.data_path, "--data");
  if (rc.schema.target.empty()) {
    throw std::invalid_argument("evaluate: config data.target must name the target column");
  }

  std::string magic = peek_model_magic(rc.model_path);
  CsvSchema schema = rc.schema;
  EvalMetrics metrics;
  if (magic == kModelMagic) {
    NodeModel model = load_model(rc.model_path);
    schema.task = model.task;
    Dataset ds = load_csv(rc.data_path, schema);
    align_labels(ds, model.class_labels);
    metrics = evaluate_model(model, ds, all_rows(ds));
  } else {
    CompiledModel compiled = load_compiled(rc.model_path);
    schema.task = compiled.task;
    Dataset ds = load_csv(rc.data_path, schema);
    align_labels(ds, compiled.class_labels);
    auto rows = all_rows(ds);
    Tensor predictions = compiled_predict(compiled, ds, rows);
    metrics = prediction_metrics(compiled.task, predictions, ds, rows);
  }

  json record = metrics_record(metrics);
  record["command"] = "evaluate";
  record["model"] = rc.model_path;
  record["compiled"] = magic == kCompiledMagic;
  emit(std::cout, record);
  return 0;
}

int cmd_predict(CliArgs& args) {
  LoadedConfig loaded = load_config(args, false);
  RunConfig& rc = loaded.config;
  require_path(rc.model_path, "--model");
  require_path(rc.data_path, "--data");
  require_path(rc.out_path, "--out");

  std::string magic = peek_model_magic(rc.model_path);
  CsvSchema schema = rc.schema;
  Tensor predictions;
  TaskKind task;
  std::vector<std::string> labels;
  std::size_t rows_in = 0;
  if (magic == kModelMagic) {
    NodeModel model = load_model(rc.model_path);
    schema.task = model.task;
    Dataset ds = load_csv(rc.data_path, schema);
    rows_in = ds.row_count;
    predictions = predict(model, ds, all_rows(ds));
    task = model.task;
    labels = model.class_labels;
  } else {
    CompiledModel compiled = load_compiled(rc.model_path);
    schema.task = compiled.task;
    Dataset ds = load_csv(rc.data_path, schema);
    rows_in = ds.row_count;
    predictions = compiled_predict(compiled, ds, all_rows(ds));
    task = compiled.task;
    labels = compiled.class_labels;
  }

  write_predictions(rc.out_path, task, predictions, labels);
  emit(std::cout, json{{"command", "predict"},
                       {"rows", rows_in},
                       {"out", rc.out_path},
                       {"compiled", magic == kCompiledMagic}});
  return 0;
}

int cmd_importance(CliArgs& args) {
  LoadedConfig loaded = load_config(args, true);
  RunConfig& rc = loaded.config;
  require_path(rc.model_path, "--model");
  require_path(rc.data_path, "--data");
  if (rc.schema.target.empty()) {
    throw std::invalid_argument("importance: config data.target must name the target column");
  }
  if (peek_model_magic(rc.model_path) != kModelMagic) {
    throw std::invalid_argument("importance: requires a dense model file");
  }

  NodeModel model = load_model(rc.model_path);
  CsvSchema schema = rc.schema;
  schema.task = model.task;
  Dataset ds = load_csv(rc.data_path, schema);
  align_labels(ds, model.class_labels);

  ImportanceOptions options;
  options.seed = rc.train.seed;
  options.include_learned = true;
  auto rows = all_rows(ds);
  auto importances = permutation_importance(model, ds, rows, options);
  auto reports = importance_report(importances);

  std::ofstream file;
  std::ostream* out = &std::cout;
  if (!rc.out_path.empty()) {
    file.open(rc.out_path, std::ios::trunc);
    if (!file) throw std::runtime_error("importance: cannot write '" + rc.out_path + "'");
    out = &file;
  }
  for (const FeatureImportance& imp : importances) {
    emit(*out, json{{"event", "importance"},
                    {"feature", imp.name},
                    {"layer", imp.layer},
                    {"column", imp.column},
                    {"mean", imp.mean},
                    {"std", imp.stddev}});
  }
  for (const LayerImportanceReport& report : reports) {
    json bins = json::array();
    for (const ImportanceBin& bin : report.bins) {
      bins.push_back(json{{"lower", bin.lower},
                          {"upper", bin.upper},
                          {"count", bin.count},
                          {"total", bin.total}});
    }
    emit(*out, json{{"event", "importance_bins"},
                    {"layer", report.layer},
                    {"degenerate", report.degenerate},
                    {"bins", bins}});
  }
  if (out != &std::cout) {
    emit(std::cout, json{{"command", "importance"},
                         {"records", importances.size()},
                         {"out", rc.out_path}});
  }
  return 0;
}

int cmd_compile(CliArgs& args) {
  LoadedConfig loaded = load_config(args, false);
  RunConfig& rc = loaded.config;
  require_path(rc.model_path, "--model");
  require_path(rc.out_path, "--out");

  NodeModel model = load_model(rc.model_path);
  CompiledModel compiled = compile(model);
  save_compiled(compiled, rc.out_path);

  std::size_t selector_entries = 0;
  for (const CompiledLayer& layer : compiled.layers) {
    for (const CompiledTree& tree : layer.trees) {
      for (const SparseSelector& selector : tree.selectors) {
        selector_entries += selector.indices.size();
      }
    }
  }
  emit(std::cout, json{{"command", "compile"},
                       {"out", rc.out_path},
                       {"dropped_weight_fraction", compiled.dropped_weight_fraction},
                       {"selector_entries", selector_entries},
                       {"warnings", compiled.warnings}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"nodetab: neural ensembles of oblivious decision trees for tabular data"};
  app.require_subcommand(1);

  CliArgs args;
  std::vector<CLI::Option*> seed_options;
  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", args.config_path, "run configuration JSON document");
    cmd->add_option("--data", args.data_path, "CSV data path (overrides config)");
    cmd->add_option("--model", args.model_path, "model file path (overrides config)");
    cmd->add_option("--out", args.out_path, "output path (overrides config)");
    seed_options.push_back(cmd->add_option("--seed", args.seed, "seed override"));
    cmd->add_flag("--grid", args.grid, "enable the tuned-regime grid search");
  };

  CLI::App* train = app.add_subcommand("train", "fit a model from a config document");
  CLI::App* evaluate = app.add_subcommand("evaluate", "score a model file on labeled data");
  CLI::App* predict = app.add_subcommand("predict", "write predictions for a data file");
  CLI::App* importance =
      app.add_subcommand("importance", "permutation feature importance report");
  CLI::App* compile_cmd =
      app.add_subcommand("compile", "pre-evaluate selectors into a sparse artifact");
  CLI::App* gridsearch = app.add_subcommand("gridsearch", "train with the tuned-regime grid");
  for (CLI::App* cmd : {train, evaluate, predict, importance, compile_cmd, gridsearch}) {
    add_common(cmd);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << json{{"error", true}, {"message", e.what()}}.dump() << "\n";
    return 1;
  }
  for (CLI::Option* option : seed_options) {
    if (option->count() > 0) args.seed_set = true;
  }

  CLI::App* active = app.get_subcommands().front();
  const std::string name = active->get_name();
  try {
    if (active == train) return cmd_train(args, false);
    if (active == gridsearch) return cmd_train(args, true);
    if (active == evaluate) return cmd_evaluate(args);
    if (active == predict) return cmd_predict(args);
    if (active == importance) return cmd_importance(args);
    return cmd_compile(args);
  } catch (const std::exception& e) {
    std::cerr << json{{"error", true}, {"command", name}, {"message", e.what()}}.dump() << "\n";
    return 1;
  }
}
