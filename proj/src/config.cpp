#include "nodetab/config.hpp"

#include <fstream>
#include <initializer_list>
#include <sstream>
#include <stdexcept>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace nodetab {

namespace {

using nlohmann::json;

struct Errors {
  std::vector<std::string> messages;

  void add(const std::string& path, const std::string& what) { messages.push_back(path + ": " + what); }
};

void check_keys(const json& obj, const std::string& path,
                std::initializer_list<std::string_view> allowed, Errors& errors) {
  for (const auto& [key, value] : obj.items()) {
    bool known = false;
    for (std::string_view name : allowed) {
      if (key == name) {
        known = true;
        break;
      }
    }
    if (!known) errors.add(path + "." + key, "unknown key");
  }
}

const json* object_field(const json& obj, const std::string& path, const char* key,
                         Errors& errors) {
  if (!obj.contains(key)) return nullptr;
  const json& value = obj.at(key);
  if (!value.is_object()) {
    errors.add(path + "." + key, "expected an object");
    return nullptr;
  }
  return &value;
}

void read_double(const json& obj, const std::string& path, const char* key, double& out,
                 Errors& errors) {
  if (!obj.contains(key)) return;
  const json& value = obj.at(key);
  if (!value.is_number()) {
    errors.add(path + "." + key, "expected a number");
    return;
  }
  out = value.get<double>();
}

void read_count(const json& obj, const std::string& path, const char* key, std::size_t& out,
                Errors& errors) {
  if (!obj.contains(key)) return;
  const json& value = obj.at(key);
  if (!value.is_number_unsigned()) {
    errors.add(path + "." + key, "expected a nonnegative integer");
    return;
  }
  out = value.get<std::size_t>();
}

void read_u64(const json& obj, const std::string& path, const char* key, std::uint64_t& out,
              Errors& errors) {
  if (!obj.contains(key)) return;
  const json& value = obj.at(key);
  if (!value.is_number_unsigned()) {
    errors.add(path + "." + key, "expected a nonnegative integer");
    return;
  }
  out = value.get<std::uint64_t>();
}

void read_bool(const json& obj, const std::string& path, const char* key, bool& out,
               Errors& errors) {
  if (!obj.contains(key)) return;
  const json& value = obj.at(key);
  if (!value.is_boolean()) {
    errors.add(path + "." + key, "expected true or false");
    return;
  }
  out = value.get<bool>();
}

void read_string(const json& obj, const std::string& path, const char* key, std::string& out,
                 Errors& errors) {
  if (!obj.contains(key)) return;
  const json& value = obj.at(key);
  if (!value.is_string()) {
    errors.add(path + "." + key, "expected a string");
    return;
  }
  out = value.get<std::string>();
}

void parse_choice(const json& obj, const std::string& path, ChoiceKind& choice, Errors& errors) {
  check_keys(obj, path, {"kind", "alpha", "schedule"}, errors);
  std::string kind;
  read_string(obj, path, "kind", kind, errors);
  if (!kind.empty()) {
    if (kind == "softmax") {
      choice.tag = ChoiceTag::softmax;
    } else if (kind == "sparsemax") {
      choice.tag = ChoiceTag::sparsemax;
    } else if (kind == "entmax") {
      choice.tag = ChoiceTag::entmax;
    } else if (kind == "gumbel") {
      choice.tag = ChoiceTag::gumbel_softmax;
    } else {
      errors.add(path + ".kind",
                 "expected one of softmax, sparsemax, entmax, gumbel; got '" + kind + "'");
    }
  }
  read_double(obj, path, "alpha", choice.alpha, errors);
  if (const json* schedule = object_field(obj, path, "schedule", errors)) {
    std::string spath = path + ".schedule";
    check_keys(*schedule, spath, {"kind", "start", "decay", "floor"}, errors);
    std::string skind;
    read_string(*schedule, spath, "kind", skind, errors);
    if (!skind.empty()) {
      if (skind == "constant") {
        choice.schedule.kind = TemperatureSchedule::Kind::constant;
      } else if (skind == "annealed") {
        choice.schedule.kind = TemperatureSchedule::Kind::annealed;
      } else {
        errors.add(spath + ".kind", "expected constant or annealed; got '" + skind + "'");
      }
    }
    read_double(*schedule, spath, "start", choice.schedule.start, errors);
    read_double(*schedule, spath, "decay", choice.schedule.decay, errors);
    read_double(*schedule, spath, "floor", choice.schedule.floor, errors);
  }
}

void parse_data(const json& obj, RunConfig& config, Errors& errors) {
  const std::string path = "data";
  check_keys(obj, path,
             {"target", "delimiter", "task", "kinds", "val_fraction", "stratify",
              "quantile_count", "normalize_targets"},
             errors);
  read_string(obj, path, "target", config.schema.target, errors);

  std::string delimiter;
  read_string(obj, path, "delimiter", delimiter, errors);
  if (!delimiter.empty()) {
    if (delimiter.size() != 1) {
      errors.add(path + ".delimiter", "expected a single character");
    } else {
      config.schema.delimiter = delimiter[0];
    }
  }

  std::string task;
  read_string(obj, path, "task", task, errors);
  if (!task.empty()) {
    if (task == "classification") {
      config.schema.task = TaskKind::classification;
    } else if (task == "regression") {
      config.schema.task = TaskKind::regression;
    } else {
      errors.add(path + ".task", "expected classification or regression; got '" + task + "'");
    }
  }

  if (obj.contains("kinds")) {
    const json& kinds = obj.at("kinds");
    if (!kinds.is_object()) {
      errors.add(path + ".kinds", "expected an object of column -> kind");
    } else {
      for (const auto& [column, value] : kinds.items()) {
        if (!value.is_string()) {
          errors.add(path + ".kinds." + column, "expected a string");
          continue;
        }
        std::string kind = value.get<std::string>();
        if (kind == "numeric") {
          config.schema.kinds[column] = ColumnKind::numeric;
        } else if (kind == "categorical") {
          config.schema.kinds[column] = ColumnKind::categorical;
        } else {
          errors.add(path + ".kinds." + column,
                     "expected numeric or categorical; got '" + kind + "'");
        }
      }
    }
  }

  read_double(obj, path, "val_fraction", config.train.val_fraction, errors);
  read_bool(obj, path, "stratify", config.train.stratify, errors);
  read_count(obj, path, "quantile_count", config.train.quantile_count, errors);
  read_bool(obj, path, "normalize_targets", config.train.normalize_targets, errors);
}

void parse_model(const json& obj, RunConfig& config, Errors& errors) {
  const std::string path = "model";
  check_keys(obj, path, {"num_layers", "total_tree_count", "depth", "tree_output_dim", "choice"},
             errors);
  read_count(obj, path, "num_layers", config.train.num_layers, errors);
  read_count(obj, path, "total_tree_count", config.train.total_tree_count, errors);
  read_count(obj, path, "depth", config.train.depth, errors);
  read_count(obj, path, "tree_output_dim", config.train.tree_output_dim, errors);
  if (const json* choice = object_field(obj, path, "choice", errors)) {
    parse_choice(*choice, path + ".choice", config.train.choice, errors);
  }
}

void parse_training(const json& obj, RunConfig& config, Errors& errors) {
  const std::string path = "training";
  check_keys(obj, path,
             {"learning_rate", "batch_size", "max_steps", "eval_interval", "patience",
              "checkpoint_window", "seed", "optimizer"},
             errors);
  read_double(obj, path, "learning_rate", config.train.learning_rate, errors);
  read_count(obj, path, "batch_size", config.train.batch_size, errors);
  read_count(obj, path, "max_steps", config.train.max_steps, errors);
  read_count(obj, path, "eval_interval", config.train.eval_interval, errors);
  read_count(obj, path, "patience", config.train.patience, errors);
  read_count(obj, path, "checkpoint_window", config.train.checkpoint_window, errors);
  read_u64(obj, path, "seed", config.train.seed, errors);
  if (const json* optimizer = object_field(obj, path, "optimizer", errors)) {
    std::string opath = path + ".optimizer";
    check_keys(*optimizer, opath, {"nu1", "nu2", "beta1", "beta2", "eps"}, errors);
    read_double(*optimizer, opath, "nu1", config.train.optimizer.nu1, errors);
    read_double(*optimizer, opath, "nu2", config.train.optimizer.nu2, errors);
    read_double(*optimizer, opath, "beta1", config.train.optimizer.beta1, errors);
    read_double(*optimizer, opath, "beta2", config.train.optimizer.beta2, errors);
    read_double(*optimizer, opath, "eps", config.train.optimizer.eps, errors);
  }
}

void parse_paths(const json& obj, RunConfig& config, Errors& errors) {
  const std::string path = "paths";
  check_keys(obj, path, {"data", "model", "out", "history", "metrics"}, errors);
  read_string(obj, path, "data", config.data_path, errors);
  read_string(obj, path, "model", config.model_path, errors);
  read_string(obj, path, "out", config.out_path, errors);
  read_string(obj, path, "history", config.history_path, errors);
  read_string(obj, path, "metrics", config.metrics_path, errors);
}

}  // namespace

RunConfig parse_run_config(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("config: invalid JSON: ") + e.what());
  }

  Errors errors;
  RunConfig config;
  if (!doc.is_object()) {
    throw std::invalid_argument("config: top level must be an object");
  }
  check_keys(doc, "config", {"data", "model", "training", "paths", "grid"}, errors);
  if (const json* data = object_field(doc, "config", "data", errors)) {
    parse_data(*data, config, errors);
  }
  if (const json* model = object_field(doc, "config", "model", errors)) {
    parse_model(*model, config, errors);
  }
  if (const json* training = object_field(doc, "config", "training", errors)) {
    parse_training(*training, config, errors);
  }
  if (const json* paths = object_field(doc, "config", "paths", errors)) {
    parse_paths(*paths, config, errors);
  }
  read_bool(doc, "config", "grid", config.grid, errors);

  // Semantic validation joins the structural report so every problem in the
  // document surfaces in one pass.
  if (errors.messages.empty()) {
    try {
      config.train.validate();
    } catch (const std::exception& e) {
      errors.messages.push_back(e.what());
    }
  }

  if (!errors.messages.empty()) {
    std::string joined = "config: invalid document";
    for (const std::string& message : errors.messages) joined += "\n  " + message;
    throw std::invalid_argument(joined);
  }
  return config;
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("config: cannot read '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return std::move(buf).str();
}

RunConfig load_run_config(const std::string& path) {
  return parse_run_config(read_text_file(path));
}

}  // namespace nodetab
