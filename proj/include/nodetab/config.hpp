#pragma once

#include <string>

#include "nodetab/train.hpp"

namespace nodetab {

// One JSON document drives a whole run: data schema, architecture, training
// hyperparameters, and file paths. Keys not in the schema are rejected at
// every nesting level; all problems are reported in one error.
struct RunConfig {
  TrainConfig train;
  CsvSchema schema;
  bool grid = false;

  std::string data_path;
  std::string model_path;
  std::string out_path;
  std::string history_path;
  std::string metrics_path;
};

RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);

// Whole-file read shared by config loading and digest computation.
std::string read_text_file(const std::string& path);

}  // namespace nodetab
