#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "nodetab/model.hpp"
#include "nodetab/optimizer.hpp"

namespace nodetab {

struct TrainConfig {
  // Architecture. tree_output_dim 0 resolves to the class count for
  // classification and 1 for regression.
  std::size_t num_layers = 1;
  std::size_t total_tree_count = 2048;
  std::size_t depth = 6;
  std::size_t tree_output_dim = 0;
  ChoiceKind choice = ChoiceKind::entmax(1.5);

  // Optimization.
  double learning_rate = 1e-3;
  QhAdamConfig optimizer;  // lr field is overridden by learning_rate
  std::size_t batch_size = 256;
  std::size_t max_steps = 10000;
  std::size_t eval_interval = 200;
  std::size_t patience = 10;        // evaluations without improvement
  std::size_t checkpoint_window = 5;  // c consecutive snapshots averaged
  std::uint64_t seed = 0;

  // Data handling.
  double val_fraction = 0.2;
  bool stratify = true;
  std::size_t quantile_count = 1000;
  bool normalize_targets = false;

  void validate() const;
  std::size_t resolved_output_dim(TaskKind task, std::size_t class_count) const;
};

struct EvalRecord {
  std::size_t step = 0;
  double train_loss = 0.0;
  double val_metric = 0.0;     // classification error rate / raw-scale mse
  double val_objective = 0.0;  // loss-scale value (cross-entropy / mse)
  double wall_seconds = 0.0;
};

struct TrainHistory {
  std::vector<EvalRecord> evals;
  double best_val_metric = std::numeric_limits<double>::infinity();
  std::size_t best_step = 0;
  std::size_t steps_run = 0;
  bool diverged = false;
  std::string abort_reason;
  std::vector<std::string> warnings;
};

struct TrainResult {
  NodeModel model;
  TrainHistory history;
};

// Called after each validation evaluation with the averaged parameter set
// that was scored (test instrumentation, checkpoint inspection).
using EvalObserver =
    std::function<void(std::size_t step, const std::vector<Tensor>& averaged, double val_metric)>;

// Data-aware initialization from the first training batch:
// F ~ U(0,1); thresholds b sampled from realized feature responses; scales
// set so every first-batch gate argument stays strictly inside the
// non-saturated region; R ~ N(0,1). Deeper layers initialize on their own
// concatenated inputs in one sweep.
void data_aware_init(NodeModel& model, const Tensor& first_batch, std::uint64_t seed,
                     std::vector<std::string>* warnings = nullptr);

struct EvalMetrics {
  double metric = 0.0;     // classification error rate / raw-scale mse
  double objective = 0.0;  // mean cross-entropy / raw-scale mse
  double accuracy = 0.0;   // classification convenience; 0 for regression
  std::size_t rows = 0;
};

// Full-pipeline evaluation (stored preprocessing applied) on dataset rows.
EvalMetrics evaluate_model(NodeModel& model, const Dataset& dataset,
                           std::span<const std::size_t> rows);

// End-to-end training: splits train/val when the dataset has no val rows,
// fits preprocessing, builds and initializes the model, optimizes with
// QHAdam, evaluates checkpoint-averaged parameters every eval_interval
// steps, and returns the best averaged model with a step-indexed history.
// Divergence aborts with the partial history (diverged flag set).
TrainResult train_model(Dataset& dataset, const TrainConfig& config,
                        const EvalObserver& observer = nullptr);

struct GridCell {
  std::size_t num_layers = 0;
  std::size_t total_tree_count = 0;
  std::size_t depth = 0;
  std::size_t tree_output_dim = 0;
};

struct GridCellResult {
  GridCell cell;
  double val_metric = std::numeric_limits<double>::infinity();
  bool failed = false;
  std::string error;
};

struct GridSearchResult {
  std::vector<GridCellResult> cells;
  std::size_t best_index = 0;
  TrainConfig best_config;
};

// Grid axes; iteration order is num_layers, then trees, depth, output dim.
struct GridSpace {
  std::vector<std::size_t> num_layers = {2, 4, 8};
  std::vector<std::size_t> total_tree_count = {1024, 2048};
  std::vector<std::size_t> depth = {6, 8};
  std::vector<std::size_t> tree_output_dim = {2, 3};
};

// Trains one model per cell (trees split evenly across layers), selects the
// best validation metric with ties broken by grid order. Failed cells are
// recorded and skipped.
GridSearchResult grid_search(Dataset& dataset, const TrainConfig& base,
                             const GridSpace& space = {});

}  // namespace nodetab
