#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "nodetab/model.hpp"

namespace nodetab {

// One (tree, depth) feature selector reduced to its nonzero weights,
// coordinate format. Indices are ascending positions into the layer input.
struct SparseSelector {
  std::vector<std::uint32_t> indices;
  std::vector<double> weights;
};

struct CompiledTree {
  std::vector<SparseSelector> selectors;  // depth entries
  std::vector<double> thresholds;         // depth
  std::vector<double> scales;             // depth, effective (softplus + shift)
  Tensor responses;                       // (leaves, output_dim)
};

struct CompiledLayer {
  LayerConfig config;
  std::vector<CompiledTree> trees;
};

// Inference-only artifact: every selector row evaluated once and stored
// sparse; gates and the response contraction match the dense forward.
struct CompiledModel {
  TaskKind task = TaskKind::regression;
  std::size_t class_count = 0;
  std::vector<std::string> class_labels;
  std::size_t feature_dim = 0;
  std::vector<CompiledLayer> layers;
  Preprocessor preprocessing;
  bool preprocessing_fitted = false;
  double dropped_weight_fraction = 0.0;  // zero entries dropped / total entries
  std::vector<std::string> warnings;

  std::size_t head_dim() const { return task == TaskKind::classification ? class_count : 1; }
  std::size_t total_trees() const;
};

// Evaluates every selector in inference mode (gumbel collapses to an argmax
// one-hot) and drops exact zeros. Softmax selectors stay dense; a density
// warning is recorded.
CompiledModel compile(const NodeModel& model);

// Head output for preprocessed features (B, feature_dim).
Tensor compiled_forward(const CompiledModel& compiled, const Tensor& x);

// Full prediction on raw dataset rows; mirrors predict() on the dense model.
Tensor compiled_predict(const CompiledModel& compiled, const Dataset& dataset,
                        std::span<const std::size_t> rows);

struct ImportanceOptions {
  std::size_t repeats = 5;
  std::uint64_t seed = 0;
  bool include_learned = false;  // also score every layer-output column
};

// layer == -1: raw input feature `column`; layer >= 0: column of that
// layer's flattened output block within the dense concatenation.
struct FeatureImportance {
  std::string name;
  int layer = -1;
  std::size_t column = 0;
  double mean = 0.0;
  double stddev = 0.0;
};

// Permutation importance over the given rows: mean over repeats of
// [metric with the column permuted - baseline metric], with the training
// metric (classification error rate / raw-scale MSE). Learned-feature
// permutation shuffles one layer-output column at the concatenation
// boundary and recomputes only downstream layers. Each column draws its
// permutations from its own rng stream off the master seed.
std::vector<FeatureImportance> permutation_importance(NodeModel& model, const Dataset& dataset,
                                                      std::span<const std::size_t> rows,
                                                      const ImportanceOptions& options = {});

// Mean over samples of the L1 norm of each tree's head slice (first
// head_dim channels) divided by the total tree count: the tree's additive
// share in the averaged head. Order is layer-major, then tree index.
std::vector<double> tree_contributions(NodeModel& model, const Dataset& dataset,
                                       std::span<const std::size_t> rows);

struct ImportanceBin {
  double lower = 0.0;
  double upper = 0.0;
  std::size_t count = 0;
  double total = 0.0;
};

struct LayerImportanceReport {
  int layer = -1;
  std::vector<ImportanceBin> bins;
  bool degenerate = false;  // constant importances collapse to one bin
};

// Groups importances by layer and partitions each group into equal-width
// bins over its range, for external plotting.
std::vector<LayerImportanceReport> importance_report(
    std::span<const FeatureImportance> importances, std::size_t bins = 7);

}  // namespace nodetab
