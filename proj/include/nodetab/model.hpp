#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "nodetab/data.hpp"
#include "nodetab/layer.hpp"
#include "nodetab/preprocess.hpp"

namespace nodetab {

struct ModelMeta {
  std::uint64_t seed = 0;
  std::uint32_t version = 1;
  std::size_t trained_steps = 0;
  std::size_t best_step = 0;
  double best_val_metric = std::numeric_limits<double>::quiet_NaN();
  std::uint64_t config_digest = 0;  // FNV-1a of the run config document
};

// Densely connected stack of ODT layers: layer i consumes the concatenation
// of the raw input and every previous layer's flattened tree outputs. The
// head uniformly averages all trees of all layers and reads the first
// class_count channels (classification) or the first channel (regression).
struct NodeModel {
  TaskKind task = TaskKind::regression;
  std::size_t class_count = 0;  // classification only
  std::vector<std::string> class_labels;
  std::size_t feature_dim = 0;  // preprocessed input width n
  std::vector<LayerConfig> configs;
  std::vector<OdtLayerParams> layers;
  Preprocessor preprocessing;
  bool preprocessing_fitted = false;
  ModelMeta meta;

  std::size_t head_dim() const { return task == TaskKind::classification ? class_count : 1; }
  std::size_t total_trees() const;
  std::vector<Parameter*> parameters();
  void validate() const;
};

// Lays out `num_layers` layers splitting `total_tree_count` evenly, all with
// the given depth/output dim, input widths following the dense rule
// input_i = feature_dim + sum_{j<i} m_j * l_j.
std::vector<LayerConfig> plan_layer_configs(std::size_t feature_dim, std::size_t num_layers,
                                            std::size_t total_tree_count, std::size_t depth,
                                            std::size_t output_dim, const ChoiceKind& choice);

// Zero-initialized model over the given layer plan; parameters are named
// "layer<i>/F" etc. Class labels and preprocessing attach during fit.
NodeModel build_model(TaskKind task, std::size_t class_count, std::vector<LayerConfig> configs);

struct ModelForward {
  Value head;                   // (B, head_dim)
  Value mean_tree;              // (B, l), tree-uniform average
  std::vector<LayerOut> layer_outs;
};

// Differentiable forward pass over preprocessed features x (B, feature_dim).
Value model_forward(Tape& tape, const Value& x, NodeModel& model, const ChoiceEval& eval = {});

// Same, retaining per-layer outputs (used by analysis passes).
ModelForward model_forward_collect(Tape& tape, const Value& x, NodeModel& model,
                                   const ChoiceEval& eval = {});

// No-grad head output for already-preprocessed features.
Tensor forward_inference(NodeModel& model, const Tensor& x, const ChoiceEval& eval = {});

// Full prediction on raw dataset rows: stored preprocessing, forward, then
// softmax over the head for classification or denormalization for
// regression. Returns (rows, class_count) probabilities or (rows, 1) values.
Tensor predict(NodeModel& model, const Dataset& dataset, std::span<const std::size_t> rows);

// Ordered copies of all parameter tensors (checkpoint snapshots).
std::vector<Tensor> parameter_values(const NodeModel& model);
void set_parameter_values(NodeModel& model, std::span<const Tensor> values);

}  // namespace nodetab
