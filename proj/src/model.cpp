#include "nodetab/model.hpp"

#include <stdexcept>
#include <string>

namespace nodetab {

std::size_t NodeModel::total_trees() const {
  std::size_t total = 0;
  for (const LayerConfig& config : configs) total += config.tree_count;
  return total;
}

std::vector<Parameter*> NodeModel::parameters() {
  std::vector<Parameter*> params;
  params.reserve(4 * layers.size());
  for (OdtLayerParams& layer : layers) {
    params.push_back(&layer.feature_logits);
    params.push_back(&layer.thresholds);
    params.push_back(&layer.scales_raw);
    params.push_back(&layer.responses);
  }
  return params;
}

void NodeModel::validate() const {
  if (configs.empty()) throw std::invalid_argument("model: no layers");
  if (configs.size() != layers.size()) {
    throw std::invalid_argument("model: config/parameter layer count mismatch");
  }
  std::size_t expected_input = feature_dim;
  for (std::size_t i = 0; i < configs.size(); ++i) {
    configs[i].validate();
    if (configs[i].input_dim != expected_input) {
      throw std::invalid_argument("model: layer " + std::to_string(i) + " input dim " +
                                  std::to_string(configs[i].input_dim) + ", dense rule expects " +
                                  std::to_string(expected_input));
    }
    if (configs[i].output_dim != configs[0].output_dim) {
      throw std::invalid_argument("model: layers must share one tree output dim");
    }
    expected_input += configs[i].output_width();
  }
  if (task == TaskKind::classification) {
    if (class_count < 2) throw std::invalid_argument("model: classification needs >= 2 classes");
    if (configs[0].output_dim < class_count) {
      throw std::invalid_argument("model: tree output dim " +
                                  std::to_string(configs[0].output_dim) +
                                  " is narrower than the class count " +
                                  std::to_string(class_count));
    }
  }
}

std::vector<LayerConfig> plan_layer_configs(std::size_t feature_dim, std::size_t num_layers,
                                            std::size_t total_tree_count, std::size_t depth,
                                            std::size_t output_dim, const ChoiceKind& choice) {
  if (num_layers == 0) throw std::invalid_argument("plan: need at least one layer");
  if (total_tree_count < num_layers) {
    throw std::invalid_argument("plan: fewer trees than layers");
  }
  std::vector<LayerConfig> configs(num_layers);
  std::size_t per_layer = total_tree_count / num_layers;
  std::size_t input = feature_dim;
  for (std::size_t i = 0; i < num_layers; ++i) {
    configs[i].tree_count = per_layer;
    configs[i].depth = depth;
    configs[i].output_dim = output_dim;
    configs[i].input_dim = input;
    configs[i].choice = choice;
    input += configs[i].output_width();
  }
  return configs;
}

NodeModel build_model(TaskKind task, std::size_t class_count, std::vector<LayerConfig> configs) {
  NodeModel model;
  model.task = task;
  model.class_count = task == TaskKind::classification ? class_count : 0;
  model.configs = std::move(configs);
  if (model.configs.empty()) throw std::invalid_argument("model: no layers");
  model.feature_dim = model.configs[0].input_dim;
  model.layers.reserve(model.configs.size());
  for (std::size_t i = 0; i < model.configs.size(); ++i) {
    model.layers.push_back(make_layer(model.configs[i], "layer" + std::to_string(i)));
  }
  model.validate();
  return model;
}

ModelForward model_forward_collect(Tape& tape, const Value& x, NodeModel& model,
                                   const ChoiceEval& eval) {
  model.validate();
  if (x.shape().size() != 2 || x.shape()[1] != model.feature_dim) {
    throw std::invalid_argument("model: input must be (batch, " +
                                std::to_string(model.feature_dim) + ")");
  }

  ModelForward out;
  std::vector<Value> inputs = {x};
  Value tree_sum;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    Value layer_in = inputs.size() == 1 ? inputs[0] : concat_cols(tape, inputs);
    LayerOut layer_out = layer_forward(tape, layer_in, model.layers[i], model.configs[i], eval);
    Value sums = sum_mid(tape, layer_out.trees);  // (B, l)
    tree_sum = tree_sum.defined() ? add(tape, tree_sum, sums) : sums;
    inputs.push_back(layer_out.flat);
    out.layer_outs.push_back(std::move(layer_out));
  }

  out.mean_tree = scale(tape, tree_sum, 1.0 / static_cast<double>(model.total_trees()));
  std::size_t head = model.head_dim();
  out.head = head == model.configs[0].output_dim
                 ? out.mean_tree
                 : slice_cols(tape, out.mean_tree, 0, head);
  return out;
}

Value model_forward(Tape& tape, const Value& x, NodeModel& model, const ChoiceEval& eval) {
  return model_forward_collect(tape, x, model, eval).head;
}

Tensor forward_inference(NodeModel& model, const Tensor& x, const ChoiceEval& eval) {
  Tape tape(false);
  Value head = model_forward(tape, tape.constant(x), model, eval);
  return head.tensor();
}

Tensor predict(NodeModel& model, const Dataset& dataset, std::span<const std::size_t> rows) {
  if (!model.preprocessing_fitted) {
    throw std::logic_error("predict: model has no fitted preprocessing state");
  }
  Tensor x = transform_features(model.preprocessing, dataset, rows);
  Tensor head = forward_inference(model, x);

  if (model.task == TaskKind::classification) {
    Tensor probs({rows.size(), model.class_count});
    for (std::size_t i = 0; i < rows.size(); ++i) {
      std::vector<double> logits(model.class_count);
      for (std::size_t c = 0; c < model.class_count; ++c) logits[c] = head.at(i, c);
      std::vector<double> p = softmax_row(logits);
      for (std::size_t c = 0; c < model.class_count; ++c) probs.at(i, c) = p[c];
    }
    return probs;
  }

  Tensor values({rows.size(), std::size_t{1}});
  const Preprocessor& prep = model.preprocessing;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    values.at(i, 0) = head.at(i, 0) * prep.target_scale + prep.target_mean;
  }
  return values;
}

std::vector<Tensor> parameter_values(const NodeModel& model) {
  std::vector<Tensor> values;
  values.reserve(4 * model.layers.size());
  for (const OdtLayerParams& layer : model.layers) {
    values.push_back(layer.feature_logits.value);
    values.push_back(layer.thresholds.value);
    values.push_back(layer.scales_raw.value);
    values.push_back(layer.responses.value);
  }
  return values;
}

void set_parameter_values(NodeModel& model, std::span<const Tensor> values) {
  if (values.size() != 4 * model.layers.size()) {
    throw std::invalid_argument("model: snapshot size mismatch");
  }
  std::size_t k = 0;
  for (OdtLayerParams& layer : model.layers) {
    for (Parameter* p : {&layer.feature_logits, &layer.thresholds, &layer.scales_raw,
                         &layer.responses}) {
      if (!p->value.same_shape(values[k])) {
        throw std::invalid_argument("model: snapshot shape mismatch for '" + p->name + "'");
      }
      p->value = values[k++];
    }
  }
}

}  // namespace nodetab
