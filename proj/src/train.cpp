#include "nodetab/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <deque>
#include <numeric>
#include <stdexcept>

namespace nodetab {

namespace {

constexpr double kInitMargin = 1.001;
constexpr double kInitScaleFloor = 1e-4;

// Largest gate argument magnitude allowed at init. Exact saturation gap for
// entmax/sparsemax; softmax and gumbel never saturate exactly, so a fixed
// comfortably-linear bound stands in.
double init_gap_target(const ChoiceKind& kind) {
  switch (kind.tag) {
    case ChoiceTag::entmax:
      return saturation_gap(kind.alpha);
    case ChoiceTag::sparsemax:
      return saturation_gap(2.0);
    default:
      return 4.0;
  }
}

double inverse_softplus(double y) {
  y = std::max(y, 1e-9);
  return y > 20.0 ? y : std::log(std::expm1(y));
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  std::size_t cols = x.shape()[1];
  Tensor out({rows.size(), cols});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t c = 0; c < cols; ++c) out.at(i, c) = x.at(rows[i], c);
  }
  return out;
}

std::vector<std::size_t> local_indices(std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return idx;
}

std::vector<Tensor> average_snapshots(const std::deque<std::vector<Tensor>>& window) {
  std::vector<Tensor> avg = window.front();
  if (window.size() == 1) return avg;
  for (std::size_t w = 1; w < window.size(); ++w) {
    for (std::size_t k = 0; k < avg.size(); ++k) {
      std::span<double> acc = avg[k].flat();
      std::span<const double> add = window[w][k].flat();
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += add[i];
    }
  }
  double inv = 1.0 / static_cast<double>(window.size());
  for (Tensor& t : avg) {
    for (double& v : t.flat()) v *= inv;
  }
  return avg;
}

std::size_t argmax_row(const Tensor& head, std::size_t row, std::size_t width) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < width; ++c) {
    if (head.at(row, c) > head.at(row, best)) best = c;
  }
  return best;
}

struct ValData {
  Tensor x;                          // preprocessed features
  std::vector<int> labels;           // classification
  std::vector<double> targets_norm;  // regression, loss scale
  std::vector<double> targets_raw;   // regression, metric scale
};

struct ValScores {
  double metric = 0.0;
  double objective = 0.0;
};

// Scores the current parameters on precomputed validation data.
ValScores score_validation(NodeModel& model, const ValData& val) {
  Tensor head = forward_inference(model, val.x);
  std::size_t rows = val.x.shape()[0];
  ValScores scores;
  if (model.task == TaskKind::classification) {
    std::size_t wrong = 0;
    double ce = 0.0;
    for (std::size_t i = 0; i < rows; ++i) {
      if (argmax_row(head, i, model.class_count) != static_cast<std::size_t>(val.labels[i])) {
        wrong += 1;
      }
      double max_logit = head.at(i, 0);
      for (std::size_t c = 1; c < model.class_count; ++c) {
        max_logit = std::max(max_logit, head.at(i, c));
      }
      double lse = 0.0;
      for (std::size_t c = 0; c < model.class_count; ++c) {
        lse += std::exp(head.at(i, c) - max_logit);
      }
      ce += max_logit + std::log(lse) - head.at(i, static_cast<std::size_t>(val.labels[i]));
    }
    scores.metric = static_cast<double>(wrong) / static_cast<double>(rows);
    scores.objective = ce / static_cast<double>(rows);
  } else {
    const Preprocessor& prep = model.preprocessing;
    double mse_raw = 0.0, mse_norm = 0.0;
    for (std::size_t i = 0; i < rows; ++i) {
      double pred_norm = head.at(i, 0);
      double pred_raw = pred_norm * prep.target_scale + prep.target_mean;
      mse_raw += (pred_raw - val.targets_raw[i]) * (pred_raw - val.targets_raw[i]);
      mse_norm += (pred_norm - val.targets_norm[i]) * (pred_norm - val.targets_norm[i]);
    }
    scores.metric = mse_raw / static_cast<double>(rows);
    scores.objective = mse_norm / static_cast<double>(rows);
  }
  return scores;
}

}  // namespace

void TrainConfig::validate() const {
  if (num_layers == 0) throw std::invalid_argument("train: num_layers must be >= 1");
  if (total_tree_count < num_layers) {
    throw std::invalid_argument("train: total_tree_count must cover every layer");
  }
  if (depth == 0 || depth > 24) throw std::invalid_argument("train: depth must lie in [1, 24]");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("train: learning rate must be > 0");
  if (batch_size == 0) throw std::invalid_argument("train: batch_size must be >= 1");
  if (max_steps == 0) throw std::invalid_argument("train: max_steps must be >= 1");
  if (eval_interval == 0) throw std::invalid_argument("train: eval_interval must be >= 1");
  if (patience == 0) throw std::invalid_argument("train: patience must be >= 1");
  if (checkpoint_window == 0) throw std::invalid_argument("train: checkpoint window must be >= 1");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
    throw std::invalid_argument("train: val_fraction must lie in (0, 1)");
  }
  if (quantile_count < 2) throw std::invalid_argument("train: quantile_count must be >= 2");
  choice.validate();
  QhAdamConfig opt = optimizer;
  opt.lr = learning_rate;
  opt.validate();
}

std::size_t TrainConfig::resolved_output_dim(TaskKind task, std::size_t class_count) const {
  if (tree_output_dim > 0) return tree_output_dim;
  return task == TaskKind::classification ? class_count : 1;
}

void data_aware_init(NodeModel& model, const Tensor& first_batch, std::uint64_t seed,
                     std::vector<std::string>* warnings) {
  if (first_batch.shape().size() != 2 || first_batch.shape()[0] < 2) {
    throw std::invalid_argument("init: first batch needs at least 2 rows");
  }
  if (first_batch.shape()[1] != model.feature_dim) {
    throw std::invalid_argument("init: first batch is " +
                                std::to_string(first_batch.shape()[1]) + " wide, model expects " +
                                std::to_string(model.feature_dim));
  }

  Rng rng(seed);
  const std::size_t batch = first_batch.shape()[0];
  Tensor inputs = first_batch;
  ChoiceEval inference;

  for (std::size_t li = 0; li < model.layers.size(); ++li) {
    const LayerConfig& config = model.configs[li];
    OdtLayerParams& params = model.layers[li];
    const std::size_t n = config.input_dim;
    const double g_star = init_gap_target(config.choice);

    for (double& v : params.feature_logits.value.flat()) v = rng.uniform();

    std::size_t floored = 0;
    std::vector<double> logits(n), fhat(batch);
    for (std::size_t t = 0; t < config.tree_count; ++t) {
      for (std::size_t dep = 0; dep < config.depth; ++dep) {
        for (std::size_t j = 0; j < n; ++j) logits[j] = params.feature_logits.value.at(t, dep, j);
        std::vector<double> weights = choice_forward(config.choice, logits, inference);
        for (std::size_t s = 0; s < batch; ++s) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += inputs.at(s, j) * weights[j];
          fhat[s] = acc;
        }

        double b = fhat[rng.below(batch)];
        double gap = 0.0;
        for (std::size_t s = 0; s < batch; ++s) gap = std::max(gap, std::abs(fhat[s] - b));

        double tau;
        if (gap == 0.0) {
          tau = 1.0;
          floored += 1;
        } else {
          tau = std::max(gap * kInitMargin / g_star, kInitScaleFloor);
        }
        params.thresholds.value.at(t, dep) = b;
        params.scales_raw.value.at(t, dep) = inverse_softplus(tau - kScaleShift);
      }
    }
    if (floored > 0 && warnings != nullptr) {
      warnings->push_back("init: layer " + std::to_string(li) + " has " + std::to_string(floored) +
                          " constant feature responses; scale floor applied");
    }

    for (double& v : params.responses.value.flat()) v = rng.normal();

    if (li + 1 < model.layers.size()) {
      Tape tape(false);
      LayerOut out = layer_forward(tape, tape.constant(inputs), params, config, inference);
      const Tensor& flat = out.flat.tensor();
      Tensor next({batch, n + config.output_width()});
      for (std::size_t s = 0; s < batch; ++s) {
        for (std::size_t j = 0; j < n; ++j) next.at(s, j) = inputs.at(s, j);
        for (std::size_t j = 0; j < config.output_width(); ++j) {
          next.at(s, n + j) = flat.at(s, j);
        }
      }
      inputs = std::move(next);
    }
  }
}

EvalMetrics evaluate_model(NodeModel& model, const Dataset& dataset,
                           std::span<const std::size_t> rows) {
  if (rows.empty()) throw std::invalid_argument("evaluate: no rows");
  Tensor out = predict(model, dataset, rows);
  EvalMetrics metrics;
  metrics.rows = rows.size();

  if (model.task == TaskKind::classification) {
    std::size_t wrong = 0;
    double ce = 0.0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      auto label = static_cast<std::size_t>(dataset.target_class[rows[i]]);
      if (argmax_row(out, i, model.class_count) != label) wrong += 1;
      ce += -std::log(std::max(out.at(i, label), 1e-12));
    }
    metrics.metric = static_cast<double>(wrong) / static_cast<double>(rows.size());
    metrics.accuracy = 1.0 - metrics.metric;
    metrics.objective = ce / static_cast<double>(rows.size());
  } else {
    double mse_raw = 0.0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      double d = out.at(i, 0) - dataset.target_real[rows[i]];
      mse_raw += d * d;
    }
    metrics.metric = mse_raw / static_cast<double>(rows.size());
    metrics.objective = metrics.metric;
  }
  return metrics;
}

TrainResult train_model(Dataset& dataset, const TrainConfig& config, const EvalObserver& observer) {
  config.validate();
  if (!dataset.has_target) throw std::invalid_argument("train: dataset has no target");

  TrainResult result;
  TrainHistory& history = result.history;

  if (dataset.rows_with_tag(SplitTag::val).empty()) {
    split_train_val(dataset, config.val_fraction, config.seed,
                    config.stratify && dataset.task == TaskKind::classification,
                    &history.warnings);
  }

  PreprocessOptions prep_options;
  prep_options.quantile_count = config.quantile_count;
  prep_options.normalize_targets = config.normalize_targets;
  PrepFit fit = fit_preprocessor(dataset, prep_options);
  for (const std::string& w : fit.warnings) history.warnings.push_back(w);

  const std::size_t class_count = dataset.class_labels.size();
  const std::size_t output_dim = config.resolved_output_dim(dataset.task, class_count);
  auto plan = plan_layer_configs(fit.prep.feature_dim(), config.num_layers,
                                 config.total_tree_count, config.depth, output_dim, config.choice);
  NodeModel& model = result.model;
  model = build_model(dataset.task, class_count, std::move(plan));
  model.class_labels = dataset.class_labels;
  model.preprocessing = fit.prep;
  model.preprocessing_fitted = true;
  model.meta.seed = config.seed;

  const std::size_t n_train = fit.train_rows.size();
  auto train_idx = local_indices(n_train);

  ValData val;
  auto val_rows = dataset.rows_with_tag(SplitTag::val);
  val.x = transform_features(fit.prep, dataset, val_rows);
  if (dataset.task == TaskKind::classification) {
    val.labels.reserve(val_rows.size());
    for (std::size_t r : val_rows) val.labels.push_back(dataset.target_class[r]);
  } else {
    val.targets_norm = transform_targets(fit.prep, dataset, val_rows);
    val.targets_raw.reserve(val_rows.size());
    for (std::size_t r : val_rows) val.targets_raw.push_back(dataset.target_real[r]);
  }

  auto first_blocks = batches(train_idx, config.batch_size, config.seed, 0);
  data_aware_init(model, gather_rows(fit.train_features, first_blocks[0]), config.seed,
                  &history.warnings);

  QhAdamConfig opt_config = config.optimizer;
  opt_config.lr = config.learning_rate;
  QhAdam optimizer(model.parameters(), opt_config);

  std::deque<std::vector<Tensor>> window;
  std::vector<Tensor> best_params;
  std::size_t evals_since_best = 0;
  double last_train_loss = std::numeric_limits<double>::quiet_NaN();
  bool stop = false;
  auto started = std::chrono::steady_clock::now();

  auto run_eval = [&](std::size_t step) {
    window.push_back(parameter_values(model));
    if (window.size() > config.checkpoint_window) window.pop_front();
    std::vector<Tensor> averaged = average_snapshots(window);

    std::vector<Tensor> saved = parameter_values(model);
    set_parameter_values(model, averaged);
    ValScores scores = score_validation(model, val);
    set_parameter_values(model, saved);

    EvalRecord record;
    record.step = step;
    record.train_loss = last_train_loss;
    record.val_metric = scores.metric;
    record.val_objective = scores.objective;
    record.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    history.evals.push_back(record);
    if (observer) observer(step, averaged, scores.metric);

    if (!std::isfinite(scores.metric)) {
      history.diverged = true;
      history.abort_reason = "validation metric diverged";
      stop = true;
      return;
    }
    if (scores.metric < history.best_val_metric) {
      history.best_val_metric = scores.metric;
      history.best_step = step;
      best_params = std::move(averaged);
      evals_since_best = 0;
    } else {
      evals_since_best += 1;
      if (evals_since_best >= config.patience) stop = true;
    }
  };

  std::size_t step = 0;
  for (std::uint64_t epoch = 0; !stop && step < config.max_steps; ++epoch) {
    auto blocks = epoch == 0 ? first_blocks
                             : batches(train_idx, config.batch_size, config.seed, epoch);
    for (const auto& block : blocks) {
      Tensor x_batch = gather_rows(fit.train_features, block);
      ChoiceEval eval;
      eval.training = true;
      Rng noise(config.seed ^ 0x9E3779B97F4A7C15ull, step);
      eval.rng = &noise;
      if (config.choice.tag == ChoiceTag::gumbel_softmax) {
        eval.temperature = config.choice.schedule.at(static_cast<std::int64_t>(step));
      }

      try {
        Tape tape;
        Value head = model_forward(tape, tape.constant(x_batch), model, eval);
        Value loss;
        if (dataset.task == TaskKind::classification) {
          std::vector<int> labels(block.size());
          for (std::size_t i = 0; i < block.size(); ++i) labels[i] = fit.train_labels[block[i]];
          loss = cross_entropy(tape, head, labels);
        } else {
          std::vector<double> targets(block.size());
          for (std::size_t i = 0; i < block.size(); ++i) targets[i] = fit.train_targets[block[i]];
          loss = mse(tape, head, targets);
        }
        last_train_loss = loss.tensor().flat()[0];
        optimizer.zero_grad();
        tape.backward(loss);
        optimizer.step();
      } catch (const std::exception& e) {
        history.diverged = true;
        history.abort_reason = e.what();
        stop = true;
        break;
      }

      step += 1;
      if (step % config.eval_interval == 0) run_eval(step);
      if (stop || step >= config.max_steps) break;
    }
  }
  // Short runs (or leftover steps) still get a terminal model selection.
  if (!history.diverged && !stop && step % config.eval_interval != 0) run_eval(step);
  if (!history.diverged && history.evals.empty() && step > 0) run_eval(step);

  history.steps_run = step;
  if (!best_params.empty()) set_parameter_values(model, best_params);
  model.meta.trained_steps = step;
  model.meta.best_step = history.best_step;
  model.meta.best_val_metric = history.best_val_metric;
  return result;
}

GridSearchResult grid_search(Dataset& dataset, const TrainConfig& base, const GridSpace& space) {
  if (space.num_layers.empty() || space.total_tree_count.empty() || space.depth.empty() ||
      space.tree_output_dim.empty()) {
    throw std::invalid_argument("grid: empty axis");
  }
  if (dataset.rows_with_tag(SplitTag::val).empty()) {
    split_train_val(dataset, base.val_fraction, base.seed,
                    base.stratify && dataset.task == TaskKind::classification, nullptr);
  }

  GridSearchResult result;
  result.best_config = base;
  double best_metric = std::numeric_limits<double>::infinity();
  bool have_best = false;

  for (std::size_t layers : space.num_layers) {
    for (std::size_t trees : space.total_tree_count) {
      for (std::size_t depth : space.depth) {
        for (std::size_t dim : space.tree_output_dim) {
          GridCellResult cell;
          cell.cell = GridCell{layers, trees, depth, dim};
          TrainConfig config = base;
          config.num_layers = layers;
          config.total_tree_count = trees;
          config.depth = depth;
          config.tree_output_dim = dim;
          try {
            TrainResult trained = train_model(dataset, config);
            if (trained.history.diverged) {
              cell.failed = true;
              cell.error = trained.history.abort_reason;
            } else {
              cell.val_metric = trained.history.best_val_metric;
            }
          } catch (const std::exception& e) {
            cell.failed = true;
            cell.error = e.what();
          }
          if (!cell.failed && cell.val_metric < best_metric) {
            best_metric = cell.val_metric;
            result.best_index = result.cells.size();
            result.best_config = config;
            have_best = true;
          }
          result.cells.push_back(std::move(cell));
        }
      }
    }
  }
  if (!have_best) throw std::runtime_error("grid: every cell failed");
  return result;
}

}  // namespace nodetab
