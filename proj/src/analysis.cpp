#include "nodetab/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace nodetab {

namespace {

double effective_scale(double raw) {
  return std::log1p(std::exp(-std::abs(raw))) + std::max(raw, 0.0) + kScaleShift;
}

std::size_t concat_width(const std::vector<LayerConfig>& configs, std::size_t feature_dim) {
  std::size_t width = feature_dim;
  for (const LayerConfig& config : configs) width += config.output_width();
  return width;
}

}  // namespace

std::size_t CompiledModel::total_trees() const {
  std::size_t total = 0;
  for (const CompiledLayer& layer : layers) total += layer.config.tree_count;
  return total;
}

CompiledModel compile(const NodeModel& model) {
  model.validate();

  CompiledModel compiled;
  compiled.task = model.task;
  compiled.class_count = model.class_count;
  compiled.class_labels = model.class_labels;
  compiled.feature_dim = model.feature_dim;
  compiled.preprocessing = model.preprocessing;
  compiled.preprocessing_fitted = model.preprocessing_fitted;

  ChoiceEval eval;  // inference mode: noise-free, gumbel collapses to argmax
  std::size_t total_entries = 0;
  std::size_t kept_entries = 0;
  bool softmax_seen = false;

  for (std::size_t k = 0; k < model.layers.size(); ++k) {
    const LayerConfig& config = model.configs[k];
    const OdtLayerParams& params = model.layers[k];
    std::size_t m = config.tree_count, d = config.depth, n = config.input_dim;
    std::size_t leaves = config.leaf_count(), l = config.output_dim;
    if (config.choice.tag == ChoiceTag::softmax) softmax_seen = true;

    CompiledLayer layer;
    layer.config = config;
    layer.trees.reserve(m);
    for (std::size_t t = 0; t < m; ++t) {
      CompiledTree tree;
      tree.selectors.resize(d);
      tree.thresholds.resize(d);
      tree.scales.resize(d);
      for (std::size_t i = 0; i < d; ++i) {
        std::span<const double> row(params.feature_logits.value.data() + (t * d + i) * n, n);
        std::vector<double> weights = choice_forward(config.choice, row, eval);
        SparseSelector& selector = tree.selectors[i];
        for (std::size_t j = 0; j < n; ++j) {
          if (weights[j] != 0.0) {
            selector.indices.push_back(static_cast<std::uint32_t>(j));
            selector.weights.push_back(weights[j]);
          }
        }
        total_entries += n;
        kept_entries += selector.indices.size();
        tree.thresholds[i] = params.thresholds.value.at(t, i);
        tree.scales[i] = effective_scale(params.scales_raw.value.at(t, i));
      }
      tree.responses = Tensor({leaves, l});
      const double* src = params.responses.value.data() + t * leaves * l;
      std::copy(src, src + leaves * l, tree.responses.data());
      layer.trees.push_back(std::move(tree));
    }
    compiled.layers.push_back(std::move(layer));
  }

  if (total_entries > 0) {
    compiled.dropped_weight_fraction =
        static_cast<double>(total_entries - kept_entries) / static_cast<double>(total_entries);
  }
  if (softmax_seen) {
    compiled.warnings.push_back(
        "compile: softmax choice yields dense selectors; no weights were dropped for softmax "
        "layers");
  }
  return compiled;
}

Tensor compiled_forward(const CompiledModel& compiled, const Tensor& x) {
  if (compiled.layers.empty()) throw std::invalid_argument("compiled: model has no layers");
  if (x.rank() != 2 || x.dim(1) != compiled.feature_dim) {
    throw std::invalid_argument("compiled: input must be (batch, " +
                                std::to_string(compiled.feature_dim) + ")");
  }

  std::size_t B = x.dim(0);
  std::size_t l = compiled.layers[0].config.output_dim;
  std::vector<LayerConfig> configs;
  configs.reserve(compiled.layers.size());
  for (const CompiledLayer& layer : compiled.layers) configs.push_back(layer.config);
  std::size_t W = concat_width(configs, compiled.feature_dim);

  Tensor working({B, W});
  for (std::size_t s = 0; s < B; ++s) {
    std::copy(x.data() + s * compiled.feature_dim, x.data() + (s + 1) * compiled.feature_dim,
              working.data() + s * W);
  }

  ChoiceEval eval;
  Tensor total({B, l});
  bool first_layer = true;
  std::size_t offset = compiled.feature_dim;
  std::vector<double> leaf;
  std::vector<double> out(l);

  for (const CompiledLayer& layer : compiled.layers) {
    const LayerConfig& config = layer.config;
    std::size_t m = config.tree_count, d = config.depth, P = config.leaf_count();
    leaf.resize(P);

    Tensor sums({B, l});
    for (std::size_t s = 0; s < B; ++s) {
      const double* xrow = working.data() + s * W;
      double* flat_row = working.data() + s * W + offset;
      for (std::size_t t = 0; t < m; ++t) {
        const CompiledTree& tree = layer.trees[t];
        leaf[0] = 1.0;
        std::size_t len = 1;
        for (std::size_t i = 0; i < d; ++i) {
          const SparseSelector& selector = tree.selectors[i];
          double f = 0.0;
          for (std::size_t e = 0; e < selector.indices.size(); ++e) {
            f += xrow[selector.indices[e]] * selector.weights[e];
          }
          double c = gate_forward(config.choice, (f - tree.thresholds[i]) / tree.scales[i], eval);
          for (std::size_t idx = 0; idx < len; ++idx) {
            double v = leaf[idx];
            leaf[idx] = v * (1.0 - c);
            leaf[idx | len] = v * c;
          }
          len <<= 1;
        }

        std::fill(out.begin(), out.end(), 0.0);
        for (std::size_t idx = 0; idx < P; ++idx) {
          double coef = leaf[idx];
          if (coef == 0.0) continue;
          const double* rrow = tree.responses.data() + idx * l;
          for (std::size_t ch = 0; ch < l; ++ch) out[ch] += coef * rrow[ch];
        }
        for (std::size_t ch = 0; ch < l; ++ch) {
          flat_row[t * l + ch] = out[ch];
          sums.at(s, ch) += out[ch];
        }
      }
    }

    if (first_layer) {
      total = std::move(sums);
      first_layer = false;
    } else {
      for (std::size_t i = 0; i < total.size(); ++i) total[i] += sums[i];
    }
    offset += config.output_width();
  }

  double inv = 1.0 / static_cast<double>(compiled.total_trees());
  for (double& v : total.flat()) v *= inv;

  std::size_t head = compiled.head_dim();
  if (head == l) return total;
  Tensor sliced({B, head});
  for (std::size_t s = 0; s < B; ++s) {
    for (std::size_t c = 0; c < head; ++c) sliced.at(s, c) = total.at(s, c);
  }
  return sliced;
}

Tensor compiled_predict(const CompiledModel& compiled, const Dataset& dataset,
                        std::span<const std::size_t> rows) {
  if (!compiled.preprocessing_fitted) {
    throw std::logic_error("predict: compiled model has no fitted preprocessing state");
  }
  Tensor x = transform_features(compiled.preprocessing, dataset, rows);
  Tensor head = compiled_forward(compiled, x);

  if (compiled.task == TaskKind::classification) {
    Tensor probs({rows.size(), compiled.class_count});
    for (std::size_t i = 0; i < rows.size(); ++i) {
      std::vector<double> logits(compiled.class_count);
      for (std::size_t c = 0; c < compiled.class_count; ++c) logits[c] = head.at(i, c);
      std::vector<double> p = softmax_row(logits);
      for (std::size_t c = 0; c < compiled.class_count; ++c) probs.at(i, c) = p[c];
    }
    return probs;
  }

  Tensor values({rows.size(), std::size_t{1}});
  const Preprocessor& prep = compiled.preprocessing;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    values.at(i, 0) = head.at(i, 0) * prep.target_scale + prep.target_mean;
  }
  return values;
}

namespace {

// Full forward with the dense concatenation and per-layer tree sums cached,
// so a permuted column only forces downstream layers to recompute.
struct ForwardCache {
  Tensor concat;                       // (B, feature_dim + sum of block widths)
  std::vector<Tensor> sums;            // per layer (B, l)
  std::vector<std::size_t> offsets;    // start column of each layer's block
  std::size_t width = 0;
};

Tensor layer_sums(const Tensor& trees) {
  std::size_t B = trees.dim(0), m = trees.dim(1), l = trees.dim(2);
  Tensor sums({B, l});
  for (std::size_t s = 0; s < B; ++s) {
    for (std::size_t t = 0; t < m; ++t) {
      for (std::size_t ch = 0; ch < l; ++ch) sums.at(s, ch) += trees.at(s, t, ch);
    }
  }
  return sums;
}

void run_layers(NodeModel& model, Tensor& working, std::size_t width,
                std::vector<Tensor>& sums, const std::vector<std::size_t>& offsets,
                std::size_t first_layer) {
  std::size_t B = working.dim(0);
  for (std::size_t k = first_layer; k < model.layers.size(); ++k) {
    const LayerConfig& config = model.configs[k];
    Tensor input({B, config.input_dim});
    for (std::size_t s = 0; s < B; ++s) {
      std::copy(working.data() + s * width, working.data() + s * width + config.input_dim,
                input.data() + s * config.input_dim);
    }
    Tape tape(false);
    LayerOut out = layer_forward(tape, tape.constant(input), model.layers[k], config, {});
    const Tensor& flat = out.flat.tensor();
    std::size_t block = config.output_width();
    for (std::size_t s = 0; s < B; ++s) {
      std::copy(flat.data() + s * block, flat.data() + (s + 1) * block,
                working.data() + s * width + offsets[k]);
    }
    sums[k] = layer_sums(out.trees.tensor());
  }
}

ForwardCache forward_cache(NodeModel& model, const Tensor& x) {
  ForwardCache cache;
  std::size_t B = x.dim(0);
  cache.width = concat_width(model.configs, model.feature_dim);
  cache.concat = Tensor({B, cache.width});
  for (std::size_t s = 0; s < B; ++s) {
    std::copy(x.data() + s * model.feature_dim, x.data() + (s + 1) * model.feature_dim,
              cache.concat.data() + s * cache.width);
  }
  std::size_t offset = model.feature_dim;
  for (const LayerConfig& config : model.configs) {
    cache.offsets.push_back(offset);
    offset += config.output_width();
  }
  cache.sums.resize(model.layers.size());
  run_layers(model, cache.concat, cache.width, cache.sums, cache.offsets, 0);
  return cache;
}

Tensor head_from_sums(const NodeModel& model, const std::vector<Tensor>& sums) {
  Tensor total = sums[0];
  for (std::size_t k = 1; k < sums.size(); ++k) {
    for (std::size_t i = 0; i < total.size(); ++i) total[i] += sums[k][i];
  }
  double inv = 1.0 / static_cast<double>(model.total_trees());
  for (double& v : total.flat()) v *= inv;

  std::size_t head = model.head_dim();
  std::size_t l = model.configs[0].output_dim;
  if (head == l) return total;
  std::size_t B = total.dim(0);
  Tensor sliced({B, head});
  for (std::size_t s = 0; s < B; ++s) {
    for (std::size_t c = 0; c < head; ++c) sliced.at(s, c) = total.at(s, c);
  }
  return sliced;
}

struct ScoreTargets {
  std::vector<int> labels;
  std::vector<double> raw;
};

double head_metric(const NodeModel& model, const Tensor& head, const ScoreTargets& targets) {
  std::size_t B = head.dim(0);
  if (model.task == TaskKind::classification) {
    std::size_t wrong = 0;
    for (std::size_t s = 0; s < B; ++s) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < model.class_count; ++c) {
        if (head.at(s, c) > head.at(s, best)) best = c;
      }
      if (static_cast<int>(best) != targets.labels[s]) ++wrong;
    }
    return static_cast<double>(wrong) / static_cast<double>(B);
  }
  const Preprocessor& prep = model.preprocessing;
  double se = 0.0;
  for (std::size_t s = 0; s < B; ++s) {
    double diff = head.at(s, 0) * prep.target_scale + prep.target_mean - targets.raw[s];
    se += diff * diff;
  }
  return se / static_cast<double>(B);
}

}  // namespace

std::vector<FeatureImportance> permutation_importance(NodeModel& model, const Dataset& dataset,
                                                      std::span<const std::size_t> rows,
                                                      const ImportanceOptions& options) {
  if (options.repeats < 1) throw std::invalid_argument("importance: repeats must be >= 1");
  if (!model.preprocessing_fitted) {
    throw std::logic_error("importance: model has no fitted preprocessing state");
  }
  if (!dataset.has_target) throw std::invalid_argument("importance: dataset has no targets");
  if (rows.empty()) throw std::invalid_argument("importance: no rows");

  Tensor x = transform_features(model.preprocessing, dataset, rows);
  ScoreTargets targets;
  if (model.task == TaskKind::classification) {
    targets.labels.reserve(rows.size());
    for (std::size_t row : rows) targets.labels.push_back(dataset.target_class[row]);
  } else {
    targets.raw.reserve(rows.size());
    for (std::size_t row : rows) targets.raw.push_back(dataset.target_real[row]);
  }

  ForwardCache cache = forward_cache(model, x);
  double baseline = head_metric(model, head_from_sums(model, cache.sums), targets);
  std::size_t B = rows.size();

  struct ColumnSpec {
    std::string name;
    int layer;
    std::size_t column;       // index within the raw block / layer block
    std::size_t global;       // column in the concatenation; also the rng stream
    std::size_t first_layer;  // first layer whose input the column feeds
  };
  std::vector<ColumnSpec> specs;
  for (std::size_t j = 0; j < model.feature_dim; ++j) {
    specs.push_back({model.preprocessing.columns[j].name, -1, j, j, 0});
  }
  if (options.include_learned) {
    for (std::size_t k = 0; k < model.configs.size(); ++k) {
      std::size_t block = model.configs[k].output_width();
      for (std::size_t c = 0; c < block; ++c) {
        specs.push_back({"layer" + std::to_string(k) + "/h" + std::to_string(c),
                         static_cast<int>(k), c, cache.offsets[k] + c, k + 1});
      }
    }
  }

  std::vector<FeatureImportance> report;
  report.reserve(specs.size());
  std::vector<std::size_t> perm(B);
  std::vector<double> diffs(options.repeats);
  std::vector<Tensor> sums;

  for (const ColumnSpec& spec : specs) {
    Rng rng(options.seed, spec.global);
    for (std::size_t r = 0; r < options.repeats; ++r) {
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      rng.shuffle(std::span<std::size_t>(perm));

      Tensor working = cache.concat;
      for (std::size_t s = 0; s < B; ++s) {
        working.at(s, spec.global) = cache.concat.at(perm[s], spec.global);
      }
      sums = cache.sums;
      run_layers(model, working, cache.width, sums, cache.offsets, spec.first_layer);
      diffs[r] = head_metric(model, head_from_sums(model, sums), targets) - baseline;
    }

    double mean = 0.0;
    for (double d : diffs) mean += d;
    mean /= static_cast<double>(options.repeats);
    double var = 0.0;
    for (double d : diffs) var += (d - mean) * (d - mean);
    var /= static_cast<double>(options.repeats);
    report.push_back({spec.name, spec.layer, spec.column, mean, std::sqrt(var)});
  }
  return report;
}

std::vector<double> tree_contributions(NodeModel& model, const Dataset& dataset,
                                       std::span<const std::size_t> rows) {
  if (!model.preprocessing_fitted) {
    throw std::logic_error("tree_contributions: model has no fitted preprocessing state");
  }
  if (rows.empty()) throw std::invalid_argument("tree_contributions: no rows");

  Tensor x = transform_features(model.preprocessing, dataset, rows);
  Tape tape(false);
  ModelForward fwd = model_forward_collect(tape, tape.constant(x), model, {});

  std::size_t B = rows.size();
  std::size_t head = model.head_dim();
  double inv = 1.0 / (static_cast<double>(B) * static_cast<double>(model.total_trees()));

  std::vector<double> contributions;
  contributions.reserve(model.total_trees());
  for (const LayerOut& out : fwd.layer_outs) {
    const Tensor& trees = out.trees.tensor();
    std::size_t m = trees.dim(1);
    for (std::size_t t = 0; t < m; ++t) {
      double acc = 0.0;
      for (std::size_t s = 0; s < B; ++s) {
        for (std::size_t ch = 0; ch < head; ++ch) acc += std::abs(trees.at(s, t, ch));
      }
      contributions.push_back(acc * inv);
    }
  }
  return contributions;
}

std::vector<LayerImportanceReport> importance_report(
    std::span<const FeatureImportance> importances, std::size_t bins) {
  if (bins < 1) throw std::invalid_argument("report: bins must be >= 1");

  std::vector<int> layers;
  for (const FeatureImportance& imp : importances) {
    if (std::find(layers.begin(), layers.end(), imp.layer) == layers.end()) {
      layers.push_back(imp.layer);
    }
  }

  std::vector<LayerImportanceReport> reports;
  reports.reserve(layers.size());
  for (int layer : layers) {
    std::vector<double> values;
    for (const FeatureImportance& imp : importances) {
      if (imp.layer == layer) values.push_back(imp.mean);
    }
    auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
    double lo = *lo_it, hi = *hi_it;

    LayerImportanceReport report;
    report.layer = layer;
    if (lo == hi) {
      report.degenerate = true;
      double total = 0.0;
      for (double v : values) total += v;
      report.bins.push_back({lo, hi, values.size(), total});
    } else {
      double width = (hi - lo) / static_cast<double>(bins);
      report.bins.resize(bins);
      for (std::size_t i = 0; i < bins; ++i) {
        report.bins[i].lower = lo + width * static_cast<double>(i);
        report.bins[i].upper = i + 1 == bins ? hi : lo + width * static_cast<double>(i + 1);
      }
      for (double v : values) {
        auto idx = static_cast<std::size_t>((v - lo) / width);
        idx = std::min(idx, bins - 1);
        ++report.bins[idx].count;
        report.bins[idx].total += v;
      }
    }
    reports.push_back(std::move(report));
  }
  return reports;
}

}  // namespace nodetab
