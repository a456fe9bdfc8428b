#include "nodetab/serialize.hpp"

#include <array>
#include <bit>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <utility>

namespace nodetab {

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t hash = 0xcbf29ce484222325ull;
  for (char c : bytes) {
    hash ^= static_cast<unsigned char>(c);
    hash *= 0x100000001b3ull;
  }
  return hash;
}

namespace {

class Writer {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(std::string_view s) {
    u64(s.size());
    buf_.append(s);
  }
  void raw(std::string_view s) { buf_.append(s); }
  void tensor(const Tensor& t) {
    u64(t.rank());
    for (std::size_t d : t.shape()) u64(d);
    for (double v : t.flat()) f64(v);
  }
  std::string take() { return std::move(buf_); }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(take(1)[0]); }
  std::uint32_t u32() {
    std::string_view b = take(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(b[i]))
                                     << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::string_view b = take(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b[i]))
                                     << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    std::size_t n = checked_count(u64(), 1);
    return std::string(take(n));
  }
  Tensor tensor() {
    std::size_t rank = checked_count(u64(), 8);
    std::vector<std::size_t> shape(rank);
    for (std::size_t& d : shape) d = checked_count(u64(), 8);
    Tensor t(shape);
    for (double& v : t.flat()) v = f64();
    return t;
  }
  std::string_view take(std::size_t n) {
    if (bytes_.size() - pos_ < n) throw std::runtime_error("model file: truncated");
    std::string_view view = bytes_.substr(pos_, n);
    pos_ += n;
    return view;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  // Guards against bogus counts from corrupt files before allocating.
  std::size_t checked_count(std::uint64_t n, std::size_t elem_size) {
    if (n > (bytes_.size() - pos_) / elem_size + 1) {
      throw std::runtime_error("model file: truncated");
    }
    return static_cast<std::size_t>(n);
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

void write_choice(Writer& w, const ChoiceKind& kind) {
  w.u8(static_cast<std::uint8_t>(kind.tag));
  w.f64(kind.alpha);
  w.u8(static_cast<std::uint8_t>(kind.schedule.kind));
  w.f64(kind.schedule.start);
  w.f64(kind.schedule.decay);
  w.f64(kind.schedule.floor);
}

ChoiceKind read_choice(Reader& r) {
  ChoiceKind kind;
  kind.tag = static_cast<ChoiceTag>(r.u8());
  kind.alpha = r.f64();
  kind.schedule.kind = static_cast<TemperatureSchedule::Kind>(r.u8());
  kind.schedule.start = r.f64();
  kind.schedule.decay = r.f64();
  kind.schedule.floor = r.f64();
  return kind;
}

void write_layer_config(Writer& w, const LayerConfig& config) {
  w.u64(config.tree_count);
  w.u64(config.depth);
  w.u64(config.output_dim);
  w.u64(config.input_dim);
  write_choice(w, config.choice);
}

LayerConfig read_layer_config(Reader& r) {
  LayerConfig config;
  config.tree_count = r.u64();
  config.depth = r.u64();
  config.output_dim = r.u64();
  config.input_dim = r.u64();
  config.choice = read_choice(r);
  return config;
}

void write_labels(Writer& w, const std::vector<std::string>& labels) {
  w.u64(labels.size());
  for (const std::string& label : labels) w.str(label);
}

std::vector<std::string> read_labels(Reader& r) {
  std::vector<std::string> labels(r.u64());
  for (std::string& label : labels) label = r.str();
  return labels;
}

void write_prep(Writer& w, const Preprocessor& prep) {
  w.u64(prep.columns.size());
  for (const ColumnMeta& column : prep.columns) {
    w.str(column.name);
    w.u8(static_cast<std::uint8_t>(column.kind));
  }
  w.u64(prep.quantile_count);
  for (double m : prep.medians) w.f64(m);
  for (const LooEncoderState& loo : prep.loo) {
    w.u64(loo.stats.size());
    for (const auto& [key, stat] : loo.stats) {
      w.str(key);
      w.f64(stat.first);
      w.u64(stat.second);
    }
    w.f64(loo.global_mean);
  }
  for (const QuantileTransformState& q : prep.quantiles) {
    w.u64(q.references.size());
    for (double v : q.references) w.f64(v);
    w.u8(q.constant ? 1 : 0);
  }
  w.u8(static_cast<std::uint8_t>(prep.task));
  write_labels(w, prep.class_labels);
  w.u8(prep.normalize_targets ? 1 : 0);
  w.f64(prep.target_mean);
  w.f64(prep.target_scale);
}

Preprocessor read_prep(Reader& r) {
  Preprocessor prep;
  prep.columns.resize(r.u64());
  for (ColumnMeta& column : prep.columns) {
    column.name = r.str();
    column.kind = static_cast<ColumnKind>(r.u8());
  }
  prep.quantile_count = r.u64();
  prep.medians.resize(prep.columns.size());
  for (double& m : prep.medians) m = r.f64();
  prep.loo.resize(prep.columns.size());
  for (LooEncoderState& loo : prep.loo) {
    std::size_t entries = r.u64();
    for (std::size_t i = 0; i < entries; ++i) {
      std::string key = r.str();
      double sum = r.f64();
      std::size_t count = r.u64();
      loo.stats.emplace(std::move(key), std::make_pair(sum, count));
    }
    loo.global_mean = r.f64();
  }
  prep.quantiles.resize(prep.columns.size());
  for (QuantileTransformState& q : prep.quantiles) {
    q.references.resize(r.u64());
    for (double& v : q.references) v = r.f64();
    q.constant = r.u8() != 0;
  }
  prep.task = static_cast<TaskKind>(r.u8());
  prep.class_labels = read_labels(r);
  prep.normalize_targets = r.u8() != 0;
  prep.target_mean = r.f64();
  prep.target_scale = r.f64();
  return prep;
}

void check_header(Reader& r, std::string_view magic) {
  std::string_view found = r.take(6);
  if (found != magic) {
    if (found == kModelMagic || found == kCompiledMagic) {
      throw std::runtime_error(std::string("model file: expected a ") +
                               (magic == kModelMagic ? "dense" : "compiled") +
                               " artifact, found magic '" + std::string(found) + "'");
    }
    throw std::runtime_error("model file: bad magic; not a model file");
  }
  std::uint32_t version = r.u32();
  if (version != kModelFormatVersion) {
    throw std::runtime_error("model file: format version " + std::to_string(version) +
                             " unsupported; this build reads version " +
                             std::to_string(kModelFormatVersion));
  }
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("model file: cannot read '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return std::move(buf).str();
}

void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("model file: cannot write '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("model file: write failed for '" + path + "'");
}

}  // namespace

std::string encode_model(const NodeModel& model) {
  Writer w;
  w.raw(kModelMagic);
  w.u32(kModelFormatVersion);
  w.u8(static_cast<std::uint8_t>(model.task));
  w.u64(model.class_count);
  write_labels(w, model.class_labels);
  w.u64(model.feature_dim);
  w.u64(model.layers.size());
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    write_layer_config(w, model.configs[i]);
    w.tensor(model.layers[i].feature_logits.value);
    w.tensor(model.layers[i].thresholds.value);
    w.tensor(model.layers[i].scales_raw.value);
    w.tensor(model.layers[i].responses.value);
  }
  w.u8(model.preprocessing_fitted ? 1 : 0);
  write_prep(w, model.preprocessing);
  w.u64(model.meta.seed);
  w.u32(model.meta.version);
  w.u64(model.meta.trained_steps);
  w.u64(model.meta.best_step);
  w.f64(model.meta.best_val_metric);
  w.u64(model.meta.config_digest);
  return w.take();
}

NodeModel decode_model(std::string_view bytes) {
  Reader r(bytes);
  check_header(r, kModelMagic);

  auto task = static_cast<TaskKind>(r.u8());
  std::size_t class_count = r.u64();
  std::vector<std::string> labels = read_labels(r);
  std::size_t feature_dim = r.u64();

  std::vector<LayerConfig> configs(r.u64());
  std::vector<std::array<Tensor, 4>> tensors;
  tensors.reserve(configs.size());
  for (LayerConfig& config : configs) {
    config = read_layer_config(r);
    tensors.push_back({r.tensor(), r.tensor(), r.tensor(), r.tensor()});
  }

  NodeModel model = build_model(task, class_count, std::move(configs));
  if (model.feature_dim != feature_dim) {
    throw std::runtime_error("model file: feature dim does not match the layer plan");
  }
  model.class_labels = std::move(labels);
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    OdtLayerParams& layer = model.layers[i];
    Parameter* params[4] = {&layer.feature_logits, &layer.thresholds, &layer.scales_raw,
                            &layer.responses};
    for (std::size_t k = 0; k < 4; ++k) {
      if (!tensors[i][k].same_shape(params[k]->value)) {
        throw std::runtime_error("model file: tensor shape mismatch for '" + params[k]->name +
                                 "'");
      }
      params[k]->value = std::move(tensors[i][k]);
    }
  }

  model.preprocessing_fitted = r.u8() != 0;
  model.preprocessing = read_prep(r);
  model.meta.seed = r.u64();
  model.meta.version = r.u32();
  model.meta.trained_steps = r.u64();
  model.meta.best_step = r.u64();
  model.meta.best_val_metric = r.f64();
  model.meta.config_digest = r.u64();
  if (!r.done()) throw std::runtime_error("model file: trailing bytes");
  return model;
}

void save_model(const NodeModel& model, const std::string& path) {
  write_file(path, encode_model(model));
}

NodeModel load_model(const std::string& path) { return decode_model(read_file(path)); }

void save_compiled(const CompiledModel& compiled, const std::string& path) {
  Writer w;
  w.raw(kCompiledMagic);
  w.u32(kModelFormatVersion);
  w.u8(static_cast<std::uint8_t>(compiled.task));
  w.u64(compiled.class_count);
  write_labels(w, compiled.class_labels);
  w.u64(compiled.feature_dim);
  w.f64(compiled.dropped_weight_fraction);
  write_labels(w, compiled.warnings);
  w.u64(compiled.layers.size());
  for (const CompiledLayer& layer : compiled.layers) {
    write_layer_config(w, layer.config);
    for (const CompiledTree& tree : layer.trees) {
      for (const SparseSelector& selector : tree.selectors) {
        w.u64(selector.indices.size());
        for (std::uint32_t idx : selector.indices) w.u32(idx);
        for (double weight : selector.weights) w.f64(weight);
      }
      for (double b : tree.thresholds) w.f64(b);
      for (double s : tree.scales) w.f64(s);
      w.tensor(tree.responses);
    }
  }
  w.u8(compiled.preprocessing_fitted ? 1 : 0);
  write_prep(w, compiled.preprocessing);
  write_file(path, w.take());
}

CompiledModel load_compiled(const std::string& path) {
  std::string bytes = read_file(path);
  Reader r(bytes);
  check_header(r, kCompiledMagic);

  CompiledModel compiled;
  compiled.task = static_cast<TaskKind>(r.u8());
  compiled.class_count = r.u64();
  compiled.class_labels = read_labels(r);
  compiled.feature_dim = r.u64();
  compiled.dropped_weight_fraction = r.f64();
  compiled.warnings = read_labels(r);
  compiled.layers.resize(r.u64());
  for (CompiledLayer& layer : compiled.layers) {
    layer.config = read_layer_config(r);
    layer.config.validate();
    layer.trees.resize(layer.config.tree_count);
    for (CompiledTree& tree : layer.trees) {
      tree.selectors.resize(layer.config.depth);
      for (SparseSelector& selector : tree.selectors) {
        std::size_t entries = r.u64();
        selector.indices.resize(entries);
        for (std::uint32_t& idx : selector.indices) idx = r.u32();
        selector.weights.resize(entries);
        for (double& weight : selector.weights) weight = r.f64();
      }
      tree.thresholds.resize(layer.config.depth);
      for (double& b : tree.thresholds) b = r.f64();
      tree.scales.resize(layer.config.depth);
      for (double& s : tree.scales) s = r.f64();
      tree.responses = r.tensor();
      if (tree.responses.rank() != 2 || tree.responses.dim(0) != layer.config.leaf_count() ||
          tree.responses.dim(1) != layer.config.output_dim) {
        throw std::runtime_error("model file: compiled response table shape mismatch");
      }
    }
  }
  compiled.preprocessing_fitted = r.u8() != 0;
  compiled.preprocessing = read_prep(r);
  if (!r.done()) throw std::runtime_error("model file: trailing bytes");
  return compiled;
}

std::string peek_model_magic(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("model file: cannot read '" + path + "'");
  char magic[6];
  in.read(magic, 6);
  if (in.gcount() != 6) throw std::runtime_error("model file: truncated");
  std::string found(magic, 6);
  if (found != kModelMagic && found != kCompiledMagic) {
    throw std::runtime_error("model file: bad magic; not a model file");
  }
  return found;
}

}  // namespace nodetab
