#include <cmath>
#include <vector>

#include "doctest.h"
#include "nodetab/rng.hpp"
#include "nodetab/train.hpp"

using namespace nodetab;

namespace {

Parameter scalar_param(const std::string& name, double value) {
  Parameter p;
  p.value = Tensor::scalar(value);
  p.grad = Tensor::scalar(0.0);
  p.name = name;
  return p;
}

bool same_values(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a.flat()[i] != b.flat()[i]) return false;
  }
  return true;
}

// Axis-aligned synthetic task: label = 1[x3 > 0.5] over 4 uniform features,
// with a margin band removed around the split.
Dataset single_split_dataset(std::size_t rows, std::uint64_t seed) {
  Dataset ds;
  ds.task = TaskKind::classification;
  ds.has_target = true;
  ds.class_labels = {"neg", "pos"};
  ds.features.resize(4);
  for (std::size_t c = 0; c < 4; ++c) {
    ds.features[c].meta = {"x" + std::to_string(c), ColumnKind::numeric};
  }
  Rng rng(seed);
  while (ds.row_count < rows) {
    double x3 = rng.uniform();
    if (std::abs(x3 - 0.5) <= 0.02) continue;
    for (std::size_t c = 0; c < 3; ++c) ds.features[c].numeric.push_back(rng.uniform());
    ds.features[3].numeric.push_back(x3);
    ds.target_class.push_back(x3 > 0.5 ? 1 : 0);
    ds.row_count += 1;
  }
  ds.tags.assign(ds.row_count, SplitTag::train);
  return ds;
}

Dataset linear_regression_dataset(std::size_t rows, std::uint64_t seed) {
  Dataset ds;
  ds.task = TaskKind::regression;
  ds.has_target = true;
  ds.features.resize(2);
  ds.features[0].meta = {"a", ColumnKind::numeric};
  ds.features[1].meta = {"b", ColumnKind::numeric};
  Rng rng(seed);
  for (std::size_t r = 0; r < rows; ++r) {
    double a = rng.uniform(), b = rng.uniform();
    ds.features[0].numeric.push_back(a);
    ds.features[1].numeric.push_back(b);
    ds.target_real.push_back(2.0 * a - b + 0.1 * rng.normal());
  }
  ds.row_count = rows;
  ds.tags.assign(rows, SplitTag::train);
  return ds;
}

}  // namespace

TEST_CASE("qhadam: t=1 update matches the closed form") {
  Parameter p = scalar_param("w", 0.0);
  QhAdam opt({&p});
  p.grad.flat()[0] = 1.0;
  opt.step();
  // m_hat = v_hat = 1 at t=1, so the step is -lr * 1 / (1 + eps).
  double expect = -1e-3 / (1.0 + 1e-8);
  CHECK(p.value.flat()[0] == doctest::Approx(expect).epsilon(1e-14));
  CHECK(std::abs(p.value.flat()[0] + 1e-3) <= 1e-10);
}

TEST_CASE("qhadam: nu = 1 reduces to Adam against a scalar oracle") {
  QhAdamConfig config;
  config.nu1 = 1.0;
  config.nu2 = 1.0;
  config.lr = 0.01;
  Parameter p = scalar_param("w", 0.5);
  QhAdam opt({&p}, config);

  double theta = 0.5, m = 0.0, v = 0.0;
  for (int t = 1; t <= 100; ++t) {
    double g = std::sin(0.3 * t) + 0.25;
    p.grad.flat()[0] = g;
    opt.step();

    m = config.beta1 * m + (1.0 - config.beta1) * g;
    v = config.beta2 * v + (1.0 - config.beta2) * g * g;
    double m_hat = m / (1.0 - std::pow(config.beta1, t));
    double v_hat = v / (1.0 - std::pow(config.beta2, t));
    theta -= config.lr * m_hat / (std::sqrt(v_hat) + config.eps);
    CHECK(std::abs(p.value.flat()[0] - theta) <= 1e-12);
  }
}

TEST_CASE("qhadam: zero gradient with zero state leaves parameters fixed") {
  Parameter p = scalar_param("w", 1.25);
  QhAdam opt({&p});
  p.grad.flat()[0] = 0.0;
  opt.step();
  CHECK(p.value.flat()[0] == 1.25);
}

TEST_CASE("qhadam: non-finite gradient aborts before any update, naming the parameter") {
  Parameter good = scalar_param("good", 1.0);
  Parameter bad = scalar_param("spiky", 2.0);
  QhAdam opt({&good, &bad});
  good.grad.flat()[0] = 0.5;
  bad.grad.flat()[0] = std::nan("");
  CHECK_THROWS_WITH_AS(opt.step(), "qhadam: non-finite gradient for parameter 'spiky'",
                       std::runtime_error);
  CHECK(good.value.flat()[0] == 1.0);
  CHECK(bad.value.flat()[0] == 2.0);
  CHECK(opt.step_count() == 0);
}

TEST_CASE("qhadam: config validation") {
  QhAdamConfig config;
  config.lr = 0.0;
  CHECK_THROWS_AS(QhAdam({}, config), std::invalid_argument);
  config = {};
  config.nu1 = 1.5;
  CHECK_THROWS_AS(QhAdam({}, config), std::invalid_argument);
  config = {};
  config.beta2 = 1.0;
  CHECK_THROWS_AS(QhAdam({}, config), std::invalid_argument);
}

TEST_CASE("train: one small-lr step decreases the fixed-batch loss") {
  int decreased = 0;
  const int trials = 20;
  for (int trial = 0; trial < trials; ++trial) {
    auto configs = plan_layer_configs(3, 1, 2, 2, 1, ChoiceKind::entmax(1.5));
    NodeModel model = build_model(TaskKind::regression, 0, configs);

    Rng rng(100 + trial);
    Tensor x({8, 3});
    for (double& v : x.flat()) v = rng.uniform();
    std::vector<double> targets(8);
    for (double& t : targets) t = rng.normal();
    data_aware_init(model, x, 200 + trial);

    auto batch_loss = [&]() {
      Tape tape(false);
      Value head = model_forward(tape, tape.constant(x), model, ChoiceEval{});
      double acc = 0.0;
      for (std::size_t i = 0; i < 8; ++i) {
        double d = head.tensor().at(i, 0) - targets[i];
        acc += d * d;
      }
      return acc / 8.0;
    };

    double before = batch_loss();
    QhAdamConfig opt_config;
    opt_config.lr = 1e-5;
    QhAdam opt(model.parameters(), opt_config);
    Tape tape;
    Value head = model_forward(tape, tape.constant(x), model, ChoiceEval{});
    Value loss = mse(tape, head, targets);
    opt.zero_grad();
    tape.backward(loss);
    opt.step();
    if (batch_loss() < before) decreased += 1;
  }
  CHECK(decreased >= trials - 1);
}

TEST_CASE("init: first-batch gates stay strictly unsaturated for every choice kind") {
  Rng data_rng(42);
  Tensor x({16, 5});
  for (double& v : x.flat()) v = 3.0 * (data_rng.uniform() - 0.5);

  const ChoiceKind kinds[] = {ChoiceKind::softmax(), ChoiceKind::sparsemax(),
                              ChoiceKind::entmax(1.5), ChoiceKind::entmax(1.3),
                              ChoiceKind::gumbel(TemperatureSchedule{})};
  for (const ChoiceKind& kind : kinds) {
    auto configs = plan_layer_configs(5, 2, 6, 3, 2, kind);
    NodeModel model = build_model(TaskKind::regression, 0, configs);
    data_aware_init(model, x, 7);

    Tensor inputs = x;
    ChoiceEval inference;
    for (std::size_t li = 0; li < model.layers.size(); ++li) {
      const LayerConfig& config = model.configs[li];
      OdtLayerParams& params = model.layers[li];
      for (std::size_t t = 0; t < config.tree_count; ++t) {
        for (std::size_t dep = 0; dep < config.depth; ++dep) {
          std::vector<double> logits(config.input_dim);
          for (std::size_t j = 0; j < config.input_dim; ++j) {
            logits[j] = params.feature_logits.value.at(t, dep, j);
          }
          std::vector<double> w = choice_forward(config.choice, logits, inference);
          double raw = params.scales_raw.value.at(t, dep);
          double tau = std::log1p(std::exp(raw));
          if (raw > 20.0) tau = raw;
          tau += kScaleShift;
          for (std::size_t s = 0; s < 16; ++s) {
            double fhat = 0.0;
            for (std::size_t j = 0; j < config.input_dim; ++j) {
              fhat += inputs.at(s, j) * w[j];
            }
            double arg = (fhat - params.thresholds.value.at(t, dep)) / tau;
            // Saturating kinds: strictly open; logistic kinds: linear region.
            double c = kind.tag == ChoiceTag::gumbel_softmax
                           ? gate_forward(ChoiceKind::softmax(), arg)
                           : gate_forward(config.choice, arg, inference);
            CHECK(c > 0.0);
            CHECK(c < 1.0);
          }
        }
      }
      if (li + 1 < model.layers.size()) {
        Tape tape(false);
        LayerOut out = layer_forward(tape, tape.constant(inputs), params, config, inference);
        const Tensor& flat = out.flat.tensor();
        Tensor next({inputs.shape()[0], config.input_dim + config.output_width()});
        for (std::size_t s = 0; s < 16; ++s) {
          for (std::size_t j = 0; j < config.input_dim; ++j) next.at(s, j) = inputs.at(s, j);
          for (std::size_t j = 0; j < config.output_width(); ++j) {
            next.at(s, config.input_dim + j) = flat.at(s, j);
          }
        }
        inputs = std::move(next);
      }
    }
  }
}

TEST_CASE("init: fixed seed is bit-identical; degenerate batches are handled") {
  Rng data_rng(5);
  Tensor x({8, 3});
  for (double& v : x.flat()) v = data_rng.uniform();

  auto configs = plan_layer_configs(3, 2, 4, 2, 1, ChoiceKind::entmax(1.5));
  NodeModel a = build_model(TaskKind::regression, 0, configs);
  NodeModel b = build_model(TaskKind::regression, 0, configs);
  data_aware_init(a, x, 99);
  data_aware_init(b, x, 99);
  for (std::size_t k = 0; k < a.layers.size(); ++k) {
    CHECK(same_values(a.layers[k].feature_logits.value, b.layers[k].feature_logits.value));
    CHECK(same_values(a.layers[k].thresholds.value, b.layers[k].thresholds.value));
    CHECK(same_values(a.layers[k].scales_raw.value, b.layers[k].scales_raw.value));
    CHECK(same_values(a.layers[k].responses.value, b.layers[k].responses.value));
  }

  NodeModel c = build_model(TaskKind::regression, 0, configs);
  data_aware_init(c, x, 100);
  bool any_diff = false;
  for (std::size_t k = 0; k < c.layers.size(); ++k) {
    if (c.layers[k].thresholds.value.flat()[0] != a.layers[k].thresholds.value.flat()[0]) {
      any_diff = true;
    }
  }
  CHECK(any_diff);

  // Constant input: every feature response is constant, so scales floor.
  Tensor flat_x({4, 3});
  flat_x.fill(2.5);
  NodeModel d = build_model(TaskKind::regression, 0, {configs[0]});
  std::vector<std::string> warnings;
  data_aware_init(d, flat_x, 1, &warnings);
  REQUIRE(warnings.size() == 1);
  CHECK(warnings[0].find("constant") != std::string::npos);

  Tensor tiny({1, 3});
  CHECK_THROWS_AS(data_aware_init(d, tiny, 1), std::invalid_argument);
  Tensor wide({4, 7});
  CHECK_THROWS_AS(data_aware_init(d, wide, 1), std::invalid_argument);
}

TEST_CASE("train: learns the single axis-aligned split to >= 0.99 val accuracy") {
  Dataset ds = single_split_dataset(800, 2024);
  TrainConfig config;
  config.num_layers = 1;
  config.total_tree_count = 4;
  config.depth = 1;
  config.batch_size = 128;
  config.max_steps = 1500;
  config.eval_interval = 50;
  config.patience = 30;
  config.seed = 3;

  TrainResult result = train_model(ds, config);
  CHECK_FALSE(result.history.diverged);
  CHECK(result.history.best_val_metric <= 0.01);  // error rate <= 1%

  auto val_rows = ds.rows_with_tag(SplitTag::val);
  EvalMetrics metrics = evaluate_model(result.model, ds, val_rows);
  CHECK(metrics.accuracy >= 0.99);
  CHECK(metrics.metric == doctest::Approx(result.history.best_val_metric).epsilon(1e-12));
}

TEST_CASE("train: patience 1 with a flat metric stops after exactly 2 evaluations") {
  Dataset ds = linear_regression_dataset(120, 9);
  TrainConfig config;
  config.num_layers = 1;
  config.total_tree_count = 2;
  config.depth = 2;
  config.learning_rate = 1e-30;  // metric cannot improve
  config.batch_size = 32;
  config.max_steps = 1000;
  config.eval_interval = 5;
  config.patience = 1;
  config.seed = 4;

  TrainResult result = train_model(ds, config);
  CHECK(result.history.evals.size() == 2);
  CHECK(result.history.steps_run == 10);
  CHECK_FALSE(result.history.diverged);
}

TEST_CASE("train: identical seed and data reproduce the run exactly") {
  TrainConfig config;
  config.num_layers = 2;
  config.total_tree_count = 4;
  config.depth = 2;
  config.tree_output_dim = 2;
  config.batch_size = 64;
  config.max_steps = 60;
  config.eval_interval = 20;
  config.seed = 17;

  Dataset ds1 = single_split_dataset(300, 55);
  Dataset ds2 = single_split_dataset(300, 55);
  TrainResult a = train_model(ds1, config);
  TrainResult b = train_model(ds2, config);

  REQUIRE(a.history.evals.size() == b.history.evals.size());
  CHECK(std::abs(a.history.best_val_metric - b.history.best_val_metric) <= 1e-10);
  for (std::size_t i = 0; i < a.history.evals.size(); ++i) {
    CHECK(a.history.evals[i].train_loss == b.history.evals[i].train_loss);
    CHECK(a.history.evals[i].val_metric == b.history.evals[i].val_metric);
  }
  auto pa = parameter_values(a.model);
  auto pb = parameter_values(b.model);
  REQUIRE(pa.size() == pb.size());
  for (std::size_t k = 0; k < pa.size(); ++k) CHECK(same_values(pa[k], pb[k]));
}

TEST_CASE("train: c=1 returns the best raw snapshot bitwise") {
  Dataset ds = single_split_dataset(300, 77);
  TrainConfig config;
  config.num_layers = 1;
  config.total_tree_count = 2;
  config.depth = 1;
  config.batch_size = 64;
  config.max_steps = 80;
  config.eval_interval = 20;
  config.checkpoint_window = 1;
  config.seed = 6;

  std::vector<std::pair<std::size_t, std::vector<Tensor>>> seen;
  auto observer = [&](std::size_t step, const std::vector<Tensor>& averaged, double) {
    seen.emplace_back(step, averaged);
  };
  TrainResult result = train_model(ds, config, observer);

  const std::vector<Tensor>* at_best = nullptr;
  for (const auto& [step, params] : seen) {
    if (step == result.history.best_step) at_best = &params;
  }
  REQUIRE(at_best != nullptr);
  auto final_params = parameter_values(result.model);
  REQUIRE(final_params.size() == at_best->size());
  for (std::size_t k = 0; k < final_params.size(); ++k) {
    CHECK(same_values(final_params[k], (*at_best)[k]));
  }
}

TEST_CASE("train: divergence aborts with history") {
  Dataset ds = linear_regression_dataset(80, 13);
  TrainConfig config;
  config.num_layers = 1;
  config.total_tree_count = 2;
  config.depth = 2;
  config.learning_rate = 1e25;
  config.batch_size = 32;
  config.max_steps = 50;
  config.eval_interval = 1;
  config.patience = 50;
  config.seed = 8;

  TrainResult result = train_model(ds, config);
  CHECK(result.history.diverged);
  CHECK_FALSE(result.history.abort_reason.empty());
  CHECK(result.history.steps_run < 50);
}

TEST_CASE("train: runs shorter than eval_interval still select a model") {
  Dataset ds = linear_regression_dataset(100, 21);
  TrainConfig config;
  config.num_layers = 1;
  config.total_tree_count = 2;
  config.depth = 1;
  config.batch_size = 256;
  config.max_steps = 7;
  config.eval_interval = 200;
  config.seed = 5;

  TrainResult result = train_model(ds, config);
  REQUIRE(result.history.evals.size() == 1);
  CHECK(result.history.evals[0].step == 7);
  CHECK(result.history.best_step == 7);
  CHECK(std::isfinite(result.history.best_val_metric));
}

TEST_CASE("train: config validation rejects bad values") {
  Dataset ds = linear_regression_dataset(50, 31);
  TrainConfig config;
  config.num_layers = 0;
  CHECK_THROWS_AS(train_model(ds, config), std::invalid_argument);
  config = {};
  config.eval_interval = 0;
  CHECK_THROWS_AS(train_model(ds, config), std::invalid_argument);
  config = {};
  config.patience = 0;
  CHECK_THROWS_AS(train_model(ds, config), std::invalid_argument);
  config = {};
  config.val_fraction = 1.0;
  CHECK_THROWS_AS(train_model(ds, config), std::invalid_argument);
}

TEST_CASE("grid: single cell, tie-break by grid order, failed cells skipped") {
  TrainConfig base;
  base.batch_size = 64;
  base.max_steps = 20;
  base.eval_interval = 10;
  base.seed = 12;

  Dataset ds = single_split_dataset(240, 91);
  GridSpace single;
  single.num_layers = {1};
  single.total_tree_count = {2};
  single.depth = {1};
  single.tree_output_dim = {2};
  GridSearchResult one = grid_search(ds, base, single);
  REQUIRE(one.cells.size() == 1);
  CHECK(one.best_index == 0);
  CHECK_FALSE(one.cells[0].failed);
  CHECK(one.best_config.num_layers == 1);

  // Two identical cells tie; the first in grid order wins.
  GridSpace dup = single;
  dup.depth = {1, 1};
  GridSearchResult tie = grid_search(ds, base, dup);
  REQUIRE(tie.cells.size() == 2);
  CHECK(tie.cells[0].val_metric == tie.cells[1].val_metric);
  CHECK(tie.best_index == 0);

  // l = 1 cannot carry a 2-class head: that cell fails, the search continues.
  GridSpace mixed = single;
  mixed.tree_output_dim = {1, 2};
  GridSearchResult partial = grid_search(ds, base, mixed);
  REQUIRE(partial.cells.size() == 2);
  CHECK(partial.cells[0].failed);
  CHECK_FALSE(partial.cells[0].error.empty());
  CHECK_FALSE(partial.cells[1].failed);
  CHECK(partial.best_index == 1);
  CHECK(partial.best_config.tree_output_dim == 2);
}

TEST_CASE("grid: full appendix space enumerates 24 cells in order") {
  GridSpace space;
  std::size_t count = space.num_layers.size() * space.total_tree_count.size() *
                      space.depth.size() * space.tree_output_dim.size();
  CHECK(count == 24);
}
