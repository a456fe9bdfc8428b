#include <doctest.h>

#include <cmath>
#include <vector>

#include "nodetab/layer.hpp"
#include "nodetab/rng.hpp"

using namespace nodetab;

namespace {

void randomize(Parameter& p, Rng& rng, double scale = 1.0) {
  for (double& v : p.value.flat()) v = scale * rng.normal();
}

}  // namespace

TEST_CASE("make_layer: shapes, names, validation") {
  LayerConfig config{3, 2, 4, 7, ChoiceKind::entmax(1.5)};
  OdtLayerParams params = make_layer(config, "layer5");
  CHECK(params.feature_logits.value.shape() == std::vector<std::size_t>{3, 2, 7});
  CHECK(params.thresholds.value.shape() == std::vector<std::size_t>{3, 2});
  CHECK(params.scales_raw.value.shape() == std::vector<std::size_t>{3, 2});
  CHECK(params.responses.value.shape() == std::vector<std::size_t>{3, 4, 4});
  CHECK(params.feature_logits.name == "layer5/F");
  CHECK(params.responses.name == "layer5/R");

  CHECK_THROWS_AS(make_layer(LayerConfig{0, 1, 1, 1}, "x"), std::invalid_argument);
  CHECK_THROWS_AS(make_layer(LayerConfig{1, 0, 1, 1}, "x"), std::invalid_argument);
  CHECK_THROWS_AS(make_layer(LayerConfig{1, 25, 1, 1}, "x"), std::invalid_argument);
  CHECK_THROWS_AS(make_layer(LayerConfig{1, 1, 1, 1, ChoiceKind::entmax(3.0)}, "x"),
                  std::invalid_argument);
}

TEST_CASE("hard_forward: table lookup, tie conventions") {
  LayerConfig config{1, 2, 1, 3};
  OdtLayerParams params = make_layer(config, "t");
  // Depth 0 selects feature 0, depth 1 selects feature 2.
  params.feature_logits.value.at(0, 0, 0) = 5.0;
  params.feature_logits.value.at(0, 1, 2) = 5.0;
  for (std::size_t idx = 0; idx < 4; ++idx) params.responses.value.at(0, idx, 0) = 10.0 + idx;

  SUBCASE("bits follow the sign of feature minus threshold") {
    Tensor x({1, 3}, {0.5, 99.0, -1.0});  // feature 0 -> 0.5 (bit set), feature 2 -> -1 (clear)
    HardForwardResult r = hard_forward(x, params, config);
    CHECK(r.out[0] == 10.0 + 1);  // index 01b
    CHECK(r.argmax_ties == 0);
  }

  SUBCASE("feature exactly at the threshold routes to the high side") {
    Tensor x({1, 3}, {0.0, 0.0, 0.0});
    HardForwardResult r = hard_forward(x, params, config);
    CHECK(r.out[0] == 10.0 + 3);  // both comparisons are 0 >= 0
  }

  SUBCASE("selector ties are counted and resolved to the lowest index") {
    OdtLayerParams tied = make_layer(config, "t2");
    tied.feature_logits.value.at(0, 0, 1) = 5.0;
    tied.feature_logits.value.at(0, 0, 2) = 5.0;  // tie between features 1 and 2
    tied.responses.value.at(0, 3, 0) = 1.0;
    // Depth 0 picks feature 1 (3.0 >= 0: bit set); the all-zero depth-1 row
    // picks feature 0 (0.0 >= 0: bit set) -> leaf index 3.
    Tensor x({1, 3}, {0.0, 3.0, -3.0});
    HardForwardResult r = hard_forward(x, tied, config);
    CHECK(r.argmax_ties == 2);  // depth 1 row is all zeros: also tied
    CHECK(r.out[0] == 1.0);
  }
}

TEST_CASE("layer_forward: layout and totality") {
  SUBCASE("tree-major output layout") {
    LayerConfig config{2, 1, 3, 2};
    OdtLayerParams params = make_layer(config, "t");
    for (std::size_t leaf = 0; leaf < 2; ++leaf) {
      for (std::size_t ch = 0; ch < 3; ++ch) {
        params.responses.value.at(0, leaf, ch) = 1.0 + ch;  // tree 0: [1,2,3]
        params.responses.value.at(1, leaf, ch) = 4.0 + ch;  // tree 1: [4,5,6]
      }
    }
    Tape tape;
    Value x = tape.constant(Tensor({1, 2}, {0.3, -0.7}));
    LayerOut out = layer_forward(tape, x, params, config);
    CHECK(out.flat.shape() == std::vector<std::size_t>{1, 6});
    for (std::size_t i = 0; i < 6; ++i) {
      CHECK(out.flat.tensor()[i] == doctest::Approx(1.0 + i).epsilon(1e-12));
    }
  }

  SUBCASE("zero input and zero parameters stay finite") {
    LayerConfig config{4, 3, 2, 5};
    OdtLayerParams params = make_layer(config, "t");
    Tape tape;
    Value x = tape.constant(Tensor({2, 5}));
    LayerOut out = layer_forward(tape, x, params, config);
    CHECK(out.trees.tensor().all_finite());
    for (double v : out.flat.tensor().flat()) CHECK(v == 0.0);
  }

  SUBCASE("input width mismatch is rejected") {
    LayerConfig config{1, 1, 1, 4};
    OdtLayerParams params = make_layer(config, "t");
    Tape tape;
    Value x = tape.constant(Tensor({1, 3}));
    CHECK_THROWS_AS(layer_forward(tape, x, params, config), std::invalid_argument);
  }
}

TEST_CASE("layer_forward: monotone routing through a depth-1 tree") {
  // R = [0 (low leaf), 1 (high leaf)] makes the output equal the gate value.
  LayerConfig config{1, 1, 1, 3};
  OdtLayerParams params = make_layer(config, "t");
  params.feature_logits.value.at(0, 0, 1) = 50.0;  // one-hot selection of feature 1
  params.thresholds.value.at(0, 0) = 0.2;
  params.responses.value.at(0, 1, 0) = 1.0;

  const std::size_t B = 101;
  Tensor x({B, 3});
  for (std::size_t s = 0; s < B; ++s) {
    x.at(s, 0) = 5.0;
    x.at(s, 1) = -2.0 + 4.0 * static_cast<double>(s) / (B - 1);
    x.at(s, 2) = -5.0;
  }
  Tape tape(false);
  LayerOut out = layer_forward(tape, tape.constant(x), params, config);
  double prev = -1.0;
  for (std::size_t s = 0; s < B; ++s) {
    double c = out.flat.tensor()[s];
    CHECK(c >= prev - 1e-12);
    CHECK(c >= 0.0);
    CHECK(c <= 1.0);
    prev = c;
  }
  CHECK(out.flat.tensor()[0] == 0.0);      // far below the threshold: saturated
  CHECK(out.flat.tensor()[B - 1] == 1.0);  // far above
}

TEST_CASE("layer_forward: tree permutation symmetry") {
  LayerConfig config{2, 2, 2, 4};
  Rng rng(211);
  OdtLayerParams a = make_layer(config, "a");
  randomize(a.feature_logits, rng);
  randomize(a.thresholds, rng, 0.3);
  randomize(a.scales_raw, rng, 0.3);
  randomize(a.responses, rng);

  OdtLayerParams b = make_layer(config, "b");
  auto swap_trees = [](const Tensor& src, Tensor& dst) {
    std::size_t block = src.size() / 2;
    std::copy_n(src.data(), block, dst.data() + block);
    std::copy_n(src.data() + block, block, dst.data());
  };
  swap_trees(a.feature_logits.value, b.feature_logits.value);
  swap_trees(a.thresholds.value, b.thresholds.value);
  swap_trees(a.scales_raw.value, b.scales_raw.value);
  swap_trees(a.responses.value, b.responses.value);

  Tensor x({3, 4});
  for (double& v : x.flat()) v = rng.normal();
  Tape tape(false);
  LayerOut oa = layer_forward(tape, tape.constant(x), a, config);
  LayerOut ob = layer_forward(tape, tape.constant(x), b, config);
  for (std::size_t s = 0; s < 3; ++s) {
    for (std::size_t ch = 0; ch < 2; ++ch) {  // per-tree block width = output_dim
      CHECK(oa.flat.tensor().at(s, ch) == doctest::Approx(ob.flat.tensor().at(s, 2 + ch)));
      CHECK(oa.flat.tensor().at(s, 2 + ch) == doctest::Approx(ob.flat.tensor().at(s, ch)));
    }
  }
}

TEST_CASE("layer_forward equals hard_forward in the saturated regime") {
  Rng rng(223);
  LayerConfig config{4, 3, 2, 6};
  OdtLayerParams params = make_layer(config, "t");
  randomize(params.feature_logits, rng);
  randomize(params.thresholds, rng, 0.4);
  randomize(params.responses, rng);
  params.scales_raw.value.fill(-40.0);  // softplus(-40) ~ 4e-18: tau ~ kScaleShift
  for (double& v : params.feature_logits.value.flat()) v *= 1000.0;  // one-hot selectors

  Tensor x({16, 6});
  for (double& v : x.flat()) v = rng.normal();
  Tape tape(false);
  LayerOut soft = layer_forward(tape, tape.constant(x), params, config);
  HardForwardResult hard = hard_forward(x, params, config);
  CHECK(hard.argmax_ties == 0);
  for (std::size_t i = 0; i < soft.flat.tensor().size(); ++i) {
    CHECK(std::abs(soft.flat.tensor()[i] - hard.out[i]) <= 1e-9);
  }
}

TEST_CASE("layer_forward: gradients match finite differences") {
  Rng rng(227);
  LayerConfig config{2, 2, 2, 6};
  OdtLayerParams params = make_layer(config, "t");
  randomize(params.feature_logits, rng, 0.5);
  randomize(params.thresholds, rng, 0.2);
  randomize(params.scales_raw, rng, 0.3);
  randomize(params.responses, rng);

  Tensor x({3, 6});
  for (double& v : x.flat()) v = 0.8 * rng.normal();
  Tensor weights({3, 4});
  for (double& v : weights.flat()) v = rng.normal();

  std::vector<Parameter*> ps{&params.feature_logits, &params.thresholds, &params.scales_raw,
                             &params.responses};
  auto build = [&](Tape& tape) {
    LayerOut out = layer_forward(tape, tape.constant(x), params, config);
    return sum(tape, mul(tape, out.flat, tape.constant(weights)));
  };
  GradCheckReport report = grad_check(build, ps, 1e-5);
  CHECK(report.deterministic);
  CHECK(report.max_rel_err <= 1e-4);
}
