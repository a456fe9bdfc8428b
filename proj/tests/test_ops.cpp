#include <doctest.h>

#include <cmath>
#include <vector>

#include "nodetab/ops.hpp"
#include "nodetab/rng.hpp"
#include "nodetab/tape.hpp"

using namespace nodetab;

namespace {

Tensor random_tensor(Rng& rng, std::vector<std::size_t> shape, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.flat()) v = scale * rng.normal();
  return t;
}

}  // namespace

TEST_CASE("elementwise and reduction ops: forward values") {
  Tape tape;
  Value a = tape.constant(Tensor::row({1.0, -2.0, 3.0}));
  Value b = tape.constant(Tensor::row({0.5, 4.0, -1.0}));

  CHECK(add(tape, a, b).tensor()[1] == doctest::Approx(2.0));
  CHECK(sub(tape, a, b).tensor()[0] == doctest::Approx(0.5));
  CHECK(mul(tape, a, b).tensor()[2] == doctest::Approx(-3.0));
  CHECK(scale(tape, a, -2.0).tensor()[0] == doctest::Approx(-2.0));
  CHECK(add_const(tape, a, 10.0).tensor()[1] == doctest::Approx(8.0));
  CHECK(abs_val(tape, a).tensor()[1] == doctest::Approx(2.0));
  CHECK(sum(tape, a).tensor()[0] == doctest::Approx(2.0));
  CHECK(mean(tape, a).tensor()[0] == doctest::Approx(2.0 / 3.0));
  CHECK(softplus(tape, a).tensor()[0] == doctest::Approx(std::log1p(std::exp(1.0))));
  CHECK(softplus(tape, tape.constant(Tensor::row({-40.0}))).tensor()[0] ==
        doctest::Approx(0.0).epsilon(1e-15));
  CHECK(softplus(tape, tape.constant(Tensor::row({40.0}))).tensor()[0] == doctest::Approx(40.0));

  Value m3 = tape.constant(Tensor({2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8}));
  Value smid = sum_mid(tape, m3);
  CHECK(smid.tensor().at(0, 0) == doctest::Approx(4.0));
  CHECK(smid.tensor().at(0, 1) == doctest::Approx(6.0));
  CHECK(smid.tensor().at(1, 1) == doctest::Approx(14.0));

  Value left = tape.constant(Tensor({2, 2}, {1, 2, 3, 4}));
  Value right = tape.constant(Tensor({2, 1}, {9, 10}));
  Value joined = concat_cols(tape, std::vector<Value>{left, right});
  CHECK(joined.tensor().at(0, 2) == doctest::Approx(9.0));
  CHECK(joined.tensor().at(1, 0) == doctest::Approx(3.0));
  Value sliced = slice_cols(tape, joined, 1, 3);
  CHECK(sliced.tensor().at(0, 0) == doctest::Approx(2.0));
  CHECK(sliced.tensor().at(1, 1) == doctest::Approx(10.0));

  CHECK_THROWS_AS(add(tape, a, left), std::invalid_argument);
  CHECK_THROWS_AS(slice_cols(tape, joined, 2, 2), std::invalid_argument);
  CHECK_THROWS_AS(concat_cols(tape, std::vector<Value>{}), std::invalid_argument);
}

TEST_CASE("elementwise and reduction ops: gradients match finite differences") {
  Rng rng(101);
  Parameter a(random_tensor(rng, {2, 3}), "a");
  Parameter b(random_tensor(rng, {2, 3}), "b");
  std::vector<Parameter*> params{&a, &b};

  auto build = [&](Tape& tape) {
    Value va = tape.leaf(a);
    Value vb = tape.leaf(b);
    Value u = add(tape, mul(tape, va, vb), scale(tape, sub(tape, va, vb), 0.7));
    Value v = softplus(tape, add_const(tape, u, 0.3));
    Value w = concat_cols(tape, std::vector<Value>{v, mul(tape, va, va)});
    Value s = slice_cols(tape, w, 1, 5);
    Value r = reshape(tape, s, {2, 2, 2});
    return add(tape, mean(tape, sum_mid(tape, r)), scale(tape, sum(tape, v), 0.1));
  };
  GradCheckReport report = grad_check(build, params, 1e-5);
  CHECK(report.deterministic);
  CHECK(report.max_rel_err <= 1e-6);
}

TEST_CASE("choice_tensor: forward table") {
  Tape tape;

  SUBCASE("symmetric gates give the uniform table") {
    Value c = tape.constant(Tensor({1, 1, 2}, {0.5, 0.5}));
    Value C = choice_tensor(tape, c);
    for (std::size_t i = 0; i < 4; ++i) CHECK(C.tensor()[i] == doctest::Approx(0.25));
  }

  SUBCASE("hard gates give a one-hot table") {
    // bit 0 (first depth) set by c=1, bit 1 cleared by c=0 -> index 01b = 1
    Value c = tape.constant(Tensor({1, 1, 2}, {1.0, 0.0}));
    Value C = choice_tensor(tape, c);
    CHECK(C.tensor()[0] == 0.0);
    CHECK(C.tensor()[1] == 1.0);
    CHECK(C.tensor()[2] == 0.0);
    CHECK(C.tensor()[3] == 0.0);
  }

  SUBCASE("entries are the little-endian factor products") {
    double c0 = 0.8, c1 = 0.3, c2 = 0.6;
    Value c = tape.constant(Tensor({1, 1, 3}, {c0, c1, c2}));
    Value C = choice_tensor(tape, c);
    for (std::size_t idx = 0; idx < 8; ++idx) {
      double want = ((idx & 1) ? c0 : 1 - c0) * ((idx & 2) ? c1 : 1 - c1) *
                    ((idx & 4) ? c2 : 1 - c2);
      CHECK(C.tensor()[idx] == doctest::Approx(want).epsilon(1e-15));
    }
  }

  SUBCASE("rows always sum to one") {
    Rng rng(7);
    for (int trial = 0; trial < 200; ++trial) {
      std::size_t d = 1 + rng.below(8);
      Tensor c({2, 3, d});
      for (double& v : c.flat()) v = rng.uniform();
      Value C = choice_tensor(tape, tape.constant(std::move(c)));
      const Tensor& t = C.tensor();
      std::size_t P = std::size_t{1} << d;
      for (std::size_t row = 0; row < 6; ++row) {
        double sum = 0.0;
        for (std::size_t i = 0; i < P; ++i) sum += t[row * P + i];
        CHECK(std::abs(sum - 1.0) <= 1e-9);
      }
    }
  }
}

TEST_CASE("choice_tensor: gradients match finite differences, including saturated gates") {
  Rng rng(103);
  for (std::size_t d : {1u, 2u, 4u}) {
    Tensor init({2, 2, d});
    for (double& v : init.flat()) v = 0.1 + 0.8 * rng.uniform();
    Parameter c(init, "c");
    std::vector<Parameter*> params{&c};
    Tensor weights = random_tensor(rng, {2, 2, std::size_t{1} << d});
    auto build = [&](Tape& tape) {
      Value C = choice_tensor(tape, tape.leaf(c));
      return sum(tape, mul(tape, C, tape.constant(weights)));
    };
    GradCheckReport report = grad_check(build, params, 1e-5);
    CHECK(report.deterministic);
    CHECK(report.max_rel_err <= 1e-6);
  }

  // Zero and one gates: the product rule must not divide by a zero factor.
  Tensor hard({1, 1, 3}, {1.0, 0.0, 0.5});
  Parameter c(hard, "c");
  std::vector<Parameter*> params{&c};
  Tensor weights = random_tensor(rng, {1, 1, 8});
  auto build = [&](Tape& tape) {
    Value C = choice_tensor(tape, tape.leaf(c));
    return sum(tape, mul(tape, C, tape.constant(weights)));
  };
  GradCheckReport report = grad_check(build, params, 1e-5);
  CHECK(report.max_rel_err <= 1e-6);
}

TEST_CASE("tree_response: worked values and gradients") {
  Tape tape;

  SUBCASE("depth-1 blend") {
    // c = 0.7 -> C = [0.3, 0.7]; responses -1 (low side) and 3 (high side).
    Value C = tape.constant(Tensor({1, 1, 2}, {0.3, 0.7}));
    Value R = tape.constant(Tensor({1, 2, 1}, {-1.0, 3.0}));
    Value h = tree_response(tape, C, R);
    CHECK(h.tensor()[0] == doctest::Approx(0.7 * 3.0 + 0.3 * -1.0));
  }

  SUBCASE("one-hot choices select a table row") {
    Value C = tape.constant(Tensor({1, 1, 4}, {0, 0, 1, 0}));
    Value R = tape.constant(Tensor({1, 4, 2}, {1, 2, 3, 4, 5, 6, 7, 8}));
    Value h = tree_response(tape, C, R);
    CHECK(h.tensor()[0] == doctest::Approx(5.0));
    CHECK(h.tensor()[1] == doctest::Approx(6.0));
  }

  SUBCASE("constant responses are invariant to the choice weights") {
    Rng rng(5);
    Tensor c({1, 1, 3});
    for (double& v : c.flat()) v = rng.uniform();
    Value C = choice_tensor(tape, tape.constant(std::move(c)));
    Value R = tape.constant(Tensor::full({1, 8, 2}, 3.25));
    Value h = tree_response(tape, C, R);
    CHECK(h.tensor()[0] == doctest::Approx(3.25).epsilon(1e-12));
    CHECK(h.tensor()[1] == doctest::Approx(3.25).epsilon(1e-12));
  }

  SUBCASE("gradients") {
    Rng rng(107);
    Tensor cinit({3, 2, 4});
    for (double& v : cinit.flat()) v = rng.uniform();
    Parameter C(cinit, "C");
    Parameter R(random_tensor(rng, {2, 4, 2}), "R");
    std::vector<Parameter*> params{&C, &R};
    auto build = [&](Tape& tape2) {
      Value h = tree_response(tape2, tape2.leaf(C), tape2.leaf(R));
      return mean(tape2, mul(tape2, h, h));
    };
    GradCheckReport report = grad_check(build, params, 1e-5);
    CHECK(report.max_rel_err <= 1e-6);
  }
}

TEST_CASE("feature_select: selection semantics") {
  Tape tape;
  Tensor x({2, 4}, {1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 0.25, 8.0});

  SUBCASE("a dominant logit copies one feature exactly") {
    Tensor F({1, 1, 4});
    F.at(0, 0, 2) = 100.0;
    Value f = feature_select(tape, tape.constant(x), tape.constant(F), ChoiceKind::entmax(1.5));
    CHECK(f.tensor()[0] == 3.0);
    CHECK(f.tensor()[1] == 0.25);
  }

  SUBCASE("equal logits average the features") {
    Tensor F = Tensor::full({1, 1, 4}, 0.37);
    Value f = feature_select(tape, tape.constant(x), tape.constant(F), ChoiceKind::entmax(1.5));
    CHECK(f.tensor()[0] == doctest::Approx(2.5).epsilon(1e-12));
    CHECK(f.tensor()[1] == doctest::Approx(1.9375).epsilon(1e-12));
  }

  SUBCASE("single feature passes through for any logits") {
    Tensor x1({2, 1}, {3.5, -2.0});
    Tensor F({2, 3, 1});
    F.fill(-4.2);
    Value f = feature_select(tape, tape.constant(x1), tape.constant(F), ChoiceKind::softmax());
    for (std::size_t t = 0; t < 2; ++t) {
      for (std::size_t i = 0; i < 3; ++i) {
        CHECK(f.tensor().at(0, t, i) == 3.5);
        CHECK(f.tensor().at(1, t, i) == -2.0);
      }
    }
  }

  SUBCASE("shape validation") {
    Tensor F({1, 1, 3});
    CHECK_THROWS_AS(
        feature_select(tape, tape.constant(x), tape.constant(F), ChoiceKind::entmax(1.5)),
        std::invalid_argument);
  }
}

TEST_CASE("feature_select: gradients match finite differences for every choice kind") {
  Rng rng(109);
  Tensor x = random_tensor(rng, {4, 5});
  struct Case {
    const char* name;
    ChoiceKind kind;
    bool gumbel;
  };
  std::vector<Case> cases{
      {"softmax", ChoiceKind::softmax(), false},
      {"sparsemax", ChoiceKind::sparsemax(), false},
      {"entmax15", ChoiceKind::entmax(1.5), false},
      {"entmax13", ChoiceKind::entmax(1.3), false},
      {"gumbel", ChoiceKind::gumbel(), true},
  };
  for (const auto& c : cases) {
    CAPTURE(c.name);
    Parameter F(random_tensor(rng, {3, 2, 5}, 0.6), "F");
    Parameter xin(x, "x");
    std::vector<Parameter*> params{&F, &xin};
    Tensor weights = random_tensor(rng, {4, 3, 2});
    auto build = [&](Tape& tape) {
      Rng noise(777);  // frozen noise: same draws on every evaluation
      ChoiceEval eval{c.gumbel, 0.8, c.gumbel ? &noise : nullptr};
      Value f = feature_select(tape, tape.leaf(xin), tape.leaf(F), c.kind, eval);
      return sum(tape, mul(tape, f, tape.constant(weights)));
    };
    GradCheckReport report = grad_check(build, params, 1e-5);
    CHECK(report.deterministic);
    CHECK(report.max_rel_err <= 1e-4);
  }
}

TEST_CASE("scaled_gate: worked values") {
  Tape tape;
  Tensor f({1, 1, 3}, {0.4, 1.4, -0.6});
  Tensor b({1, 3}, {0.4, 0.4, 0.4});
  Tensor tau({1, 3}, {0.5, 0.5, 0.5});
  Value c = scaled_gate(tape, tape.constant(f), tape.constant(b), tape.constant(tau),
                        ChoiceKind::entmax(1.5));
  CHECK(c.tensor()[0] == 0.5);        // f = b
  CHECK(c.tensor()[1] == 1.0);        // (f - b)/tau = 2: saturated high
  CHECK(c.tensor()[2] == 0.0);        // (f - b)/tau = -2: saturated low

  SUBCASE("scaling numerator and denominator together changes nothing") {
    Tensor f2 = f;
    Tensor b2 = b;
    Tensor tau2 = tau;
    for (double& v : f2.flat()) v *= 10.0;
    for (double& v : b2.flat()) v *= 10.0;
    for (double& v : tau2.flat()) v *= 10.0;
    Value c2 = scaled_gate(tape, tape.constant(f2), tape.constant(b2), tape.constant(tau2),
                           ChoiceKind::entmax(1.5));
    for (std::size_t i = 0; i < 3; ++i) CHECK(c2.tensor()[i] == doctest::Approx(c.tensor()[i]));
  }

  SUBCASE("non-positive scales are rejected") {
    Tensor bad({1, 3}, {0.5, 0.0, 0.5});
    CHECK_THROWS_AS(scaled_gate(tape, tape.constant(f), tape.constant(b), tape.constant(bad),
                                ChoiceKind::entmax(1.5)),
                    std::invalid_argument);
  }
}

TEST_CASE("scaled_gate: gradients match finite differences") {
  Rng rng(113);
  struct Case {
    const char* name;
    ChoiceKind kind;
    bool gumbel;
    double arg_range;  // keep |(f-b)/tau| below the saturation boundary
  };
  std::vector<Case> cases{
      {"softmax", ChoiceKind::softmax(), false, 3.0},
      {"sparsemax", ChoiceKind::sparsemax(), false, 0.85},
      {"entmax15", ChoiceKind::entmax(1.5), false, 1.8},
      {"gumbel", ChoiceKind::gumbel(), true, 2.0},
  };
  for (const auto& c : cases) {
    CAPTURE(c.name);
    std::size_t M = 2, D = 3, B = 4;
    Parameter tau_raw(random_tensor(rng, {M, D}, 0.3), "tau_raw");
    Parameter b(random_tensor(rng, {M, D}, 0.05), "b");
    Tensor finit({B, M, D});
    for (double& v : finit.flat()) v = c.arg_range * 0.9 * (2.0 * rng.uniform() - 1.0);
    Parameter f(finit, "f");
    std::vector<Parameter*> params{&f, &b, &tau_raw};
    Tensor weights = random_tensor(rng, {B, M, D});
    auto build = [&](Tape& tape) {
      Rng noise(555);
      ChoiceEval eval{c.gumbel, 0.9, c.gumbel ? &noise : nullptr};
      Value tau = add_const(tape, softplus(tape, tape.leaf(tau_raw)), 1e-6);
      Value gates = scaled_gate(tape, tape.leaf(f), tape.leaf(b), tau, c.kind, eval);
      return sum(tape, mul(tape, gates, tape.constant(weights)));
    };
    GradCheckReport report = grad_check(build, params, 1e-5);
    CHECK(report.deterministic);
    CHECK(report.max_rel_err <= 1e-4);
  }
}

TEST_CASE("cross_entropy: worked values and gradients") {
  Tape tape;
  Value logits = tape.constant(Tensor({1, 2}, {0.0, 0.0}));
  std::vector<int> label{0};
  Value loss = cross_entropy(tape, logits, label);
  CHECK(loss.tensor()[0] == doctest::Approx(std::log(2.0)));

  {
    Parameter z(Tensor({1, 2}, {0.0, 0.0}), "z");
    z.zero_grad();
    Tape t2;
    Value l = cross_entropy(t2, t2.leaf(z), label);
    t2.backward(l);
    CHECK(z.grad.at(0, 0) == doctest::Approx(-0.5));
    CHECK(z.grad.at(0, 1) == doctest::Approx(0.5));
  }

  SUBCASE("stable at extreme logits") {
    Value wide = tape.constant(Tensor({2, 3}, {1000.0, 0.0, -1000.0, -500.0, -499.0, -501.0}));
    std::vector<int> ys{0, 1};
    Value l = cross_entropy(tape, wide, ys);
    CHECK(std::isfinite(l.tensor()[0]));
    CHECK(l.tensor()[0] >= 0.0);
  }

  SUBCASE("label validation") {
    std::vector<int> bad{2};
    CHECK_THROWS_AS(cross_entropy(tape, logits, bad), std::invalid_argument);
    std::vector<int> negative{-1};
    CHECK_THROWS_AS(cross_entropy(tape, logits, negative), std::invalid_argument);
  }

  SUBCASE("gradients") {
    Rng rng(127);
    Parameter z(random_tensor(rng, {6, 4}), "z");
    std::vector<int> ys{0, 3, 1, 2, 2, 0};
    std::vector<Parameter*> params{&z};
    auto build = [&](Tape& t3) { return cross_entropy(t3, t3.leaf(z), ys); };
    GradCheckReport report = grad_check(build, params, 1e-5);
    CHECK(report.max_rel_err <= 1e-6);
  }
}

TEST_CASE("mse: worked values and gradients") {
  Tape tape;
  Value pred = tape.constant(Tensor::row({1.0, 2.0}));
  std::vector<double> targets{0.0, 0.0};
  CHECK(mse(tape, pred, targets).tensor()[0] == doctest::Approx(2.5));

  Value col = tape.constant(Tensor({2, 1}, {1.0, 2.0}));
  CHECK(mse(tape, col, targets).tensor()[0] == doctest::Approx(2.5));

  {
    Parameter p(Tensor::row({1.0, 2.0}), "p");
    p.zero_grad();
    Tape t2;
    Value l = mse(t2, t2.leaf(p), targets);
    t2.backward(l);
    CHECK(p.grad[0] == doctest::Approx(1.0));
    CHECK(p.grad[1] == doctest::Approx(2.0));
  }

  SUBCASE("gradients") {
    Rng rng(131);
    Parameter p(random_tensor(rng, {8}), "p");
    std::vector<double> ts(8);
    for (double& v : ts) v = rng.normal();
    std::vector<Parameter*> params{&p};
    auto build = [&](Tape& t3) { return mse(t3, t3.leaf(p), ts); };
    GradCheckReport report = grad_check(build, params, 1e-5);
    CHECK(report.max_rel_err <= 1e-6);
  }
}

TEST_CASE("full tree pipeline: gradients through select, gate, route and respond") {
  Rng rng(137);
  const std::size_t B = 4, N = 5, M = 3, D = 2, L = 2;
  Tensor x = random_tensor(rng, {B, N}, 0.8);
  Parameter F(random_tensor(rng, {M, D, N}, 0.5), "F");
  Parameter b(random_tensor(rng, {M, D}, 0.2), "b");
  Parameter tau_raw(random_tensor(rng, {M, D}, 0.3), "tau_raw");
  Parameter R(random_tensor(rng, {M, std::size_t{1} << D, L}), "R");
  std::vector<Parameter*> params{&F, &b, &tau_raw, &R};

  SUBCASE("regression loss") {
    auto build = [&](Tape& tape) {
      Value tau = add_const(tape, softplus(tape, tape.leaf(tau_raw)), 1e-6);
      Value f = feature_select(tape, tape.constant(x), tape.leaf(F), ChoiceKind::entmax(1.5));
      Value c = scaled_gate(tape, f, tape.leaf(b), tau, ChoiceKind::entmax(1.5));
      Value C = choice_tensor(tape, c);
      Value h = tree_response(tape, C, tape.leaf(R));
      Value pooled = slice_cols(tape, scale(tape, sum_mid(tape, h), 1.0 / M), 0, 1);
      std::vector<double> targets{0.5, -0.25, 1.0, 0.0};
      return mse(tape, pooled, targets);
    };
    GradCheckReport report = grad_check(build, params, 1e-5);
    CHECK(report.deterministic);
    CHECK(report.max_rel_err <= 1e-4);
  }

  SUBCASE("classification loss") {
    auto build = [&](Tape& tape) {
      Value tau = add_const(tape, softplus(tape, tape.leaf(tau_raw)), 1e-6);
      Value f = feature_select(tape, tape.constant(x), tape.leaf(F), ChoiceKind::entmax(1.5));
      Value c = scaled_gate(tape, f, tape.leaf(b), tau, ChoiceKind::entmax(1.5));
      Value C = choice_tensor(tape, c);
      Value h = tree_response(tape, C, tape.leaf(R));
      Value logits = scale(tape, sum_mid(tape, h), 1.0 / M);
      std::vector<int> ys{0, 1, 1, 0};
      return cross_entropy(tape, logits, ys);
    };
    GradCheckReport report = grad_check(build, params, 1e-5);
    CHECK(report.deterministic);
    CHECK(report.max_rel_err <= 1e-4);
  }
}
