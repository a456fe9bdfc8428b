#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "nodetab/rng.hpp"

namespace nodetab {

// Probability mass below which an entry is treated as off-support when
// assembling choice-function Jacobians.
inline constexpr double kSupportEps = 1e-12;

enum class ChoiceTag : std::uint8_t {
  softmax = 0,
  sparsemax = 1,
  entmax = 2,
  gumbel_softmax = 3,
};

struct TemperatureSchedule {
  enum class Kind : std::uint8_t { constant = 0, annealed = 1 };
  Kind kind = Kind::constant;
  double start = 1.0;
  double decay = 1e-4;
  double floor = 0.1;

  // Annealed: T(t) = max(floor, start * exp(-decay * t)).
  double at(std::int64_t step) const;
  void validate() const;
};

// The simplex mapping used for both feature selection and tree routing.
struct ChoiceKind {
  ChoiceTag tag = ChoiceTag::entmax;
  double alpha = 1.5;             // entmax only; must lie in (1, 2]
  TemperatureSchedule schedule;   // gumbel-softmax only

  static ChoiceKind softmax() { return {ChoiceTag::softmax, 1.5, {}}; }
  static ChoiceKind sparsemax() { return {ChoiceTag::sparsemax, 1.5, {}}; }
  static ChoiceKind entmax(double alpha = 1.5) { return {ChoiceTag::entmax, alpha, {}}; }
  static ChoiceKind gumbel(TemperatureSchedule s = {}) { return {ChoiceTag::gumbel_softmax, 1.5, s}; }

  void validate() const;
};

// Evaluation context threaded through forward passes. Gumbel-softmax samples
// noise in training mode (rng required) and collapses to an argmax one-hot in
// inference mode.
struct ChoiceEval {
  bool training = false;
  double temperature = 1.0;
  Rng* rng = nullptr;
};

// --- row transforms ------------------------------------------------------

std::vector<double> softmax_row(std::span<const double> z);
std::vector<double> sparsemax_row(std::span<const double> z);

// Generic alpha in (1, 2]: bisection on the normalization threshold, fixed
// iteration count, exact zeros off support.
std::vector<double> entmax_bisect_row(std::span<const double> z, double alpha, int iterations = 50);

// Exact sort-based routine for alpha = 1.5; matches bisection to 1e-8.
std::vector<double> entmax15_row(std::span<const double> z);

// Dispatches to the exact alpha = 1.5 routine when applicable.
std::vector<double> entmax_row(std::span<const double> z, double alpha);

std::vector<double> gumbel_softmax_row(std::span<const double> z, double temperature, Rng& rng);
std::vector<double> argmax_one_hot(std::span<const double> z);

// Kind dispatch. Throws on empty or non-finite input, or when gumbel-softmax
// training mode is requested without an rng.
std::vector<double> choice_forward(const ChoiceKind& kind, std::span<const double> z,
                                   const ChoiceEval& eval = {});

// Vector-Jacobian product dz given the forward output p. All members of the
// family share the support-restricted form
//   dz_i = s_i * (up_i - sum_j s_j up_j / sum_j s_j)
// with s_i = p_i^(2-alpha) on the support (softmax: s_i = p_i; sparsemax:
// s_i = 1 on support). Gumbel-softmax differentiates through the tempered
// softmax with the frozen noise draw, so s_i = p_i and the result is scaled
// by 1/temperature.
std::vector<double> choice_backward(const ChoiceKind& kind, std::span<const double> p,
                                    std::span<const double> upstream,
                                    double temperature_used = 1.0);

// --- two-class gate -------------------------------------------------------

// gate(t, alpha) = entmax_alpha([t, 0]) taken at the first coordinate.
double gate(double t, double alpha);

// Closed form for alpha = 1.5 (saturates exactly at |t| >= 2).
double two_class_entmax15(double t);

// Gate under an arbitrary choice kind (softmax -> logistic, sparsemax ->
// two-class projection, gumbel -> tempered logistic with sampled noise or
// hard argmax in inference mode).
double gate_forward(const ChoiceKind& kind, double t, const ChoiceEval& eval = {});

// dc/dt recovered from the gate output alone (plus the temperature for
// gumbel-softmax); zero in saturated regions.
double gate_slope(const ChoiceKind& kind, double c, double temperature_used = 1.0);

// Smallest score gap g* at which the two-class entmax saturates to {0, 1};
// exactly 2 for alpha = 1.5, 1 for sparsemax, found numerically otherwise.
double saturation_gap(double alpha);

// The bisection-based finder behind saturation_gap, without the closed-form
// shortcuts.
double saturation_gap_numeric(double alpha);

}  // namespace nodetab
