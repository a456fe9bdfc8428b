#include "nodetab/choice.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace nodetab {

namespace {

void check_scores(std::span<const double> z) {
  if (z.empty()) throw std::invalid_argument("choice function input is empty");
  for (double v : z) {
    if (!std::isfinite(v)) throw std::invalid_argument("choice function input is not finite");
  }
}

}  // namespace

double TemperatureSchedule::at(std::int64_t step) const {
  if (kind == Kind::constant) return start;
  return std::max(floor, start * std::exp(-decay * static_cast<double>(step)));
}

void TemperatureSchedule::validate() const {
  if (!(start > 0.0)) throw std::invalid_argument("temperature start must be > 0");
  if (kind == Kind::annealed) {
    if (!(floor > 0.0)) throw std::invalid_argument("temperature floor must be > 0");
    if (!(decay >= 0.0)) throw std::invalid_argument("temperature decay must be >= 0");
  }
}

void ChoiceKind::validate() const {
  if (tag == ChoiceTag::entmax) {
    if (!(alpha > 1.0) || !(alpha <= 2.0)) {
      throw std::invalid_argument("entmax alpha must lie in (1, 2]");
    }
  }
  if (tag == ChoiceTag::gumbel_softmax) schedule.validate();
}

std::vector<double> softmax_row(std::span<const double> z) {
  check_scores(z);
  double m = *std::max_element(z.begin(), z.end());
  std::vector<double> p(z.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    p[i] = std::exp(z[i] - m);
    sum += p[i];
  }
  for (double& v : p) v /= sum;
  return p;
}

std::vector<double> sparsemax_row(std::span<const double> z) {
  check_scores(z);
  std::vector<double> sorted(z.begin(), z.end());
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  // Support size is the largest k with 1 + k z_(k) > sum_{j<=k} z_(j); the
  // condition holds for exactly the prefix k <= k*.
  double cumsum = 0.0;
  double tau = sorted[0] - 1.0;
  for (std::size_t k = 0; k < sorted.size(); ++k) {
    cumsum += sorted[k];
    double kk = static_cast<double>(k + 1);
    if (1.0 + kk * sorted[k] > cumsum) {
      tau = (cumsum - 1.0) / kk;
    }
  }
  std::vector<double> p(z.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    p[i] = std::max(z[i] - tau, 0.0);
    sum += p[i];
  }
  for (double& v : p) {
    if (v > 0.0) v /= sum;
  }
  return p;
}

std::vector<double> entmax_bisect_row(std::span<const double> z, double alpha, int iterations) {
  check_scores(z);
  double a = alpha - 1.0;
  double inv_a = 1.0 / a;
  std::vector<double> w(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) w[i] = a * z[i];
  double w_max = *std::max_element(w.begin(), w.end());
  // f(tau) = sum_i [w_i - tau]_+^(1/a) - 1 is decreasing with a root in
  // [w_max - 1, w_max].
  double lo = w_max - 1.0;
  double hi = w_max;
  for (int it = 0; it < iterations; ++it) {
    double mid = 0.5 * (lo + hi);
    double sum = 0.0;
    for (double wi : w) {
      double t = wi - mid;
      if (t > 0.0) sum += std::pow(t, inv_a);
    }
    if (sum >= 1.0) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  double tau = 0.5 * (lo + hi);
  std::vector<double> p(z.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    double t = w[i] - tau;
    p[i] = t > 0.0 ? std::pow(t, inv_a) : 0.0;
    sum += p[i];
  }
  for (double& v : p) {
    if (v > 0.0) v /= sum;
  }
  return p;
}

std::vector<double> entmax15_row(std::span<const double> z) {
  check_scores(z);
  const std::size_t n = z.size();
  // With alpha = 1.5 the solution is p_i = [z_i/2 - tau]_+^2; the threshold
  // has a closed form per candidate support size once scores are sorted.
  std::vector<double> u(n);
  for (std::size_t i = 0; i < n; ++i) u[i] = 0.5 * z[i];
  std::vector<double> sorted(u);
  std::sort(sorted.begin(), sorted.end(), std::greater<>());

  double tau = sorted[0] - 1.0;
  double sum_u = 0.0;
  double sum_sq = 0.0;
  for (std::size_t k = 1; k <= n; ++k) {
    sum_u += sorted[k - 1];
    sum_sq += sorted[k - 1] * sorted[k - 1];
    double kk = static_cast<double>(k);
    double mean = sum_u / kk;
    double disc = 1.0 / kk - (sum_sq / kk - mean * mean);
    if (disc < 0.0) continue;
    double cand = mean - std::sqrt(disc);
    bool upper_ok = cand <= sorted[k - 1];
    bool lower_ok = (k == n) || (cand >= sorted[k]);
    if (upper_ok && lower_ok) tau = cand;
  }

  std::vector<double> p(n);
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double t = u[i] - tau;
    p[i] = t > 0.0 ? t * t : 0.0;
    sum += p[i];
  }
  for (double& v : p) {
    if (v > 0.0) v /= sum;
  }
  return p;
}

std::vector<double> entmax_row(std::span<const double> z, double alpha) {
  if (alpha == 1.5) return entmax15_row(z);
  return entmax_bisect_row(z, alpha);
}

std::vector<double> gumbel_softmax_row(std::span<const double> z, double temperature, Rng& rng) {
  check_scores(z);
  if (!(temperature > 0.0)) throw std::invalid_argument("gumbel-softmax temperature must be > 0");
  std::vector<double> noisy(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) noisy[i] = (z[i] + rng.gumbel()) / temperature;
  return softmax_row(noisy);
}

std::vector<double> argmax_one_hot(std::span<const double> z) {
  check_scores(z);
  std::size_t best = 0;
  for (std::size_t i = 1; i < z.size(); ++i) {
    if (z[i] > z[best]) best = i;
  }
  std::vector<double> p(z.size(), 0.0);
  p[best] = 1.0;
  return p;
}

std::vector<double> choice_forward(const ChoiceKind& kind, std::span<const double> z,
                                   const ChoiceEval& eval) {
  switch (kind.tag) {
    case ChoiceTag::softmax:
      return softmax_row(z);
    case ChoiceTag::sparsemax:
      return sparsemax_row(z);
    case ChoiceTag::entmax:
      return entmax_row(z, kind.alpha);
    case ChoiceTag::gumbel_softmax:
      if (!eval.training) return argmax_one_hot(z);
      if (eval.rng == nullptr) {
        throw std::invalid_argument("gumbel-softmax training mode requires an rng");
      }
      return gumbel_softmax_row(z, eval.temperature, *eval.rng);
  }
  throw std::logic_error("unknown choice kind");
}

std::vector<double> choice_backward(const ChoiceKind& kind, std::span<const double> p,
                                    std::span<const double> upstream, double temperature_used) {
  if (p.size() != upstream.size()) {
    throw std::invalid_argument("choice_backward: output/upstream size mismatch");
  }
  double mass = std::accumulate(p.begin(), p.end(), 0.0);
  if (std::abs(mass - 1.0) > 1e-6) {
    throw std::invalid_argument("choice_backward: p is not on the simplex");
  }

  std::vector<double> s(p.size(), 0.0);
  double scale = 1.0;
  switch (kind.tag) {
    case ChoiceTag::softmax:
      for (std::size_t i = 0; i < p.size(); ++i) s[i] = p[i];
      break;
    case ChoiceTag::sparsemax:
      for (std::size_t i = 0; i < p.size(); ++i) s[i] = p[i] > kSupportEps ? 1.0 : 0.0;
      break;
    case ChoiceTag::entmax: {
      double expo = 2.0 - kind.alpha;
      for (std::size_t i = 0; i < p.size(); ++i) {
        s[i] = p[i] > kSupportEps ? std::pow(p[i], expo) : 0.0;
      }
      break;
    }
    case ChoiceTag::gumbel_softmax:
      for (std::size_t i = 0; i < p.size(); ++i) s[i] = p[i];
      scale = 1.0 / temperature_used;
      break;
  }

  double s_sum = std::accumulate(s.begin(), s.end(), 0.0);
  std::vector<double> dz(p.size(), 0.0);
  if (s_sum <= 0.0) return dz;  // fully saturated; subgradient zero
  double weighted = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) weighted += s[i] * upstream[i];
  double mean = weighted / s_sum;
  for (std::size_t i = 0; i < p.size(); ++i) dz[i] = scale * s[i] * (upstream[i] - mean);
  return dz;
}

double two_class_entmax15(double t) {
  if (t >= 2.0) return 1.0;
  if (t <= -2.0) return 0.0;
  if (t == 0.0) return 0.5;
  // Solve a - b = t/2, a^2 + b^2 = 1, a,b >= 0; output is a^2.
  double s = 0.5 * t;
  double b = 0.5 * (-s + std::sqrt(2.0 - s * s));
  double a = b + s;
  return a * a;
}

double gate(double t, double alpha) {
  if (!std::isfinite(t)) throw std::invalid_argument("gate input is not finite");
  if (alpha == 1.5) return two_class_entmax15(t);
  const double z[2] = {t, 0.0};
  return entmax_bisect_row(std::span<const double>(z, 2), alpha)[0];
}

double gate_forward(const ChoiceKind& kind, double t, const ChoiceEval& eval) {
  switch (kind.tag) {
    case ChoiceTag::softmax:
      // softmax([t, 0])[0] = logistic(t)
      return t >= 0.0 ? 1.0 / (1.0 + std::exp(-t)) : std::exp(t) / (1.0 + std::exp(t));
    case ChoiceTag::sparsemax: {
      if (t >= 1.0) return 1.0;
      if (t <= -1.0) return 0.0;
      return 0.5 * (1.0 + t);
    }
    case ChoiceTag::entmax:
      return gate(t, kind.alpha);
    case ChoiceTag::gumbel_softmax: {
      if (!eval.training) return t >= 0.0 ? 1.0 : 0.0;  // argmax, ties to the first entry
      if (eval.rng == nullptr) {
        throw std::invalid_argument("gumbel-softmax training mode requires an rng");
      }
      double u = (t + eval.rng->gumbel() - eval.rng->gumbel()) / eval.temperature;
      return u >= 0.0 ? 1.0 / (1.0 + std::exp(-u)) : std::exp(u) / (1.0 + std::exp(u));
    }
  }
  throw std::logic_error("unknown choice kind");
}

double gate_slope(const ChoiceKind& kind, double c, double temperature_used) {
  bool interior = c > kSupportEps && c < 1.0 - kSupportEps;
  switch (kind.tag) {
    case ChoiceTag::softmax:
      return c * (1.0 - c);
    case ChoiceTag::sparsemax:
      return interior ? 0.5 : 0.0;
    case ChoiceTag::entmax: {
      if (!interior) return 0.0;
      double expo = 2.0 - kind.alpha;
      double s0 = std::pow(c, expo);
      double s1 = std::pow(1.0 - c, expo);
      return s0 * s1 / (s0 + s1);
    }
    case ChoiceTag::gumbel_softmax:
      return c * (1.0 - c) / temperature_used;
  }
  throw std::logic_error("unknown choice kind");
}

double saturation_gap_numeric(double alpha) {
  // Smallest t with entmax_alpha([t, 0]) = [1, 0]: bisect on the indicator
  // "second mass below support threshold".
  double lo = 0.0;
  double hi = 64.0;
  for (int it = 0; it < 200; ++it) {
    double mid = 0.5 * (lo + hi);
    const double z[2] = {mid, 0.0};
    double tail = entmax_bisect_row(std::span<const double>(z, 2), alpha)[1];
    if (tail <= kSupportEps) {
      hi = mid;
    } else {
      lo = mid;
    }
  }
  return hi;
}

double saturation_gap(double alpha) {
  if (alpha == 1.5) return 2.0;
  if (alpha == 2.0) return 1.0;
  return saturation_gap_numeric(alpha);
}

}  // namespace nodetab
