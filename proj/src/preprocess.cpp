#include "nodetab/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace nodetab {

namespace {

constexpr double kCdfClip = 1e-7;

double median_of(std::vector<double> values) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  std::size_t n = values.size();
  if (n % 2 == 1) return values[n / 2];
  return 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

}  // namespace

double inverse_normal_cdf(double p) {
  if (!(p > 0.0 && p < 1.0)) {
    throw std::invalid_argument("inverse_normal_cdf: p must lie in (0, 1)");
  }
  // Acklam's rational approximation with one Halley refinement through erfc.
  static const double a[6] = {-3.969683028665376e+01, 2.209460984245205e+02,
                              -2.759285104469687e+02, 1.383577518672690e+02,
                              -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[5] = {-5.447609879822406e+01, 1.615858368580409e+02,
                              -1.556989798598866e+02, 6.680131188771972e+01,
                              -1.328068155288572e+01};
  static const double c[6] = {-7.784894002430293e-03, -3.223964580411365e-01,
                              -2.400758277161838e+00, -2.549732539343734e+00,
                              4.374664141464968e+00,  2.938163982698783e+00};
  static const double d[4] = {7.784695709041462e-03, 3.224671290700398e-01,
                              2.445134137142996e+00, 3.754408661907416e+00};
  const double plow = 0.02425;
  double x;
  if (p < plow) {
    double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= 1.0 - plow) {
    double q = p - 0.5;
    double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    double q = std::sqrt(-2.0 * std::log(1.0 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  double err = 0.5 * std::erfc(-x / std::sqrt(2.0)) - p;
  double u = err * std::sqrt(2.0 * M_PI) * std::exp(0.5 * x * x);
  return x - u / (1.0 + 0.5 * x * u);
}

double QuantileTransformState::cdf_position(std::size_t k) const {
  double q = static_cast<double>(references.size());
  double p = q <= 1.0 ? 0.5 : static_cast<double>(k) / (q - 1.0);
  return std::clamp(p, kCdfClip, 1.0 - kCdfClip);
}

double QuantileTransformState::apply(double v) const {
  if (constant || references.size() < 2) return 0.0;
  if (v <= references.front()) return inverse_normal_cdf(cdf_position(0));
  if (v >= references.back()) return inverse_normal_cdf(cdf_position(references.size() - 1));
  auto hi_it = std::upper_bound(references.begin(), references.end(), v);
  std::size_t hi = static_cast<std::size_t>(hi_it - references.begin());
  std::size_t lo = hi - 1;
  double p;
  if (references[lo] == v) {
    auto first_it = std::lower_bound(references.begin(), references.end(), v);
    std::size_t first = static_cast<std::size_t>(first_it - references.begin());
    p = 0.5 * (cdf_position(first) + cdf_position(hi - 1));
  } else {
    double t = (v - references[lo]) / (references[hi] - references[lo]);
    p = cdf_position(lo) + t * (cdf_position(hi) - cdf_position(lo));
  }
  return inverse_normal_cdf(p);
}

QuantileTransformState fit_quantile_transform(std::span<const double> values,
                                              std::size_t quantile_count) {
  if (values.empty()) throw std::invalid_argument("quantile transform: no values");
  for (double v : values) {
    if (!std::isfinite(v)) throw std::invalid_argument("quantile transform: non-finite value");
  }
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());

  QuantileTransformState state;
  if (sorted.front() == sorted.back()) {
    state.constant = true;
    state.references = {sorted.front()};
    return state;
  }
  std::size_t q = std::max<std::size_t>(2, std::min(quantile_count, sorted.size()));
  state.references.resize(q);
  double n1 = static_cast<double>(sorted.size() - 1);
  for (std::size_t k = 0; k < q; ++k) {
    double pos = n1 * static_cast<double>(k) / static_cast<double>(q - 1);
    auto lo = static_cast<std::size_t>(pos);
    double frac = pos - static_cast<double>(lo);
    double ref = sorted[lo];
    if (frac > 0.0 && lo + 1 < sorted.size()) {
      ref = ref * (1.0 - frac) + sorted[lo + 1] * frac;
    }
    state.references[k] = ref;
  }
  return state;
}

double LooEncoderState::encode(const std::string& category) const {
  auto it = stats.find(category);
  if (it == stats.end()) return global_mean;
  return it->second.first / static_cast<double>(it->second.second);
}

LooEncoderState fit_apply_loo(std::span<const std::string> categories,
                              std::span<const double> targets, std::vector<double>& encoded) {
  if (categories.size() != targets.size()) {
    throw std::invalid_argument("loo: category/target size mismatch");
  }
  if (categories.empty()) throw std::invalid_argument("loo: no rows");

  LooEncoderState state;
  double total = 0.0;
  for (std::size_t i = 0; i < categories.size(); ++i) {
    auto& slot = state.stats[categories[i]];
    slot.first += targets[i];
    slot.second += 1;
    total += targets[i];
  }
  state.global_mean = total / static_cast<double>(targets.size());

  encoded.resize(categories.size());
  for (std::size_t i = 0; i < categories.size(); ++i) {
    const auto& slot = state.stats.at(categories[i]);
    if (slot.second > 1) {
      encoded[i] = (slot.first - targets[i]) / static_cast<double>(slot.second - 1);
    } else {
      encoded[i] = state.global_mean;
    }
  }
  return state;
}

PrepFit fit_preprocessor(const Dataset& dataset, const PreprocessOptions& options) {
  if (!dataset.has_target) {
    throw std::invalid_argument("fit_preprocessor: dataset has no target column");
  }
  PrepFit fit;
  fit.train_rows = dataset.rows_with_tag(SplitTag::train);
  if (fit.train_rows.size() < 2) {
    throw std::invalid_argument("fit_preprocessor: need at least 2 train rows");
  }
  const std::size_t n_train = fit.train_rows.size();

  Preprocessor& prep = fit.prep;
  prep.task = dataset.task;
  prep.class_labels = dataset.class_labels;
  prep.quantile_count = options.quantile_count;
  prep.normalize_targets = options.normalize_targets && dataset.task == TaskKind::regression;

  // Raw train targets double as the LOO target signal (class index for
  // classification).
  std::vector<double> loo_targets(n_train);
  if (dataset.task == TaskKind::regression) {
    fit.train_targets.resize(n_train);
    for (std::size_t i = 0; i < n_train; ++i) {
      fit.train_targets[i] = dataset.target_real[fit.train_rows[i]];
      loo_targets[i] = fit.train_targets[i];
    }
    if (prep.normalize_targets) {
      double mean = 0.0;
      for (double y : fit.train_targets) mean += y;
      mean /= static_cast<double>(n_train);
      double var = 0.0;
      for (double y : fit.train_targets) var += (y - mean) * (y - mean);
      double sd = std::sqrt(var / static_cast<double>(n_train));
      prep.target_mean = mean;
      prep.target_scale = sd > 1e-12 ? sd : 1.0;
      for (double& y : fit.train_targets) y = (y - prep.target_mean) / prep.target_scale;
    }
  } else {
    fit.train_labels.resize(n_train);
    for (std::size_t i = 0; i < n_train; ++i) {
      fit.train_labels[i] = dataset.target_class[fit.train_rows[i]];
      loo_targets[i] = static_cast<double>(fit.train_labels[i]);
    }
  }

  const std::size_t n_cols = dataset.features.size();
  prep.columns.reserve(n_cols);
  prep.medians.assign(n_cols, std::numeric_limits<double>::quiet_NaN());
  prep.loo.resize(n_cols);
  prep.quantiles.resize(n_cols);
  fit.train_features = Tensor({n_train, n_cols});

  for (std::size_t c = 0; c < n_cols; ++c) {
    const RawColumn& col = dataset.features[c];
    prep.columns.push_back(col.meta);
    std::vector<double> train_values(n_train);
    if (col.meta.kind == ColumnKind::numeric) {
      std::vector<double> present;
      present.reserve(n_train);
      for (std::size_t i = 0; i < n_train; ++i) {
        double v = col.numeric[fit.train_rows[i]];
        if (!std::isnan(v)) present.push_back(v);
      }
      if (present.empty()) {
        fit.warnings.push_back("column '" + col.meta.name +
                               "' has no present train values; imputing 0");
      }
      prep.medians[c] = median_of(present);
      for (std::size_t i = 0; i < n_train; ++i) {
        double v = col.numeric[fit.train_rows[i]];
        train_values[i] = std::isnan(v) ? prep.medians[c] : v;
      }
    } else {
      std::vector<std::string> cats(n_train);
      for (std::size_t i = 0; i < n_train; ++i) cats[i] = col.categorical[fit.train_rows[i]];
      prep.loo[c] = fit_apply_loo(cats, loo_targets, train_values);
    }

    prep.quantiles[c] = fit_quantile_transform(train_values, options.quantile_count);
    if (prep.quantiles[c].constant) {
      fit.warnings.push_back("column '" + col.meta.name +
                             "' is constant on the train split; transformed to 0");
    }
    for (std::size_t i = 0; i < n_train; ++i) {
      fit.train_features.at(i, c) = prep.quantiles[c].apply(train_values[i]);
    }
  }
  return fit;
}

Tensor transform_features(const Preprocessor& prep, const Dataset& dataset,
                          std::span<const std::size_t> rows) {
  if (dataset.features.size() != prep.columns.size()) {
    throw std::invalid_argument("transform: dataset has " +
                                std::to_string(dataset.features.size()) + " feature columns, " +
                                "the fitted preprocessor expects " +
                                std::to_string(prep.columns.size()));
  }
  for (std::size_t c = 0; c < prep.columns.size(); ++c) {
    if (dataset.features[c].meta.name != prep.columns[c].name ||
        dataset.features[c].meta.kind != prep.columns[c].kind) {
      throw std::invalid_argument("transform: column '" + dataset.features[c].meta.name +
                                  "' does not match the fitted schema (expected '" +
                                  prep.columns[c].name + "')");
    }
  }

  Tensor out({rows.size(), prep.columns.size()});
  for (std::size_t c = 0; c < prep.columns.size(); ++c) {
    const RawColumn& col = dataset.features[c];
    for (std::size_t i = 0; i < rows.size(); ++i) {
      double v;
      if (col.meta.kind == ColumnKind::numeric) {
        v = col.numeric[rows[i]];
        if (std::isnan(v)) v = prep.medians[c];
      } else {
        v = prep.loo[c].encode(col.categorical[rows[i]]);
      }
      out.at(i, c) = prep.quantiles[c].apply(v);
    }
  }
  return out;
}

std::vector<double> transform_targets(const Preprocessor& prep, const Dataset& dataset,
                                      std::span<const std::size_t> rows) {
  if (prep.task != TaskKind::regression) {
    throw std::logic_error("transform_targets: regression only");
  }
  std::vector<double> ys(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    ys[i] = (dataset.target_real[rows[i]] - prep.target_mean) / prep.target_scale;
  }
  return ys;
}

}  // namespace nodetab
