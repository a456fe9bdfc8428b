#pragma once

#include <map>
#include <string>
#include <vector>

#include "nodetab/data.hpp"
#include "nodetab/tensor.hpp"

namespace nodetab {

// Inverse standard-normal CDF, accurate to ~1e-13 relative error.
double inverse_normal_cdf(double p);

// Empirical-quantile map of one numeric column onto N(0, 1).
struct QuantileTransformState {
  std::vector<double> references;  // nondecreasing empirical quantiles
  bool constant = false;           // degenerate column: transform yields 0

  double cdf_position(std::size_t k) const;  // clipped k/(Q-1)
  double apply(double v) const;
};

// Fits Q evenly spaced empirical quantiles (capped at the sample count).
QuantileTransformState fit_quantile_transform(std::span<const double> values,
                                              std::size_t quantile_count);

// Leave-one-out target statistics of one categorical column.
struct LooEncoderState {
  std::map<std::string, std::pair<double, std::size_t>> stats;  // category -> (sum, count)
  double global_mean = 0.0;

  // Test-time encoding: category mean, or the global mean when unseen.
  double encode(const std::string& category) const;
};

// Fits the encoder on train rows and returns their leave-one-out encodings:
// (category sum - own target) / (count - 1); singletons fall back to the
// global mean.
LooEncoderState fit_apply_loo(std::span<const std::string> categories,
                              std::span<const double> targets, std::vector<double>& encoded);

// Fitted per-column preprocessing state. Categorical columns are LOO-encoded
// to one numeric feature each; all features then pass through the quantile
// transform. Fit consumes the train partition only.
struct Preprocessor {
  std::vector<ColumnMeta> columns;
  std::size_t quantile_count = 1000;
  std::vector<double> medians;                     // per column; NaN for categorical
  std::vector<LooEncoderState> loo;                // per column; empty stats for numeric
  std::vector<QuantileTransformState> quantiles;   // per column
  TaskKind task = TaskKind::regression;
  std::vector<std::string> class_labels;
  bool normalize_targets = false;
  double target_mean = 0.0;
  double target_scale = 1.0;

  std::size_t feature_dim() const { return columns.size(); }
};

struct PreprocessOptions {
  std::size_t quantile_count = 1000;
  bool normalize_targets = false;
};

struct PrepFit {
  Preprocessor prep;
  Tensor train_features;            // (train rows, feature_dim)
  std::vector<std::size_t> train_rows;
  std::vector<double> train_targets;  // regression (normalized when configured)
  std::vector<int> train_labels;      // classification
  std::vector<std::string> warnings;
};

PrepFit fit_preprocessor(const Dataset& dataset, const PreprocessOptions& options);

// Applies the fitted transform to arbitrary dataset rows.
Tensor transform_features(const Preprocessor& prep, const Dataset& dataset,
                          std::span<const std::size_t> rows);

// Targets for the given rows, normalized per the fitted state (regression).
std::vector<double> transform_targets(const Preprocessor& prep, const Dataset& dataset,
                                      std::span<const std::size_t> rows);

}  // namespace nodetab
