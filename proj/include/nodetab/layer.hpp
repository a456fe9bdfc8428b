#pragma once

#include <cstddef>
#include <string>

#include "nodetab/choice.hpp"
#include "nodetab/ops.hpp"
#include "nodetab/tape.hpp"

namespace nodetab {

// Added to softplus(scales_raw) so gate scales stay strictly positive.
inline constexpr double kScaleShift = 1e-6;

struct LayerConfig {
  std::size_t tree_count = 1;   // m
  std::size_t depth = 1;        // d
  std::size_t output_dim = 1;   // l, response channels per tree
  std::size_t input_dim = 1;    // n, width of this layer's input
  ChoiceKind choice = ChoiceKind::entmax(1.5);

  std::size_t leaf_count() const { return std::size_t{1} << depth; }
  std::size_t output_width() const { return tree_count * output_dim; }
  void validate() const;
};

// Learnable state of one layer of m oblivious trees of depth d.
struct OdtLayerParams {
  Parameter feature_logits;  // (m, d, n)
  Parameter thresholds;      // (m, d)
  Parameter scales_raw;      // (m, d); effective scale = softplus(raw) + kScaleShift
  Parameter responses;       // (m, 2^d, l)
};

// Zero-initialized parameters named "<prefix>/F" etc.
OdtLayerParams make_layer(const LayerConfig& config, const std::string& prefix);

struct LayerOut {
  Value trees;  // (B, m, l)
  Value flat;   // (B, m*l), tree-major
};

// Differentiable forward pass: feature selection, scaled gates, choice
// tensor, response contraction.
LayerOut layer_forward(Tape& tape, const Value& x, OdtLayerParams& params,
                       const LayerConfig& config, const ChoiceEval& eval = {});

struct HardForwardResult {
  Tensor out;  // (B, m*l)
  std::size_t argmax_ties = 0;  // selector ties resolved toward the lowest index
};

// Non-differentiable oracle: hard argmax feature selection and Heaviside
// routing (1 at zero), returning the single selected response row per tree.
HardForwardResult hard_forward(const Tensor& x, const OdtLayerParams& params,
                               const LayerConfig& config);

}  // namespace nodetab
