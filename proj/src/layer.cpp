#include "nodetab/layer.hpp"

#include <stdexcept>

namespace nodetab {

void LayerConfig::validate() const {
  if (tree_count < 1) throw std::invalid_argument("layer: tree_count must be >= 1");
  if (depth < 1 || depth > 24) throw std::invalid_argument("layer: depth must lie in [1, 24]");
  if (output_dim < 1) throw std::invalid_argument("layer: output_dim must be >= 1");
  if (input_dim < 1) throw std::invalid_argument("layer: input_dim must be >= 1");
  choice.validate();
}

OdtLayerParams make_layer(const LayerConfig& config, const std::string& prefix) {
  config.validate();
  std::size_t m = config.tree_count, d = config.depth, n = config.input_dim;
  return OdtLayerParams{
      Parameter(Tensor({m, d, n}), prefix + "/F"),
      Parameter(Tensor({m, d}), prefix + "/b"),
      Parameter(Tensor({m, d}), prefix + "/tau_raw"),
      Parameter(Tensor({m, config.leaf_count(), config.output_dim}), prefix + "/R"),
  };
}

LayerOut layer_forward(Tape& tape, const Value& x, OdtLayerParams& params,
                       const LayerConfig& config, const ChoiceEval& eval) {
  if (x.tensor().rank() != 2 || x.tensor().dim(1) != config.input_dim) {
    throw std::invalid_argument("layer_forward: input width does not match layer config");
  }
  std::size_t B = x.tensor().dim(0);
  Value f = feature_select(tape, x, tape.leaf(params.feature_logits), config.choice, eval);
  Value tau = add_const(tape, softplus(tape, tape.leaf(params.scales_raw)), kScaleShift);
  Value c = scaled_gate(tape, f, tape.leaf(params.thresholds), tau, config.choice, eval);
  Value C = choice_tensor(tape, c);
  Value h = tree_response(tape, C, tape.leaf(params.responses));
  Value flat = reshape(tape, h, {B, config.output_width()});
  return LayerOut{h, flat};
}

HardForwardResult hard_forward(const Tensor& x, const OdtLayerParams& params,
                               const LayerConfig& config) {
  if (x.rank() != 2 || x.dim(1) != config.input_dim) {
    throw std::invalid_argument("hard_forward: input width does not match layer config");
  }
  std::size_t B = x.dim(0), m = config.tree_count, d = config.depth, n = config.input_dim;
  std::size_t l = config.output_dim;
  const Tensor& F = params.feature_logits.value;
  const Tensor& b = params.thresholds.value;
  const Tensor& R = params.responses.value;

  HardForwardResult result{Tensor({B, m * l}), 0};
  std::vector<std::size_t> selected(m * d);
  for (std::size_t t = 0; t < m; ++t) {
    for (std::size_t i = 0; i < d; ++i) {
      const double* row = F.data() + (t * d + i) * n;
      std::size_t best = 0;
      std::size_t at_max = 1;
      for (std::size_t j = 1; j < n; ++j) {
        if (row[j] > row[best]) {
          best = j;
          at_max = 1;
        } else if (row[j] == row[best]) {
          ++at_max;
        }
      }
      if (at_max > 1) ++result.argmax_ties;
      selected[t * d + i] = best;
    }
  }
  for (std::size_t s = 0; s < B; ++s) {
    const double* xrow = x.data() + s * n;
    for (std::size_t t = 0; t < m; ++t) {
      std::size_t idx = 0;
      for (std::size_t i = 0; i < d; ++i) {
        double v = xrow[selected[t * d + i]];
        if (v - b.at(t, i) >= 0.0) idx |= std::size_t{1} << i;  // Heaviside: 1 at zero
      }
      const double* rrow = R.data() + (t * config.leaf_count() + idx) * l;
      double* orow = result.out.data() + s * (m * l) + t * l;
      for (std::size_t ch = 0; ch < l; ++ch) orow[ch] = rrow[ch];
    }
  }
  return result;
}

}  // namespace nodetab
